// One line per acceptance criterion; exit status is the number of failures.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <dafkit/conjugacy.hpp>
#include <dafkit/daf_toolkit.hpp>

using namespace dafkit;

namespace {

/// Collects the conditions of one criterion and a short record of the numbers.
class Criterion {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok) {
            pass_ = false;
            failed_.push_back(what);
        }
    }
    template <class T>
    void note(const std::string& key, const T& v) {
        std::ostringstream os;
        os.precision(4);
        os << v;
        notes_ << (notes_.tellp() > 0 ? ", " : "") << key << "=" << os.str();
    }
    bool pass() const { return pass_; }
    std::string detail() const {
        std::string s = notes_.str();
        for (const auto& f : failed_) s += (s.empty() ? "" : "; ") + std::string("failed: ") + f;
        return s;
    }

private:
    bool pass_ = true;
    std::vector<std::string> failed_;
    std::ostringstream notes_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const DynamicalSystem& suspension() {
    static DynamicalSystem f = make_suspension_time1();
    return f;
}

const Perturbation& bumped() {
    static Perturbation p = perturb(suspension(), PerturbationKind::translation_bump, 1e-4);
    return p;
}

const Rates& suspension_rates() {
    static Rates r = estimate_rates(suspension(), 8, 16);
    return r;
}

GraphTransformOptions fast_options() {
    GraphTransformOptions o;
    o.center_step = 1.0 / 256;
    o.transverse_half = 6;
    return o;
}

// Compact seed leaf of the suspension: the orbit of the fixed point of A.
const ChartPoint seed_point(0.0, 0.0, 0.25);

std::vector<ChartPoint> generic_points() {
    return {ChartPoint(0.1234567, 0.7654321, 0.15), ChartPoint(0.4142136, 0.2718282, 0.55),
            ChartPoint(0.8660254, 0.5772157, 0.85)};
}

const double golden_lambda = (3 - std::sqrt(5.0)) / 2;
const double golden_mu = (3 + std::sqrt(5.0)) / 2;

void cone_certification(Criterion& c) {
    auto t0 = std::chrono::steady_clock::now();
    for (const auto& f : {make_skew_product(), make_suspension_time1()}) {
        PHCertificate cert = certify_partial_hyperbolicity(f, 1, 32, 1.0, 8, 32);
        c.expect(cert.pass, f.name() + " cones");
        const Rates& r = cert.rates;
        double rel = std::abs(r.lambda - golden_lambda) / golden_lambda;
        c.expect(rel < 0.015, f.name() + " lambda within 1.5%");
        c.expect(r.kappa >= golden_mu, f.name() + " kappa");
        c.note(f.name() + ".lambda", r.lambda);
        c.note(f.name() + ".kappa", r.kappa);
    }
    double secs = seconds_since(t0);
    c.note("seconds", secs);
    c.expect(secs < 10, "runtime under 10 s");
}

void hhu_instantiation(Criterion& c) {
    HhuParams p;
    p.a0 = 0.3;
    p.a1 = 1.5;
    p.c = 0.05;
    DynamicalSystem f = make_hhu_map(p);
    SplittingEstimator est(f);
    int found = 0;
    for (int n = 1; n <= 5 && !found; ++n) {
        bool all = true;
        for (auto k : {ConeKind::stable, ConeKind::center_stable, ConeKind::center_unstable, ConeKind::unstable})
            all = all && verify_cone_invariance(f, ConeField::from_estimator(est, k, 1.0), n, 8).pass;
        if (all) found = n;
    }
    c.expect(found > 0, "cones certified with N <= 5");
    c.note("N", found);
    double worst = 0;
    for (double theta : {-1.0, 0.0})
        for (int i = 0; i < 64; ++i)
            for (int j = 0; j < 64; ++j) {
                ChartPoint q = normalize(f.manifold(), Vec3(i / 64.0, j / 64.0, theta));
                ChartPoint fq = f.forward(q);
                double d = std::abs(fq(2) - q(2));
                worst = std::max(worst, std::min(d, f.manifold().period - d));
            }
    c.note("torus_drift", worst);
    c.expect(worst <= 1e-12, "tori invariant within 1e-12");
}

void graph_transform_contraction(Criterion& c) {
    const DynamicalSystem& g = bumped().system;
    RateReport rates = derive_scale_cascade(0.1, suspension_rates(), suspension(), g);
    c.expect(rates.accepted, "cascade accepted");
    Foliations fol = foliations(suspension());
    TubeChain chain = compact_chain(suspension(), fol, seed_point, 1.0 / 128, 0.01);
    GraphSection shape = zero_section(chain.tubes[0], rates.delta3, 6, 1.0 / 256);
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> amp(0.05, 0.5);
    int violations = 0;
    double worst_ratio = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Sections a, b;
        a.kind = b.kind = trial % 2 ? StripKind::cs : StripKind::cu;
        a.tiers.push_back(random_section(shape, amp(rng) * rates.delta3, rng));
        b.tiers.push_back(random_section(shape, amp(rng) * rates.delta3, rng));
        double before = section_distance(a, b);
        double after = section_distance(transform_step(chain, g, a, rates.delta2),
                                        transform_step(chain, g, b, rates.delta2));
        worst_ratio = std::max(worst_ratio, after / before);
        if (after > rates.lambda * before) ++violations;
    }
    c.note("violations", violations);
    c.note("worst_ratio", worst_ratio);
    c.note("lambda", rates.lambda);
    c.expect(violations == 0, "d(g xi, g xi') <= lambda d(xi, xi') on 100 pairs");

    ContinuationResult res = continuation_leaf(suspension(), g, seed_point, rates, fast_options(), false);
    bool dominated = true;
    for (const Certificate* cert : {&res.cert_cu, &res.cert_cs})
        for (size_t n = 0; n < cert->history.size(); ++n) {
            double bound = 2 * rates.delta_prime * std::pow(rates.lambda, n) / (1 - rates.lambda);
            // The final entries sit at roundoff, below the fixed-point tolerance.
            if (cert->history[n] > std::max(1.1 * bound, fast_options().fixed_point_tol)) dominated = false;
        }
    c.note("iterations", res.cert_cu.iterations);
    c.expect(dominated, "history below 2 delta' lambda^n / (1 - lambda) with 10% slack");
}

void degenerate_exactness(Criterion& c) {
    RateReport rates = derive_scale_cascade(0.1, suspension_rates(), suspension(), suspension());
    ContinuationResult res =
        continuation_leaf(suspension(), suspension(), seed_point, rates, fast_options(), false);
    LeafConjugacy lc = build_leaf_conjugacy(suspension(), suspension(), res, 0.01);
    c.note("leaf", res.displacement);
    c.note("h", lc.report.h_to_identity_sup);
    c.note("rho", lc.report.rho_to_identity_sup);
    c.expect(res.displacement < 1e-9, "continued leaf is the seed leaf");
    c.expect(lc.report.h_to_identity_sup < 1e-9, "h is the identity");
    c.expect(lc.report.rho_to_identity_sup < 1e-9, "rho is the identity");
}

void leaf_conjugacy(Criterion& c) {
    const DynamicalSystem& g = bumped().system;
    RateReport rates = derive_scale_cascade(0.1, suspension_rates(), suspension(), g);
    ContinuationResult res = continuation_leaf(suspension(), g, seed_point, rates, fast_options(), false);
    LeafConjugacy lc = build_leaf_conjugacy(suspension(), g, res, 0.005);
    const ConjugacyReport& r = lc.report;
    c.note("semi_conjugacy", r.semi_conjugacy_sup);
    c.note("h_sup", r.h_to_identity_sup);
    c.note("dpsi", std::to_string(r.dpsi_min) + ".." + std::to_string(r.dpsi_max));
    c.note("equivariance", res.equivariance);
    c.expect(r.semi_conjugacy_sup < 1e-8, "semi-conjugacy residual");
    c.expect(r.h_to_identity_sup < rates.delta, "h within delta of the identity");
    c.expect(r.dpsi_min > 0.5 && r.dpsi_max < 2.0, "derivative of the reparameterization in (1/2, 2)");
    c.expect(res.equivariance < 1e-6, "equivariance of the continued leaves");
}

void tau_machinery(Criterion& c) {
    auto grid = domain_grid(suspension().manifold(), 3, 0.37);
    TauField t = recover_tau(center_context(suspension()), suspension(), grid);
    c.note("tau", std::to_string(t.min) + ".." + std::to_string(t.max));
    c.expect(std::abs(t.min - 1) < 1e-6 && std::abs(t.max - 1) < 1e-6, "tau is 1");
    FloorVerdict v = tau_floor_check(t, 0.05);
    c.note("margin", v.margin);
    c.expect(v.pass && std::abs(v.margin - 0.5) < 1e-6, "floor passes with margin 0.5");
    auto short_time = make_suspension_time(default_cat_matrix(), 0.3);
    FloorVerdict w = tau_floor_check(recover_tau(center_context(short_time), short_time, grid), 0.05);
    c.note("short_margin", w.margin);
    c.expect(!w.pass, "time 0.3 fails the floor");
}

void plaque_expansivity(Criterion& c) {
    auto base = domain_grid(suspension().manifold(), 2, 0.37);
    ExpansivityVerdict v = plaque_expansivity_test(suspension(), foliations(suspension()), 0.01, 15, base);
    c.note("suspension", v.verdict);
    c.note("nodes", v.nodes);
    c.expect(v.verdict == "no-violation-found", "suspension has no violation");
    auto id = make_identity(ManifoldDescriptor::torus());
    const auto& m = id.manifold();
    Foliations fol{std::make_shared<ConstantLineField>(m, Vec3(1, 0, 0)),
                   std::make_shared<ConstantLineField>(m, Vec3(0, 0, 1)),
                   std::make_shared<ConstantLineField>(m, Vec3(0, 1, 0))};
    ExpansivityVerdict w = plaque_expansivity_test(id, fol, 0.01, 15, {ChartPoint(0.3, 0.3, 0.3)});
    c.note("identity", w.verdict);
    c.expect(w.verdict == "violation-witness" && w.witness && w.witness_n == 0, "identity witness at n = 0");
}

void integrability(Criterion& c) {
    CenterContext ctx = center_context(make_system(recipe_for_name("hhu")));
    IntegrabilityOptions opt;
    opt.arc = 0.5;
    IntegrabilityReport a = unique_integrability_probe(ctx, ChartPoint(0.3, 0.4, 0.0), opt);
    c.note("separation", a.separation);
    c.note("error", a.integration_error);
    c.expect(a.verdict == "branching" && a.separation > 1e-3, "two curves through a torus point separate");
    c.expect(a.tangency_a < opt.tangency_tol && a.tangency_b < opt.tangency_tol, "both curves tangent to E^c");
    IntegrabilityReport b = unique_integrability_probe(ctx, ChartPoint(0.3, 0.4, 0.5), opt);
    c.note("agreement", b.agreement);
    c.expect(b.verdict == "unique" && b.agreement < 1e-7, "integrations agree at theta 0.5");
}

void compact_leaf(Criterion& c) {
    auto skew = make_skew_product();
    CompactLeafResult s = find_compact_periodic_center_leaf(skew, foliations(skew), ChartPoint(0.01, 0.02, 0.3));
    double off = dist(skew.manifold(), s.point, ChartPoint(0, 0, s.point(2)));
    c.note("skew_offset", off);
    c.expect(s.verdict == "found" && off < 1e-9 && std::abs(s.leaf_length - 1) < 1e-9,
             "fiber over the fixed point of A");
    CompactLeafResult u =
        find_compact_periodic_center_leaf(suspension(), foliations(suspension()), ChartPoint(0.01, 0.02, 0.3));
    c.note("suspension_length", u.leaf_length);
    c.expect(u.verdict == "found" && std::abs(u.leaf_length - 1) < 1e-6, "closed suspension orbit of length 1");
    Mat2 a = to_real(default_cat_matrix());
    int idx = winding_number([&](const Vec2& z) { return Vec2((a - Mat2::Identity()) * z); }, Vec2(-1, -1),
                             Vec2(1, 1));
    c.note("index", idx);
    c.expect(idx == -1, "index of A - I is -1");
}

void qi_and_saturation(Criterion& c) {
    auto skew = make_skew_product();
    const DynamicalSystem& suspension_ref = suspension();
    for (const DynamicalSystem* f : std::vector<const DynamicalSystem*>{&skew, &suspension_ref}) {
        auto field = make_line_field(*f, Bundle::center);
        QiReport q = qi_check(*f, *field, domain_grid(f->manifold(), 2, 0.37), 0.1, 20);
        c.note(f->name() + ".qi_dev", q.max_deviation);
        c.expect(q.max_deviation < 1e-6 && q.n.size() == 41, f->name() + " lengths equal l for |n| <= 20");
    }
    auto hhu = make_system(recipe_for_name("hhu"));
    for (const DynamicalSystem* f : std::vector<const DynamicalSystem*>{&skew, &suspension_ref, &hhu}) {
        auto pts = f == &hhu ? std::vector<ChartPoint>{ChartPoint(0.3, 0.4, 0.5)} : generic_points();
        SaturationReport s = coherence_saturation_check(foliations(*f), pts);
        c.note(f->name() + ".sat", std::max(s.max_s_offset, s.max_u_offset));
        c.expect(s.verdict == "coherent", f->name() + " saturation");
    }
    ConstantLineField fake(skew.manifold(), Vec3(1, 0, 0));
    QiReport q = qi_check(skew, fake, domain_grid(skew.manifold(), 2, 0.37), 0.1, 20);
    double log_mu = std::log(golden_mu);
    c.note("fake_rate", q.growth_rate);
    c.expect(q.verdict == "not-QI" && std::abs(q.growth_rate - log_mu) < 0.05 * log_mu,
             "fake center grows at log mu");
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<void(Criterion&)>>> criteria = {
        {"cone certification", cone_certification},
        {"hhu instantiation", hhu_instantiation},
        {"graph-transform contraction", graph_transform_contraction},
        {"degenerate exactness", degenerate_exactness},
        {"leaf conjugacy", leaf_conjugacy},
        {"tau machinery", tau_machinery},
        {"plaque expansivity", plaque_expansivity},
        {"non-unique integrability", integrability},
        {"compact periodic center leaf", compact_leaf},
        {"qi and saturation", qi_and_saturation},
    };
    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        Criterion c;
        auto t0 = std::chrono::steady_clock::now();
        try {
            criteria[i].second(c);
        } catch (const std::exception& e) {
            c.expect(false, std::string("exception: ") + e.what());
        }
        if (!c.pass()) ++failures;
        std::printf("criterion %2zu %s  %-30s (%.1f s)  %s\n", i + 1, c.pass() ? "PASS" : "FAIL",
                    criteria[i].first.c_str(), seconds_since(t0), c.detail().c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures;
}
