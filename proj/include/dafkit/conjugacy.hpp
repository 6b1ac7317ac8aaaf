#pragma once

// Leafwise maps h and rho between the center leaves of f and their
// continuations for g, with the residuals that certify them.

#include <functional>

#include "graph_transform.hpp"

namespace dafkit {

/// Moving average of a reparameterization and its closed-form derivative.
struct Reparam {
    std::vector<double> t, psi, dpsi;
    double dpsi_min = 0, dpsi_max = 0;
};

namespace detail {

inline double window_average(const std::function<double(double)>& psi1, double t, double w, int panels) {
    double a = t - w / 2, hs = w / panels;
    double sum = 0.5 * (psi1(a) + psi1(a + w));
    for (int i = 1; i < panels; ++i) sum += psi1(a + i * hs);
    return sum * hs / w;
}

} // namespace detail

/**
 * Psi(t) = (1/w) * integral of psi1 over [t - w/2, t + w/2] with the
 * trapezoid rule on `panels` panels, DPsi from the endpoint difference.
 * Throws model-violation when DPsi leaves (1/2, 2) or Psi is not increasing.
 */
inline Reparam smooth_to_h(const std::function<double(double)>& psi1, const std::vector<double>& t, double w,
                           int panels = 40) {
    require(w > 0 && std::isfinite(w), "window must be positive");
    require(panels >= 20, "need at least 20 quadrature samples per window");
    Reparam r;
    r.t = t;
    r.dpsi_min = std::numeric_limits<double>::infinity();
    r.dpsi_max = -r.dpsi_min;
    for (size_t i = 0; i < t.size(); ++i) {
        double p = detail::window_average(psi1, t[i], w, panels);
        double d = (psi1(t[i] + w / 2) - psi1(t[i] - w / 2)) / w;
        if (!(d > 0.5 && d < 2))
            fail(ErrorKind::model_violation, "DPsi outside (1/2, 2)", {{"t", t[i]}, {"dpsi", d}});
        if (i > 0 && t[i] > t[i - 1] && !(p > r.psi.back()))
            fail(ErrorKind::model_violation, "Psi is not increasing", {{"t", t[i]}});
        r.psi.push_back(p);
        r.dpsi.push_back(d);
        r.dpsi_min = std::min(r.dpsi_min, d);
        r.dpsi_max = std::max(r.dpsi_max, d);
    }
    return r;
}

/// Root of an increasing function on [lo, hi] by bisection.
inline double bisect_increasing(const std::function<double(double)>& fn, double v, double lo, double hi,
                                double tol = 1e-12) {
    // Widen the bracket if needed.
    for (int i = 0; i < 60 && fn(lo) > v; ++i) lo -= (hi - lo);
    for (int i = 0; i < 60 && fn(hi) < v; ++i) hi += (hi - lo);
    if (fn(lo) > v || fn(hi) < v)
        fail(ErrorKind::model_violation, "reparameterization inversion failed", {{"value", v}});
    while (hi - lo > tol) {
        double mid = 0.5 * (lo + hi);
        if (fn(mid) < v) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
}

/**
 * One leaf L (tube parameter = arc length of L) and its continuation L'.
 * psi1(s) is the arc length of L' up to the fiber over s, offset so that it
 * starts at the first tube parameter.
 */
class LeafConjugacyData {
public:
    TubularFrame tube;
    GraphSection cu, cs;
    double delta3 = 0;
    int panels = 40;
    bool periodic = false;
    double period = 0, period_prime = 0;
    double lo = 0, hi = 0;                 ///< parameters where h is defined
    std::vector<double> node_sigma, node_psi1;
    std::vector<double> sample_t;          ///< sample parameters on L
    std::vector<double> sample_psi1;       ///< h1 samples as L' parameters
    Reparam smoothed;

    LeafConjugacyData(const TubularFrame& t, const GraphSection& xcu, const GraphSection& xcs,
                      const ContinuedLeaf& leaf, double d3)
        : tube(t), cu(xcu), cs(xcs), delta3(d3) {
        periodic = tube.compact;
        period = tube.len;
        const auto& fb = leaf.fibers;
        for (size_t j = 0; j < fb.size(); ++j) {
            node_sigma.push_back(fb[j].sigma);
            node_psi1.push_back(tube.t0 + leaf.arc.t[j]);
        }
        if (periodic) period_prime = leaf.arc.t.back();
        // Trusted window, shrunk so that every smoothing window is trusted.
        double first = std::numeric_limits<double>::infinity(), last = -first;
        for (const auto& p : fb)
            if (p.trusted) { first = std::min(first, p.sigma); last = std::max(last, p.sigma); }
        if (periodic) { lo = tube.t0; hi = tube.t0 + period; }
        else { lo = first + 2 * delta3; hi = last - 2 * delta3; }
        require(hi > lo, "continued leaf has no trusted window");
    }

    /// Catmull-Rom interpolation of the node arc lengths.
    double psi1(double s) const {
        size_t n = node_sigma.size();
        double hs = node_sigma[1] - node_sigma[0];
        double x = (s - node_sigma[0]) / hs;
        long i = static_cast<long>(std::floor(x));
        double u = x - i;
        if (!periodic) {
            i = std::clamp<long>(i, 0, static_cast<long>(n) - 2);
            u = x - i;
        }
        auto node = [&](long k) {
            if (periodic) {
                long q = static_cast<long>(std::floor(static_cast<double>(k) / n));
                return node_psi1[k - q * static_cast<long>(n)] + q * period_prime;
            }
            // Linear extension beyond the ends.
            if (k < 0) return node_psi1[0] + k * (node_psi1[1] - node_psi1[0]);
            if (k >= static_cast<long>(n))
                return node_psi1[n - 1] + (k - static_cast<long>(n) + 1) * (node_psi1[n - 1] - node_psi1[n - 2]);
            return node_psi1[k];
        };
        double p0 = node(i - 1), p1 = node(i), p2 = node(i + 1), p3 = node(i + 2);
        return p1 + 0.5 * u * (p2 - p0 + u * (2 * p0 - 5 * p1 + 4 * p2 - p3 + u * (3 * (p1 - p2) + p3 - p0)));
    }
    double psi(double t) const { return detail::window_average([this](double s) { return psi1(s); }, t, delta3, panels); }
    double dpsi(double t) const { return (psi1(t + delta3 / 2) - psi1(t - delta3 / 2)) / delta3; }

    ChartPoint source(double t) const { return normalize(tube.manifold, tube.point(t, 0, 0)); }
    /// Point of L' over fiber s.
    ChartPoint prime_at(double s) const {
        auto [a, b] = detail::fiber_solve(cu, cs, s);
        return normalize(tube.manifold, tube.point(s, a, b));
    }
    ChartPoint h1(double t) const { return prime_at(t); }

    double psi1_inverse(double v) const {
        return bisect_increasing([this](double s) { return psi1(s); }, v, v - 4 * delta3 - 1e-9, v + 4 * delta3 + 1e-9);
    }
    ChartPoint h(double t) const { return prime_at(psi1_inverse(psi(t))); }

    /// L' parameter of a point near L' (fiber projection), close to `guess`.
    double prime_param(const ChartPoint& z, double guess) const {
        auto c = tube.locate(z, guess);
        if (!c.ok) fail(ErrorKind::model_violation, "point is not near the continued leaf");
        double s = c.sigma;
        if (periodic) s += std::round((guess - s) / period) * period;
        return psi1(s);
    }
    /// Parameter t on L with h(t) equal to z's fiber projection.
    double h_inverse(const ChartPoint& z, double guess) const {
        double v = prime_param(z, guess);
        return bisect_increasing([this](double t) { return psi(t); }, v, v - 4 * delta3 - 1e-9, v + 4 * delta3 + 1e-9);
    }
};

struct ConjugacyReport {
    double semi_conjugacy_sup = 0;
    double h_to_identity_sup = 0;
    double rho_to_identity_sup = 0;
    double dpsi_min = std::numeric_limits<double>::infinity();
    double dpsi_max = -std::numeric_limits<double>::infinity();
    bool eq41_ok = true;          ///< h1 keeps delta3 gaps within (1/2, 2)
    double h1_to_identity_sup = 0;
    double h1_equivariance_sup = 0;          ///< d(g h1 x, h1 f x) along the continued leaf
    double h_to_h1_sup = 0;       ///< |Psi - Psi1|
    size_t samples = 0;
};

inline nlohmann::json to_json_value(const ConjugacyReport& r) {
    return {{"semi_conjugacy_sup", r.semi_conjugacy_sup}, {"h_to_identity_sup", r.h_to_identity_sup},
            {"rho_to_identity_sup", r.rho_to_identity_sup}, {"dpsi_min", r.dpsi_min},
            {"dpsi_max", r.dpsi_max}, {"eq41_ok", r.eq41_ok}, {"h1_to_identity_sup", r.h1_to_identity_sup},
            {"h1_equivariance_sup", r.h1_equivariance_sup}, {"h_to_h1_sup", r.h_to_h1_sup}, {"samples", r.samples}};
}

/**
 * h1 samples on every tier: the point of L' in the fiber of x. Checks that
 * points delta3 apart stay between delta3/2 and 2 delta3 apart, and returns
 * the per-leaf data with samples spaced `pitch` apart.
 */
inline std::vector<LeafConjugacyData> build_h1(const TubeChain& chain, const Sections& cu, const Sections& cs,
                                               const std::vector<ContinuedLeaf>& leaves, const RateReport& rates,
                                               double pitch, ConjugacyReport* report = nullptr) {
    require(pitch > 0, "sample pitch must be positive");
    ConjugacyReport rep;
    std::vector<LeafConjugacyData> out;
    const double d3 = rates.delta3;
    for (size_t i = 0; i < chain.tubes.size(); ++i) {
        LeafConjugacyData lc(chain.tubes[i], cu.tiers[i], cs.tiers[i], leaves[i], d3);
        int n = std::max(2, static_cast<int>(std::floor((lc.hi - lc.lo) / pitch)));
        for (int k = 0; k < n; ++k) {
            double t = lc.lo + (lc.hi - lc.lo) * (k + 0.5) / n;
            double p = lc.psi1(t);
            lc.sample_t.push_back(t);
            lc.sample_psi1.push_back(p);
            rep.h1_to_identity_sup = std::max(rep.h1_to_identity_sup, dist(lc.tube.manifold, lc.source(t), lc.h1(t)));
            if (lc.periodic || t + d3 <= lc.hi) {
                double gap = lc.psi1(t + d3) - p;
                if (!(gap > d3 / 2 && gap < 2 * d3)) {
                    rep.eq41_ok = false;
                    if (report) *report = rep;
                    fail(ErrorKind::model_violation, "h1 distorts the leaf beyond the (1/2, 2) bound",
                         {{"tier", i}, {"t", t}, {"gap", gap}});
                }
            }
        }
        out.push_back(std::move(lc));
    }
    if (report) *report = rep;
    return out;
}

/// Smooths every leaf's h1 into h.
inline void smooth_leaves(std::vector<LeafConjugacyData>& leaves, ConjugacyReport& rep) {
    for (auto& lc : leaves) {
        lc.smoothed = smooth_to_h([&lc](double s) { return lc.psi1(s); }, lc.sample_t, lc.delta3, lc.panels);
        rep.dpsi_min = std::min(rep.dpsi_min, lc.smoothed.dpsi_min);
        rep.dpsi_max = std::max(rep.dpsi_max, lc.smoothed.dpsi_max);
        for (size_t k = 0; k < lc.sample_t.size(); ++k) {
            double t = lc.sample_t[k];
            rep.h_to_h1_sup = std::max(rep.h_to_h1_sup, std::abs(lc.smoothed.psi[k] - lc.sample_psi1[k]));
            rep.h_to_identity_sup = std::max(rep.h_to_identity_sup, dist(lc.tube.manifold, lc.source(t), lc.h(t)));
        }
        if (rep.h_to_h1_sup >= 2 * lc.delta3)
            fail(ErrorKind::model_violation, "h moved more than 2 delta3 from h1", {{"shift", rep.h_to_h1_sup}});
    }
}

/**
 * rho = h^-1 g h f^-1 leafwise, with the semi-conjugacy residual
 * d(h rho f x, g h x), leaf distance d(x, rho x), and the h1 equivariance gap.
 * Tier i maps to tier i + 1 (cyclically for closed chains).
 */
inline void build_rho_and_residual(const DynamicalSystem& f, const DynamicalSystem& g, const TubeChain& chain,
                                   const std::vector<LeafConjugacyData>& leaves, const RateReport& rates,
                                   ConjugacyReport& rep) {
    const auto& m = f.manifold();
    size_t nt = leaves.size();
    for (size_t i = 0; i < nt; ++i) {
        if (!chain.cyclic && i + 1 == nt) break;
        const auto& src = leaves[i];
        const auto& dst = leaves[(i + 1) % nt];
        for (size_t k = 0; k < src.sample_t.size(); ++k) {
            double t = src.sample_t[k];
            ChartPoint x = src.source(t);
            ChartPoint fx = f.forward(x);
            double guess = dst.tube.param(dst.tube.nearest_node(fx));
            auto c = dst.tube.locate(fx, guess);
            if (!c.ok || std::abs(c.a) > 1e-9 || std::abs(c.b) > 1e-9)
                fail(ErrorKind::model_violation, "f does not map the leaf to the next tier", {{"tier", i}, {"t", t}});
            double sfx = c.sigma;
            if (!dst.periodic && (sfx < dst.lo || sfx > dst.hi)) continue;
            ChartPoint hx = src.h(t);
            ChartPoint z = g.forward(hx);
            double s = dst.h_inverse(z, sfx);
            ChartPoint back = dst.h(s);
            rep.semi_conjugacy_sup = std::max(rep.semi_conjugacy_sup, dist(m, back, z));
            double dl = std::abs(s - sfx);
            if (dst.periodic) dl = std::min(dl, std::abs(dl - dst.period));
            rep.rho_to_identity_sup = std::max(rep.rho_to_identity_sup, dl);
            // g h1 x against h1 f x along the next continued leaf.
            ChartPoint gh1 = g.forward(src.h1(t));
            double along = std::abs(dst.prime_param(gh1, sfx) - dst.psi1(sfx));
            if (dst.periodic) along = std::min(along, std::abs(along - dst.period_prime));
            rep.h1_equivariance_sup = std::max(rep.h1_equivariance_sup, along);
            ++rep.samples;
        }
    }
    if (rep.rho_to_identity_sup >= rates.delta)
        fail(ErrorKind::model_violation, "rho is not delta-close to the identity", {{"sup", rep.rho_to_identity_sup}});
}

/// Full leafwise construction for a continued chain.
struct LeafConjugacy {
    std::vector<LeafConjugacyData> leaves;
    ConjugacyReport report;
};

inline LeafConjugacy build_leaf_conjugacy(const DynamicalSystem& f, const DynamicalSystem& g, const TubeChain& chain,
                                          const Sections& cu, const Sections& cs,
                                          const std::vector<ContinuedLeaf>& continued, const RateReport& rates,
                                          double pitch) {
    LeafConjugacy lc;
    lc.leaves = build_h1(chain, cu, cs, continued, rates, pitch, &lc.report);
    smooth_leaves(lc.leaves, lc.report);
    build_rho_and_residual(f, g, chain, lc.leaves, rates, lc.report);
    return lc;
}

inline LeafConjugacy build_leaf_conjugacy(const DynamicalSystem& f, const DynamicalSystem& g,
                                          const ContinuationResult& res, double pitch) {
    return build_leaf_conjugacy(f, g, res.chain, res.cu, res.cs, res.leaves, res.rates, pitch);
}

/// One sample of h on a seed leaf.
struct LeafPointSample {
    int leaf = 0;
    double t = 0;
    ChartPoint x, hx;
};

inline std::vector<LeafPointSample> sample_h(const std::vector<LeafConjugacyData>& leaves, double pitch,
                                             int first_leaf_id = 0) {
    std::vector<LeafPointSample> out;
    for (size_t i = 0; i < leaves.size(); ++i) {
        const auto& lc = leaves[i];
        int n = std::max(1, static_cast<int>(std::floor((lc.hi - lc.lo) / pitch)));
        for (int k = 0; k < n; ++k) {
            double t = lc.lo + (lc.hi - lc.lo) * (k + 0.5) / n;
            out.push_back({first_leaf_id + static_cast<int>(i), t, lc.source(t), lc.h(t)});
        }
    }
    return out;
}

struct InjectivityVerdict {
    std::string verdict;          ///< "conjugacy", "collision" or "inconclusive"
    bool collision = false;
    LeafPointSample witness_a, witness_b;
    double witness_distance = 0;
    size_t samples = 0;
    size_t pairs_checked = 0;
    std::string reason;
};

inline nlohmann::json to_json_value(const InjectivityVerdict& v) {
    nlohmann::json j = {{"verdict", v.verdict}, {"collision", v.collision}, {"samples", v.samples},
                        {"pairs_checked", v.pairs_checked}, {"reason", v.reason}};
    if (v.collision)
        j["witness"] = {{"a", {{"leaf", v.witness_a.leaf}, {"t", v.witness_a.t}, {"x", point_to_json(v.witness_a.x)}}},
                        {"b", {{"leaf", v.witness_b.leaf}, {"t", v.witness_b.t}, {"x", point_to_json(v.witness_b.x)}}},
                        {"distance", v.witness_distance}};
    return j;
}

/**
 * Looks for h(x) ~ h(y) with y outside the 3 delta center plaque of x.
 * Two samples collide when their images are closer than `collision_tol`
 * (default a quarter of the pitch delta/10). The verdict is "conjugacy"
 * only with no collision and a positive plaque-expansivity verdict.
 */
inline InjectivityVerdict injectivity_probe(const ManifoldDescriptor& m, const std::vector<LeafPointSample>& samples,
                                            double delta, std::optional<bool> plaque_expansive,
                                            double collision_tol = 0) {
    require(delta > 0, "delta must be positive");
    if (collision_tol <= 0) collision_tol = delta / 40;
    InjectivityVerdict v;
    v.samples = samples.size();
    double cell = collision_tol;
    auto cell_of = [&](const ChartPoint& p) {
        return std::array<long, 3>{static_cast<long>(std::floor(p(0) / cell)), static_cast<long>(std::floor(p(1) / cell)),
                                   static_cast<long>(std::floor(p(2) / cell))};
    };
    auto key = [](long a, long b, long c) { return (a * 73856093L) ^ (b * 19349663L) ^ (c * 83492791L); };
    std::unordered_map<long, std::vector<size_t>> grid;
    for (size_t i = 0; i < samples.size(); ++i) {
        auto c = cell_of(samples[i].hx);
        grid[key(c[0], c[1], c[2])].push_back(i);
    }
    long nx = static_cast<long>(std::ceil(1 / cell)), nz = static_cast<long>(std::ceil(m.period / cell));
    for (size_t i = 0; i < samples.size() && !v.collision; ++i) {
        auto c = cell_of(samples[i].hx);
        for (long dx = -1; dx <= 1 && !v.collision; ++dx)
            for (long dy = -1; dy <= 1 && !v.collision; ++dy)
                for (long dz = -1; dz <= 1 && !v.collision; ++dz)
                    for (long wx : {0L, nx, -nx})
                        for (long wy : {0L, nx, -nx})
                            for (long wz : {0L, nz, -nz}) {
                                auto it = grid.find(key(c[0] + dx + wx, c[1] + dy + wy, c[2] + dz + wz));
                                if (it == grid.end()) continue;
                                for (size_t j : it->second) {
                                    if (j <= i) continue;
                                    const auto& a = samples[i];
                                    const auto& b = samples[j];
                                    if (a.leaf == b.leaf && std::abs(a.t - b.t) <= 3 * delta) continue;
                                    ++v.pairs_checked;
                                    double d = dist(m, a.hx, b.hx);
                                    if (d < collision_tol && !v.collision) {
                                        v.collision = true;
                                        v.witness_a = a;
                                        v.witness_b = b;
                                        v.witness_distance = d;
                                    }
                                }
                            }
    }
    if (v.collision) {
        v.verdict = "collision";
        v.reason = "two samples outside a common center plaque share an image";
    } else if (plaque_expansive.value_or(false)) {
        v.verdict = "conjugacy";
        v.reason = "no collision at this resolution and f is plaque expansive";
    } else {
        v.verdict = "inconclusive";
        v.reason = plaque_expansive ? "plaque expansivity failed" : "plaque expansivity not tested";
    }
    return v;
}

} // namespace dafkit
