#include <gtest/gtest.h>

#include <dafkit/graph_transform.hpp>

using namespace dafkit;

namespace {

const DynamicalSystem& suspension() {
    static DynamicalSystem f = make_suspension_time1();
    return f;
}

const Perturbation& bumped() {
    static Perturbation p = perturb(suspension(), PerturbationKind::translation_bump, 1e-4);
    return p;
}

RateReport suspension_rates(const DynamicalSystem& g) {
    static Rates r = estimate_rates(suspension(), 8, 16);
    return derive_scale_cascade(0.1, r, suspension(), g);
}

TubeChain suspension_chain() {
    Foliations fol = foliations(suspension());
    return compact_chain(suspension(), fol, ChartPoint(0.0, 0.0, 0.25), 1.0 / 128, 0.01);
}

GraphTransformOptions fast_options() {
    GraphTransformOptions o;
    o.center_step = 1.0 / 256;
    o.transverse_half = 6;
    return o;
}

} // namespace

TEST(TubularFrame, LocateInvertsPointAcrossTheSeam) {
    TubeChain chain = suspension_chain();
    ASSERT_EQ(chain.tubes.size(), 1u);
    const TubularFrame& tube = chain.tubes[0];
    EXPECT_NEAR(tube.len, 1.0, 1e-9);
    for (double s : {0.0, 0.37, 0.999, 1.2, -0.1}) {
        Vec3 p = tube.point(s, 3e-4, -2e-4);
        auto c = tube.locate(normalize(tube.manifold, p), s + 0.01);
        ASSERT_TRUE(c.ok);
        double expect = s - std::floor((s - tube.t0) / tube.len) * tube.len;
        EXPECT_NEAR(c.sigma, expect, 1e-11);
        EXPECT_NEAR(c.a, 3e-4, 1e-12);
        EXPECT_NEAR(c.b, -2e-4, 1e-12);
    }
}

TEST(TubularFrame, FrameIsPeriodicThroughTheSeam) {
    TubeChain chain = suspension_chain();
    const TubularFrame& tube = chain.tubes[0];
    for (double s : {0.1, 0.5}) {
        auto a = tube.eval(s), b = tube.eval(s + tube.len);
        EXPECT_LT((tube.seam(a.l) - b.l).norm(), 1e-12);
        EXPECT_LT((tube.seam.lin * a.s - b.s).norm(), 1e-12);
        EXPECT_LT((tube.seam.lin * a.u - b.u).norm(), 1e-12);
    }
    // The symmetric twist keeps frame lengths within sqrt(mu).
    double mu = hyperbolic_data(default_cat_matrix()).mu;
    for (size_t i = 0; i < tube.nodes(); ++i) {
        EXPECT_LE(tube.S[i].norm(), std::sqrt(mu) + 1e-12);
        EXPECT_GE(tube.S[i].norm(), 1 / std::sqrt(mu) - 1e-12);
    }
}

TEST(TubularFrame, SelfApproachRaisesTubeOverlap) {
    DynamicalSystem skew = make_skew_product();
    Foliations fol = foliations(skew);
    ConstantLineField slanted(skew.manifold(), Vec3(1, 0, 0.05));
    IntegrationOptions o;
    o.step = 1e-2;
    LeafArc leaf = integrate_ray(slanted, ChartPoint(0.1, 0.5, 0.5), 2.5, o);
    EXPECT_NO_THROW(make_tubular_frame(fol, leaf, false, 0.01));
    try {
        make_tubular_frame(fol, leaf, false, 0.05);
        FAIL() << "expected tube overlap";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::tube_overlap);
    }
}

TEST(GraphTransform, UnperturbedMapFixesTheZeroSection) {
    TubeChain chain = suspension_chain();
    RateReport rates = suspension_rates(suspension());
    Sections xi;
    xi.tiers.push_back(zero_section(chain.tubes[0], rates.delta3, 6, 1.0 / 256));
    for (StripKind k : {StripKind::cu, StripKind::cs}) {
        xi.kind = k;
        StepStats st;
        transform_step(chain, suspension(), xi, rates.delta2, &st);
        EXPECT_LT(st.change, 1e-12);
    }
}

TEST(GraphTransform, ContractsRandomPairs) {
    TubeChain chain = suspension_chain();
    RateReport rates = suspension_rates(bumped().system);
    ASSERT_TRUE(rates.accepted);
    GraphSection shape = zero_section(chain.tubes[0], rates.delta3, 6, 1.0 / 256);
    std::mt19937_64 rng(7);
    for (StripKind k : {StripKind::cu, StripKind::cs}) {
        for (int trial = 0; trial < 5; ++trial) {
            Sections a, b;
            a.kind = b.kind = k;
            a.tiers.push_back(random_section(shape, 0.3 * rates.delta3, rng));
            b.tiers.push_back(random_section(shape, 0.3 * rates.delta3, rng));
            double before = section_distance(a, b);
            Sections ta = transform_step(chain, bumped().system, a, rates.delta2);
            Sections tb = transform_step(chain, bumped().system, b, rates.delta2);
            EXPECT_LE(section_distance(ta, tb), rates.lambda * before) << "trial " << trial;
        }
    }
}

TEST(GraphTransform, TinyTubeRadiusIsAStepError) {
    TubeChain chain = suspension_chain();
    RateReport rates = suspension_rates(bumped().system);
    Sections xi;
    xi.kind = StripKind::cu;
    xi.tiers.push_back(zero_section(chain.tubes[0], rates.delta3, 4, 1.0 / 64));
    try {
        transform_step(chain, bumped().system, xi, 1e-9);
        FAIL() << "expected a step error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::step);
    }
}

TEST(Continuation, IdentityPerturbationReturnsTheLeaf) {
    RateReport rates = suspension_rates(suspension());
    auto res = continuation_leaf(suspension(), suspension(), ChartPoint(0.0, 0.0, 0.25), rates,
                                 fast_options(), false);
    EXPECT_LT(res.displacement, 1e-9);
    EXPECT_LT(res.equivariance, 1e-9);
}

TEST(Continuation, PerturbedLeafIsCertified) {
    RateReport rates = suspension_rates(bumped().system);
    auto res = continuation_leaf(suspension(), bumped().system, ChartPoint(0.0, 0.0, 0.25), rates, fast_options());
    EXPECT_TRUE(res.cert_cu.bound_ok);
    EXPECT_TRUE(res.cert_cs.bound_ok);
    EXPECT_LT(res.cert_cu.fixed_point_residual, 1e-11);
    EXPECT_LT(res.tangency, 1e-5);
    EXPECT_LT(res.equivariance, 1e-6);
    EXPECT_LT(res.grid_change, 1e-7);
    EXPECT_GT(res.displacement, 0.0);
    EXPECT_LT(res.displacement, rates.delta);
    for (size_t n = 0; n + 1 < res.cert_cu.history.size(); ++n)
        EXPECT_LE(res.cert_cu.history[n], 2 * rates.delta_prime * std::pow(rates.lambda, n) * 1.1);
    auto j = to_json_value(res.cert_cu);
    EXPECT_TRUE(j.contains("history"));
    EXPECT_TRUE(j["bound_ok"].get<bool>());
}

TEST(Continuation, RejectsUnacceptedScales) {
    RateReport rates = suspension_rates(bumped().system);
    RateReport small = scale_cascade(0.05, rates.lambda, rates.kappa, rates.delta_prime);
    ASSERT_FALSE(small.accepted);
    try {
        continuation_leaf(suspension(), bumped().system, ChartPoint(0.0, 0.0, 0.25), small, fast_options());
        FAIL() << "expected a model violation";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::model_violation);
    }
}

TEST(Continuation, ImmersionFollowsTheOrbit) {
    RateReport rates = suspension_rates(bumped().system);
    GraphTransformOptions o = fast_options();
    o.center_step = 1.0 / 128;
    auto im = continue_immersion(suspension(), bumped().system, ChartPoint(0.2, 0.7, 0.4), 0.2, 3, rates, o);
    EXPECT_EQ(im.gamma.size(), 7u);
    EXPECT_GT(im.trusted_fibers, 40u);
    EXPECT_LT(im.max_offset, rates.delta);
    EXPECT_LT(im.equivariance, 1e-6);
}

TEST(TubularFrame, PeriodTwoPointGivesALongerLeaf) {
    Foliations fol = foliations(suspension());
    TubeChain chain = compact_chain(suspension(), fol, ChartPoint(0.2, 0.4, 0.5), 1.0 / 128, 0.01);
    ASSERT_EQ(chain.tubes.size(), 1u);
    EXPECT_NEAR(chain.tubes[0].len, 2.0, 1e-9);
}
