#include <random>

#include <gtest/gtest.h>

#include "dafkit/system_zoo.hpp"

using namespace dafkit;

namespace {

std::vector<DynamicalSystem> catalog() {
    return {make_skew_product(), make_suspension_time1(), make_suspension_time(default_cat_matrix(), 0.5),
            make_hhu_map(), make_hhu_quotient_map(),
            perturb(make_suspension_time1(), PerturbationKind::translation_bump, 1e-3).system,
            perturb(make_skew_product(), PerturbationKind::fiber_shear, 1e-3).system,
            perturb(make_hhu_map(), PerturbationKind::fiber_shear, 1e-3).system};
}

} // namespace

TEST(SystemZoo, SkewProductExample) {
    auto f = make_skew_product();
    ChartPoint q = f.forward(ChartPoint(0.1, 0.1, 0.0));
    EXPECT_NEAR(q(0), 0.3, 1e-15);
    EXPECT_NEAR(q(1), 0.2, 1e-15);
    EXPECT_EQ(q(2), 0.0);
    Eigen::EigenSolver<Mat3> es(f.jacobian(q));
    double top = 0;
    for (int i = 0; i < 3; ++i) top = std::max(top, std::abs(es.eigenvalues()(i)));
    EXPECT_NEAR(top, 2.6180339887, 1e-10);
}

TEST(SystemZoo, SuspensionActsThroughGluing) {
    auto f = make_suspension_time1();
    ChartPoint q = f.forward(ChartPoint(0.1, 0.2, 0.3));
    EXPECT_NEAR(q(0), 0.4, 1e-15);
    EXPECT_NEAR(q(1), 0.3, 1e-15);
    EXPECT_NEAR(q(2), 0.3, 1e-15);
    Mat3 a = block_diag(to_real(default_cat_matrix()), 1.0);
    EXPECT_LT((f.jacobian(ChartPoint(0.1, 0.2, 0.3)) - a).norm(), 1e-15);
}

TEST(SystemZoo, HhuToriInvariant) {
    for (auto f : {make_hhu_map(), make_hhu_quotient_map()}) {
        for (double theta : {0.0, -1.0}) {
            double worst = 0;
            for (int i = 0; i < 64; ++i)
                for (int j = 0; j < 64; ++j) {
                    ChartPoint p = normalize(f.manifold(), Vec3(i / 64.0, j / 64.0, theta));
                    ChartPoint q = f.forward(p);
                    double d = std::abs(q(2) - p(2));
                    worst = std::max(worst, std::min(d, f.manifold().period - d));
                }
            EXPECT_LT(worst, 1e-12) << f.name() << " theta=" << theta;
        }
    }
}

TEST(SystemZoo, HhuRejectsBadParameters) {
    HhuParams p;
    p.a0 = 0.5;  // above lambda
    EXPECT_THROW(make_hhu_map(p), Error);
    p = HhuParams{};
    p.a1 = 3.0;  // above 1/lambda
    EXPECT_THROW(make_hhu_map(p), Error);
    p = HhuParams{};
    IMat2 m;
    m << 1, 1, 0, 1;
    p.matrix = m;
    EXPECT_THROW(make_hhu_map(p), Error);
}

TEST(SystemZoo, HhuQuotientContinuousAcrossGluing) {
    auto f = make_hhu_quotient_map();
    const auto& m = f.manifold();
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
        Vec3 raw(u(rng), u(rng), 2.0 - 1e-7);
        ChartPoint a = normalize(m, raw);
        ChartPoint b = normalize(m, raw + Vec3(0, 0, 2e-7));
        ASSERT_LT(b(2), 1e-6);
        EXPECT_LT(dist(m, f.forward(a), f.forward(b)), 1e-5);
    }
}

TEST(SystemZoo, RoundTripOnGrid) {
    for (const auto& f : catalog()) {
        double worst = 0;
        for (const auto& p : domain_grid(f.manifold(), 10, 0.37)) {
            worst = std::max(worst, dist(f.manifold(), f.inverse(f.forward(p)), p));
            worst = std::max(worst, dist(f.manifold(), f.forward(f.inverse(p)), p));
        }
        EXPECT_LT(worst, 1e-9) << f.name();
    }
}

TEST(SystemZoo, AnalyticJacobianMatchesCentralDifferences) {
    for (const auto& f : catalog()) {
        auto fd = f.with_jacobian_mode(JacobianMode::central_difference, 1e-6);
        double worst = 0, worst_inv = 0;
        for (const auto& p : domain_grid(f.manifold(), 6, 0.41)) {
            worst = std::max(worst, (f.jacobian(p) - fd.jacobian(p)).cwiseAbs().maxCoeff());
            worst_inv = std::max(worst_inv,
                                 (f.inverse_jacobian(p) - fd.inverse_jacobian(p)).cwiseAbs().maxCoeff());
        }
        EXPECT_LT(worst, 1e-5) << f.name();
        EXPECT_LT(worst_inv, 1e-5) << f.name();
    }
}

TEST(SystemZoo, ZeroPerturbationIsBitwiseIdentical) {
    for (auto kind : {PerturbationKind::fiber_shear, PerturbationKind::translation_bump}) {
        for (const auto& f : {make_skew_product(), make_suspension_time1(), make_hhu_map()}) {
            auto g = perturb(f, kind, 0.0).system;
            for (const auto& p : domain_grid(f.manifold(), 7, 0.13)) {
                ChartPoint a = f.forward(p), b = g.forward(p);
                for (int i = 0; i < 3; ++i) EXPECT_EQ(a(i), b(i));
                Mat3 ja = f.jacobian(p), jb = g.jacobian(p);
                for (int i = 0; i < 9; ++i) EXPECT_EQ(ja(i), jb(i));
            }
        }
    }
}

TEST(SystemZoo, PerturbationC0Bound) {
    for (auto kind : {PerturbationKind::fiber_shear, PerturbationKind::translation_bump}) {
        for (double eps : {1e-4, 1e-3, 1e-2}) {
            auto f = make_suspension_time1();
            auto pr = perturb(f, kind, eps);
            EXPECT_LE(pr.c0, eps);
            EXPECT_GT(pr.c0, 0.5 * eps);
            EXPECT_GT(pr.jacobian_k, 0.0);
            EXPECT_LE(c0_distance(f, pr.system, 20), eps);
        }
    }
}

TEST(SystemZoo, PerturbationRejectsBadSize) {
    EXPECT_THROW(perturb(make_skew_product(), PerturbationKind::fiber_shear, -1e-3), Error);
    EXPECT_THROW(perturb(make_skew_product(), PerturbationKind::fiber_shear, 0.5), Error);
}

TEST(SystemZoo, RecipeRoundTrip) {
    for (const auto& f : catalog()) {
        auto g = make_system(f.recipe());
        EXPECT_EQ(g.recipe(), f.recipe());
        for (const auto& p : domain_grid(f.manifold(), 4, 0.3))
            EXPECT_EQ(g.forward(p), f.forward(p)) << f.name();
    }
    EXPECT_THROW(make_system({{"name", "baker"}}), Error);
    auto r = recipe_for_name("perturbed:suspension", 1e-4);
    EXPECT_EQ(make_system(r).name(), "perturbed");
    EXPECT_GE(list_systems().size(), 4u);
}

TEST(SystemZoo, ComposeAndPower) {
    auto f = make_suspension_time(default_cat_matrix(), 0.5);
    auto f2 = system_power(f, 2);
    auto one = make_suspension_time1();
    for (const auto& p : domain_grid(f.manifold(), 5, 0.2)) {
        EXPECT_LT(dist(f.manifold(), f2.forward(p), one.forward(p)), 1e-14);
        EXPECT_LT((f2.jacobian(p) - one.jacobian(p)).norm(), 1e-14);
    }
}
