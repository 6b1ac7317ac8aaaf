#include <random>

#include <gtest/gtest.h>

#include "dafkit/chart_space.hpp"

using namespace dafkit;

namespace {

IMat2 cat() {
    IMat2 a;
    a << 2, 1, 1, 1;
    return a;
}

} // namespace

TEST(ChartSpace, TorusNormalizeExample) {
    auto m = ManifoldDescriptor::torus();
    ChartPoint p = normalize(m, Vec3(1.3, -0.6, 2.5));
    EXPECT_NEAR(p(0), 0.3, 1e-15);
    EXPECT_NEAR(p(1), 0.4, 1e-15);
    EXPECT_NEAR(p(2), 0.5, 1e-15);
}

TEST(ChartSpace, MappingTorusGluing) {
    auto m = ManifoldDescriptor::mapping_torus(cat());
    Vec3 raw(0.1, 0.2, 1.3);
    ChartPoint p = normalize(m, raw);
    // (x, 1.3) ~ (A x, 0.3), reduced mod 1.
    EXPECT_NEAR(p(0), 0.4, 1e-15);
    EXPECT_NEAR(p(1), 0.3, 1e-15);
    EXPECT_NEAR(p(2), 0.3, 1e-15);
}

TEST(ChartSpace, HhuQuotientGluing) {
    auto m = ManifoldDescriptor::hhu_quotient(cat());
    ChartPoint p = normalize(m, Vec3(0.4, 0.3, 2.1));
    // A^{-1} = [[1,-1],[-1,2]]: (0.1, 0.2).
    EXPECT_NEAR(p(0), 0.1, 1e-15);
    EXPECT_NEAR(p(1), 0.2, 1e-15);
    EXPECT_NEAR(p(2), 0.1, 1e-15);
}

TEST(ChartSpace, NonFiniteRejected) {
    auto m = ManifoldDescriptor::torus();
    try {
        normalize(m, Vec3(std::nan(""), 0, 0));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_input);
    }
    EXPECT_THROW(normalize(m, Vec3(0, INFINITY, 0)), Error);
}

TEST(ChartSpace, HalfOpenDomain) {
    auto m = ManifoldDescriptor::mapping_torus(cat());
    ChartPoint p = normalize(m, Vec3(1.0, 0.0, 1.0));
    EXPECT_EQ(p(0), 0.0);
    EXPECT_EQ(p(2), 0.0);
    p = normalize(m, Vec3(0.25, 0.5, -1e-18));
    EXPECT_GE(p(2), 0.0);
    EXPECT_LT(p(2), 1.0);
}

TEST(ChartSpace, InvalidDescriptors) {
    IMat2 bad;
    bad << 1, 1, 0, 1;
    EXPECT_THROW(ManifoldDescriptor::mapping_torus(bad), Error);
    IMat2 det2;
    det2 << 2, 0, 0, 1;
    EXPECT_THROW(ManifoldDescriptor::mapping_torus(det2), Error);
    EXPECT_THROW(ManifoldDescriptor::torus(-1.0), Error);
}

class ChartProperties : public ::testing::TestWithParam<int> {
protected:
    ManifoldDescriptor manifold() const {
        switch (GetParam()) {
        case 0: return ManifoldDescriptor::torus();
        case 1: return ManifoldDescriptor::mapping_torus(cat());
        default: return ManifoldDescriptor::hhu_quotient(cat());
        }
    }
};

TEST_P(ChartProperties, NormalizeIdempotentBitwise) {
    auto m = manifold();
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int i = 0; i < 2000; ++i) {
        ChartPoint p = normalize(m, Vec3(u(rng), u(rng), u(rng)));
        ChartPoint q = normalize(m, p);
        EXPECT_EQ(p(0), q(0));
        EXPECT_EQ(p(1), q(1));
        EXPECT_EQ(p(2), q(2));
        EXPECT_GE(p(2), 0.0);
        EXPECT_LT(p(2), m.period);
    }
}

TEST_P(ChartProperties, LiftRoundTrip) {
    auto m = manifold();
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.5, 2.5);
    std::normal_distribution<double> n(0, 0.01);
    for (int i = 0; i < 1000; ++i) {
        Vec3 raw(u(rng), u(rng), u(rng));
        Vec3 near = raw + Vec3(n(rng), n(rng), n(rng));
        Vec3 lifted = lift_near(m, raw, normalize(m, near));
        EXPECT_LT((lifted - near).norm(), 1e-9);
    }
}

TEST_P(ChartProperties, DistSymmetricAndZeroOnDiagonal) {
    auto m = manifold();
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 1000; ++i) {
        ChartPoint p(u(rng), u(rng), m.period * u(rng));
        ChartPoint q(u(rng), u(rng), m.period * u(rng));
        EXPECT_EQ(dist(m, p, q), dist(m, q, p));
        EXPECT_EQ(dist(m, p, p), 0.0);
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, ChartProperties, ::testing::Values(0, 1, 2));

TEST(ChartSpace, TriangleInequalityOnTorus) {
    auto m = ManifoldDescriptor::torus();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 10000; ++i) {
        ChartPoint a(u(rng), u(rng), u(rng)), b(u(rng), u(rng), u(rng)), c(u(rng), u(rng), u(rng));
        EXPECT_LE(dist(m, a, c), dist(m, a, b) + dist(m, b, c) + 1e-12);
    }
}

TEST(ChartSpace, TriangleInequalityAtSmallScale) {
    // Away from the torus the chart metric is only locally a metric; the
    // gluing is not an isometry. Check triples of nearby points.
    for (int kind = 1; kind <= 2; ++kind) {
        auto m = kind == 1 ? ManifoldDescriptor::mapping_torus(cat())
                           : ManifoldDescriptor::hhu_quotient(cat());
        std::mt19937_64 rng(9);
        std::uniform_real_distribution<double> u(0, 1);
        std::normal_distribution<double> n(0, 0.02);
        for (int i = 0; i < 10000; ++i) {
            ChartPoint a(u(rng), u(rng), m.period * u(rng));
            // Keep the triple away from the gluing, where the metric jumps.
            a(2) = 0.1 * m.period + 0.8 * m.period * u(rng);
            ChartPoint b = normalize(m, a + Vec3(n(rng), n(rng), n(rng)));
            ChartPoint c = normalize(m, a + Vec3(n(rng), n(rng), n(rng)));
            EXPECT_LE(dist(m, a, c), dist(m, a, b) + dist(m, b, c) + 1e-12);
        }
    }
}

TEST(ChartSpace, HausdorffShiftedCircle) {
    auto m = ManifoldDescriptor::torus();
    std::vector<ChartPoint> s1, s2;
    for (int i = 0; i < 100; ++i) {
        double t = 2 * pi * i / 100;
        ChartPoint p(0.5 + 0.2 * std::cos(t), 0.5 + 0.2 * std::sin(t), 0.5);
        s1.push_back(p);
        s2.push_back(p + Vec3(0, 0, 0.01));
    }
    EXPECT_NEAR(hausdorff_distance(m, s1, s2), 0.01, 1e-9);
    EXPECT_EQ(hausdorff_distance(m, s1, s2), hausdorff_distance(m, s2, s1));
}

TEST(ChartSpace, HausdorffSymmetricExactly) {
    auto m = ManifoldDescriptor::mapping_torus(cat());
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<ChartPoint> s1(37), s2(23);
    for (auto& p : s1) p = ChartPoint(u(rng), u(rng), u(rng));
    for (auto& p : s2) p = ChartPoint(u(rng), u(rng), u(rng));
    EXPECT_EQ(hausdorff_distance(m, s1, s2), hausdorff_distance(m, s2, s1));
    EXPECT_THROW(hausdorff_distance(m, {}, s2), Error);
}

TEST(ChartSpace, DescriptorJsonRoundTrip) {
    auto m = ManifoldDescriptor::hhu_quotient(cat());
    nlohmann::json j = m;
    EXPECT_EQ(j.at("kind"), "hhu-quotient");
    EXPECT_EQ(j.at("period"), 2.0);
    auto back = j.get<ManifoldDescriptor>();
    EXPECT_TRUE(back == m);
    EXPECT_THROW((nlohmann::json{{"kind", "klein-bottle"}}.get<ManifoldDescriptor>()), Error);
    ChartPoint p(0.1, 0.2, 0.3);
    EXPECT_EQ(point_from_json(point_to_json(p)), p);
}

TEST(ChartSpace, HyperbolicData) {
    auto h = hyperbolic_data(cat());
    EXPECT_NEAR(h.mu, (3 + std::sqrt(5.0)) / 2, 1e-14);
    EXPECT_NEAR(h.lambda, (3 - std::sqrt(5.0)) / 2, 1e-14);
    Mat2 a = to_real(cat());
    EXPECT_LT((a * h.eu - h.mu * h.eu).norm(), 1e-14);
    EXPECT_LT((a * h.es - h.lambda * h.es).norm(), 1e-14);
}
