#include <sstream>

#include <gtest/gtest.h>

#include "dafkit/leaf_numerics.hpp"

using namespace dafkit;

namespace {

Vec3 eu3() {
    auto h = hyperbolic_data(default_cat_matrix());
    return Vec3(h.eu(0), h.eu(1), 0);
}
Vec3 es3() {
    auto h = hyperbolic_data(default_cat_matrix());
    return Vec3(h.es(0), h.es(1), 0);
}

} // namespace

TEST(Leaves, SkewCenterArcIsVertical) {
    auto f = make_skew_product();
    auto c = make_line_field(f, Bundle::center);
    ChartPoint x(0.2, 0.7, 0.4);
    auto arc = integrate_leaf(*c, x, 0.8);
    for (size_t i = 0; i < arc.size(); ++i) {
        EXPECT_NEAR(arc.raw[i](0), 0.2, 1e-15);
        EXPECT_NEAR(arc.raw[i](1), 0.7, 1e-15);
        EXPECT_NEAR(std::abs(arc.raw[i](2) - 0.4), std::abs(arc.t[i]), 1e-13);
    }
    EXPECT_FALSE(arc.truncated);
}

TEST(Leaves, SkewUnstableArcIsStraight) {
    auto f = make_skew_product();
    // Estimator-backed field, so this also checks the estimator along a leaf.
    SplittingLineField u(SplittingEstimator(f), Bundle::unstable);
    ChartPoint x(0.1, 0.3, 0.5);
    auto arc = integrate_leaf(u, x, 0.3, {}, 1, eu3());
    for (size_t i = 0; i < arc.size(); ++i)
        EXPECT_LT((arc.raw[i] - (x + arc.t[i] * eu3())).norm(), 1e-12);
}

TEST(Leaves, ParameterGapsAndChordLength) {
    SplittingLineField c(SplittingEstimator(make_hhu_map()), Bundle::center);
    auto arc = integrate_leaf(c, ChartPoint(0.3, 0.2, 0.7), 0.25, {});
    double chords = 0;
    for (size_t i = 0; i + 1 < arc.size(); ++i) {
        double gap = arc.t[i + 1] - arc.t[i];
        EXPECT_GE(gap, 1e-4 - 1e-15);
        EXPECT_LE(gap, 1e-2 + 1e-15);
        chords += (arc.raw[i + 1] - arc.raw[i]).norm();
    }
    EXPECT_NEAR(chords, arc.length(), 1e-3 * arc.length());
    IntegrationOptions bad;
    bad.step = 0.05;
    EXPECT_THROW(integrate_leaf(c, ChartPoint(0.3, 0.2, 0.7), 0.1, bad), Error);
}

TEST(Leaves, ReversalSymmetry) {
    SplittingLineField c(SplittingEstimator(make_hhu_map()), Bundle::center);
    ChartPoint x(0.3, 0.2, 0.7);
    auto a = integrate_leaf(c, x, 0.2, {}, 1);
    auto b = integrate_leaf(c, x, 0.2, {}, -1);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_LT((a.raw[i] - b.raw[a.size() - 1 - i]).norm(), 1e-9);
        EXPECT_NEAR(a.t[i], -b.t[a.size() - 1 - i], 1e-15);
    }
}

TEST(Leaves, StableAndUnstableUniqueAcrossSteps) {
    auto f = make_hhu_map();
    for (Bundle bd : {Bundle::stable, Bundle::unstable}) {
        SplittingLineField fld(SplittingEstimator(f), bd);
        ChartPoint x(0.4, 0.1, 0.5);
        IntegrationOptions fine;
        fine.step = 5e-3;
        auto a = integrate_leaf(fld, x, 0.1);
        auto b = integrate_leaf(fld, x, 0.1, fine);
        // Compare at the common parameters.
        std::vector<ChartPoint> common;
        for (size_t i = 0; i < b.size(); i += 2) common.push_back(b.chart(i));
        ASSERT_EQ(common.size(), a.size());
        EXPECT_LT(hausdorff_distance(f.manifold(), a.chart_points(), common), 1e-7) << to_string(bd);
    }
}

TEST(Leaves, CsvFormat) {
    auto c = make_line_field(make_skew_product(), Bundle::center);
    auto arc = integrate_leaf(*c, ChartPoint(0.1, 0.2, 0.3), 0.02);
    std::ostringstream os;
    write_csv(arc, os);
    std::string s = os.str();
    EXPECT_EQ(s.rfind("index,t,x,y,theta,tx,ty,ttheta\n", 0), 0u);
    EXPECT_EQ(s.find('\r'), std::string::npos);
    EXPECT_NE(s.find("0.10000000000000001"), std::string::npos);
    size_t lines = std::count(s.begin(), s.end(), '\n');
    EXPECT_EQ(lines, arc.size() + 1);
}

TEST(Intersection, OrthogonalSegments) {
    auto m = ManifoldDescriptor::torus();
    ConstantLineField ex(m, Vec3(1, 0, 0)), ey(m, Vec3(0, 1, 0));
    IntegrationOptions o;
    auto a = integrate_leaf(ex, ChartPoint(0.5, 0.5, 0.5), 0.1, o);
    auto b = integrate_leaf(ey, ChartPoint(0.53, 0.45, 0.5), 0.1, o);
    auto hit = local_intersection(a, b);
    EXPECT_LT(dist(m, hit.point, ChartPoint(0.53, 0.5, 0.5)), 1e-12);
}

TEST(Intersection, UnstableArcMeetsCenterStablePlaque) {
    auto f = make_skew_product();
    auto fol = foliations(f);
    ChartPoint x(0.3, 0.6, 0.2);
    Vec3 target = x + 0.02 * Vec3(0, 0, 1) + 0.03 * es3();
    ChartPoint y = target + 0.025 * eu3();
    auto plaque = make_plaque(*fol.c, *fol.s, x, 0.05, 0.05);
    auto arc = integrate_leaf(*fol.u, y, 0.05, {}, 1, std::nullopt, Bundle::unstable);
    auto hit = local_intersection(arc, plaque);
    EXPECT_LT(dist(f.manifold(), hit.point, target), 1e-10);
    EXPECT_LT(hit.residual, 1e-10);
}

TEST(Intersection, ParallelArcsDoNotMeet) {
    auto m = ManifoldDescriptor::torus();
    ConstantLineField ex(m, Vec3(1, 0, 0));
    auto a = integrate_leaf(ex, ChartPoint(0.5, 0.5, 0.5), 0.1);
    auto b = integrate_leaf(ex, ChartPoint(0.5, 0.52, 0.5), 0.1);
    try {
        local_intersection(a, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_intersection);
    }
    auto p = flat_plaque(m, ChartPoint(0.5, 0.5, 0.5), Vec3(1, 0, 0), Vec3(0, 0, 1), 0.05, 0.05);
    try {
        local_intersection(a, p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_intersection);
    }
}

TEST(Intersection, MultipleCrossingsAreAmbiguous) {
    auto m = ManifoldDescriptor::torus();
    ConstantLineField ez(m, Vec3(0, 0, 1));
    // A vertical arc longer than the fiber crosses a horizontal plaque twice.
    auto a = integrate_leaf(ez, ChartPoint(0.5, 0.5, 0.5), 0.7);
    auto p = flat_plaque(m, ChartPoint(0.5, 0.5, 0.6), Vec3(1, 0, 0), Vec3(0, 1, 0), 0.05, 0.05);
    try {
        local_intersection(a, p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ambiguity);
    }
}

TEST(Holonomy, BasePointGoesToEndpoint) {
    auto f = make_suspension_time1();
    auto c = make_line_field(f, Bundle::center);
    ChartPoint x(0.2, 0.3, 0.8);
    auto gamma = integrate_ray(*c, x, 0.5);
    auto tr = holonomy_transport(*c, gamma, x);
    EXPECT_LT(dist(f.manifold(), tr.image, gamma.chart(gamma.size() - 1)), 1e-12);
}

TEST(Holonomy, SkewGivesVerticalShift) {
    auto f = make_skew_product();
    auto c = make_line_field(f, Bundle::center);
    ChartPoint x(0.2, 0.3, 0.1);
    auto gamma = integrate_ray(*c, x, 0.4);
    ChartPoint z = x + 0.01 * eu3() - 0.02 * es3();
    auto tr = holonomy_transport(*c, gamma, z);
    EXPECT_LT(dist(f.manifold(), tr.image, z + Vec3(0, 0, 0.4)), 1e-12);
}

TEST(Holonomy, StableUnderStepHalvingAndComposition) {
    auto f = make_hhu_map();
    SplittingLineField c(SplittingEstimator(f), Bundle::center);
    auto fol_u = make_line_field(f, Bundle::unstable);
    ChartPoint x(0.3, 0.4, 0.6);
    auto gamma = integrate_ray(c, x, 0.3);
    ChartPoint z = normalize(f.manifold(), x + 0.004 * fol_u->direction(x));
    auto a = holonomy_transport(c, gamma, z);
    IntegrationOptions fine;
    fine.h_max = 5e-3;
    fine.step = 5e-3;
    auto gamma2 = integrate_ray(c, x, 0.3, fine);
    auto b = holonomy_transport(c, gamma2, z, 0.1, fine);
    EXPECT_LT(dist(f.manifold(), a.image, b.image), 1e-8);

    // Along the first half, then along the second half.
    auto g1 = integrate_ray(c, x, 0.15);
    auto mid = holonomy_transport(c, g1, z);
    auto g2 = integrate_ray(c, g1.chart(g1.size() - 1), 0.15, {}, &g1.tangent.back());
    auto end = holonomy_transport(c, g2, mid.image);
    EXPECT_LT(dist(f.manifold(), end.image, a.image), 1e-7);
}

TEST(SuHolonomy, IdentityOnOwnLeaf) {
    auto f = make_skew_product();
    auto fol = foliations(f);
    ChartPoint x(0.3, 0.3, 0.3);
    auto eta = integrate_leaf(*fol.c, x, 0.03);
    auto h = hsu_transport(fol, x, eta, 0.06);
    for (size_t i = 0; i < eta.size(); ++i)
        EXPECT_LT(dist(f.manifold(), h.image[i], eta.chart(i)), 1e-10);
}

TEST(SuHolonomy, Equivariant) {
    for (auto f : {make_skew_product(), make_suspension_time1()}) {
        auto fol = foliations(f);
        const auto& m = f.manifold();
        ChartPoint x(0.3, 0.3, 0.3);
        ChartPoint y = normalize(m, x + 0.01 * eu3() + 0.005 * es3());
        auto eta = integrate_leaf(*fol.c, y, 0.02);
        auto h = hsu_transport(fol, x, eta, 0.05);
        std::vector<ChartPoint> fh;
        for (const auto& p : h.image) fh.push_back(f.forward(p));
        auto feta = integrate_leaf(*fol.c, f.forward(y), 0.02);
        auto h2 = hsu_transport(fol, f.forward(x), feta, 0.05);
        EXPECT_LT(curve_hausdorff(m, fh, h2.image), 1e-7) << f.name();
    }
}
