#pragma once

// Fundamental domains, deck transformations and chart metrics for the three
// closed 3-manifolds used throughout the toolkit.

#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "linalg.hpp"

namespace dafkit {

using ChartPoint = Vec3;

enum class ManifoldKind { product_torus, mapping_torus, hhu_quotient };

inline std::string to_string(ManifoldKind k) {
    switch (k) {
    case ManifoldKind::product_torus: return "product-torus";
    case ManifoldKind::mapping_torus: return "mapping-torus";
    case ManifoldKind::hhu_quotient: return "hhu-quotient";
    }
    return "unknown";
}

/// Eigen data of a hyperbolic 2x2 integer matrix. Eigenvalues are signed,
/// |mu| > 1 > |lambda|; eigenvectors are unit.
struct HyperbolicData {
    double mu = 0, lambda = 0;
    Vec2 eu, es;
};

inline Vec2 eigenvector_2x2(const Mat2& a, double r) {
    Vec2 v;
    if (std::abs(a(0, 1)) > std::abs(a(1, 0)))
        v = Vec2(a(0, 1), r - a(0, 0));
    else if (a(1, 0) != 0)
        v = Vec2(r - a(1, 1), a(1, 0));
    else
        v = std::abs(a(0, 0) - r) < std::abs(a(1, 1) - r) ? Vec2(1, 0) : Vec2(0, 1);
    v.normalize();
    if (v(0) < 0 || (v(0) == 0 && v(1) < 0)) v = -v;
    return v;
}

inline HyperbolicData hyperbolic_data(const IMat2& im) {
    Mat2 a = to_real(im);
    double t = a.trace(), d = a.determinant();
    double disc = t * t - 4 * d;
    require(disc > 0, "matrix has no real distinct eigenvalues");
    double s = std::sqrt(disc);
    // Avoid cancellation: compute the large root first.
    double r1 = t >= 0 ? (t + s) / 2 : (t - s) / 2;
    double r2 = d / r1;
    require(std::abs(r1) > 1 && std::abs(r2) < 1, "matrix is not hyperbolic");
    HyperbolicData h;
    h.mu = r1;
    h.lambda = r2;
    h.eu = eigenvector_2x2(a, r1);
    h.es = eigenvector_2x2(a, r2);
    return h;
}

/**
 * One of: product torus T^3 with fiber period p, mapping torus of a
 * hyperbolic automorphism A with roof 1, or the quotient of T^2 x R by
 * (x, theta) -> (A x, theta + 2).
 *
 * All three are modelled as T^2 x [0, P) with the gluing
 * (w, theta + P) ~ (B w, theta).
 */
struct ManifoldDescriptor {
    ManifoldKind kind = ManifoldKind::product_torus;
    IMat2 matrix = IMat2::Identity();
    double period = 1.0;

    static ManifoldDescriptor torus(double period = 1.0) {
        ManifoldDescriptor m;
        m.period = period;
        m.validate();
        return m;
    }
    static ManifoldDescriptor mapping_torus(const IMat2& a) {
        ManifoldDescriptor m{ManifoldKind::mapping_torus, a, 1.0};
        m.validate();
        return m;
    }
    static ManifoldDescriptor hhu_quotient(const IMat2& a) {
        ManifoldDescriptor m{ManifoldKind::hhu_quotient, a, 2.0};
        m.validate();
        return m;
    }

    void validate() const {
        require(std::isfinite(period) && period > 0, "period must be positive");
        if (kind == ManifoldKind::product_torus) return;
        int det = matrix.determinant();
        require(det == 1 || det == -1, "matrix must be unimodular");
        hyperbolic_data(matrix);
        if (kind == ManifoldKind::mapping_torus)
            require(period == 1.0, "mapping torus has roof 1");
        if (kind == ManifoldKind::hhu_quotient) {
            require(period == 2.0, "hhu quotient has fiber period 2");
            require(det == 1 && matrix.trace() > 2,
                    "hhu quotient needs positive eigenvalues");
        }
    }

    /// B with (w, theta + P) ~ (B w, theta).
    Mat2 gluing() const {
        switch (kind) {
        case ManifoldKind::product_torus: return Mat2::Identity();
        case ManifoldKind::mapping_torus: return to_real(matrix);
        case ManifoldKind::hhu_quotient: return to_real(matrix).inverse();
        }
        return Mat2::Identity();
    }

    bool operator==(const ManifoldDescriptor& o) const {
        return kind == o.kind && matrix == o.matrix && period == o.period;
    }
};

/// Raw point reduced to the fundamental domain, together with the deck map
/// used: chart = (B^k w - shift, theta - k P).
struct Reduced {
    ChartPoint chart;
    int k = 0;
    Vec2 shift = Vec2::Zero();
};

inline constexpr int max_deck_power = 200;

inline Mat2 gluing_power(const ManifoldDescriptor& m, int k) {
    if (k == 0 || m.kind == ManifoldKind::product_torus) return Mat2::Identity();
    return power(m.gluing(), k);
}

/// Linear part of the deck map selected by normalize.
inline Mat3 deck_linear(const ManifoldDescriptor& m, int k) {
    return block_diag(gluing_power(m, k), 1.0);
}

inline Reduced reduce(const ManifoldDescriptor& m, const Vec3& raw) {
    if (!raw.allFinite()) fail(ErrorKind::invalid_input, "non-finite coordinates");
    Reduced r;
    double p = m.period;
    double th = raw(2);
    int k = 0;
    if (th < 0 || th >= p) {
        double kf = std::floor(th / p);
        if (std::abs(kf) > max_deck_power && m.kind != ManifoldKind::product_torus)
            fail(ErrorKind::invalid_input, "point too far from the fundamental domain");
        k = static_cast<int>(kf);
        th -= kf * p;
        if (th >= p) { th -= p; ++k; }
        if (th < 0) th = 0;
    }
    Vec2 w = raw.head<2>();
    if (k != 0 && m.kind != ManifoldKind::product_torus) w = gluing_power(m, k) * w;
    for (int i = 0; i < 2; ++i) {
        double f = std::floor(w(i));
        double v = w(i) - f;
        if (v >= 1.0) { v -= 1.0; f += 1.0; }
        r.shift(i) = f;
        w(i) = v;
    }
    r.chart = Vec3(w(0), w(1), th);
    r.k = k;
    return r;
}

/// Inverse of the deck map recorded in `frame`.
inline Vec3 unreduce(const ManifoldDescriptor& m, const Reduced& frame, const ChartPoint& c) {
    Vec2 w = c.head<2>() + frame.shift;
    if (frame.k != 0 && m.kind != ManifoldKind::product_torus)
        w = gluing_power(m, -frame.k) * w;
    return Vec3(w(0), w(1), c(2) + frame.k * m.period);
}

/// Canonical representative in the half-open fundamental domain.
inline ChartPoint normalize(const ManifoldDescriptor& m, const Vec3& raw) {
    return reduce(m, raw).chart;
}

/// Representative of chart point q in the chart frame of p that is closest
/// to p in the flat metric. p must be in the fundamental domain.
inline Vec3 nearest_representative(const ManifoldDescriptor& m, const ChartPoint& p,
                                   const ChartPoint& q) {
    Vec3 best = q;
    double best_d = std::numeric_limits<double>::infinity();
    Mat2 b = m.gluing();
    Mat2 binv = b.inverse();
    for (int j = -1; j <= 1; ++j) {
        Vec2 w = q.head<2>();
        if (m.kind != ManifoldKind::product_torus) {
            if (j == 1) w = binv * w;
            if (j == -1) w = b * w;
        }
        Vec3 c(w(0), w(1), q(2) + j * m.period);
        for (int i = 0; i < 2; ++i) c(i) += std::round(p(i) - c(i));
        double d = (c - p).norm();
        if (d < best_d) { best_d = d; best = c; }
    }
    return best;
}

/// Raw lift of chart point q closest to the raw point `anchor`.
inline Vec3 lift_near(const ManifoldDescriptor& m, const Vec3& anchor, const ChartPoint& q) {
    Reduced fr = reduce(m, anchor);
    return unreduce(m, fr, nearest_representative(m, fr.chart, q));
}

/// Vector from p to the nearest representative of q, in the chart frame of p.
inline Vec3 displacement(const ManifoldDescriptor& m, const ChartPoint& p, const ChartPoint& q) {
    return nearest_representative(m, p, q) - p;
}

/// Chart distance: shortest deck translate, symmetrized.
inline double dist(const ManifoldDescriptor& m, const ChartPoint& p, const ChartPoint& q) {
    ChartPoint a = normalize(m, p), b = normalize(m, q);
    double d1 = (nearest_representative(m, a, b) - a).norm();
    double d2 = (nearest_representative(m, b, a) - b).norm();
    return std::min(d1, d2);
}

inline double directed_hausdorff(const ManifoldDescriptor& m, const std::vector<ChartPoint>& s1,
                                 const std::vector<ChartPoint>& s2) {
    double h = 0;
    for (const auto& p : s1) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : s2) best = std::min(best, dist(m, p, q));
        h = std::max(h, best);
    }
    return h;
}

inline double hausdorff_distance(const ManifoldDescriptor& m, const std::vector<ChartPoint>& s1,
                                 const std::vector<ChartPoint>& s2) {
    require(!s1.empty() && !s2.empty(), "hausdorff distance of an empty set");
    double a = directed_hausdorff(m, s1, s2);
    double b = directed_hausdorff(m, s2, s1);
    return std::max(a, b);
}

// JSON

inline void to_json(nlohmann::json& j, const ManifoldDescriptor& m) {
    j = nlohmann::json{{"kind", to_string(m.kind)},
                       {"matrix", {{m.matrix(0, 0), m.matrix(0, 1)}, {m.matrix(1, 0), m.matrix(1, 1)}}},
                       {"period", m.period}};
}

inline void from_json(const nlohmann::json& j, ManifoldDescriptor& m) {
    try {
        std::string kind = j.at("kind").get<std::string>();
        if (kind == "product-torus") m.kind = ManifoldKind::product_torus;
        else if (kind == "mapping-torus") m.kind = ManifoldKind::mapping_torus;
        else if (kind == "hhu-quotient") m.kind = ManifoldKind::hhu_quotient;
        else fail(ErrorKind::invalid_input, "unknown manifold kind " + kind);
        m.matrix = IMat2::Identity();
        if (j.contains("matrix")) {
            const auto& a = j.at("matrix");
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) m.matrix(r, c) = a.at(r).at(c).get<int>();
        }
        if (j.contains("period")) m.period = j.at("period").get<double>();
        else m.period = m.kind == ManifoldKind::hhu_quotient ? 2.0 : 1.0;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, std::string("bad manifold descriptor: ") + e.what());
    }
    m.validate();
}

inline nlohmann::json point_to_json(const ChartPoint& p) { return {p(0), p(1), p(2)}; }

inline ChartPoint point_from_json(const nlohmann::json& j) {
    require(j.is_array() && j.size() == 3, "point must be [x, y, theta]");
    return ChartPoint(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

} // namespace dafkit
