#pragma once

// Catalog of diffeomorphisms with analytic Jacobians and inverses.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chart_space.hpp"

namespace dafkit {

/// Backend of a system. forward_raw returns a lift of the image in the chart
/// frame of the input; jacobian_raw is its derivative.
class SystemImpl {
public:
    virtual ~SystemImpl() = default;
    virtual const ManifoldDescriptor& manifold() const = 0;
    virtual Vec3 forward_raw(const ChartPoint& p) const = 0;
    virtual Mat3 jacobian_raw(const ChartPoint& p) const = 0;
    virtual Vec3 inverse_raw(const ChartPoint& p) const = 0;
    virtual Mat3 inverse_jacobian_raw(const ChartPoint& p) const = 0;
};

enum class JacobianMode { analytic, central_difference };

class DynamicalSystem {
public:
    DynamicalSystem() = default;
    DynamicalSystem(std::shared_ptr<const SystemImpl> impl, nlohmann::json recipe)
        : impl_(std::move(impl)), recipe_(std::move(recipe)) {}

    const ManifoldDescriptor& manifold() const { return impl_->manifold(); }
    const nlohmann::json& recipe() const { return recipe_; }
    std::string name() const { return recipe_.value("name", std::string("anonymous")); }
    const SystemImpl& impl() const { return *impl_; }
    bool valid() const { return static_cast<bool>(impl_); }

    JacobianMode jacobian_mode() const { return mode_; }
    double fd_step() const { return fd_step_; }
    DynamicalSystem with_jacobian_mode(JacobianMode mode, double h = 1e-6) const {
        DynamicalSystem s = *this;
        s.mode_ = mode;
        s.fd_step_ = h;
        return s;
    }

    DynamicalSystem with_recipe(nlohmann::json recipe) const {
        DynamicalSystem s = *this;
        s.recipe_ = std::move(recipe);
        return s;
    }

    ChartPoint forward(const ChartPoint& p) const {
        return normalize(manifold(), impl_->forward_raw(normalize(manifold(), p)));
    }
    ChartPoint inverse(const ChartPoint& p) const {
        return normalize(manifold(), impl_->inverse_raw(normalize(manifold(), p)));
    }
    ChartPoint iterate(ChartPoint p, int n) const {
        for (int i = 0; i < n; ++i) p = forward(p);
        for (int i = 0; i > n; --i) p = inverse(p);
        return p;
    }

    /// Df in chart frames: from the frame of p to the frame of f(p).
    Mat3 jacobian(const ChartPoint& p) const { return chart_jacobian(p, false); }
    Mat3 inverse_jacobian(const ChartPoint& p) const { return chart_jacobian(p, true); }

    /// Jacobian of f^n along the orbit of p (n may be negative).
    Mat3 jacobian_power(ChartPoint p, int n) const {
        Mat3 j = Mat3::Identity();
        for (int i = 0; i < n; ++i) { j = jacobian(p) * j; p = forward(p); }
        for (int i = 0; i > n; --i) { j = inverse_jacobian(p) * j; p = inverse(p); }
        return j;
    }

private:
    Mat3 chart_jacobian(const ChartPoint& p0, bool inv) const {
        const auto& m = manifold();
        ChartPoint p = normalize(m, p0);
        if (mode_ == JacobianMode::analytic) {
            Mat3 j = inv ? impl_->inverse_jacobian_raw(p) : impl_->jacobian_raw(p);
            // The deck of a product torus has trivial linear part.
            if (m.kind == ManifoldKind::product_torus) return j;
            Vec3 raw = inv ? impl_->inverse_raw(p) : impl_->forward_raw(p);
            return deck_linear(m, reduce(m, raw).k) * j;
        }
        Vec3 raw = inv ? impl_->inverse_raw(p) : impl_->forward_raw(p);
        Mat3 j;
        ChartPoint image = normalize(m, raw);
        for (int i = 0; i < 3; ++i) {
            Vec3 e = Vec3::Zero();
            e(i) = fd_step_;
            ChartPoint qp = inv ? inverse(p + e) : forward(p + e);
            ChartPoint qm = inv ? inverse(p - e) : forward(p - e);
            j.col(i) = (displacement(m, image, qp) - displacement(m, image, qm)) / (2 * fd_step_);
        }
        return j;
    }

    std::shared_ptr<const SystemImpl> impl_;
    nlohmann::json recipe_;
    JacobianMode mode_ = JacobianMode::analytic;
    double fd_step_ = 1e-6;
};

inline IMat2 default_cat_matrix() {
    IMat2 a;
    a << 2, 1, 1, 1;
    return a;
}

inline nlohmann::json matrix_to_json(const IMat2& a) {
    return {{a(0, 0), a(0, 1)}, {a(1, 0), a(1, 1)}};
}

inline IMat2 matrix_from_json(const nlohmann::json& j) {
    IMat2 a;
    try {
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) a(r, c) = j.at(r).at(c).get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, std::string("bad matrix: ") + e.what());
    }
    return a;
}

namespace detail {

inline void require_hyperbolic_automorphism(const IMat2& a) {
    int det = a.determinant();
    require(det == 1 || det == -1, "matrix must be unimodular");
    hyperbolic_data(a);
}

class SkewImpl final : public SystemImpl {
public:
    explicit SkewImpl(const IMat2& a)
        : m_(ManifoldDescriptor::torus(1.0)), a_(to_real(a)), ainv_(a_.inverse()) {}
    const ManifoldDescriptor& manifold() const override { return m_; }
    Vec3 forward_raw(const ChartPoint& p) const override {
        Vec2 w = a_ * p.head<2>();
        return Vec3(w(0), w(1), p(2));
    }
    Mat3 jacobian_raw(const ChartPoint&) const override { return block_diag(a_, 1.0); }
    Vec3 inverse_raw(const ChartPoint& p) const override {
        Vec2 w = ainv_ * p.head<2>();
        return Vec3(w(0), w(1), p(2));
    }
    Mat3 inverse_jacobian_raw(const ChartPoint&) const override { return block_diag(ainv_, 1.0); }

private:
    ManifoldDescriptor m_;
    Mat2 a_, ainv_;
};

/// Time-t map of the vertical suspension flow on the mapping torus.
class SuspensionImpl final : public SystemImpl {
public:
    SuspensionImpl(const IMat2& a, double t) : m_(ManifoldDescriptor::mapping_torus(a)), t_(t) {}
    const ManifoldDescriptor& manifold() const override { return m_; }
    Vec3 forward_raw(const ChartPoint& p) const override { return Vec3(p(0), p(1), p(2) + t_); }
    Mat3 jacobian_raw(const ChartPoint&) const override { return Mat3::Identity(); }
    Vec3 inverse_raw(const ChartPoint& p) const override { return Vec3(p(0), p(1), p(2) - t_); }
    Mat3 inverse_jacobian_raw(const ChartPoint&) const override { return Mat3::Identity(); }

private:
    ManifoldDescriptor m_;
    double t_;
};

/**
 * (x, theta) -> (A x + w(theta) e_s, Psi(theta)) with theta of period 2.
 *
 * Psi(theta) = theta - beta sin(pi theta) - (gamma/2) sin(2 pi theta) fixes
 * exactly 0 and 1, with Psi'(0) = a0 and Psi'(1) = a1.  On the product torus
 * w = v = -c sin(pi theta).  On the quotient w = lambda^(theta/2) v, which
 * makes the lift commute with (x, theta) -> (A x, theta + 2).
 */
class HhuImpl final : public SystemImpl {
public:
    HhuImpl(const IMat2& a, double c, double a0, double a1, bool quotient)
        : m_(quotient ? ManifoldDescriptor::hhu_quotient(a) : ManifoldDescriptor::torus(2.0)),
          a_(to_real(a)), ainv_(a_.inverse()), c_(c), quotient_(quotient) {
        HyperbolicData h = hyperbolic_data(a);
        require(h.lambda > 0, "hhu map needs a positive stable eigenvalue");
        lambda_ = h.lambda;
        es_ = h.es;
        require(0 < a0 && a0 < lambda_ && lambda_ < 1 && 1 < a1 && a1 < 1 / lambda_,
                "hhu parameters need 0 < a0 < lambda < 1 < a1 < 1/lambda");
        require(std::isfinite(c), "c must be finite");
        beta_ = (a1 - a0) / (2 * pi);
        gamma_ = (2 - a0 - a1) / (2 * pi);
        require(beta_ > std::abs(gamma_), "Psi would have extra fixed points");
        for (int i = 0; i <= 2000; ++i)
            require(dpsi(i * 0.001) > 0, "Psi is not a diffeomorphism for these parameters");
        // Table of Psi^-1 on [0, 2] as a Newton starting guess.
        inv_table_.resize(table_size + 1);
        for (int i = 0; i <= table_size; ++i) inv_table_[i] = psi_inverse_newton(2.0 * i / table_size, 2.0 * i / table_size);
    }
    const ManifoldDescriptor& manifold() const override { return m_; }

    double psi(double t) const {
        return t - beta_ * std::sin(pi * t) - 0.5 * gamma_ * std::sin(2 * pi * t);
    }
    double dpsi(double t) const {
        return 1 - beta_ * pi * std::cos(pi * t) - gamma_ * pi * std::cos(2 * pi * t);
    }
    double psi_inverse(double y) const {
        // Psi - id is 2-periodic, so reduce to [0, 2).
        double k = std::floor(y / 2);
        double yr = y - 2 * k;
        double guess = yr;
        if (!inv_table_.empty()) {
            double s = yr / 2.0 * table_size;
            int i = std::clamp(static_cast<int>(s), 0, table_size - 1);
            guess = inv_table_[i] + (s - i) * (inv_table_[i + 1] - inv_table_[i]);
        }
        return psi_inverse_newton(yr, guess) + 2 * k;
    }
    /// Safeguarded Newton for Psi(t) = yr on [0, 2].
    double psi_inverse_newton(double yr, double t) const {
        double lo = 0, hi = 2;
        for (int it = 0; it < 100; ++it) {
            double sn = std::sin(pi * t), cs = std::cos(pi * t);
            double val = t - beta_ * sn - gamma_ * sn * cs;
            double der = 1 - beta_ * pi * cs - gamma_ * pi * (1 - 2 * sn * sn);
            double r = val - yr;
            if (r > 0) hi = t; else lo = t;
            if (r == 0) break;
            double tn = t - r / der;
            if (!(tn > lo && tn < hi)) tn = 0.5 * (lo + hi);
            if (std::abs(tn - t) <= 4e-16 * std::max(1.0, std::abs(t))) { t = tn; break; }
            t = tn;
        }
        return t;
    }
    double shear(double t) const {
        double v = -c_ * std::sin(pi * t);
        return quotient_ ? std::pow(lambda_, t / 2) * v : v;
    }
    double dshear(double t) const {
        double v = -c_ * std::sin(pi * t), dv = -c_ * pi * std::cos(pi * t);
        if (!quotient_) return dv;
        return std::pow(lambda_, t / 2) * (0.5 * std::log(lambda_) * v + dv);
    }

    Vec3 forward_raw(const ChartPoint& p) const override {
        Vec2 w = a_ * p.head<2>() + shear(p(2)) * es_;
        return Vec3(w(0), w(1), psi(p(2)));
    }
    Mat3 jacobian_raw(const ChartPoint& p) const override {
        Mat3 j = block_diag(a_, dpsi(p(2)));
        j.block<2, 1>(0, 2) = dshear(p(2)) * es_;
        return j;
    }
    Vec3 inverse_raw(const ChartPoint& p) const override {
        double t = psi_inverse(p(2));
        Vec2 w = ainv_ * (p.head<2>() - shear(t) * es_);
        return Vec3(w(0), w(1), t);
    }
    Mat3 inverse_jacobian_raw(const ChartPoint& p) const override {
        return jacobian_raw(inverse_raw(p)).inverse();
    }

private:
    ManifoldDescriptor m_;
    Mat2 a_, ainv_;
    Vec2 es_;
    double c_, lambda_ = 0, beta_ = 0, gamma_ = 0;
    bool quotient_;
    static constexpr int table_size = 256;
    std::vector<double> inv_table_;
};

class IdentityImpl final : public SystemImpl {
public:
    explicit IdentityImpl(ManifoldDescriptor m) : m_(std::move(m)) {}
    const ManifoldDescriptor& manifold() const override { return m_; }
    Vec3 forward_raw(const ChartPoint& p) const override { return p; }
    Mat3 jacobian_raw(const ChartPoint&) const override { return Mat3::Identity(); }
    Vec3 inverse_raw(const ChartPoint& p) const override { return p; }
    Mat3 inverse_jacobian_raw(const ChartPoint&) const override { return Mat3::Identity(); }

private:
    ManifoldDescriptor m_;
};

class ComposedImpl final : public SystemImpl {
public:
    /// Applies first, then second.
    ComposedImpl(DynamicalSystem first, DynamicalSystem second)
        : first_(std::move(first)), second_(std::move(second)) {
        require(first_.manifold() == second_.manifold(), "composition across manifolds");
    }
    const ManifoldDescriptor& manifold() const override { return first_.manifold(); }
    Vec3 forward_raw(const ChartPoint& p) const override {
        return second_.impl().forward_raw(first_.forward(p));
    }
    Mat3 jacobian_raw(const ChartPoint& p) const override {
        return second_.impl().jacobian_raw(first_.forward(p)) * first_.jacobian(p);
    }
    Vec3 inverse_raw(const ChartPoint& p) const override {
        return first_.impl().inverse_raw(second_.inverse(p));
    }
    Mat3 inverse_jacobian_raw(const ChartPoint& p) const override {
        return first_.impl().inverse_jacobian_raw(second_.inverse(p)) * second_.inverse_jacobian(p);
    }

private:
    DynamicalSystem first_, second_;
};

} // namespace detail

enum class PerturbationKind { fiber_shear, translation_bump };

inline std::string to_string(PerturbationKind k) {
    return k == PerturbationKind::fiber_shear ? "fiber-shear" : "translation-bump";
}

inline PerturbationKind perturbation_kind_from_string(const std::string& s) {
    if (s == "fiber-shear") return PerturbationKind::fiber_shear;
    if (s == "translation-bump") return PerturbationKind::translation_bump;
    fail(ErrorKind::invalid_input, "unknown perturbation " + s);
}

namespace detail {

/**
 * g = S o f, where S(p) = p + Delta(p) is defined on the fundamental domain.
 * Delta carries a sin^2(pi theta / P) factor, so S and DS agree with the
 * identity to second order at the gluing.
 */
class PerturbedImpl final : public SystemImpl {
public:
    PerturbedImpl(DynamicalSystem base, PerturbationKind kind, double eps)
        : base_(std::move(base)), kind_(kind), eps_(eps) {}
    const ManifoldDescriptor& manifold() const override { return base_.manifold(); }

    Vec3 delta(const ChartPoint& q) const {
        double p = manifold().period;
        double s = std::sin(pi * q(2) / p);
        double bump = eps_ * s * s;
        if (kind_ == PerturbationKind::fiber_shear)
            return Vec3(0, 0, bump * std::cos(2 * pi * q(0)));
        double r = bump / std::sqrt(2.0);
        return Vec3(r * std::cos(2 * pi * q(1)), r * std::sin(2 * pi * q(0)), 0);
    }
    Mat3 ddelta(const ChartPoint& q) const {
        double p = manifold().period;
        double s = std::sin(pi * q(2) / p);
        double bump = eps_ * s * s;
        double dbump = eps_ * (pi / p) * std::sin(2 * pi * q(2) / p);
        Mat3 d = Mat3::Zero();
        if (kind_ == PerturbationKind::fiber_shear) {
            d(2, 0) = -2 * pi * bump * std::sin(2 * pi * q(0));
            d(2, 2) = dbump * std::cos(2 * pi * q(0));
            return d;
        }
        double k = 1 / std::sqrt(2.0);
        d(0, 1) = -2 * pi * k * bump * std::sin(2 * pi * q(1));
        d(0, 2) = k * dbump * std::cos(2 * pi * q(1));
        d(1, 0) = 2 * pi * k * bump * std::cos(2 * pi * q(0));
        d(1, 2) = k * dbump * std::sin(2 * pi * q(0));
        return d;
    }
    /// Solves S(q) = p for q near p.
    Vec3 s_inverse(const ChartPoint& p) const {
        const auto& m = manifold();
        Vec3 q = p;
        for (int it = 0; it < 100; ++it) {
            ChartPoint qn = normalize(m, q);
            Vec3 r = q + delta(qn) - p;
            if (r.norm() < 1e-17) break;
            Mat3 j = Mat3::Identity() + ddelta(qn);
            Vec3 step = j.partialPivLu().solve(r);
            q -= step;
            if (step.norm() < 1e-17) break;
        }
        return q;
    }

    Vec3 forward_raw(const ChartPoint& p) const override {
        ChartPoint c = base_.forward(p);
        return c + delta(c);
    }
    Mat3 jacobian_raw(const ChartPoint& p) const override {
        ChartPoint c = base_.forward(p);
        return (Mat3::Identity() + ddelta(c)) * base_.jacobian(p);
    }
    Vec3 inverse_raw(const ChartPoint& p) const override {
        return base_.impl().inverse_raw(normalize(manifold(), s_inverse(p)));
    }
    Mat3 inverse_jacobian_raw(const ChartPoint& p) const override {
        ChartPoint q = normalize(manifold(), s_inverse(p));
        Mat3 ds = Mat3::Identity() + ddelta(q);
        return base_.impl().inverse_jacobian_raw(q) * ds.inverse();
    }

private:
    DynamicalSystem base_;
    PerturbationKind kind_;
    double eps_;
};

} // namespace detail

/// Uniform n^3 grid over the fundamental domain, cell centers optional.
inline std::vector<ChartPoint> domain_grid(const ManifoldDescriptor& m, int n, double phase = 0.0) {
    require(n >= 1, "grid must have at least one point per axis");
    std::vector<ChartPoint> pts;
    pts.reserve(static_cast<size_t>(n) * n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                pts.emplace_back((i + phase) / n, (j + phase) / n, m.period * (k + phase) / n);
    return pts;
}

inline DynamicalSystem make_skew_product(const IMat2& a = default_cat_matrix()) {
    detail::require_hyperbolic_automorphism(a);
    return DynamicalSystem(std::make_shared<detail::SkewImpl>(a),
                           {{"name", "skew"}, {"params", {{"matrix", matrix_to_json(a)}}}});
}

inline DynamicalSystem make_suspension_time(const IMat2& a, double t) {
    detail::require_hyperbolic_automorphism(a);
    require(std::isfinite(t), "flow time must be finite");
    return DynamicalSystem(std::make_shared<detail::SuspensionImpl>(a, t),
                           {{"name", "suspension"},
                            {"params", {{"matrix", matrix_to_json(a)}, {"time", t}}}});
}

inline DynamicalSystem make_suspension_time1(const IMat2& a = default_cat_matrix()) {
    return make_suspension_time(a, 1.0);
}

struct HhuParams {
    IMat2 matrix = default_cat_matrix();
    double c = 0.05;
    double a0 = 0.3;
    double a1 = 1.5;
};

inline nlohmann::json hhu_params_json(const HhuParams& p) {
    return {{"matrix", matrix_to_json(p.matrix)}, {"c", p.c}, {"a0", p.a0}, {"a1", p.a1}};
}

inline DynamicalSystem make_hhu_map(const HhuParams& p = {}) {
    return DynamicalSystem(std::make_shared<detail::HhuImpl>(p.matrix, p.c, p.a0, p.a1, false),
                           {{"name", "hhu"}, {"params", hhu_params_json(p)}});
}

inline DynamicalSystem make_hhu_quotient_map(const HhuParams& p = {}) {
    return DynamicalSystem(std::make_shared<detail::HhuImpl>(p.matrix, p.c, p.a0, p.a1, true),
                           {{"name", "hhu-quotient"}, {"params", hhu_params_json(p)}});
}

/// Test double outside the partially hyperbolic catalog.
inline DynamicalSystem make_identity(const ManifoldDescriptor& m) {
    return DynamicalSystem(std::make_shared<detail::IdentityImpl>(m),
                           {{"name", "identity"}, {"params", {{"manifold", m}}}});
}

inline DynamicalSystem compose(const DynamicalSystem& first, const DynamicalSystem& second) {
    return DynamicalSystem(std::make_shared<detail::ComposedImpl>(first, second),
                           {{"name", "composed"},
                            {"params", {{"first", first.recipe()}, {"second", second.recipe()}}}});
}

inline DynamicalSystem system_power(const DynamicalSystem& f, int n) {
    require(n >= 1, "power must be positive");
    DynamicalSystem g = f;
    for (int i = 1; i < n; ++i) g = compose(g, f);
    return g.with_recipe({{"name", "power"}, {"params", {{"base", f.recipe()}, {"n", n}}}});
}

/// Sup of the chart distance between f and g over an n^3 grid.
inline double c0_distance(const DynamicalSystem& f, const DynamicalSystem& g, int n = 20) {
    require(f.manifold() == g.manifold(), "systems live on different manifolds");
    double d = 0;
    for (const auto& p : domain_grid(f.manifold(), n, 0.5))
        d = std::max(d, dist(f.manifold(), f.forward(p), g.forward(p)));
    return d;
}

/// Sup of the operator norm of Dg - Df over an n^3 grid.
inline double c1_distance(const DynamicalSystem& f, const DynamicalSystem& g, int n = 8) {
    double d = 0;
    for (const auto& p : domain_grid(f.manifold(), n, 0.5))
        d = std::max(d, op_norm(g.jacobian(p) - f.jacobian(p)));
    return d;
}

/// Rejects maps that fail to be invertible on a probe grid.
inline void check_invertible(const DynamicalSystem& f, int n = 8) {
    for (const auto& p : domain_grid(f.manifold(), n, 0.25)) {
        double det = f.jacobian(p).determinant();
        if (!(std::abs(det) > 1e-12))
            fail(ErrorKind::invalid_input, "singular Jacobian on probe grid",
                 {{"point", point_to_json(p)}});
        if (dist(f.manifold(), f.inverse(f.forward(p)), p) > 1e-9)
            fail(ErrorKind::invalid_input, "map is not invertible on probe grid",
                 {{"point", point_to_json(p)}});
    }
}

struct Perturbation {
    DynamicalSystem system;
    double c0 = 0;          ///< measured sup distance on the 20^3 grid
    double jacobian_k = 0;  ///< measured sup |Dg - Df| / eps
};

inline Perturbation perturb(const DynamicalSystem& f, PerturbationKind kind, double eps) {
    require(std::isfinite(eps) && eps >= 0, "perturbation size must be non-negative");
    require(eps <= 0.05, "perturbation too large for the catalog bumps");
    nlohmann::json r = {{"name", "perturbed"},
                        {"params", {{"base", f.recipe()}, {"kind", to_string(kind)}, {"epsilon", eps}}}};
    DynamicalSystem g(std::make_shared<detail::PerturbedImpl>(f, kind, eps), r);
    check_invertible(g);
    Perturbation out{g, c0_distance(f, g), 0};
    if (eps > 0) out.jacobian_k = c1_distance(f, g) / eps;
    return out;
}

/// Builds a system from {"name", "params"}.
inline DynamicalSystem make_system(const nlohmann::json& recipe) {
    if (!recipe.is_object() || !recipe.contains("name"))
        fail(ErrorKind::invalid_input, "recipe needs a name");
    std::string name = recipe.at("name").get<std::string>();
    nlohmann::json params = recipe.value("params", nlohmann::json::object());
    auto mat = [&] {
        return params.contains("matrix") ? matrix_from_json(params.at("matrix")) : default_cat_matrix();
    };
    try {
        if (name == "skew") return make_skew_product(mat());
        if (name == "suspension") return make_suspension_time(mat(), params.value("time", 1.0));
        if (name == "hhu" || name == "hhu-quotient") {
            HhuParams p;
            p.matrix = mat();
            p.c = params.value("c", p.c);
            p.a0 = params.value("a0", p.a0);
            p.a1 = params.value("a1", p.a1);
            return name == "hhu" ? make_hhu_map(p) : make_hhu_quotient_map(p);
        }
        if (name == "identity") {
            ManifoldDescriptor m = params.contains("manifold")
                                       ? params.at("manifold").get<ManifoldDescriptor>()
                                       : ManifoldDescriptor::torus();
            return make_identity(m);
        }
        if (name == "perturbed") {
            if (!params.contains("base")) fail(ErrorKind::invalid_input, "perturbed needs a base");
            return perturb(make_system(params.at("base")),
                           perturbation_kind_from_string(params.value("kind", std::string("fiber-shear"))),
                           params.value("epsilon", 1e-4))
                .system;
        }
        if (name == "composed")
            return compose(make_system(params.at("first")), make_system(params.at("second")));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, std::string("bad recipe parameters: ") + e.what());
    }
    fail(ErrorKind::invalid_input, "unknown system " + name);
}

/// Resolves a CLI system name: skew, suspension, hhu, hhu-quotient or perturbed:<base>.
inline nlohmann::json recipe_for_name(const std::string& name, double eps = 1e-4,
                                      const std::string& kind = "translation-bump") {
    const std::string prefix = "perturbed:";
    if (name.rfind(prefix, 0) == 0) {
        return {{"name", "perturbed"},
                {"params", {{"base", recipe_for_name(name.substr(prefix.size()))},
                            {"kind", kind},
                            {"epsilon", eps}}}};
    }
    if (name == "skew" || name == "suspension" || name == "hhu" || name == "hhu-quotient")
        return {{"name", name}, {"params", nlohmann::json::object()}};
    if (name == "suspension-half") return {{"name", "suspension"}, {"params", {{"time", 0.5}}}};
    fail(ErrorKind::invalid_input, "unknown system " + name);
}

struct CatalogEntry {
    std::string name;
    std::string anchor;
    std::string description;
    nlohmann::json recipe;
};

inline std::vector<CatalogEntry> list_systems() {
    return {
        {"skew", "linear-skew-product", "cat map times identity on T^3; not center fixing",
         recipe_for_name("skew")},
        {"suspension", "anosov-suspension", "time-one map of the suspension flow of the cat map",
         recipe_for_name("suspension")},
        {"hhu", "hhu-example", "non-dynamically coherent example on T^2 x R/2Z",
         recipe_for_name("hhu")},
        {"hhu-quotient", "hhu-example-quotient", "the same example descended to (T^2 x R)/Gamma",
         recipe_for_name("hhu-quotient")},
        {"perturbed:suspension", "perturbation", "translation bump of size 1e-4 on the suspension",
         recipe_for_name("perturbed:suspension")},
    };
}

} // namespace dafkit
