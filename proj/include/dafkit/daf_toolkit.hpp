#pragma once

#include <dafkit/leaf_numerics.hpp>

#include <array>
#include <functional>
#include <unordered_set>

namespace dafkit {

/// How center leaves of one system are traced.
struct CenterContext {
    std::shared_ptr<const LineField> field;
    IntegrationOptions opts;
    Vec3 reference{0, 0, 1};  ///< global orientation of the center lines
    /// Trace leaves as graphs over theta. Needed where E^c is tangent to the
    /// tori theta = 0 mod 2 and only Hölder across them.
    bool theta_graph = false;
    double theta_step = 5e-3;
    double rho_step = 2.5e-3;
    double rho_zone = 0.05;  ///< |theta - 2k| below this uses theta = 2k +- rho^m
    int rho_power = 4;

    double min_return() const { return theta_graph ? 0.05 : 4 * opts.step; }
};

inline bool has_tangent_tori(const nlohmann::json& recipe) {
    std::string n = recipe.value("name", std::string());
    if (n == "hhu" || n == "hhu-quotient") return true;
    nlohmann::json p = recipe.value("params", nlohmann::json::object());
    if (n == "perturbed" && p.contains("base")) return has_tangent_tori(p["base"]);
    if (n == "composed")
        return (p.contains("first") && has_tangent_tori(p["first"])) ||
               (p.contains("second") && has_tangent_tori(p["second"]));
    return false;
}

inline CenterContext center_context(const DynamicalSystem& f) {
    CenterContext c;
    c.field = make_line_field(f, Bundle::center);
    c.theta_graph = has_tangent_tori(f.recipe());
    return c;
}

inline CenterContext center_context(std::shared_ptr<const LineField> field) {
    CenterContext c;
    c.field = std::move(field);
    return c;
}

namespace detail {

/// Field direction at a raw point, in the raw frame.
inline Vec3 raw_direction(const LineField& field, const Vec3& raw) {
    const auto& m = field.manifold();
    Reduced r = reduce(m, raw);
    Vec3 e = field.direction(r.chart);
    if (r.k != 0) e = unit(Vec3(deck_linear(m, r.k).inverse() * e));
    return e;
}

/// theta = base + side * r^m.
struct ThetaChart {
    double base = 0;
    int side = 1;
    int m = 1;
    double theta(double r) const { return base + side * std::pow(r, m); }
    double dtheta(double r) const { return m == 1 ? side : side * m * std::pow(r, m - 1); }
};

/// d(w, arc)/dr along the center graph.
inline Vec3 graph_rhs(const LineField& field, const ThetaChart& c, double r, const Vec2& w) {
    double d = c.dtheta(r);
    if (d == 0) return Vec3::Zero();
    Vec3 e = raw_direction(field, Vec3(w(0), w(1), c.theta(r)));
    if (e(2) == 0)
        fail(ErrorKind::tangency, "center direction tangent to a theta level",
             {{"theta", c.theta(r)}});
    return Vec3(e(0) / e(2) * d, e(1) / e(2) * d, std::abs(d / e(2)));
}

inline int sign_of(double v) { return v > 0 ? 1 : -1; }

} // namespace detail

/**
 * Center leaf from the raw point x as a graph over theta, moving in theta
 * direction `dir` until arc length `len`. Near theta = 2k the variable is
 * rho with theta = 2k +- rho^m, which keeps the right-hand side bounded.
 * `scale` multiplies both step sizes.
 */
inline LeafArc theta_graph_ray(const CenterContext& ctx, const Vec3& x, int dir, double len,
                               double scale = 1.0) {
    require(dir == 1 || dir == -1, "direction must be +-1");
    require(len >= 0 && std::isfinite(len), "length must be non-negative");
    const LineField& field = *ctx.field;
    const double zone = ctx.rho_zone;
    const int m = ctx.rho_power;

    LeafArc arc;
    arc.manifold = field.manifold();
    arc.t.push_back(0);
    arc.raw.push_back(x);
    Vec2 w = x.head<2>();
    double th = x(2), s = 0;

    for (int seg = 0; s < len; ++seg) {
        if (seg > 100000) fail(ErrorKind::integration, "theta graph made no progress");
        double level = 2 * std::round(th / 2);
        double off = th - level;
        bool toward = off != 0 && detail::sign_of(off) != dir;
        detail::ThetaChart c;
        double r0, r1, h;
        if (std::abs(off) < zone * (1 - 1e-12) || (toward && std::abs(off) <= zone * (1 + 1e-12))) {
            c = {level, off == 0 ? dir : detail::sign_of(off), m};
            r0 = std::pow(std::abs(off), 1.0 / m);
            r1 = toward ? 0.0 : std::pow(zone, 1.0 / m);
            h = ctx.rho_step * scale;
        } else {
            double next = dir > 0 ? 2 * std::floor(th / 2) + 2 : 2 * std::ceil(th / 2) - 2;
            double bound = next - dir * zone;
            c = {th, dir, 1};
            r0 = 0;
            r1 = std::abs(bound - th);
            h = ctx.theta_step * scale;
        }
        int n = std::max(1, static_cast<int>(std::ceil(std::abs(r1 - r0) / h - 1e-9)));
        double dr = (r1 - r0) / n;
        for (int i = 0; i < n && s < len; ++i) {
            double r = r0 + i * dr;
            Vec3 st(w(0), w(1), s);
            auto rhs = [&](double rr, const Vec3& y) {
                return detail::graph_rhs(field, c, rr, y.head<2>());
            };
            Vec3 k1 = rhs(r, st);
            Vec3 k2 = rhs(r + dr / 2, st + dr / 2 * k1);
            Vec3 k3 = rhs(r + dr / 2, st + dr / 2 * k2);
            Vec3 k4 = rhs(r + dr, st + dr * k3);
            Vec3 next = st + dr / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
            w = next.head<2>();
            // Arc length grows whichever way r runs.
            s = s + std::abs(next(2) - st(2));
            double rr = (i + 1 == n) ? r1 : r + dr;
            th = c.theta(rr);
            arc.t.push_back(s);
            arc.raw.emplace_back(w(0), w(1), th);
        }
    }
    // Tangents oriented along the traced direction.
    size_t n = arc.size();
    arc.tangent.resize(n);
    for (size_t i = 0; i < n; ++i) {
        Vec3 chord = arc.raw[std::min(i + 1, n - 1)] - arc.raw[i > 0 ? i - 1 : 0];
        if (chord.norm() == 0) chord = Vec3(0, 0, dir);
        arc.tangent[i] = align(detail::raw_direction(field, arc.raw[i]), chord);
    }
    return arc;
}

/// Forward ray of the center leaf through x, oriented by `sign` times the
/// context reference. Index 0 is x.
inline LeafArc trace_center(const CenterContext& ctx, const ChartPoint& x, int sign, double len) {
    require(sign == 1 || sign == -1, "sign must be +-1");
    const auto& m = ctx.field->manifold();
    ChartPoint x0 = normalize(m, x);
    if (ctx.theta_graph) return theta_graph_ray(ctx, x0, sign, len);
    Vec3 ref = sign * align(ctx.field->direction(x0), ctx.reference);
    IntegrationOptions o = ctx.opts;
    return integrate_ray(*ctx.field, x0, len, o, &ref);
}

/// Moves x along its center leaf by signed arc length c.
inline ChartPoint center_move(const CenterContext& ctx, const ChartPoint& x, double c) {
    if (c == 0) return x;
    const auto& m = ctx.field->manifold();
    int sign = c > 0 ? 1 : -1;
    if (ctx.theta_graph) return trace_center(ctx, x, sign, std::abs(c)).chart_at(std::abs(c));
    ChartPoint x0 = normalize(m, x);
    Vec3 ref = sign * align(ctx.field->direction(x0), ctx.reference);
    Tracer tr(*ctx.field, x0, ref, ctx.opts);
    tr.advance(std::abs(c));
    return normalize(m, tr.pos);
}

struct ArcHit {
    double t = 0;
    double residual = 0;
};

/**
 * First parameter t > t_after where the arc passes within tol of the chart
 * point. Local minima of the sampled distance are refined by golden section
 * on the Hermite interpolant.
 */
inline std::optional<ArcHit> find_on_arc(const LeafArc& arc, const ChartPoint& target,
                                         double t_after, double tol) {
    const auto& m = arc.manifold;
    size_t n = arc.size();
    if (n < 2) return std::nullopt;
    std::vector<double> d(n);
    std::vector<Vec3> lift(n);
    for (size_t i = 0; i < n; ++i) {
        lift[i] = lift_near(m, arc.raw[i], target);
        d[i] = (arc.raw[i] - lift[i]).norm();
    }
    for (size_t i = 0; i < n; ++i) {
        if ((i > 0 && d[i] > d[i - 1]) || (i + 1 < n && d[i] > d[i + 1])) continue;
        double lo = arc.t[i > 0 ? i - 1 : 0], hi = arc.t[std::min(i + 1, n - 1)];
        if (hi <= t_after || d[i] > (hi - lo) + tol) continue;
        const Vec3& q = lift[i];
        auto dist_at = [&](double s) { return (arc.raw_at(s) - q).norm(); };
        const double g = (std::sqrt(5.0) - 1) / 2;
        double a = std::max(lo, t_after), b = hi;
        double c1 = b - g * (b - a), c2 = a + g * (b - a);
        double f1 = dist_at(c1), f2 = dist_at(c2);
        for (int it = 0; it < 100 && b - a > 1e-15; ++it) {
            if (f1 < f2) { b = c2; c2 = c1; f2 = f1; c1 = b - g * (b - a); f1 = dist_at(c1); }
            else { a = c1; c1 = c2; f1 = f2; c2 = a + g * (b - a); f2 = dist_at(c2); }
        }
        double ts = 0.5 * (a + b);
        double res = dist_at(ts);
        if (ts > t_after && res < tol) return ArcHit{ts, res};
    }
    return std::nullopt;
}

/// Chart-frame tangent of an arc at parameter s.
inline Vec3 chart_tangent_at(const LeafArc& arc, double s) {
    const auto& m = arc.manifold;
    return unit(Vec3(deck_linear(m, reduce(m, arc.raw_at(s)).k) * arc.tangent_at(s)));
}

/// Closure of the ray back onto its start, with matching tangent.
inline std::optional<double> closure_length(const LeafArc& ray, double t_after, double tol = 1e-7,
                                            double angle_tol = 1e-5) {
    auto hit = find_on_arc(ray, normalize(ray.manifold, ray.raw[0]), t_after, tol);
    if (!hit) return std::nullopt;
    if (line_angle(chart_tangent_at(ray, hit->t), chart_tangent_at(ray, 0)) > angle_tol)
        return std::nullopt;
    return hit->t;
}

/// Where the target sits on the center leaf of x, searched both ways.
struct CenterLocation {
    ChartPoint x, target;
    std::optional<double> plus, minus;   ///< arc length to the target each way
    std::optional<double> leaf_length;   ///< set when the leaf closed up
    double residual = 0;

    bool found() const { return plus.has_value() || minus.has_value(); }
    /// Signed arc length of the nearer hit.
    double nearest() const {
        if (plus && (!minus || *plus <= *minus)) return *plus;
        if (minus) return -*minus;
        return std::numeric_limits<double>::quiet_NaN();
    }
};

inline CenterLocation locate_on_center(const CenterContext& ctx, const ChartPoint& x,
                                       const ChartPoint& target, double budget, double tol = 1e-7) {
    const auto& m = ctx.field->manifold();
    CenterLocation loc;
    loc.x = normalize(m, x);
    loc.target = normalize(m, target);
    double rmin = ctx.min_return();
    // f(x) = x must be found as a return, not at t = 0.
    double t_after = dist(m, loc.x, loc.target) < tol ? rmin : -1;
    double res = 0;
    for (int sign : {1, -1}) {
        double len = budget;
        if (sign < 0 && loc.plus && !loc.leaf_length) len = std::min(budget, *loc.plus);
        if (sign < 0 && loc.leaf_length) {
            if (loc.plus) {
                double other = *loc.leaf_length - *loc.plus;
                loc.minus = other > t_after ? other : other + *loc.leaf_length;
            }
            break;
        }
        LeafArc ray;
        try {
            ray = trace_center(ctx, loc.x, sign, len);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::cone_exit) throw;
            continue;
        }
        if (auto h = find_on_arc(ray, loc.target, t_after, tol)) {
            (sign > 0 ? loc.plus : loc.minus) = h->t;
            res = std::max(res, h->residual);
        }
        if (!loc.leaf_length) loc.leaf_length = closure_length(ray, rmin, tol);
    }
    loc.residual = res;
    return loc;
}

struct DisplacementReport {
    std::string verdict;  ///< "center-fixing" or "not-center-fixing"
    double bound = 0;     ///< sup of located arc distances
    double budget = 0;
    std::vector<CenterLocation> located;
    std::vector<ChartPoint> witnesses;
};

inline nlohmann::json to_json_value(const DisplacementReport& r) {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& p : r.witnesses) w.push_back(point_to_json(p));
    return {{"verdict", r.verdict}, {"bound", r.bound}, {"budget", r.budget},
            {"samples", r.located.size()}, {"witnesses", w}};
}

/// Searches f(x) on the center leaf of x for every sample.
inline DisplacementReport center_displacement(const CenterContext& ctx, const DynamicalSystem& f,
                                              const std::vector<ChartPoint>& samples,
                                              double budget = 3.0, double tol = 1e-7) {
    require(!samples.empty(), "no samples");
    require(budget > 0, "search budget must be positive");
    DisplacementReport r;
    r.budget = budget;
    for (const auto& x : samples) {
        CenterLocation loc = locate_on_center(ctx, x, f.forward(x), budget, tol);
        if (loc.found()) r.bound = std::max(r.bound, std::abs(loc.nearest()));
        else r.witnesses.push_back(loc.x);
        r.located.push_back(loc);
    }
    r.verdict = r.witnesses.empty() ? "center-fixing" : "not-center-fixing";
    return r;
}

struct TauSample {
    ChartPoint x;
    double tau = 0;
    double leaf_length = 0;  ///< 0 for non-compact leaves
    int winding = 0;         ///< N in tau = length[x, f(x)] + N * leaf length
    int components = 1;      ///< pieces of [x, f(x)] near x
};

struct TauField {
    int orientation = 1;  ///< sign relative to the context reference
    std::vector<TauSample> samples;
    double min = 0, max = 0, mean = 0;
    double continuity_modulus = 0;  ///< max |dtau| / d over nearest neighbours
    double max_jump = 0;            ///< max |dtau| over nearest neighbours
};

inline nlohmann::json to_json_value(const TauField& t) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& s : t.samples)
        pts.push_back({{"x", point_to_json(s.x)}, {"tau", s.tau}, {"leaf_length", s.leaf_length},
                       {"winding", s.winding}, {"components", s.components}});
    return {{"orientation", t.orientation}, {"min", t.min}, {"max", t.max}, {"mean", t.mean},
            {"continuity_modulus", t.continuity_modulus}, {"max_jump", t.max_jump},
            {"samples", pts}};
}

/**
 * Signed unit-speed return time along the center. The orientation is the
 * majority direction of x -> f(x) over non-compact samples; any sample
 * pointing the other way is a model violation.
 */
inline TauField recover_tau(const CenterContext& ctx, const DynamicalSystem& f,
                            const std::vector<ChartPoint>& samples, double budget = 3.0,
                            double tol = 1e-7) {
    DisplacementReport disp = center_displacement(ctx, f, samples, budget, tol);
    if (!disp.witnesses.empty())
        fail(ErrorKind::model_violation, "f(x) is not on the center leaf of x",
             {{"witness", point_to_json(disp.witnesses.front())}});
    const auto& m = f.manifold();

    int votes = 0;
    bool any_open = false;
    for (const auto& l : disp.located)
        if (!l.leaf_length) { any_open = true; votes += l.nearest() > 0 ? 1 : -1; }
    if (!any_open)
        for (const auto& l : disp.located) votes += l.nearest() > 0 ? 1 : -1;
    TauField tf;
    tf.orientation = votes >= 0 ? 1 : -1;

    for (const auto& l : disp.located) {
        const auto& hit = tf.orientation > 0 ? l.plus : l.minus;
        if (!hit)
            fail(ErrorKind::model_violation, "tau changes sign",
                 {{"point", point_to_json(l.x)}, {"signed_arc", l.nearest()}});
        TauSample s;
        s.x = l.x;
        s.tau = *hit;
        s.leaf_length = l.leaf_length.value_or(0.0);
        // A fixed point sits at length 0 and winds at least once.
        if (s.leaf_length > 0 && dist(m, l.x, l.target) < tol) {
            s.tau = 0;
            s.winding = 1;
        }
        tf.samples.push_back(s);
    }
    // Windings on compact leaves follow the nearest non-compact neighbour.
    for (auto& s : tf.samples) {
        if (s.leaf_length <= 0) continue;
        int floor_n = s.winding;
        double best = std::numeric_limits<double>::infinity();
        const TauSample* nb = nullptr;
        for (const auto& o : tf.samples) {
            if (o.leaf_length > 0) continue;
            double d = dist(m, s.x, o.x);
            if (d < best) { best = d; nb = &o; }
        }
        if (nb) s.winding = std::max(floor_n, static_cast<int>(std::lround((nb->tau - s.tau) / s.leaf_length)));
        s.tau += s.winding * s.leaf_length;
        s.components = s.winding + 1;
    }
    double sum = 0;
    tf.min = std::numeric_limits<double>::infinity();
    tf.max = -tf.min;
    for (const auto& s : tf.samples) {
        tf.min = std::min(tf.min, s.tau);
        tf.max = std::max(tf.max, s.tau);
        sum += s.tau;
    }
    tf.mean = sum / tf.samples.size();
    for (size_t i = 0; i < tf.samples.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        size_t bj = i;
        for (size_t j = 0; j < tf.samples.size(); ++j) {
            if (j == i) continue;
            double d = dist(m, tf.samples[i].x, tf.samples[j].x);
            if (d < best) { best = d; bj = j; }
        }
        if (bj == i || best == 0) continue;
        double jump = std::abs(tf.samples[i].tau - tf.samples[bj].tau);
        tf.max_jump = std::max(tf.max_jump, jump);
        tf.continuity_modulus = std::max(tf.continuity_modulus, jump / best);
    }
    return tf;
}

struct FloorVerdict {
    bool pass = false;
    double min_tau = 0, threshold = 0, margin = 0;
};

inline nlohmann::json to_json_value(const FloorVerdict& v) {
    return {{"verdict", v.pass ? "pass" : "fail"}, {"min_tau", v.min_tau},
            {"threshold", v.threshold}, {"margin", v.margin}};
}

/// min tau > 10 delta.
inline FloorVerdict tau_floor_check(const TauField& tau, double delta) {
    require(delta >= 0 && std::isfinite(delta), "delta must be non-negative");
    require(!tau.samples.empty(), "empty tau field");
    FloorVerdict v;
    v.min_tau = tau.min;
    v.threshold = 10 * delta;
    v.margin = tau.min - v.threshold;
    v.pass = v.margin > 0;
    return v;
}

struct QiReport {
    std::string verdict;  ///< "quasi-isometric" or "not-QI"
    double l = 0;
    int n_iter = 0;
    std::vector<int> n;
    std::vector<double> max_length, min_length;  ///< over samples, per n
    double bound = 0;            ///< max image length over all n
    double growth_rate = 0;      ///< fitted slope of log length per iterate
    double max_deviation = 0;    ///< max |length - l|
    bool stable_in_n = true;     ///< bound over |n| <= N/2 matches the bound over |n| <= N
    std::optional<double> tau_bound;
    std::optional<bool> consistent_with_tau;
};

inline nlohmann::json to_json_value(const QiReport& r) {
    nlohmann::json j = {{"verdict", r.verdict}, {"l", r.l}, {"n_iter", r.n_iter}, {"n", r.n},
                        {"max_length", r.max_length}, {"min_length", r.min_length},
                        {"bound", r.bound}, {"growth_rate", r.growth_rate},
                        {"max_deviation", r.max_deviation}, {"stable_in_n", r.stable_in_n}};
    if (r.tau_bound) j["tau_bound"] = *r.tau_bound;
    if (r.consistent_with_tau) j["consistent_with_tau"] = *r.consistent_with_tau;
    return j;
}

namespace detail {

inline double fitted_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double n = static_cast<double>(x.size()), sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i]; sy += y[i]; sxx += x[i] * x[i]; sxy += x[i] * y[i];
    }
    double den = n * sxx - sx * sx;
    return den > 0 ? (n * sxy - sx * sy) / den : 0.0;
}

} // namespace detail

/**
 * Lengths of f^n(W^c_l(x)) for |n| <= N, as integrals of |Df^n gamma'|
 * along the arc. `center` may be any line field, so a fake center can be
 * tested too.
 */
inline QiReport qi_check(const DynamicalSystem& f, const LineField& center,
                         const std::vector<ChartPoint>& samples, double l, int n_iter,
                         double budget_factor = 100.0, const TauField* tau = nullptr) {
    require(l > 0 && std::isfinite(l), "arc length must be positive");
    require(n_iter >= 1, "need at least one iterate");
    require(!samples.empty(), "no samples");
    IntegrationOptions o;
    o.step = std::clamp(l / 32, o.h_min, o.h_max);

    QiReport r;
    r.l = l;
    r.n_iter = n_iter;
    std::vector<double> mx(2 * n_iter + 1, 0.0), mn(2 * n_iter + 1, std::numeric_limits<double>::infinity());
    for (const auto& x : samples) {
        LeafArc arc = integrate_leaf(center, x, l / 2, o);
        size_t k = arc.size();
        std::vector<ChartPoint> pts(k);
        std::vector<Vec3> tan(k);
        for (size_t i = 0; i < k; ++i) { pts[i] = arc.chart(i); tan[i] = arc.chart_tangent(i); }
        for (int dir : {1, -1}) {
            std::vector<ChartPoint> p = pts;
            std::vector<Vec3> v = tan;
            for (int step = 0; step <= n_iter; ++step) {
                double len = 0;
                for (size_t i = 0; i + 1 < k; ++i)
                    len += 0.5 * (arc.t[i + 1] - arc.t[i]) * (v[i].norm() + v[i + 1].norm());
                int idx = n_iter + dir * step;
                mx[idx] = std::max(mx[idx], len);
                mn[idx] = std::min(mn[idx], len);
                if (step == n_iter) break;
                for (size_t i = 0; i < k; ++i) {
                    v[i] = (dir > 0 ? f.jacobian(p[i]) : f.inverse_jacobian(p[i])) * v[i];
                    p[i] = dir > 0 ? f.forward(p[i]) : f.inverse(p[i]);
                }
            }
        }
    }
    std::vector<double> xs, up, down;
    for (int i = 0; i <= 2 * n_iter; ++i) {
        int n = i - n_iter;
        r.n.push_back(n);
        r.bound = std::max(r.bound, mx[i]);
        r.max_deviation = std::max({r.max_deviation, std::abs(mx[i] - l), std::abs(mn[i] - l)});
    }
    for (int s = 0; s <= n_iter; ++s) {
        xs.push_back(s);
        up.push_back(std::log(mx[n_iter + s] / l));
        down.push_back(std::log(mx[n_iter - s] / l));
    }
    r.max_length = mx;
    r.min_length = mn;
    r.growth_rate = std::max(detail::fitted_slope(xs, up), detail::fitted_slope(xs, down));
    double half = 0;
    for (int i = 0; i <= 2 * n_iter; ++i)
        if (std::abs(i - n_iter) <= n_iter / 2) half = std::max(half, mx[i]);
    r.stable_in_n = r.bound <= 1.05 * half;
    bool qi = r.bound <= budget_factor * l && r.stable_in_n;
    r.verdict = qi ? "quasi-isometric" : "not-QI";
    if (tau) {
        r.tau_bound = tau->max;
        r.consistent_with_tau = r.bound <= 1.05 * std::max(l, tau->max);
    }
    return r;
}

struct PseudoOrbitPair {
    int n0 = 0;  ///< time index of the first entry
    std::vector<ChartPoint> x, y;
    std::vector<double> jump_x, jump_y;  ///< center jump into each entry, 0 at the seed
    std::vector<double> separation;
};

inline nlohmann::json to_json_value(const PseudoOrbitPair& p) {
    nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
    for (const auto& q : p.x) xs.push_back(point_to_json(q));
    for (const auto& q : p.y) ys.push_back(point_to_json(q));
    return {{"n0", p.n0}, {"x", xs}, {"y", ys}, {"jump_x", p.jump_x}, {"jump_y", p.jump_y},
            {"separation", p.separation}};
}

struct PlaqueExpansivityOptions {
    int seed_resolution = 4;    ///< transverse seed offsets per half-axis
    int jumps = 5;              ///< center offsets per step, spread evenly over [-delta, delta]
    long node_budget = 2000000;
    bool confirm = true;        ///< re-run surviving seeds with a doubled jump alphabet
};

struct ExpansivityVerdict {
    std::string verdict;  ///< no-violation-found, violation-witness or inconclusive
    double delta = 0;
    int horizon = 0, seed_resolution = 0, jumps = 0;
    long nodes = 0, seeds = 0;
    std::optional<PseudoOrbitPair> witness;
    int witness_n = 0;
    bool confirmed = false;
    std::string reason;
};

inline nlohmann::json to_json_value(const ExpansivityVerdict& v) {
    nlohmann::json j = {{"verdict", v.verdict}, {"delta", v.delta}, {"horizon", v.horizon},
                        {"seed_resolution", v.seed_resolution}, {"jumps", v.jumps},
                        {"nodes", v.nodes}, {"seeds", v.seeds}, {"reason", v.reason}};
    if (v.witness) {
        j["witness"] = to_json_value(*v.witness);
        j["witness_n"] = v.witness_n;
        j["confirmed"] = v.confirmed;
    }
    return j;
}

namespace detail {

struct BudgetExceeded {};

/// Depth-first search for a pseudo-orbit pair that stays 2 delta close.
class PseudoOrbitSearch {
public:
    struct Step {
        ChartPoint x, y;
        double jx = 0, jy = 0, d = 0;
    };

    PseudoOrbitSearch(const DynamicalSystem& f, const CenterContext& ctx, double delta, int horizon,
                      int jumps, long& nodes, long budget)
        : f_(f), ctx_(ctx), delta_(delta), horizon_(horizon), nodes_(nodes), budget_(budget) {
        for (int j = 0; j < jumps; ++j)
            offsets_.push_back(jumps == 1 ? 0.0 : -delta + 2 * delta * j / (jumps - 1));
        // Zero first so the cheapest continuation is tried first on ties.
        std::stable_sort(offsets_.begin(), offsets_.end(),
                         [](double a, double b) { return std::abs(a) < std::abs(b); });
        quantum_ = delta / 8;
    }

    /// Surviving continuation of the seed in time direction dir, or nullopt.
    std::optional<std::vector<Step>> run(const ChartPoint& x0, const ChartPoint& y0, int dir) {
        seen_.assign(horizon_ + 1, {});
        std::vector<Step> path;
        if (dfs(x0, y0, 0, dir, path)) return path;
        return std::nullopt;
    }

private:
    using Key = std::array<long long, 6>;
    struct KeyHash {
        size_t operator()(const Key& k) const {
            size_t h = 1469598103934665603ull;
            for (long long v : k) h = (h ^ static_cast<size_t>(v)) * 1099511628211ull;
            return h;
        }
    };

    Key key(const ChartPoint& x, const ChartPoint& y) const {
        Vec3 d = displacement(f_.manifold(), x, y);
        Key k;
        for (int i = 0; i < 3; ++i) {
            k[i] = std::llround(x(i) / quantum_);
            k[3 + i] = std::llround(d(i) / quantum_);
        }
        return k;
    }

    std::vector<ChartPoint> successors(const ChartPoint& p, int dir) const {
        std::vector<ChartPoint> out;
        if (dir > 0) {
            ChartPoint fp = f_.forward(p);
            for (double o : offsets_) out.push_back(center_move(ctx_, fp, o));
        } else {
            // x_{n-1} with x_n in W^c_delta(f(x_{n-1})).
            for (double o : offsets_) out.push_back(f_.inverse(center_move(ctx_, p, o)));
        }
        return out;
    }

    bool dfs(const ChartPoint& x, const ChartPoint& y, int depth, int dir, std::vector<Step>& path) {
        if (depth == horizon_) return true;
        auto sx = successors(x, dir), sy = successors(y, dir);
        std::vector<Step> cand;
        for (size_t i = 0; i < sx.size(); ++i)
            for (size_t j = 0; j < sy.size(); ++j) {
                double d = dist(f_.manifold(), sx[i], sy[j]);
                if (d <= 2 * delta_) cand.push_back({sx[i], sy[j], offsets_[i], offsets_[j], d});
            }
        std::stable_sort(cand.begin(), cand.end(), [](const Step& a, const Step& b) { return a.d < b.d; });
        for (const auto& c : cand) {
            if (!seen_[depth + 1].insert(key(c.x, c.y)).second) continue;
            if (++nodes_ > budget_) throw BudgetExceeded{};
            path.push_back(c);
            if (dfs(c.x, c.y, depth + 1, dir, path)) return true;
            path.pop_back();
        }
        return false;
    }

    const DynamicalSystem& f_;
    const CenterContext& ctx_;
    double delta_;
    int horizon_;
    long& nodes_;
    long budget_;
    double quantum_;
    std::vector<double> offsets_;
    std::vector<std::unordered_set<Key, KeyHash>> seen_;
};

} // namespace detail

/**
 * Falsifier for delta-plaque expansivity over a finite jump alphabet and
 * horizon: seeds y0 = x0 + a e^s + b e^u off the center plaque of x0, both
 * time directions must survive for a witness.
 */
inline ExpansivityVerdict plaque_expansivity_test(const DynamicalSystem& f, const Foliations& fol,
                                                  double delta, int horizon,
                                                  const std::vector<ChartPoint>& base,
                                                  const PlaqueExpansivityOptions& opt = {}) {
    require(delta >= 0 && std::isfinite(delta), "delta must be non-negative");
    require(horizon >= 1 && horizon <= 30, "horizon must be in [1, 30]");
    require(opt.seed_resolution >= 1 && opt.jumps >= 1, "resolution must be positive");
    require(!base.empty(), "no base points");
    ExpansivityVerdict v;
    v.delta = delta;
    v.horizon = horizon;
    v.seed_resolution = opt.seed_resolution;
    v.jumps = opt.jumps;
    if (delta == 0) {
        v.verdict = "no-violation-found";
        v.reason = "delta = 0: center plaques are points and distinct pairs separate at once";
        return v;
    }
    const auto& m = f.manifold();
    CenterContext ctx = center_context(fol.c);
    IntegrationOptions po;
    po.step = std::clamp(delta / 4, po.h_min, po.h_max);
    const int res = opt.seed_resolution;
    const double on_plaque = delta / (4.0 * res);

    auto assemble = [&](const ChartPoint& x0, const ChartPoint& y0,
                        const std::vector<detail::PseudoOrbitSearch::Step>& back,
                        const std::vector<detail::PseudoOrbitSearch::Step>& fwd) {
        PseudoOrbitPair p;
        p.n0 = -static_cast<int>(back.size());
        for (size_t i = back.size(); i-- > 0;) {
            p.x.push_back(back[i].x);
            p.y.push_back(back[i].y);
            p.separation.push_back(back[i].d);
        }
        p.x.push_back(x0);
        p.y.push_back(y0);
        p.separation.push_back(dist(m, x0, y0));
        p.jump_x.assign(p.x.size(), 0.0);
        p.jump_y.assign(p.x.size(), 0.0);
        // back[i] is x_{-i-1}; its offset o gives x_{-i} = phi_{-o}(f(x_{-i-1})).
        for (size_t i = 0; i < back.size(); ++i) {
            size_t idx = back.size() - i;
            p.jump_x[idx] = -back[i].jx;
            p.jump_y[idx] = -back[i].jy;
        }
        for (const auto& s : fwd) {
            p.x.push_back(s.x);
            p.y.push_back(s.y);
            p.jump_x.push_back(s.jx);
            p.jump_y.push_back(s.jy);
            p.separation.push_back(s.d);
        }
        return p;
    };

    try {
        for (const auto& xb : base) {
            ChartPoint x0 = normalize(m, xb);
            Vec3 es = fol.s->direction(x0), eu = fol.u->direction(x0);
            LeafArc plaque = integrate_leaf(*fol.c, x0, 3 * delta, po);
            std::vector<ChartPoint> plaque_pts = plaque.chart_points();
            for (int i = -res; i <= res; ++i)
                for (int k = -res; k <= res; ++k) {
                    if (i == 0 && k == 0) continue;
                    double a = 2 * delta * i / res, b = 2 * delta * k / res;
                    ChartPoint y0 = normalize(m, x0 + a * es + b * eu);
                    if (dist(m, x0, y0) > 2 * delta) continue;
                    if (point_polyline_distance(m, y0, plaque_pts) < on_plaque) continue;
                    ++v.seeds;
                    detail::PseudoOrbitSearch search(f, ctx, delta, horizon, opt.jumps, v.nodes,
                                                     opt.node_budget);
                    auto fwd = search.run(x0, y0, 1);
                    if (!fwd) continue;
                    auto back = search.run(x0, y0, -1);
                    if (!back) continue;
                    v.verdict = "violation-witness";
                    v.witness = assemble(x0, y0, *back, *fwd);
                    v.witness_n = 0;
                    if (opt.confirm) {
                        long extra = 0;
                        detail::PseudoOrbitSearch fine(f, ctx, delta, horizon, 2 * opt.jumps - 1,
                                                       extra, opt.node_budget);
                        v.confirmed = fine.run(x0, y0, 1).has_value() && fine.run(x0, y0, -1).has_value();
                    }
                    v.reason = "pair stays within 2 delta over the whole window";
                    return v;
                }
        }
    } catch (const detail::BudgetExceeded&) {
        v.verdict = "inconclusive";
        v.reason = "node budget exhausted";
        return v;
    }
    v.verdict = "no-violation-found";
    v.reason = "every seed separated beyond 2 delta in one time direction";
    return v;
}

namespace detail {

/// Distance from a raw point to the Hermite curve of an arc.
inline std::pair<double, double> distance_to_arc(const LeafArc& arc, const Vec3& q) {
    size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < arc.size(); ++i) {
        double d = (arc.raw[i] - q).norm();
        if (d < bd) { bd = d; best = i; }
    }
    double a = arc.t[best > 0 ? best - 1 : 0], b = arc.t[std::min(best + 1, arc.size() - 1)];
    auto fn = [&](double s) { return (arc.raw_at(s) - q).norm(); };
    const double g = (std::sqrt(5.0) - 1) / 2;
    double c1 = b - g * (b - a), c2 = a + g * (b - a), f1 = fn(c1), f2 = fn(c2);
    for (int it = 0; it < 100 && b - a > 1e-15; ++it) {
        if (f1 < f2) { b = c2; c2 = c1; f2 = f1; c1 = b - g * (b - a); f1 = fn(c1); }
        else { a = c1; c1 = c2; f1 = f2; c2 = a + g * (b - a); f2 = fn(c2); }
    }
    double s = 0.5 * (a + b);
    return {std::min(fn(s), bd), s};
}

/// Largest angle between chords and the field at their midpoints.
inline double chord_tangency(const LineField& field, const std::vector<Vec3>& pts) {
    double worst = 0;
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
        Vec3 chord = pts[i + 1] - pts[i];
        if (chord.norm() < 1e-14) continue;
        worst = std::max(worst, line_angle(chord, raw_direction(field, 0.5 * (pts[i] + pts[i + 1]))));
    }
    return worst;
}

/// Two opposite rays from one point joined into a single arc.
inline LeafArc join_rays(const LeafArc& back, const LeafArc& fwd) {
    LeafArc arc;
    arc.manifold = fwd.manifold;
    for (size_t i = back.size(); i-- > 1;) {
        arc.t.push_back(-back.t[i]);
        arc.raw.push_back(back.raw[i]);
        arc.tangent.push_back(-back.tangent[i]);
    }
    arc.base_index = arc.t.size();
    for (size_t i = 0; i < fwd.size(); ++i) {
        arc.t.push_back(fwd.t[i]);
        arc.raw.push_back(fwd.raw[i]);
        arc.tangent.push_back(fwd.tangent[i]);
    }
    return arc;
}

} // namespace detail

struct IntegrabilityOptions {
    double arc = 0.5;             ///< arc budget past x
    double torus_arc = 0.1;       ///< length of the piece inside the torus
    double lower_arc = 0.1;       ///< length of the common piece below x
    double tangency_tol = 0.1;    ///< radians, chord against E^c at its midpoint
    double unique_halflength = 0.25;
};

struct IntegrabilityReport {
    std::string verdict;  ///< "branching" or "unique"
    ChartPoint x;
    double separation = 0;         ///< end of curve (b) to curve (a)
    double integration_error = 0;  ///< from halving the steps
    double tangency_a = 0, tangency_b = 0;
    double agreement = 0;          ///< two integrations, when unique
    std::vector<Vec3> curve_a, curve_b;
};

inline nlohmann::json to_json_value(const IntegrabilityReport& r) {
    auto pts = [](const std::vector<Vec3>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& p : v) a.push_back({p(0), p(1), p(2)});
        return a;
    };
    return {{"verdict", r.verdict}, {"x", point_to_json(r.x)}, {"separation", r.separation},
            {"integration_error", r.integration_error}, {"tangency_a", r.tangency_a},
            {"tangency_b", r.tangency_b}, {"agreement", r.agreement},
            {"curve_a", pts(r.curve_a)}, {"curve_b", pts(r.curve_b)}};
}

/**
 * At a point of a torus tangent to E^c, builds (a) the leaf through x and
 * (b) the curve that follows E^c inside the torus for a while before
 * leaving. Elsewhere compares two independent integrations.
 */
inline IntegrabilityReport unique_integrability_probe(const CenterContext& ctx, const ChartPoint& x,
                                                      const IntegrabilityOptions& opt = {}) {
    const LineField& field = *ctx.field;
    const auto& m = field.manifold();
    IntegrabilityReport r;
    r.x = normalize(m, x);
    Vec3 e0 = field.direction(r.x);
    bool on_torus = ctx.theta_graph && std::abs(e0(2)) < 1e-9;

    if (!on_torus) {
        r.verdict = "unique";
        IntegrationOptions o1 = ctx.opts;
        LeafArc a = integrate_leaf(field, r.x, opt.unique_halflength, o1);
        LeafArc b;
        if (ctx.theta_graph) {
            b = detail::join_rays(theta_graph_ray(ctx, r.x, -1, opt.unique_halflength),
                                  theta_graph_ray(ctx, r.x, 1, opt.unique_halflength));
        } else {
            IntegrationOptions o2 = o1;
            o2.step = std::max(o1.step / 2, o1.h_min);
            o2.tol = o1.tol / 10;
            b = integrate_leaf(field, r.x, opt.unique_halflength, o2);
        }
        double lim = opt.unique_halflength - 0.02;
        for (const auto* p : {&a, &b}) {
            const LeafArc& other = p == &a ? b : a;
            for (size_t i = 0; i < p->size(); ++i)
                if (std::abs(p->t[i]) <= lim)
                    r.agreement = std::max(r.agreement, detail::distance_to_arc(other, p->raw[i]).first);
        }
        r.curve_a = a.raw;
        r.curve_b = b.raw;
        return r;
    }

    auto build = [&](double scale, std::vector<Vec3>& ca, std::vector<Vec3>& cb, LeafArc& up_a,
                     LeafArc& up_b, double& tan_a, double& tan_b) {
        LeafArc low = theta_graph_ray(ctx, r.x, -1, opt.lower_arc, scale);
        up_a = theta_graph_ray(ctx, r.x, 1, opt.arc, scale);
        // Continue in the direction the lower piece arrives with.
        Vec3 dir = -low.tangent[0];
        dir(2) = 0;
        dir = unit(dir);
        Vec3 x1 = r.x + opt.torus_arc * dir;
        up_b = theta_graph_ray(ctx, x1, 1, opt.arc - opt.torus_arc, scale);
        ca.clear();
        cb.clear();
        for (size_t i = low.size(); i-- > 1;) { ca.push_back(low.raw[i]); cb.push_back(low.raw[i]); }
        for (const auto& p : up_a.raw) ca.push_back(p);
        int nseg = 20;
        for (int i = 0; i < nseg; ++i) cb.push_back(r.x + (opt.torus_arc * i / nseg) * dir);
        for (const auto& p : up_b.raw) cb.push_back(p);
        tan_a = detail::chord_tangency(field, ca);
        tan_b = detail::chord_tangency(field, cb);
    };
    LeafArc ua, ub, ua2, ub2;
    std::vector<Vec3> ca2, cb2;
    double t2a, t2b;
    build(1.0, r.curve_a, r.curve_b, ua, ub, r.tangency_a, r.tangency_b);
    build(0.5, ca2, cb2, ua2, ub2, t2a, t2b);
    if (r.tangency_a > opt.tangency_tol || r.tangency_b > opt.tangency_tol)
        fail(ErrorKind::tangency, "probe curve not tangent to the center field",
             {{"tangency_a", r.tangency_a}, {"tangency_b", r.tangency_b}});
    Vec3 end_b = ub.raw_at(opt.arc - opt.torus_arc);
    r.separation = detail::distance_to_arc(ua, end_b).first;
    r.integration_error = std::max((ua.raw_at(opt.arc) - ua2.raw_at(opt.arc)).norm(),
                                   (end_b - ub2.raw_at(opt.arc - opt.torus_arc)).norm());
    r.verdict = (r.separation > 1e-3 && r.separation > 10 * r.integration_error) ? "branching" : "unique";
    return r;
}

/**
 * Winding number of v around the boundary of the box center +- half,
 * by angle summation. The boundary is refined until no step turns by more
 * than pi/2.
 */
inline int winding_number(const std::function<Vec2(const Vec2&)>& v, const Vec2& lo, const Vec2& hi,
                          int per_side = 16, int max_per_side = 4096) {
    require(per_side >= 1 && (hi - lo).minCoeff() > 0, "bad winding box");
    for (int n = per_side; n <= max_per_side; n *= 2) {
        std::array<Vec2, 4> corner{lo, Vec2(hi(0), lo(1)), hi, Vec2(lo(0), hi(1))};
        std::vector<Vec2> vals;
        vals.reserve(4 * n + 1);
        for (int s = 0; s < 4; ++s)
            for (int i = 0; i < n; ++i)
                vals.push_back(v(corner[s] + (corner[(s + 1) % 4] - corner[s]) * (double(i) / n)));
        vals.push_back(vals.front());
        double total = 0;
        bool fine = true;
        for (size_t i = 0; i + 1 < vals.size(); ++i) {
            const Vec2 &a = vals[i], &b = vals[i + 1];
            if (a.norm() == 0 || !a.allFinite())
                fail(ErrorKind::resolution, "field vanishes or is undefined on the boundary");
            double step = std::atan2(a(0) * b(1) - a(1) * b(0), a.dot(b));
            if (std::abs(step) > pi / 2) { fine = false; break; }
            total += step;
        }
        if (fine) return static_cast<int>(std::lround(total / (2 * pi)));
    }
    fail(ErrorKind::resolution, "boundary too coarse for a reliable winding number",
         {{"max_per_side", max_per_side}});
}

struct CompactLeafOptions {
    int k_budget = 6;
    double search_radius = 0.05;  ///< largest transversal half-size
    double localize_tol = 1e-10;
    double close_tol = 1e-7;
    double leaf_budget = 5;
};

struct CompactLeafResult {
    std::string verdict;  ///< "found" or "not-found"
    int k = 0;            ///< return time of g = f^2
    int index = 0;
    ChartPoint point;
    double leaf_length = 0;
    int period = 0;
    double closure_residual = 0;
    std::vector<int> tried_k, tried_index;
    std::vector<ChartPoint> leaf;
    std::string reason;
};

inline nlohmann::json to_json_value(const CompactLeafResult& r) {
    nlohmann::json leaf = nlohmann::json::array();
    for (const auto& p : r.leaf) leaf.push_back(point_to_json(p));
    return {{"verdict", r.verdict}, {"k", r.k}, {"index", r.index}, {"point", point_to_json(r.point)},
            {"leaf_length", r.leaf_length}, {"period", r.period},
            {"closure_residual", r.closure_residual}, {"tried_k", r.tried_k},
            {"tried_index", r.tried_index}, {"leaf", leaf}, {"reason", r.reason}};
}

/**
 * Fixed point of the center holonomy h = pi^c g^k (pi^c)^-1 on an su
 * transversal through x0, with g = f^2. A nonzero index of h - id on the
 * boundary is localized by quadrant bisection; the center leaf through the
 * fixed point is then closed up.
 */
inline CompactLeafResult find_compact_periodic_center_leaf(const DynamicalSystem& f, const Foliations& fol,
                                                           const ChartPoint& x0_in,
                                                           const CompactLeafOptions& opt = {}) {
    require(opt.k_budget >= 1, "k budget must be positive");
    const auto& m = f.manifold();
    ChartPoint x0 = normalize(m, x0_in);
    Vec3 es = fol.s->direction(x0), eu = fol.u->direction(x0);
    Vec3 nrm = unit(es.cross(eu));
    Eigen::Matrix2d gram;
    gram << es.dot(es), es.dot(eu), es.dot(eu), eu.dot(eu);
    auto point = [&](const Vec2& z) { return Vec3(x0 + z(0) * es + z(1) * eu); };
    auto coords = [&](const Vec3& p) {
        Vec3 d = p - x0;
        return Vec2(gram.ldlt().solve(Vec2(es.dot(d), eu.dot(d))));
    };
    // Slide along the center onto the transversal plane.
    auto project = [&](const ChartPoint& q) -> std::optional<Vec2> {
        Vec3 lifted = lift_near(m, x0, q);
        auto hit = advance_to_plane(*fol.c, lifted, nrm, x0, nrm, 1.0);
        if (!hit) return std::nullopt;
        return coords(*hit);
    };
    CenterContext ctx = center_context(fol.c);

    CompactLeafResult res;
    for (int k = 1; k <= opt.k_budget; ++k) {
        Mat3 j = f.jacobian_power(x0, 2 * k);
        double r = std::min(opt.search_radius, 0.3 / op_norm(j));
        auto disp = [&](const Vec2& z) -> Vec2 {
            auto h = project(f.iterate(point(z), 2 * k));
            if (!h) return Vec2(std::numeric_limits<double>::quiet_NaN(), 0);
            return *h - z;
        };
        int idx = 0;
        try {
            idx = winding_number(disp, Vec2(-r, -r), Vec2(r, r));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::resolution) throw;
        }
        res.tried_k.push_back(k);
        res.tried_index.push_back(idx);
        if (idx == 0) continue;

        Vec2 lo(-r, -r), hi(r, r);
        while ((hi - lo).maxCoeff() > opt.localize_tol) {
            bool moved = false;
            for (double frac : {0.5, 0.43}) {
                Vec2 sp = lo + frac * (hi - lo);
                std::array<std::pair<Vec2, Vec2>, 4> boxes{{{lo, sp},
                                                            {Vec2(sp(0), lo(1)), Vec2(hi(0), sp(1))},
                                                            {sp, hi},
                                                            {Vec2(lo(0), sp(1)), Vec2(sp(0), hi(1))}}};
                for (const auto& [blo, bhi] : boxes) {
                    int bi = 0;
                    try {
                        bi = winding_number(disp, blo, bhi, 8);
                    } catch (const Error& e) {
                        if (e.kind() != ErrorKind::resolution) throw;
                        continue;
                    }
                    if (bi != 0) { lo = blo; hi = bhi; moved = true; break; }
                }
                if (moved) break;
            }
            if (!moved)
                fail(ErrorKind::resolution, "bisection lost the fixed point",
                     {{"box", {lo(0), lo(1), hi(0), hi(1)}}});
        }
        res.k = k;
        res.index = idx;
        res.point = normalize(m, point(0.5 * (lo + hi)));
        LeafArc ray = trace_center(ctx, res.point, 1, opt.leaf_budget);
        auto len = closure_length(ray, ctx.min_return(), opt.close_tol);
        if (!len) {
            res.verdict = "not-found";
            res.reason = "leaf through the fixed point does not close within the budget";
            return res;
        }
        res.leaf_length = *len;
        res.closure_residual = (ray.raw_at(*len) - lift_near(m, ray.raw_at(*len), res.point)).norm();
        for (size_t i = 0; i < ray.size() && ray.t[i] <= *len; ++i) res.leaf.push_back(ray.chart(i));
        ChartPoint p = res.point;
        for (int jj = 1; jj <= 2 * k; ++jj) {
            p = f.forward(p);
            if (find_on_arc(ray, p, -1, opt.close_tol)) { res.period = jj; break; }
        }
        res.verdict = "found";
        res.reason = "nonzero index localized";
        return res;
    }
    res.verdict = "not-found";
    res.reason = "index zero at every tested return";
    return res;
}

enum class AnosovMode { cs_contraction, cu_expansivity };

struct AnosovReport {
    std::string verdict;
    std::vector<double> time, distance;
    double rate = 0;  ///< decay factor per unit tau
    bool monotone = true;
    std::optional<double> escape_time;
};

inline nlohmann::json to_json_value(const AnosovReport& r) {
    nlohmann::json j = {{"verdict", r.verdict}, {"time", r.time}, {"distance", r.distance},
                        {"rate", r.rate}, {"monotone", r.monotone}};
    if (r.escape_time) j["escape_time"] = *r.escape_time;
    return j;
}

/**
 * Distances d(phi_t(x), phi_h(t)(y)) along the flow recovered from f and
 * tau; h is linear on each return so that it meets f(y) at tau(x).
 */
inline AnosovReport topological_anosov_probe(const CenterContext& ctx, const DynamicalSystem& f,
                                              const ChartPoint& x, const ChartPoint& y, AnosovMode mode,
                                              double eps, double T, int substeps = 4,
                                              double budget = 3.0) {
    require(eps > 0 && T > 0 && substeps >= 1, "bad probe parameters");
    const auto& m = f.manifold();
    AnosovReport r;
    ChartPoint xn = normalize(m, x), yn = normalize(m, y);
    if (dist(m, xn, yn) < 1e-15) {
        r.verdict = "identical";
        r.time = {0.0, T};
        r.distance = {0.0, 0.0};
        return r;
    }
    if (mode == AnosovMode::cu_expansivity && locate_on_center(ctx, xn, yn, 1.0, 1e-9).found()) {
        r.verdict = "orbit-coincidence";
        return r;
    }
    auto tau_at = [&](const ChartPoint& p) {
        CenterLocation loc = locate_on_center(ctx, p, f.forward(p), budget);
        if (!loc.found())
            fail(ErrorKind::model_violation, "f(x) not on the center leaf", {{"point", point_to_json(p)}});
        return loc.nearest();
    };
    double t = 0;
    r.time.push_back(0);
    r.distance.push_back(dist(m, xn, yn));
    while (t < T) {
        double tx = tau_at(xn), ty = tau_at(yn);
        auto d_at = [&](double s) {
            return dist(m, center_move(ctx, xn, s * tx), center_move(ctx, yn, s * ty));
        };
        for (int i = 1; i <= substeps; ++i) {
            double s = double(i) / substeps;
            double d = i == substeps ? dist(m, f.forward(xn), f.forward(yn)) : d_at(s);
            if (mode == AnosovMode::cu_expansivity && d > eps) {
                // First time above eps within this substep.
                double lo = double(i - 1) / substeps, hi = s;
                for (int it = 0; it < 50; ++it) {
                    double mid = 0.5 * (lo + hi);
                    (d_at(mid) > eps ? hi : lo) = mid;
                }
                r.escape_time = t + hi * std::abs(tx);
                r.time.push_back(*r.escape_time);
                r.distance.push_back(d);
                r.verdict = "escaped";
                return r;
            }
            r.time.push_back(t + s * std::abs(tx));
            r.distance.push_back(d);
        }
        xn = f.forward(xn);
        yn = f.forward(yn);
        t += std::abs(tx);
    }
    for (size_t i = 0; i + 1 < r.distance.size(); ++i)
        if (r.distance[i + 1] > r.distance[i] * (1 + 1e-9) + 1e-15) r.monotone = false;
    r.rate = std::pow(r.distance.back() / r.distance.front(), 1.0 / t);
    if (mode == AnosovMode::cs_contraction)
        r.verdict = (r.monotone && r.rate < 1) ? "contracting" : "not-contracting";
    else
        r.verdict = "no-escape";
    return r;
}

namespace detail {

/// Distance from q to a plaque via a biquadratic patch on the nearest 3x3
/// nodes, which removes the bilinear sag.
inline std::pair<double, bool> plaque_distance(const Plaque& pl, const Vec3& q) {
    auto pr = pl.project(q);
    auto nearest = [](const std::vector<double>& g, double s) {
        size_t best = 0;
        for (size_t i = 1; i < g.size(); ++i)
            if (std::abs(g[i] - s) < std::abs(g[best] - s)) best = i;
        return std::clamp<size_t>(best, 1, g.size() - 2);
    };
    size_t i0 = nearest(pl.u, pr.u), j0 = nearest(pl.v, pr.v);
    auto basis = [](const double* g, double s, double* l, double* dl) {
        for (int a = 0; a < 3; ++a) {
            double val = 1, der = 0;
            for (int b = 0; b < 3; ++b) {
                if (b == a) continue;
                double den = g[a] - g[b];
                double term = 1;
                for (int c = 0; c < 3; ++c)
                    if (c != a && c != b) term *= (s - g[c]) / (g[a] - g[c]);
                der += term / den;
                val *= (s - g[b]) / den;
            }
            l[a] = val;
            dl[a] = der;
        }
    };
    double a = pr.u, b = pr.v;
    Vec3 p, pu, pv;
    for (int it = 0; it < 30; ++it) {
        double lu[3], dlu[3], lv[3], dlv[3];
        basis(&pl.u[i0 - 1], a, lu, dlu);
        basis(&pl.v[j0 - 1], b, lv, dlv);
        p.setZero(); pu.setZero(); pv.setZero();
        for (int x = 0; x < 3; ++x)
            for (int y = 0; y < 3; ++y) {
                Vec3 nd = pl.node(i0 - 1 + x, j0 - 1 + y);
                p += lu[x] * lv[y] * nd;
                pu += dlu[x] * lv[y] * nd;
                pv += lu[x] * dlv[y] * nd;
            }
        Vec3 rr = q - p;
        Eigen::Matrix2d jtj;
        jtj << pu.dot(pu), pu.dot(pv), pu.dot(pv), pv.dot(pv);
        Vec2 d = jtj.ldlt().solve(Vec2(pu.dot(rr), pv.dot(rr)));
        a += d(0);
        b += d(1);
        if (d.norm() < 1e-15) break;
    }
    bool inside = a >= pl.u.front() - 1e-9 && a <= pl.u.back() + 1e-9 &&
                  b >= pl.v.front() - 1e-9 && b <= pl.v.back() + 1e-9;
    return {(q - p).norm(), inside};
}

} // namespace detail

struct SaturationOptions {
    double delta = 0.02;
    double tol = 1e-6;
    double plaque_step = 2.5e-3;
    double arc_step = 5e-3;
};

struct SaturationReport {
    std::string verdict;  ///< "coherent" or "incoherence-witness"
    double max_s_offset = 0, max_u_offset = 0;
    double tolerance = 0;
    int checked = 0;
    std::vector<ChartPoint> witnesses;
};

inline nlohmann::json to_json_value(const SaturationReport& r) {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& p : r.witnesses) w.push_back(point_to_json(p));
    return {{"verdict", r.verdict}, {"max_s_offset", r.max_s_offset},
            {"max_u_offset", r.max_u_offset}, {"tolerance", r.tolerance},
            {"checked", r.checked}, {"witnesses", w}};
}

/// W^c_delta(y) against W^s_2delta(W^c_2delta(x)) for y in W^s_delta(x), and
/// the same with u.
inline SaturationReport coherence_saturation_check(const Foliations& fol, const std::vector<ChartPoint>& samples,
                                                   const SaturationOptions& opt = {}) {
    require(opt.delta > 0 && opt.tol > 0, "delta and tolerance must be positive");
    require(!samples.empty(), "no samples");
    const auto& m = fol.c->manifold();
    SaturationReport r;
    r.tolerance = opt.tol;
    IntegrationOptions po, ao;
    po.step = opt.plaque_step;
    ao.step = opt.arc_step;
    for (const auto& xs : samples) {
        ChartPoint x = normalize(m, xs);
        for (Bundle b : {Bundle::stable, Bundle::unstable}) {
            const LineField& tr = fol[b];
            Plaque pl = make_plaque(*fol.c, tr, x, 2 * opt.delta, 2 * opt.delta, po);
            LeafArc through = integrate_leaf(tr, x, opt.delta, ao);
            double worst = 0;
            for (double s : {-opt.delta, -opt.delta / 2, opt.delta / 2, opt.delta}) {
                Vec3 y = through.raw_at(s);
                LeafArc c = integrate_leaf(*fol.c, normalize(m, y), opt.delta, ao);
                for (size_t i = 0; i < c.size(); ++i) {
                    auto [d, inside] = detail::plaque_distance(pl, lift_near(m, y, c.chart(i)));
                    if (!inside) d = std::max(d, opt.tol * 10);
                    worst = std::max(worst, d);
                }
                ++r.checked;
            }
            double& slot = b == Bundle::stable ? r.max_s_offset : r.max_u_offset;
            slot = std::max(slot, worst);
            if (worst > opt.tol) r.witnesses.push_back(x);
        }
    }
    r.verdict = r.witnesses.empty() ? "coherent" : "incoherence-witness";
    return r;
}

struct CompactnessReport {
    std::string verdict;  ///< "uniformly-compact" or "non-compact-witness"
    double max_length = 0;
    double budget = 0;
    std::vector<double> lengths;
    std::vector<ChartPoint> witnesses;
};

inline nlohmann::json to_json_value(const CompactnessReport& r) {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& p : r.witnesses) w.push_back(point_to_json(p));
    return {{"verdict", r.verdict}, {"max_length", r.max_length}, {"budget", r.budget},
            {"lengths", r.lengths}, {"witnesses", w}};
}

/// Traces each sampled center leaf until it closes with matching tangent or
/// the budget runs out.
inline CompactnessReport uniform_compactness_check(const CenterContext& ctx, const std::vector<ChartPoint>& samples,
                                                   double budget = 5.0, double tol = 1e-7) {
    require(budget > 0 && tol > 0, "budget and tolerance must be positive");
    CompactnessReport r;
    r.budget = budget;
    for (const auto& x : samples) {
        LeafArc ray = trace_center(ctx, x, 1, budget);
        auto len = ray.truncated ? std::nullopt : closure_length(ray, ctx.min_return(), tol);
        if (len) {
            r.lengths.push_back(*len);
            r.max_length = std::max(r.max_length, *len);
        } else {
            r.witnesses.push_back(normalize(ctx.field->manifold(), x));
        }
    }
    r.verdict = r.witnesses.empty() ? "uniformly-compact" : "non-compact-witness";
    return r;
}

} // namespace dafkit
