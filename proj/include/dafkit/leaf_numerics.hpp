#pragma once

// Integration of the s, c and u line fields, local intersections and
// holonomies. Curves are stored as continuous lifts ("raw" coordinates) so
// that they can cross the gluing of the fundamental domain.

#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "cone_hyperbolicity.hpp"

namespace dafkit {

/// Unoriented unit line field, in chart frames.
class LineField {
public:
    virtual ~LineField() = default;
    virtual const ManifoldDescriptor& manifold() const = 0;
    virtual Vec3 direction(const ChartPoint& p) const = 0;
};

class ConstantLineField final : public LineField {
public:
    ConstantLineField(ManifoldDescriptor m, const Vec3& v) : m_(std::move(m)), v_(unit(v)) {}
    const ManifoldDescriptor& manifold() const override { return m_; }
    Vec3 direction(const ChartPoint&) const override { return v_; }

private:
    ManifoldDescriptor m_;
    Vec3 v_;
};

/// Estimator-backed field at a fixed depth, so that it is smooth in p. The
/// default depth is calibrated on a 3^3 probe grid to residual 1e-12.
class SplittingLineField final : public LineField {
public:
    SplittingLineField(SplittingEstimator est, Bundle b, int depth = 0)
        : est_(std::move(est)), b_(b), depth_(depth) {
        if (depth_ <= 0)
            depth_ = est_.calibrate_depth(domain_grid(est_.system().manifold(), 3, 0.1), 1e-12);
    }
    const ManifoldDescriptor& manifold() const override { return est_.system().manifold(); }
    Vec3 direction(const ChartPoint& p) const override { return est_.line(p, b_, depth_); }
    int depth() const { return depth_; }

private:
    SplittingEstimator est_;
    Bundle b_;
    int depth_;
};

/// Line field of one bundle of f. Linear catalog systems use their exact
/// eigen directions; everything else goes through the estimator.
inline std::shared_ptr<const LineField> make_line_field(const DynamicalSystem& f, Bundle b) {
    std::string name = f.name();
    if (name == "skew" || name == "suspension") {
        IMat2 a = matrix_from_json(f.recipe()["params"].value("matrix", matrix_to_json(default_cat_matrix())));
        HyperbolicData h = hyperbolic_data(a);
        Vec3 v = b == Bundle::center ? Vec3(0, 0, 1)
                 : b == Bundle::stable ? Vec3(h.es(0), h.es(1), 0)
                                       : Vec3(h.eu(0), h.eu(1), 0);
        return std::make_shared<ConstantLineField>(f.manifold(), v);
    }
    return std::make_shared<SplittingLineField>(SplittingEstimator(f), b);
}

struct Foliations {
    std::shared_ptr<const LineField> s, c, u;
    const LineField& operator[](Bundle b) const {
        return b == Bundle::stable ? *s : b == Bundle::center ? *c : *u;
    }
};

inline Foliations foliations(const DynamicalSystem& f) {
    return {make_line_field(f, Bundle::stable), make_line_field(f, Bundle::center),
            make_line_field(f, Bundle::unstable)};
}

struct IntegrationOptions {
    double step = 1e-2;         ///< output spacing in arc length
    double tol = 1e-12;         ///< local error per unit length
    double min_substep = 1e-14;
    double max_turn = 0.5;      ///< max angle between stage directions in one substep
    int max_deck = 60;          ///< chart validity: largest deck power along the lift
    double h_min = 1e-4, h_max = 1e-2;
};

/// Follows an oriented line field in raw coordinates with step-doubling RK4.
class Tracer {
public:
    Tracer(const LineField& field, const Vec3& raw, const Vec3& ref, IntegrationOptions opts)
        : field_(field), pos(raw), opts_(opts) {
        tangent = direction(raw, ref);
        h_ = std::min(opts_.step, opts_.h_max);
    }

    Vec3 direction(const Vec3& raw, const Vec3& ref) const {
        const auto& m = field_.manifold();
        Reduced r = reduce(m, raw);
        if (std::abs(r.k) > opts_.max_deck) throw ChartLimit{};

        Vec3 e = field_.direction(r.chart);
        if (r.k != 0) e = unit(Vec3(deck_linear(m, r.k).inverse() * e));
        return align(e, ref);
    }

    /// One RK4 substep; nullopt when the field turns too fast.
    std::optional<Vec3> rk4(const Vec3& r, const Vec3& ref, double h) const {
        double ct = std::cos(opts_.max_turn);
        Vec3 k1 = direction(r, ref);
        Vec3 k2 = direction(r + 0.5 * h * k1, k1);
        Vec3 k3 = direction(r + 0.5 * h * k2, k2);
        Vec3 k4 = direction(r + h * k3, k3);
        if (k1.dot(ref) < ct || k2.dot(k1) < ct || k3.dot(k2) < ct || k4.dot(k3) < ct)
            return std::nullopt;
        return Vec3(r + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4));
    }

    /// Error-controlled substep of length at most hmax. Returns the length
    /// actually taken.
    double substep(double hmax) {
        double h = std::min(h_, hmax);
        bool clamped = hmax < h_;
        for (;;) {
            if (h < opts_.min_substep)
                fail(ErrorKind::cone_exit, "line field turns faster than the integrator resolves");
            auto big = rk4(pos, tangent, h);
            std::optional<Vec3> half, two;
            if (big) half = rk4(pos, tangent, h / 2);
            if (half) two = rk4(*half, direction(*half, tangent), h / 2);
            if (!two) {
                h /= 4;
                clamped = false;
                continue;
            }
            double err = (*two - *big).norm() / 15;
            double allowed = opts_.tol * h + 1e-16;
            if (err <= allowed) {
                pos = *two;
                tangent = direction(pos, tangent);
                double grow = err > 0 ? 0.9 * std::pow(allowed / err, 0.2) : 4.0;
                if (!clamped) h_ = std::min(h * std::clamp(grow, 0.2, 4.0), opts_.h_max);
                return h;
            }
            h *= std::clamp(0.9 * std::pow(allowed / err, 0.2), 0.1, 0.9);
            clamped = false;
        }
    }

    /// Advances exactly `len` in arc length.
    void advance(double len) {
        double done = 0;
        while (done < len) {
            double rest = len - done;
            if (rest < 1e-12) {
                // Roundoff remainder of the accumulated substeps.
                pos += rest * tangent;
                break;
            }
            double h = substep(rest);
            done = (h >= rest) ? len : done + h;
        }
    }

    /// Advances until g changes sign or `max_len` is used up; refines the
    /// crossing by bisection on a single RK4 substep. Returns the arc length
    /// travelled, or nullopt if no crossing.
    template <class G>
    std::optional<double> advance_until(G&& g, double max_len) {
        double done = 0;
        double g0 = g(pos);
        if (g0 == 0) return 0.0;
        while (done < max_len) {
            Vec3 start = pos, ref = tangent;
            double hstep = substep(max_len - done);
            double g1 = g(pos);
            if ((g0 < 0) != (g1 < 0) || g1 == 0) {
                // Illinois iteration on the length of a single RK4 substep.
                double lo = 0, hi = hstep, glo = g0, ghi = g1, mid = hstep;
                Vec3 best = pos;
                for (int it = 0; it < 60 && ghi != 0; ++it) {
                    mid = (glo != ghi) ? hi - ghi * (hi - lo) / (ghi - glo) : 0.5 * (lo + hi);
                    if (!(mid > lo && mid < hi)) mid = 0.5 * (lo + hi);
                    auto p = rk4(start, ref, mid);
                    if (!p) break;
                    best = *p;
                    double gm = g(*p);
                    if (std::abs(gm) < 1e-16 || hi - lo < 1e-17) break;
                    if ((gm < 0) == (glo < 0)) { lo = mid; glo = gm; ghi *= 0.5; }
                    else { hi = mid; ghi = gm; glo *= 0.5; }
                }
                if (ghi == 0) mid = hi;
                pos = best;
                tangent = direction(pos, ref);
                return done + mid;
            }
            g0 = g1;
            done += hstep;
        }
        return std::nullopt;
    }

    struct ChartLimit {};

    Vec3 pos;
    Vec3 tangent;

private:
    const LineField& field_;
    IntegrationOptions opts_;
    double h_;
};

/// Sampled leaf arc, parameterized by signed arc length from its base point.
struct LeafArc {
    ManifoldDescriptor manifold;
    Bundle bundle = Bundle::center;
    std::vector<double> t;
    std::vector<Vec3> raw;      ///< continuous lift
    std::vector<Vec3> tangent;  ///< unit, in the raw frame
    size_t base_index = 0;
    bool truncated = false;

    size_t size() const { return t.size(); }
    double t_min() const { return t.front(); }
    double t_max() const { return t.back(); }
    double length() const { return t.back() - t.front(); }
    ChartPoint chart(size_t i) const { return normalize(manifold, raw[i]); }
    Vec3 chart_tangent(size_t i) const {
        return unit(Vec3(deck_linear(manifold, reduce(manifold, raw[i]).k) * tangent[i]));
    }
    std::vector<ChartPoint> chart_points() const {
        std::vector<ChartPoint> out;
        out.reserve(size());
        for (size_t i = 0; i < size(); ++i) out.push_back(chart(i));
        return out;
    }

    size_t segment(double s) const {
        if (s <= t.front()) return 0;
        if (s >= t.back()) return size() - 2;
        size_t i = std::upper_bound(t.begin(), t.end(), s) - t.begin();
        return i - 1;
    }
    /// Cubic Hermite interpolation of the lift.
    Vec3 raw_at(double s) const {
        size_t i = segment(s);
        double h = t[i + 1] - t[i];
        double u = (s - t[i]) / h;
        double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
        double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
        return h00 * raw[i] + h10 * h * tangent[i] + h01 * raw[i + 1] + h11 * h * tangent[i + 1];
    }
    Vec3 tangent_at(double s) const {
        size_t i = segment(s);
        double h = t[i + 1] - t[i];
        double u = (s - t[i]) / h;
        double d00 = 6 * u * u - 6 * u, d10 = 3 * u * u - 4 * u + 1;
        double d01 = -6 * u * u + 6 * u, d11 = 3 * u * u - 2 * u;
        return unit(Vec3(d00 / h * raw[i] + d10 * tangent[i] + d01 / h * raw[i + 1] + d11 * tangent[i + 1]));
    }
    ChartPoint chart_at(double s) const { return normalize(manifold, raw_at(s)); }
};

namespace detail {

inline void trace_half(const LineField& field, const Vec3& start, const Vec3& dir, double len,
                       const IntegrationOptions& o, std::vector<Vec3>& pts,
                       std::vector<Vec3>& tans, bool& truncated) {
    Tracer tr(field, start, dir, o);
    int n = static_cast<int>(std::ceil(len / o.step - 1e-9));
    try {
        for (int i = 0; i < n; ++i) {
            double goal = (i + 1 == n) ? len - i * o.step : o.step;
            if (goal <= 0) break;
            tr.advance(goal);
            pts.push_back(tr.pos);
            tans.push_back(tr.tangent);
        }
    } catch (const Tracer::ChartLimit&) {
        truncated = true;
    }
}

} // namespace detail

/**
 * Leaf of `field` through x, sampled every opts.step for `halflength` in
 * each direction. orientation = -1 flips the initial direction; a reference
 * vector (chart frame of x) fixes the sign of the field at x first.
 */
inline LeafArc integrate_leaf(const LineField& field, const ChartPoint& x, double halflength,
                              const IntegrationOptions& opts = {}, int orientation = 1,
                              std::optional<Vec3> reference = std::nullopt,
                              Bundle bundle = Bundle::center) {
    require(opts.step >= opts.h_min && opts.step <= opts.h_max, "step outside [h_min, h_max]");
    require(halflength >= 0 && std::isfinite(halflength), "halflength must be non-negative");
    require(orientation == 1 || orientation == -1, "orientation must be +-1");
    const auto& m = field.manifold();
    ChartPoint x0 = normalize(m, x);
    Vec3 e0 = field.direction(x0);
    if (reference) e0 = align(e0, *reference);
    if (orientation < 0) e0 = -e0;

    std::vector<Vec3> fp, ft, bp, bt;
    bool trunc = false;
    detail::trace_half(field, x0, e0, halflength, opts, fp, ft, trunc);
    detail::trace_half(field, x0, -e0, halflength, opts, bp, bt, trunc);

    LeafArc arc;
    arc.manifold = m;
    arc.bundle = bundle;
    arc.truncated = trunc;
    // A truncated side stops short of its final, non-uniform sample.
    const size_t full = static_cast<size_t>(std::ceil(halflength / opts.step - 1e-9));
    auto param = [&](size_t i, size_t) {
        // Same formula on both sides keeps reversal exact.
        return (i + 1 == full) ? halflength : (i + 1) * opts.step;
    };
    for (size_t i = bp.size(); i-- > 0;) {
        arc.t.push_back(-param(i, bp.size()));
        arc.raw.push_back(bp[i]);
        arc.tangent.push_back(-bt[i]);
    }
    arc.base_index = arc.t.size();
    arc.t.push_back(0.0);
    arc.raw.push_back(x0);
    arc.tangent.push_back(e0);
    for (size_t i = 0; i < fp.size(); ++i) {
        arc.t.push_back(param(i, fp.size()));
        arc.raw.push_back(fp[i]);
        arc.tangent.push_back(ft[i]);
    }
    // Cone check: chords must follow the field.
    for (size_t i = 0; i + 1 < arc.size(); ++i) {
        Vec3 chord = arc.raw[i + 1] - arc.raw[i];
        if (chord.norm() > 0 && vector_angle(chord, arc.tangent[i]) > opts.max_turn)
            fail(ErrorKind::cone_exit, "leaf left its cone", {{"index", i}});
    }
    return arc;
}

/// Forward-only leaf from x of length `len`, base at index 0.
inline LeafArc integrate_ray(const LineField& field, const ChartPoint& x, double len,
                             const IntegrationOptions& opts = {}, const Vec3* reference = nullptr,
                             Bundle bundle = Bundle::center) {
    require(opts.step >= opts.h_min && opts.step <= opts.h_max, "step outside [h_min, h_max]");
    const auto& m = field.manifold();
    ChartPoint x0 = normalize(m, x);
    Vec3 e0 = field.direction(x0);
    if (reference) e0 = align(e0, *reference);
    std::vector<Vec3> fp, ft;
    bool trunc = false;
    detail::trace_half(field, x0, e0, len, opts, fp, ft, trunc);
    const size_t full = static_cast<size_t>(std::ceil(len / opts.step - 1e-9));
    LeafArc arc;
    arc.manifold = m;
    arc.bundle = bundle;
    arc.truncated = trunc;
    arc.t.push_back(0);
    arc.raw.push_back(x0);
    arc.tangent.push_back(e0);
    for (size_t i = 0; i < fp.size(); ++i) {
        arc.t.push_back(i + 1 == full ? len : (i + 1) * opts.step);
        arc.raw.push_back(fp[i]);
        arc.tangent.push_back(ft[i]);
    }
    return arc;
}

/// "index,t,x,y,theta,tx,ty,ttheta" with chart coordinates, 17 digits, LF.
inline void write_csv(const LeafArc& arc, std::ostream& os) {
    os << "index,t,x,y,theta,tx,ty,ttheta\n";
    std::ostringstream line;
    line << std::setprecision(17);
    for (size_t i = 0; i < arc.size(); ++i) {
        ChartPoint p = arc.chart(i);
        Vec3 v = arc.chart_tangent(i);
        line.str("");
        line << i << ',' << arc.t[i] << ',' << p(0) << ',' << p(1) << ',' << p(2) << ',' << v(0)
             << ',' << v(1) << ',' << v(2) << '\n';
        os << line.str();
    }
}

/// Distance from chart point p to the polyline through `pts` (chart points).
inline double point_polyline_distance(const ManifoldDescriptor& m, const ChartPoint& p,
                                      const std::vector<ChartPoint>& pts) {
    double best = std::numeric_limits<double>::infinity();
    if (pts.size() == 1) return dist(m, p, pts[0]);
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
        Vec3 a = displacement(m, p, pts[i]);
        Vec3 b = a + displacement(m, pts[i], pts[i + 1]);
        Vec3 ab = b - a;
        double l2 = ab.squaredNorm();
        double s = l2 > 0 ? std::clamp(-a.dot(ab) / l2, 0.0, 1.0) : 0.0;
        best = std::min(best, (a + s * ab).norm());
    }
    return best;
}

/// Hausdorff distance between two sampled curves, using point-to-polyline
/// distances so that different samplings of one curve compare as equal.
inline double curve_hausdorff(const ManifoldDescriptor& m, const std::vector<ChartPoint>& a,
                              const std::vector<ChartPoint>& b) {
    require(!a.empty() && !b.empty(), "empty curve");
    double h = 0;
    for (const auto& p : a) h = std::max(h, point_polyline_distance(m, p, b));
    for (const auto& q : b) h = std::max(h, point_polyline_distance(m, q, a));
    return h;
}

/// 2-D sample of a local plaque on a (u, v) parameter grid, stored as a lift.
struct Plaque {
    ManifoldDescriptor manifold;
    std::vector<double> u, v;
    std::vector<Vec3> raw;  ///< raw[i * v.size() + j]

    Vec3 node(size_t i, size_t j) const { return raw[i * v.size() + j]; }

    static size_t cell(const std::vector<double>& g, double s) {
        if (s <= g.front()) return 0;
        if (s >= g.back()) return g.size() - 2;
        return std::upper_bound(g.begin(), g.end(), s) - g.begin() - 1;
    }
    Vec3 at(double a, double b) const {
        size_t i = cell(u, a), j = cell(v, b);
        double s = (a - u[i]) / (u[i + 1] - u[i]), r = (b - v[j]) / (v[j + 1] - v[j]);
        return (1 - s) * (1 - r) * node(i, j) + s * (1 - r) * node(i + 1, j) +
               (1 - s) * r * node(i, j + 1) + s * r * node(i + 1, j + 1);
    }
    std::pair<Vec3, Vec3> partials(double a, double b) const {
        size_t i = cell(u, a), j = cell(v, b);
        double du = u[i + 1] - u[i], dv = v[j + 1] - v[j];
        double s = (a - u[i]) / du, r = (b - v[j]) / dv;
        Vec3 pu = ((1 - r) * (node(i + 1, j) - node(i, j)) + r * (node(i + 1, j + 1) - node(i, j + 1))) / du;
        Vec3 pv = ((1 - s) * (node(i, j + 1) - node(i, j)) + s * (node(i + 1, j + 1) - node(i + 1, j))) / dv;
        return {pu, pv};
    }

    struct Projection {
        double u = 0, v = 0;
        double offset = 0;  ///< signed distance along the unit normal
        bool inside = false;
        Vec3 foot;
    };

    /// Closest point to a raw point q (expressed near the plaque lift).
    Projection project(const Vec3& q) const {
        // Start from the nearest node.
        size_t bi = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < raw.size(); ++k) {
            double d = (raw[k] - q).squaredNorm();
            if (d < bd) { bd = d; bi = k; }
        }
        double a = u[bi / v.size()], b = v[bi % v.size()];
        for (int it = 0; it < 50; ++it) {
            auto [pu, pv] = partials(a, b);
            Vec3 r = q - at(a, b);
            Eigen::Matrix2d jtj;
            jtj << pu.dot(pu), pu.dot(pv), pu.dot(pv), pv.dot(pv);
            Vec2 rhs(pu.dot(r), pv.dot(r));
            Vec2 d = jtj.ldlt().solve(rhs);
            double lo_u = u.front() - 0.5 * (u[1] - u[0]), hi_u = u.back() + 0.5 * (u[1] - u[0]);
            double lo_v = v.front() - 0.5 * (v[1] - v[0]), hi_v = v.back() + 0.5 * (v[1] - v[0]);
            a = std::clamp(a + d(0), lo_u, hi_u);
            b = std::clamp(b + d(1), lo_v, hi_v);
            if (d.norm() < 1e-16) break;
        }
        Projection p;
        p.u = a;
        p.v = b;
        p.foot = at(a, b);
        auto [pu, pv] = partials(a, b);
        p.offset = (q - p.foot).dot(unit(pu.cross(pv)));
        double eu = 1e-9 * (u.back() - u.front()), ev = 1e-9 * (v.back() - v.front());
        p.inside = a >= u.front() - eu && a <= u.back() + eu && b >= v.front() - ev && b <= v.back() + ev;
        return p;
    }
};

/// Flat plaque x + a*da + b*db over [-ra, ra] x [-rb, rb].
inline Plaque flat_plaque(const ManifoldDescriptor& m, const ChartPoint& x, const Vec3& da,
                          const Vec3& db, double ra, double rb, int n = 8) {
    Plaque p;
    p.manifold = m;
    for (int i = 0; i <= n; ++i) p.u.push_back(-ra + 2 * ra * i / n);
    for (int j = 0; j <= n; ++j) p.v.push_back(-rb + 2 * rb * j / n);
    for (double a : p.u)
        for (double b : p.v) p.raw.push_back(x + a * unit(da) + b * unit(db));
    return p;
}

/**
 * Plaque swept by `b`-arcs through the points of the `a`-arc through x. The
 * u parameter is arc length along the a-arc, v along the b-arcs.
 */
inline Plaque make_plaque(const LineField& fa, const LineField& fb, const ChartPoint& x, double ra,
                          double rb, const IntegrationOptions& opts = {}) {
    const auto& m = fa.manifold();
    LeafArc spine = integrate_leaf(fa, x, ra, opts);
    Plaque p;
    p.manifold = m;
    p.u = spine.t;
    std::optional<Vec3> ref;
    for (size_t i = 0; i < spine.size(); ++i) {
        Reduced fr = reduce(m, spine.raw[i]);
        Vec3 ref_chart = ref ? Vec3(deck_linear(m, fr.k) * *ref) : fb.direction(fr.chart);
        LeafArc rib = integrate_leaf(fb, fr.chart, rb, opts, 1, ref_chart);
        if (p.v.empty()) p.v = rib.t;
        require(rib.size() == p.v.size(), "plaque ribs of unequal length");
        for (size_t j = 0; j < rib.size(); ++j) p.raw.push_back(unreduce(m, fr, rib.raw[j]));
        ref = unit(Vec3(deck_linear(m, fr.k).inverse() * rib.tangent[rib.base_index]));
    }
    return p;
}

struct Intersection {
    ChartPoint point;
    double t = 0;                 ///< parameter on the arc
    double u = 0, v = 0;          ///< parameters on the plaque (or second arc)
    double residual = 0;          ///< distance between the two objects at the point
};

/// Unique transverse intersection of an arc with a plaque.
inline Intersection local_intersection(const LeafArc& arc, const Plaque& plaque) {
    const auto& m = arc.manifold;
    Vec3 anchor = plaque.raw[plaque.raw.size() / 2];
    auto offset = [&](double s) {
        Vec3 q = lift_near(m, anchor, arc.chart_at(s));
        return plaque.project(q);
    };
    std::vector<std::pair<double, Plaque::Projection>> samples;
    for (double s : arc.t) samples.emplace_back(s, offset(s));
    std::vector<size_t> brackets;
    for (size_t i = 0; i + 1 < samples.size(); ++i) {
        const auto& a = samples[i].second;
        const auto& b = samples[i + 1].second;
        if (!a.inside || !b.inside) continue;
        if (a.offset == 0 || (a.offset < 0) != (b.offset < 0)) {
            if (b.offset == 0 && i + 2 < samples.size()) continue;
            brackets.push_back(i);
        }
    }
    if (brackets.empty()) fail(ErrorKind::no_intersection, "arc does not cross the plaque");
    if (brackets.size() > 1)
        fail(ErrorKind::ambiguity, "arc crosses the plaque more than once",
             {{"crossings", brackets.size()}});
    size_t i = brackets.front();
    double lo = samples[i].first, hi = samples[i + 1].first;
    double flo = samples[i].second.offset;
    Plaque::Projection pr = samples[i].second;
    double s = lo;
    if (flo != 0) {
        double fhi = samples[i + 1].second.offset;
        for (int it = 0; it < 200; ++it) {
            // Regula falsi with Illinois damping, then bisection fallback.
            s = (fhi != flo) ? hi - fhi * (hi - lo) / (fhi - flo) : 0.5 * (lo + hi);
            if (!(s > lo && s < hi)) s = 0.5 * (lo + hi);
            pr = offset(s);
            if (pr.offset == 0 || hi - lo < 1e-16) break;
            if ((pr.offset < 0) == (flo < 0)) { lo = s; flo = pr.offset; fhi *= 0.5; }
            else { hi = s; fhi = pr.offset; flo *= 0.5; }
            if (std::abs(pr.offset) < 1e-15) break;
        }
    }
    Intersection out;
    out.t = s;
    out.u = pr.u;
    out.v = pr.v;
    out.point = normalize(m, pr.foot);
    out.residual = std::abs(pr.offset);
    return out;
}

/// Unique intersection of two arcs (closest approach below `tol`).
inline Intersection local_intersection(const LeafArc& a, const LeafArc& b, double tol = 1e-9) {
    const auto& m = a.manifold;
    // Candidate segment pairs whose sampled distance is below the spacing.
    auto spacing = [](const LeafArc& c) {
        double h = 0;
        for (size_t i = 0; i + 1 < c.size(); ++i) h = std::max(h, c.t[i + 1] - c.t[i]);
        return h;
    };
    double reach = spacing(a) + spacing(b);
    std::vector<std::pair<size_t, size_t>> cand;
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < b.size(); ++j)
            if (dist(m, a.chart(i), b.chart(j)) < reach) cand.emplace_back(i, j);
    if (cand.empty()) fail(ErrorKind::no_intersection, "arcs do not meet");
    std::vector<Intersection> found;
    for (auto [i, j] : cand) {
        double s = a.t[i], r = b.t[j];
        for (int it = 0; it < 60; ++it) {
            Vec3 pa = a.raw_at(s);
            Vec3 pb = lift_near(m, pa, b.chart_at(r));
            Vec3 ta = a.tangent_at(s), tb = b.tangent_at(r);
            Vec3 braw = b.raw_at(r);
            tb = unit(Vec3(frame_change_to_lift(m, pb) * deck_linear(m, reduce(m, braw).k) * tb));
            Vec3 d = pa - pb;
            Eigen::Matrix2d jtj;
            jtj << ta.dot(ta), -ta.dot(tb), -ta.dot(tb), tb.dot(tb);
            Vec2 rhs(-ta.dot(d), tb.dot(d));
            if (std::abs(jtj.determinant()) < 1e-14) break;
            Vec2 step = jtj.inverse() * rhs;
            s = std::clamp(s + step(0), a.t_min(), a.t_max());
            r = std::clamp(r + step(1), b.t_min(), b.t_max());
            if (step.norm() < 1e-16) break;
        }
        double res = dist(m, a.chart_at(s), b.chart_at(r));
        if (res > tol) continue;
        bool dup = false;
        for (const auto& f : found)
            if (std::abs(f.t - s) < reach) dup = true;
        if (!dup) found.push_back({a.chart_at(s), s, r, 0, res});
    }
    if (found.empty()) fail(ErrorKind::no_intersection, "arcs do not meet");
    if (found.size() > 1) fail(ErrorKind::ambiguity, "arcs meet more than once");
    return found.front();
}

/// Advances the leaf of `field` from raw point `start` (oriented along
/// `dir`) until it crosses the plane through `pt` with normal `n`.
inline std::optional<Vec3> advance_to_plane(const LineField& field, const Vec3& start,
                                            const Vec3& dir, const Vec3& pt, const Vec3& n,
                                            double max_len, const IntegrationOptions& opts = {}) {
    Tracer tr(field, start, dir, opts);
    auto g = [&](const Vec3& r) { return (r - pt).dot(n); };
    // The plane may sit behind the start point.
    Vec3 d = g(start) > 0 ? Vec3(-tr.tangent) : tr.tangent;
    if (d.dot(n) < 0 && g(start) < 0) d = -d;
    try {
        Tracer tr2(field, start, d, opts);
        if (!tr2.advance_until(g, max_len)) return std::nullopt;
        return tr2.pos;
    } catch (const Tracer::ChartLimit&) {
        return std::nullopt;
    }
}

struct Transport {
    ChartPoint image;
    std::vector<ChartPoint> path;
    double max_distance = 0;  ///< largest distance to the guiding path
};

/**
 * Holonomy of the foliation tangent to `field` along the leaf path gamma
 * (from gamma(t_min) to gamma(t_max)), from the transversal at the start to
 * the transversal at the end. Transversals are planes normal to gamma.
 */
inline Transport holonomy_transport(const LineField& field, const LeafArc& gamma, const ChartPoint& z,
                                    double delta = 0.1, const IntegrationOptions& opts = {}) {
    const auto& m = gamma.manifold;
    require(gamma.size() >= 2, "path too short");
    Vec3 cur = lift_near(m, gamma.raw.front(), z);
    if (dist(m, normalize(m, cur), gamma.chart(0)) > delta)
        fail(ErrorKind::holonomy_undefined, "start point outside the transversal disc");
    Transport out;
    out.path.push_back(normalize(m, cur));
    for (size_t i = 1; i < gamma.size(); ++i) {
        Vec3 pt = gamma.raw[i], n = gamma.tangent[i];
        double guess = gamma.t[i] - gamma.t[i - 1];
        auto next = advance_to_plane(field, cur, gamma.tangent[i - 1], pt, n, 4 * guess + delta, opts);
        if (!next) fail(ErrorKind::holonomy_undefined, "leaf misses the next transversal", {{"index", i}});
        cur = *next;
        double d = (cur - pt).norm();
        out.max_distance = std::max(out.max_distance, d);
        if (d > delta) fail(ErrorKind::holonomy_undefined, "leaf left the tube", {{"index", i}});
        out.path.push_back(normalize(m, cur));
    }
    out.image = out.path.back();
    return out;
}

struct SuTransport {
    std::vector<ChartPoint> image;  ///< points on W^c(x)
    std::vector<double> param;      ///< center parameters on W^c(x)
    double max_residual = 0;
};

/**
 * su-holonomy of the center segment eta (near y) onto W^c(x): each point
 * follows its unstable arc to the plaque W^s(W^c(x)), then its stable rib
 * down to W^c(x).
 */
inline SuTransport hsu_transport(const Foliations& fol, const ChartPoint& x, const LeafArc& eta,
                                 double center_reach, double width = 0.05,
                                 const IntegrationOptions& opts = {}) {
    Plaque sigma = make_plaque(*fol.c, *fol.s, x, center_reach, width, opts);
    SuTransport out;
    size_t v0 = 0;
    for (size_t j = 0; j < sigma.v.size(); ++j)
        if (std::abs(sigma.v[j]) < std::abs(sigma.v[v0])) v0 = j;
    for (size_t i = 0; i < eta.size(); ++i) {
        LeafArc ua = integrate_leaf(*fol.u, eta.chart(i), width, opts, 1, std::nullopt, Bundle::unstable);
        Intersection hit = local_intersection(ua, sigma);
        out.param.push_back(hit.u);
        out.image.push_back(normalize(sigma.manifold, sigma.at(hit.u, sigma.v[v0])));
        out.max_residual = std::max(out.max_residual, hit.residual);
    }
    return out;
}

} // namespace dafkit
