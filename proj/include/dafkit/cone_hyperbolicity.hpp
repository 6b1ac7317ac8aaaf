#pragma once

// Invariant splittings, cone fields, rates and the scale cascade.

#include <cstdint>
#include <array>
#include <functional>
#include <map>
#include <memory>
#include <unordered_map>

#include "system_zoo.hpp"

namespace dafkit {

enum class Bundle { stable, center, unstable };

inline std::string to_string(Bundle b) {
    switch (b) {
    case Bundle::stable: return "s";
    case Bundle::center: return "c";
    case Bundle::unstable: return "u";
    }
    return "?";
}

/// Estimated splitting at a point, in the chart frame of that point.
struct Frame {
    Vec3 es, ec, eu;      ///< unit line directions
    Vec3 n_cs, n_cu;      ///< unit normals of the planes E^cs and E^cu
    double residual = 0;  ///< angle change between the last two depths
    int depth = 0;
};

/// Moves vectors given in the chart frame of chart point q into the frame of
/// its lift q_raw (used when q_raw sits outside the fundamental domain).
inline Mat3 frame_change_to_lift(const ManifoldDescriptor& m, const Vec3& q_raw) {
    return deck_linear(m, reduce(m, q_raw).k).inverse();
}

/**
 * Pushes a generic vector and a generic plane forward along the backward
 * orbit (giving E^u and E^cu) and, with Df^-1, backward along the forward
 * orbit (giving E^s and E^cs). E^c is the intersection of the two planes.
 */
class SplittingEstimator {
public:
    explicit SplittingEstimator(DynamicalSystem f, int min_depth = 40, int max_depth = 640,
                                double tol = 1e-13)
        : f_(std::move(f)), min_depth_(min_depth), max_depth_(max_depth), tol_(tol) {
        require(min_depth_ >= 2 && max_depth_ >= min_depth_, "bad estimator depths");
    }

    const DynamicalSystem& system() const { return f_; }
    int min_depth() const { return min_depth_; }
    int max_depth() const { return max_depth_; }

    Frame at(const ChartPoint& p) const {
        Orbit o(f_, p);
        int n = min_depth_;
        Frame fr = o.frame(n);
        while (fr.residual > tol_ && n < max_depth_) {
            n = std::min(2 * n, max_depth_);
            fr = o.frame(n);
        }
        return fr;
    }

    Frame at_depth(const ChartPoint& p, int n) const {
        require(n >= 2, "estimator depth must be at least 2");
        Orbit o(f_, p);
        return o.frame(n);
    }

    /// One bundle at fixed depth, computing only the orbit half it needs.
    /// At fixed depth the result depends smoothly on p.
    Vec3 line(const ChartPoint& p, Bundle b, int n) const {
        Orbit o(f_, p);
        if (b == Bundle::unstable) {
            o.extend_back(n);
            return Orbit::push_vec(o.back, n);
        }
        if (b == Bundle::stable) {
            o.extend_fwd(n);
            return Orbit::push_vec(o.fwd, n);
        }
        o.extend(n);
        return unit(Orbit::push_plane(o.back, n).cross(Orbit::push_plane(o.fwd, n)));
    }

    /// Smallest depth (40 * 2^k, then trimmed in steps of 8) whose residual
    /// is below tol at every probe point, capped at max_depth.
    int calibrate_depth(const std::vector<ChartPoint>& probes, double tol) const {
        int n = min_depth_;
        auto worst = [&](int d) {
            double r = 0;
            for (const auto& p : probes) r = std::max(r, at_depth(p, d).residual);
            return r;
        };
        while (n < max_depth_ && worst(n) > tol) n = std::min(2 * n, max_depth_);
        int lo = std::max(min_depth_, n / 2);
        while (n - 8 > lo && worst(n - 8) <= tol) n -= 8;
        return n;
    }

private:
    /// Jacobians of f along the backward orbit and of f^-1 along the forward
    /// orbit, extended on demand.
    struct Orbit {
        Orbit(const DynamicalSystem& f, const ChartPoint& p)
            : f(f), qb(normalize(f.manifold(), p)), qf(qb) {}
        void extend(int n) {
            extend_back(n);
            extend_fwd(n);
        }
        void extend_back(int n) {
            while (static_cast<int>(back.size()) < n) {
                qb = f.inverse(qb);
                back.push_back(f.jacobian(qb));
            }
        }
        void extend_fwd(int n) {
            while (static_cast<int>(fwd.size()) < n) {
                Mat3 j = f.jacobian(qf);
                qf = f.forward(qf);
                fwd.push_back(j.inverse());
            }
        }
        static Vec3 push_vec(const std::vector<Mat3>& js, int depth) {
            Vec3 v = unit(Vec3(0.6, 0.37, 0.71));
            for (int k = depth - 1; k >= 0; --k) v = unit(js[k] * v);
            return v;
        }
        static Vec3 push_plane(const std::vector<Mat3>& js, int depth) {
            Vec3 a = unit(Vec3(0.64, -0.31, 0.7)), b = unit(Vec3(-0.27, 0.83, 0.49));
            for (int k = depth - 1; k >= 0; --k) {
                a = unit(js[k] * a);
                b = js[k] * b;
                b = unit(b - b.dot(a) * a);
            }
            return unit(a.cross(b));
        }
        Frame frame(int n) {
            extend(n);
            Frame fr;
            fr.depth = n;
            fr.eu = push_vec(back, n);
            fr.n_cu = push_plane(back, n);
            fr.es = push_vec(fwd, n);
            fr.n_cs = push_plane(fwd, n);
            fr.ec = unit(fr.n_cu.cross(fr.n_cs));
            Vec3 eu1 = push_vec(back, n - 1), ncu1 = push_plane(back, n - 1);
            Vec3 es1 = push_vec(fwd, n - 1), ncs1 = push_plane(fwd, n - 1);
            fr.residual = std::max({line_angle(fr.eu, eu1), line_angle(fr.n_cu, ncu1),
                                    line_angle(fr.es, es1), line_angle(fr.n_cs, ncs1)});
            return fr;
        }
        const DynamicalSystem& f;
        ChartPoint qb, qf;
        std::vector<Mat3> back, fwd;
    };

    DynamicalSystem f_;
    int min_depth_, max_depth_;
    double tol_;
};

enum class ConeKind { stable, center_stable, center_unstable, unstable };

inline std::string to_string(ConeKind k) {
    switch (k) {
    case ConeKind::stable: return "s";
    case ConeKind::center_stable: return "cs";
    case ConeKind::center_unstable: return "cu";
    case ConeKind::unstable: return "u";
    }
    return "?";
}

inline bool is_forward(ConeKind k) {
    return k == ConeKind::unstable || k == ConeKind::center_unstable;
}
inline int core_dim(ConeKind k) {
    return (k == ConeKind::unstable || k == ConeKind::stable) ? 1 : 2;
}

/// Basis with the core directions first, then the complement.
inline Mat3 cone_basis(ConeKind k, const Frame& fr) {
    Mat3 b;
    switch (k) {
    case ConeKind::unstable: b << fr.eu, fr.es, fr.ec; break;
    case ConeKind::center_unstable: b << fr.ec, fr.eu, fr.es; break;
    case ConeKind::stable: b << fr.es, fr.ec, fr.eu; break;
    case ConeKind::center_stable: b << fr.es, fr.ec, fr.eu; break;
    }
    return b;
}

/// Memoized estimator frames, for several cone fields visiting the same points.
class FrameCache {
public:
    explicit FrameCache(SplittingEstimator est) : est_(std::move(est)) {}
    const Frame& at(const ChartPoint& p) {
        std::array<double, 3> key{p(0), p(1), p(2)};
        auto it = frames_.find(key);
        if (it == frames_.end()) it = frames_.emplace(key, est_.at(p)).first;
        return it->second;
    }

private:
    SplittingEstimator est_;
    std::map<std::array<double, 3>, Frame> frames_;
};

/// Cone {v : |v_E| >= alpha |v_F|} around E with complement F, at every point.
class ConeField {
public:
    ConeField(ConeKind kind, double alpha, std::function<Mat3(const ChartPoint&)> basis)
        : kind_(kind), alpha_(alpha), basis_(std::move(basis)) {
        if (!(alpha_ > 0) || !std::isfinite(alpha_))
            fail(ErrorKind::invalid_input, "degenerate cone opening");
    }

    static ConeField from_estimator(const SplittingEstimator& est, ConeKind kind, double alpha) {
        auto e = std::make_shared<SplittingEstimator>(est);
        return ConeField(kind, alpha, [e, kind](const ChartPoint& p) { return cone_basis(kind, e->at(p)); });
    }
    /// Shares frames across cone kinds; the cache is keyed on exact coordinates.
    static ConeField from_cache(std::shared_ptr<FrameCache> cache, ConeKind kind, double alpha) {
        return ConeField(kind, alpha, [cache, kind](const ChartPoint& p) { return cone_basis(kind, cache->at(p)); });
    }
    static ConeField constant(ConeKind kind, double alpha, const Mat3& basis) {
        return ConeField(kind, alpha, [basis](const ChartPoint&) { return basis; });
    }

    ConeKind kind() const { return kind_; }
    double alpha() const { return alpha_; }
    Mat3 basis(const ChartPoint& p) const { return basis_(p); }

    /// (|v_E| - alpha |v_F|) / |v|; positive in the interior.
    double margin(const ChartPoint& p, const Vec3& v) const { return margin_in(basis(p), v); }
    bool contains(const ChartPoint& p, const Vec3& v) const { return margin(p, v) >= 0; }

    double margin_in(const Mat3& b, const Vec3& v) const {
        int d = core_dim(kind_);
        Vec3 c = b.fullPivLu().solve(v);
        Vec3 ve = Vec3::Zero(), vf = Vec3::Zero();
        for (int i = 0; i < 3; ++i) (i < d ? ve : vf) += c(i) * b.col(i);
        return (ve.norm() - alpha_ * vf.norm()) / v.norm();
    }

    /// Boundary rays sampled on a circle of `count` directions.
    std::vector<Vec3> extreme_rays(const Mat3& b, int count = 16) const {
        int d = core_dim(kind_);
        std::vector<Vec3> rays;
        rays.reserve(count);
        if (d == 1) {
            Vec3 e = unit(b.col(0));
            Vec3 f1 = unit(b.col(1));
            Vec3 f2 = b.col(2);
            f2 = unit(f2 - f2.dot(f1) * f1);
            for (int i = 0; i < count; ++i) {
                double t = 2 * pi * i / count;
                rays.push_back(e + (std::cos(t) * f1 + std::sin(t) * f2) / alpha_);
            }
        } else {
            Vec3 e1 = unit(b.col(0));
            Vec3 e2 = b.col(1);
            e2 = unit(e2 - e2.dot(e1) * e1);
            Vec3 f = unit(b.col(2));
            for (int i = 0; i < count; ++i) {
                double t = 2 * pi * i / count;
                rays.push_back(alpha_ * (std::cos(t) * e1 + std::sin(t) * e2) + f);
            }
        }
        return rays;
    }

private:
    ConeKind kind_;
    double alpha_;
    std::function<Mat3(const ChartPoint&)> basis_;
};

/// Constant cones from the eigen data of the linear part (skew products and
/// suspensions).
inline ConeField linear_cone_field(const IMat2& a, ConeKind kind, double alpha) {
    HyperbolicData h = hyperbolic_data(a);
    Frame fr;
    fr.eu = Vec3(h.eu(0), h.eu(1), 0);
    fr.es = Vec3(h.es(0), h.es(1), 0);
    fr.ec = Vec3(0, 0, 1);
    return ConeField::constant(kind, alpha, cone_basis(kind, fr));
}

struct CertificationResult {
    ConeKind kind = ConeKind::unstable;
    bool pass = false;
    double worst_margin = 0;           ///< minimum over cells and rays
    ChartPoint worst_point = Vec3::Zero();
    int worst_ray = -1;
    double worst_expansion = 0;        ///< min |D v| / |v| (1-D cones only)
    int iterate = 1;
    int grid = 0;
};

inline nlohmann::json to_json_value(const CertificationResult& r) {
    return {{"kind", to_string(r.kind)}, {"pass", r.pass}, {"worst_margin", r.worst_margin},
            {"worst_point", point_to_json(r.worst_point)}, {"worst_ray", r.worst_ray},
            {"worst_expansion", r.worst_expansion}, {"iterate", r.iterate}, {"grid", r.grid}};
}

/// Checks Df^N C(x) inside int C(f^N x) (or Df^-N for s/cs cones), and
/// expansion for 1-D cones, on all grid points and extreme rays.
inline CertificationResult verify_cone_invariance(const DynamicalSystem& f, const ConeField& cone,
                                                  int n_iter, int grid, double margin_tol = 1e-12,
                                                  int rays = 16) {
    require(n_iter >= 1, "iterate must be positive");
    require(grid >= 2, "grid too coarse");
    CertificationResult r;
    r.kind = cone.kind();
    r.iterate = n_iter;
    r.grid = grid;
    r.worst_margin = std::numeric_limits<double>::infinity();
    r.worst_expansion = std::numeric_limits<double>::infinity();
    bool fwd = is_forward(cone.kind());
    for (const auto& x : domain_grid(f.manifold(), grid, 0.0)) {
        Mat3 j = f.jacobian_power(x, fwd ? n_iter : -n_iter);
        ChartPoint y = f.iterate(x, fwd ? n_iter : -n_iter);
        Mat3 bx = cone.basis(x), by = cone.basis(y);
        auto rs = cone.extreme_rays(bx, rays);
        for (size_t i = 0; i < rs.size(); ++i) {
            Vec3 w = j * rs[i];
            double mg = cone.margin_in(by, w);
            if (mg < r.worst_margin) {
                r.worst_margin = mg;
                r.worst_point = x;
                r.worst_ray = static_cast<int>(i);
            }
            if (core_dim(cone.kind()) == 1)
                r.worst_expansion = std::min(r.worst_expansion, w.norm() / rs[i].norm());
        }
    }
    r.pass = r.worst_margin > margin_tol;
    if (core_dim(cone.kind()) == 1) r.pass = r.pass && r.worst_expansion > 1.0;
    else r.worst_expansion = 0;
    return r;
}

struct SplittingField {
    std::vector<ChartPoint> points;
    std::vector<Frame> frames;
    double max_residual = 0;
    double min_angle = pi;          ///< smallest angle between two bundles
    double invariance_angle = 0;    ///< max angle(Df e(x), e(f x))
};

/// Splitting on an n^3 grid. Throws a convergence error when some residual
/// exceeds theta_tol.
inline SplittingField estimate_splitting(const DynamicalSystem& f, int grid, int n_iter,
                                         double theta_tol = 1e-6, bool check_invariance = true) {
    require(n_iter >= 20, "splitting estimation needs at least 20 iterations");
    SplittingEstimator est(f);
    SplittingField out;
    for (const auto& x : domain_grid(f.manifold(), grid, 0.0)) {
        Frame fr = est.at_depth(x, n_iter);
        out.points.push_back(x);
        out.frames.push_back(fr);
        out.max_residual = std::max(out.max_residual, fr.residual);
        out.min_angle = std::min({out.min_angle, line_angle(fr.es, fr.ec), line_angle(fr.ec, fr.eu),
                                  line_angle(fr.es, fr.eu),
                                  line_plane_angle(fr.es, fr.n_cu), line_plane_angle(fr.eu, fr.n_cs)});
        if (check_invariance) {
            Mat3 j = f.jacobian(x);
            Frame fy = est.at_depth(f.forward(x), n_iter);
            out.invariance_angle = std::max({out.invariance_angle, line_angle(j * fr.es, fy.es),
                                             line_angle(j * fr.ec, fy.ec), line_angle(j * fr.eu, fy.eu)});
        }
    }
    if (out.max_residual > theta_tol)
        fail(ErrorKind::convergence, "splitting did not converge",
             {{"max_residual", out.max_residual}, {"iterations", n_iter}});
    return out;
}

struct Rates {
    double lambda = 0;
    double kappa = 0;
    int grid = 0;
};

/// lambda = max(|Df e^s|, |Df^-1 e^u|) and kappa = max operator norm, both
/// with 1% headroom; the grid is doubled until both move by < 0.1%.
inline Rates estimate_rates(const DynamicalSystem& f, int grid = 8, int max_grid = 32) {
    require(grid >= 2 && max_grid >= grid, "bad rate grid");
    SplittingEstimator est(f);
    auto at = [&](int n) {
        Rates r;
        r.grid = n;
        for (const auto& x : domain_grid(f.manifold(), n, 0.0)) {
            Frame fr = est.at(x);
            Mat3 j = f.jacobian(x), ji = f.inverse_jacobian(x);
            r.lambda = std::max({r.lambda, (j * fr.es).norm(), (ji * fr.eu).norm()});
            r.kappa = std::max({r.kappa, op_norm(j), op_norm(ji)});
        }
        r.lambda *= 1.01;
        r.kappa *= 1.01;
        return r;
    };
    Rates cur = at(grid);
    while (2 * cur.grid <= max_grid) {
        Rates next = at(2 * cur.grid);
        bool settled = std::abs(next.lambda - cur.lambda) < 1e-3 * cur.lambda &&
                       std::abs(next.kappa - cur.kappa) < 1e-3 * cur.kappa;
        cur = next;
        if (settled) break;
    }
    if (!(cur.lambda < 1))
        fail(ErrorKind::not_partially_hyperbolic, "contraction rate is not below 1",
             {{"lambda", cur.lambda}});
    return cur;
}

/**
 * Largest delta = cap * 2^-m (down to `floor`) such that on all sampled pairs
 * within 20 delta the three bundles move by at most eps*pi, and stay within
 * eps*pi of orthogonal in the metric adapted to the splitting at the base
 * point.
 */
inline double nearly_euclidean_scale(const DynamicalSystem& f, double eps, double cap = 0.05,
                                     double floor = 1e-7, int base_grid = 4) {
    if (!(eps > 0)) fail(ErrorKind::scale_not_found, "eps must be positive");
    require(eps <= 1.0 / 16, "eps must be at most 1/16");
    const auto& m = f.manifold();
    SplittingEstimator est(f);
    auto base = domain_grid(m, base_grid, 0.0);
    std::vector<Frame> base_frames;
    for (const auto& p : base) base_frames.push_back(est.at(p));

    std::vector<Vec3> dirs;
    for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j)
            for (int k = -1; k <= 1; ++k)
                if (i || j || k) dirs.push_back(unit(Vec3(i, j, k)));

    // Frames at offset points, keyed by (base, direction, dyadic radius).
    std::unordered_map<std::uint64_t, Frame> memo;
    auto offset_frame = [&](size_t b, size_t d, int level, const Vec3& q_raw) -> const Frame& {
        std::uint64_t key = (static_cast<std::uint64_t>(b) * 64 + d) * 4096 + level;
        auto it = memo.find(key);
        if (it != memo.end()) return it->second;
        Frame fr = est.at(normalize(m, q_raw));
        Mat3 back = frame_change_to_lift(m, q_raw);
        fr.es = back * fr.es;
        fr.ec = back * fr.ec;
        fr.eu = back * fr.eu;
        return memo.emplace(key, fr).first->second;
    };

    const double tol = eps * pi;
    for (int mlev = 0;; ++mlev) {
        double delta = cap * std::ldexp(1.0, -mlev);
        if (delta < floor) break;
        bool ok = true;
        for (size_t b = 0; b < base.size() && ok; ++b) {
            const Frame& fp = base_frames[b];
            Mat3 bp;
            bp << fp.es, fp.ec, fp.eu;
            Mat3 adapt = bp.inverse();
            for (size_t d = 0; d < dirs.size() && ok; ++d) {
                for (int i = 0; i < 4 && ok; ++i) {
                    int level = mlev + i;
                    double r = 20 * cap * std::ldexp(1.0, -level);
                    const Frame& fq = offset_frame(b, d, level, base[b] + r * dirs[d]);
                    if (line_angle(fp.es, fq.es) > tol || line_angle(fp.ec, fq.ec) > tol ||
                        line_angle(fp.eu, fq.eu) > tol) {
                        ok = false;
                        break;
                    }
                    Vec3 ys = adapt * fq.es, yc = adapt * fq.ec, yu = adapt * fq.eu;
                    if (line_plane_angle(ys, yc.cross(yu)) < pi / 2 - tol ||
                        line_plane_angle(yu, ys.cross(yc)) < pi / 2 - tol)
                        ok = false;
                }
            }
        }
        if (ok) return delta;
    }
    fail(ErrorKind::scale_not_found, "no admissible scale above the floor",
         {{"eps", eps}, {"floor", floor}});
}

struct RateReport {
    double lambda = 0, kappa = 0;
    double delta = 0, delta_prime = 0;
    double delta1 = 0, delta2 = 0, delta3 = 0;
    bool accepted = false;

    /// Largest delta' the cascade accepts.
    double threshold() const {
        return std::min(delta * (1 - lambda) / (64 * kappa * kappa), 0.1 * (1 / lambda - 1));
    }
};

inline nlohmann::json to_json_value(const RateReport& r) {
    return {{"lambda", r.lambda}, {"kappa", r.kappa}, {"delta", r.delta},
            {"delta_prime", r.delta_prime}, {"delta1", r.delta1}, {"delta2", r.delta2},
            {"delta3", r.delta3}, {"accepted", r.accepted}};
}

inline RateReport scale_cascade(double delta, double lambda, double kappa, double delta_prime) {
    require(delta > 0 && std::isfinite(delta), "delta must be positive");
    require(lambda > 0 && lambda < 1, "lambda must lie in (0, 1)");
    require(kappa >= 1, "kappa must be at least 1");
    RateReport r;
    r.lambda = lambda;
    r.kappa = kappa;
    r.delta = delta;
    r.delta_prime = delta_prime;
    r.delta1 = delta / (2 * kappa);
    r.delta2 = r.delta1 / 2;
    r.delta3 = r.delta2 / (4 * kappa);
    r.accepted = delta_prime < delta * (1 - lambda) / (64 * kappa * kappa) &&
                 delta_prime < 0.1 * (1 / lambda - 1);
    return r;
}

/// Cascade for g near f, with delta' measured as the C^0 distance on a grid.
inline RateReport derive_scale_cascade(double delta, const Rates& rates, const DynamicalSystem& f,
                                       const DynamicalSystem& g, int grid = 20) {
    return scale_cascade(delta, rates.lambda, rates.kappa, c0_distance(f, g, grid));
}

struct PHCertificate {
    std::vector<CertificationResult> cones;
    Rates rates;
    bool pass = false;
};

/// All four cones from the estimated splitting, plus rates.
inline PHCertificate certify_partial_hyperbolicity(const DynamicalSystem& f, int n_iter, int grid,
                                                   double alpha = 1.0, int rate_grid = 8,
                                                   int rate_max_grid = 16) {
    auto cache = std::make_shared<FrameCache>(SplittingEstimator(f));
    PHCertificate c;
    c.pass = true;
    for (auto k : {ConeKind::stable, ConeKind::center_stable, ConeKind::center_unstable,
                   ConeKind::unstable}) {
        c.cones.push_back(verify_cone_invariance(f, ConeField::from_cache(cache, k, alpha), n_iter, grid));
        c.pass = c.pass && c.cones.back().pass;
    }
    c.rates = estimate_rates(f, rate_grid, rate_max_grid);
    return c;
}

} // namespace dafkit
