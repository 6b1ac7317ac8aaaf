#pragma once

// Tubular coordinates around center leaves of f and the graph transform that
// continues them to center leaves of a nearby g.

#include <random>

#include "leaf_numerics.hpp"

namespace dafkit {

/// Affine map r -> lin r + off between two lifts.
struct Affine {
    Mat3 lin = Mat3::Identity();
    Vec3 off = Vec3::Zero();
    Vec3 operator()(const Vec3& r) const { return lin * r + off; }
    Affine inverse() const {
        Affine a;
        a.lin = lin.inverse();
        a.off = -(a.lin * off);
        return a;
    }
};

/// Deck map taking the chart frame to the lift frame recorded in `fr`.
inline Affine deck_affine(const ManifoldDescriptor& m, const Reduced& fr) {
    Affine a;
    Mat2 bk = gluing_power(m, -fr.k);
    a.lin = block_diag(bk, 1.0);
    a.off.head<2>() = bk * fr.shift;
    a.off(2) = fr.k * m.period;
    return a;
}

/**
 * Frame (T, S, U) along a center leaf L of f, sampled uniformly in arc
 * length. For a compact leaf the samples cover one period and S, U are
 * rescaled by powers of the holonomy of the seam so that the frame is
 * periodic: S(t + len) = seam.lin * S(t).
 */
class TubularFrame {
public:
    ManifoldDescriptor manifold;
    bool compact = false;
    double t0 = 0, h = 0, len = 0;  ///< first parameter, spacing, covered length
    std::vector<Vec3> L, T, S, U;   ///< raw lift samples
    Affine seam;                    ///< start-frame lift -> end-frame lift (compact)
    Affine seam_inv;

    size_t nodes() const { return L.size(); }
    double t_end() const { return t0 + len; }

    /// Parameter reduced into the sampled range, with the seam power used.
    std::pair<double, int> wrap(double s) const {
        if (!compact) return {s, 0};
        double k = std::floor((s - t0) / len);
        double w = s - k * len;
        if (w >= t0 + len) { w -= len; k += 1; }
        return {w, static_cast<int>(k)};
    }
    Vec3 seam_point(const Vec3& r, int k) const {
        Vec3 out = r;
        for (int i = 0; i < k; ++i) out = seam(out);
        for (int i = 0; i > k; --i) out = seam_inv(out);
        return out;
    }
    Vec3 seam_vector(const Vec3& v, int k) const {
        Vec3 out = v;
        for (int i = 0; i < k; ++i) out = seam.lin * out;
        for (int i = 0; i > k; --i) out = seam_inv.lin * out;
        return out;
    }

    struct Local {
        Vec3 l, dl, s, ds, u, du;
    };
    /// L by cubic Hermite, S and U piecewise linear, at any parameter.
    Local eval(double sigma) const {
        auto [w, k] = wrap(sigma);
        size_t n = nodes();
        size_t top = compact ? n : n - 1;  // compact: segment n-1 -> n wraps
        double x = (w - t0) / h;
        size_t i = static_cast<size_t>(std::clamp(std::floor(x), 0.0, static_cast<double>(top - 1)));
        double u = x - i;
        size_t j = i + 1;
        Vec3 l1, t1, s1, u1;
        if (j < n) {
            l1 = L[j]; t1 = T[j]; s1 = S[j]; u1 = U[j];
        } else {
            l1 = seam(L[0]); t1 = unit(Vec3(seam.lin * T[0])); s1 = seam.lin * S[0]; u1 = seam.lin * U[0];
        }
        double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
        double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
        double d00 = (6 * u * u - 6 * u) / h, d10 = 3 * u * u - 4 * u + 1;
        double d01 = (-6 * u * u + 6 * u) / h, d11 = 3 * u * u - 2 * u;
        Local out;
        out.l = h00 * L[i] + h10 * h * T[i] + h01 * l1 + h11 * h * t1;
        out.dl = d00 * L[i] + d10 * T[i] + d01 * l1 + d11 * t1;
        out.s = (1 - u) * S[i] + u * s1;
        out.ds = (s1 - S[i]) / h;
        out.u = (1 - u) * U[i] + u * u1;
        out.du = (u1 - U[i]) / h;
        if (k != 0) {
            out.l = seam_point(out.l, k);
            out.dl = seam_vector(out.dl, k);
            out.s = seam_vector(out.s, k);
            out.ds = seam_vector(out.ds, k);
            out.u = seam_vector(out.u, k);
            out.du = seam_vector(out.du, k);
        }
        return out;
    }

    Vec3 point(double sigma, double a, double b) const {
        Local e = eval(sigma);
        return e.l + a * e.s + b * e.u;
    }

    struct Coords {
        double sigma = 0, a = 0, b = 0;
        bool ok = false;
    };

    /// Tube coordinates of chart point q, by Newton from sigma_guess.
    Coords locate(const ChartPoint& q, double sigma_guess) const {
        Coords c;
        double sg = sigma_guess;
        Vec3 raw = lift_near(manifold, eval(sg).l, q);
        c.sigma = sg;
        for (int it = 0; it < 40; ++it) {
            Local e = eval(c.sigma);
            Vec3 r = e.l + c.a * e.s + c.b * e.u - raw;
            Mat3 j;
            j << e.dl + c.a * e.ds + c.b * e.du, e.s, e.u;
            Vec3 d = j.partialPivLu().solve(r);
            c.sigma -= d(0);
            c.a -= d(1);
            c.b -= d(2);
            if (!std::isfinite(c.sigma)) return c;
            if (d.norm() < 1e-15) { c.ok = true; break; }
            // Relift when the parameter moves far, so the lift stays near L.
            if (std::abs(c.sigma - sg) > 0.25) {
                sg = c.sigma;
                raw = lift_near(manifold, eval(sg).l, q);
            }
        }
        if (!c.ok) {
            Local e = eval(c.sigma);
            c.ok = (e.l + c.a * e.s + c.b * e.u - raw).norm() < 1e-13;
        }
        if (compact) c.sigma = wrap(c.sigma).first;
        return c;
    }

    /// Nearest sample index to chart point q (brute force).
    size_t nearest_node(const ChartPoint& q) const {
        size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < nodes(); ++i) {
            double d = dist(manifold, normalize(manifold, L[i]), q);
            if (d < bd) { bd = d; best = i; }
        }
        return best;
    }
    double param(size_t i) const { return t0 + i * h; }
};

/// Leaf through x closing up after one turn, resampled with spacing close to
/// `step` so that the last sample coincides with the first. Throws
/// integration if no closure is found within `max_len`.
inline LeafArc close_leaf(const LineField& field, const ChartPoint& x, double step, double max_len,
                          double close_tol = 1e-9, const Vec3* reference = nullptr) {
    const auto& m = field.manifold();
    IntegrationOptions o;
    o.step = step;
    LeafArc probe = integrate_ray(field, x, max_len, o, reference);
    ChartPoint x0 = normalize(m, x);
    double found = -1;
    for (size_t i = 2; i + 1 < probe.size(); ++i) {
        double d = dist(m, probe.chart(i), x0);
        if (d < 2 * step && d <= dist(m, probe.chart(i - 1), x0) && d <= dist(m, probe.chart(i + 1), x0) &&
            probe.t[i] > 10 * step) {
            // Golden-section minimum of the distance along the Hermite arc.
            double lo = probe.t[i - 1], hi = probe.t[i + 1];
            for (int it = 0; it < 100; ++it) {
                double a = hi - 0.618033988749895 * (hi - lo), b = lo + 0.618033988749895 * (hi - lo);
                if (dist(m, probe.chart_at(a), x0) < dist(m, probe.chart_at(b), x0)) hi = b; else lo = a;
            }
            double t = 0.5 * (lo + hi);
            if (dist(m, probe.chart_at(t), x0) < 1e-6) { found = t; break; }
        }
    }
    if (found < 0) fail(ErrorKind::integration, "leaf does not close within the budget", {{"budget", max_len}});
    int n = std::max(10, static_cast<int>(std::ceil(found / step)));
    double h = found / n;
    // Re-integrate at a spacing that divides the period; refine the period
    // once from the endpoint mismatch.
    for (int pass = 0; pass < 3; ++pass) {
        o.step = h;
        LeafArc arc = integrate_ray(field, x, n * h, o, reference);
        Vec3 gap = displacement(m, arc.chart(arc.size() - 1), x0);
        double along = gap.dot(arc.chart_tangent(arc.size() - 1));
        if (gap.norm() < close_tol) return arc;
        found += along;
        h = found / n;
    }
    LeafArc arc = integrate_ray(field, x, n * h, o, reference);
    double d = dist(m, arc.chart(arc.size() - 1), x0);
    if (d > close_tol)
        fail(ErrorKind::integration, "compact leaf does not close", {{"gap", d}});
    return arc;
}

/**
 * Builds the frame from a sampled center leaf. For compact leaves `leaf`
 * must end where it starts (see close_leaf). `radius` is the tube radius for
 * the overlap check.
 */
inline TubularFrame make_tubular_frame(const Foliations& fol, const LeafArc& leaf, bool compact,
                                       double radius) {
    const auto& m = leaf.manifold;
    require(leaf.size() >= 4, "leaf too short for a tube");
    TubularFrame fr;
    fr.manifold = m;
    fr.compact = compact;
    fr.t0 = leaf.t.front();
    size_t n = compact ? leaf.size() - 1 : leaf.size();
    fr.h = (leaf.t.back() - leaf.t.front()) / (leaf.size() - 1);
    for (size_t i = 1; i < leaf.size(); ++i)
        if (std::abs(leaf.t[i] - leaf.t[i - 1] - fr.h) > 1e-9 * fr.h)
            fail(ErrorKind::invalid_input, "tube leaf must be uniformly sampled");
    fr.len = compact ? leaf.length() : fr.h * (n - 1);

    std::vector<Vec3> su, uu;
    Vec3 ps, pu;
    for (size_t i = 0; i < leaf.size(); ++i) {
        Reduced r = reduce(m, leaf.raw[i]);
        Mat3 back = deck_linear(m, r.k).inverse();
        Vec3 s = unit(Vec3(back * fol.s->direction(r.chart)));
        Vec3 u = unit(Vec3(back * fol.u->direction(r.chart)));
        if (i > 0) { s = align(s, ps); u = align(u, pu); }
        su.push_back(s);
        uu.push_back(u);
        ps = s;
        pu = u;
    }
    if (compact) {
        const Vec3& end = leaf.raw.back();
        if (dist(m, normalize(m, end), normalize(m, leaf.raw.front())) > 1e-9)
            fail(ErrorKind::invalid_input, "compact leaf does not close within 1e-9");
        Reduced er = reduce(m, end);
        // Chart coordinates of the end may differ from the start by roundoff;
        // snap so that the seam maps L[0] exactly onto the closing sample.
        fr.seam = deck_affine(m, er);
        fr.seam.off += end - fr.seam(leaf.raw.front());
        fr.seam_inv = fr.seam.inverse();
        Vec3 s_end = fr.seam.lin * su.front(), u_end = fr.seam.lin * uu.front();
        double ns = s_end.dot(su.back()), nu = u_end.dot(uu.back());
        if (ns <= 0 || nu <= 0)
            fail(ErrorKind::invalid_input, "orientation-reversing holonomy along the compact leaf is unsupported");
        // S_unit(len) = seam S_unit(0) / nu_s; rescale by nu^(t/len - 1/2).
        double nus = s_end.norm(), nuu = u_end.norm();
        for (size_t i = 0; i < n; ++i) {
            double x = (leaf.t[i] - fr.t0) / fr.len - 0.5;
            su[i] *= std::pow(nus, x);
            uu[i] *= std::pow(nuu, x);
        }
    }
    for (size_t i = 0; i < n; ++i) {
        fr.L.push_back(leaf.raw[i]);
        fr.T.push_back(leaf.tangent[i]);
        fr.S.push_back(su[i]);
        fr.U.push_back(uu[i]);
    }

    // Tube overlap: far-apart parameters whose points come within 2 radius.
    if (radius > 0) {
        double cell = 2 * radius;
        std::unordered_map<std::int64_t, std::vector<size_t>> grid;
        auto key = [&](const ChartPoint& p, int dx, int dy, int dz) {
            std::int64_t a = static_cast<std::int64_t>(std::floor(p(0) / cell)) + dx;
            std::int64_t b = static_cast<std::int64_t>(std::floor(p(1) / cell)) + dy;
            std::int64_t c = static_cast<std::int64_t>(std::floor(p(2) / cell)) + dz;
            return (a * 1000003 + b) * 1000003 + c;
        };
        std::vector<ChartPoint> pts;
        for (const auto& r : fr.L) pts.push_back(normalize(m, r));
        for (size_t i = 0; i < pts.size(); ++i) grid[key(pts[i], 0, 0, 0)].push_back(i);
        int wrapx = static_cast<int>(std::ceil(1 / cell)), wrapz = static_cast<int>(std::ceil(m.period / cell));
        for (size_t i = 0; i < pts.size(); ++i) {
            for (int dx = -1; dx <= 1; ++dx)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int wx : {0, -wrapx, wrapx})
                            for (int wy : {0, -wrapx, wrapx})
                                for (int wz : {0, -wrapz, wrapz}) {
                                    auto it = grid.find(key(pts[i], dx + wx, dy + wy, dz + wz));
                                    if (it == grid.end()) continue;
                                    for (size_t j : it->second) {
                                        if (j <= i) continue;
                                        double dp = std::abs(fr.param(j) - fr.param(i));
                                        if (compact) dp = std::min(dp, fr.len - dp);
                                        if (dp <= 6 * radius) continue;
                                        if (dist(m, pts[i], pts[j]) < 2 * radius)
                                            fail(ErrorKind::tube_overlap, "leaf returns close to itself",
                                                 {{"i", i}, {"j", j}});
                                    }
                                }
        }
    }
    return fr;
}

enum class StripKind { cu, cs };

/// Scalar section on sigma x tau nodes: the offset along S (cu) or U (cs).
struct GraphSection {
    std::vector<double> sigma, tau;
    std::vector<double> val;
    std::vector<std::uint8_t> trusted;
    bool periodic = false;
    double period = 0;

    size_t nt() const { return tau.size(); }
    double& at(size_t j, size_t k) { return val[j * nt() + k]; }
    double at(size_t j, size_t k) const { return val[j * nt() + k]; }

    /// Value at (s, t): Catmull-Rom in s (periodic for compact leaves,
    /// linear past the ends otherwise), linear in t.
    double value(double s, double t) const {
        double ht = tau[1] - tau[0];
        double y = (t - tau[0]) / ht;
        double c = std::clamp(std::floor(y), 0.0, static_cast<double>(nt() - 2));
        size_t k0 = static_cast<size_t>(c);
        double r = y - c;
        long n = static_cast<long>(sigma.size());
        auto col = [&](long j) {
            double v0, v1;
            if (periodic) {
                long q = ((j % n) + n) % n;
                v0 = at(q, k0);
                v1 = at(q, k0 + 1);
            } else if (j < 0 || j >= n) {
                long e = j < 0 ? 0 : n - 1, d = j < 0 ? 1 : -1;
                long steps = j < 0 ? -j : j - n + 1;
                v0 = at(e, k0) + steps * (at(e, k0) - at(e + d, k0));
                v1 = at(e, k0 + 1) + steps * (at(e, k0 + 1) - at(e + d, k0 + 1));
            } else {
                v0 = at(j, k0);
                v1 = at(j, k0 + 1);
            }
            return (1 - r) * v0 + r * v1;
        };
        double hs = sigma[1] - sigma[0];
        double x = (s - sigma[0]) / hs;
        long i = static_cast<long>(std::floor(x));
        if (!periodic) i = std::clamp<long>(i, 0, n - 2);
        double u = x - i;
        double p0 = col(i - 1), p1 = col(i), p2 = col(i + 1), p3 = col(i + 2);
        return p1 + 0.5 * u * (p2 - p0 + u * (2 * p0 - 5 * p1 + 4 * p2 - p3 + u * (3 * (p1 - p2) + p3 - p0)));
    }
};

/// Tubes around f^n(L) for consecutive n. Cyclic chains close up:
/// f maps tube i to tube (i + 1) mod size.
struct TubeChain {
    std::vector<TubularFrame> tubes;
    bool cyclic = false;
    int first_index = 0;
};

struct Sections {
    StripKind kind = StripKind::cu;
    std::vector<GraphSection> tiers;
};

struct StepStats {
    double change = 0;        ///< sup |new - old| over trusted nodes
    double max_offset = 0;    ///< sup of projected offsets
    size_t untrusted = 0;
};

struct GraphTransformOptions {
    double center_step = 0;   ///< 0: delta3 / 10
    int transverse_half = 10; ///< transverse nodes per half strip
    double fixed_point_tol = 1e-12;
    int max_iter = 200;
    double slack = 1.1;       ///< allowed excess over the contraction bound
    double grid_phase = 0;    ///< shift of the sigma nodes, in cells
};

/// Zero section on the node grid of a tube.
inline GraphSection zero_section(const TubularFrame& tube, double width, int k_half, double center_step,
                                 double phase = 0) {
    GraphSection g;
    g.periodic = tube.compact;
    if (tube.compact) {
        int n = std::max(8, static_cast<int>(std::ceil(tube.len / center_step)));
        double hs = tube.len / n;
        for (int j = 0; j < n; ++j) g.sigma.push_back(tube.t0 + (j + phase) * hs);
        g.period = tube.len;
    } else {
        int n = std::max(4, static_cast<int>(std::floor(tube.len / center_step)));
        double hs = tube.len / n;
        for (int j = 0; j <= n; ++j) {
            double s = tube.t0 + (j + phase) * hs;
            if (s <= tube.t_end() + 1e-12) g.sigma.push_back(std::min(s, tube.t_end()));
        }
    }
    for (int k = -k_half; k <= k_half; ++k) g.tau.push_back(width * k / k_half);
    g.val.assign(g.sigma.size() * g.tau.size(), 0.0);
    g.trusted.assign(g.val.size(), 1);
    return g;
}

namespace detail {

struct ImageNode {
    double sigma = 0, tau = 0, value = 0;
};

/// Inverts the image grid of one source tier at target nodes.
class ImageInverter {
public:
    ImageInverter(const GraphSection& src, std::vector<ImageNode> img, bool periodic, double target_period)
        : src_(src), img_(std::move(img)), periodic_(periodic), period_(target_period) {
        nj_ = src_.sigma.size();
        nk_ = src_.tau.size();
        kc_ = nk_ / 2;
        if (periodic_) {
            // Unwrap image sigma: column 0 against the center row, then
            // along each row.
            for (size_t k = 0; k < nk_; ++k) {
                double& s0 = img_[k].sigma;
                s0 += std::round((img_[kc_].sigma - s0) / period_) * period_;
            }
            for (size_t k = 0; k < nk_; ++k)
                for (size_t j = 1; j < nj_; ++j) {
                    double prev = node(j - 1, k).sigma;
                    double& s = img_[j * nk_ + k].sigma;
                    s += std::round((prev - s) / period_) * period_;
                }
        }
        for (size_t j = 1; j < nj_; ++j)
            if (!(node(j, kc_).sigma > node(j - 1, kc_).sigma))
                fail(ErrorKind::step, "image of the leaf is not monotone in sigma",
                     {{"column", j}});
    }

    const ImageNode& node(size_t j, size_t k) const { return img_[j * nk_ + k]; }

    /// Image node of column j (possibly one past the end for periodic
    /// tiers, which wraps with a period shift).
    ImageNode col(long j, size_t k) const {
        if (!periodic_) return node(static_cast<size_t>(j), k);
        long n = static_cast<long>(nj_);
        long q = static_cast<long>(std::floor(static_cast<double>(j) / n));
        ImageNode out = node(static_cast<size_t>(j - q * n), k);
        out.sigma += q * period_;
        return out;
    }

    struct Hit {
        double value = 0;
        bool inside = false;   ///< no extrapolation needed
        bool ok = false;       ///< within one cell of the grid
        long j = 0, k = 0;     ///< source cell
    };

    /// Source node indices of cell corner (j + dj, k + dk).
    size_t corner(long j, long k) const {
        long n = static_cast<long>(nj_);
        long jj = periodic_ ? ((j % n) + n) % n : j;
        return static_cast<size_t>(jj) * nk_ + static_cast<size_t>(k);
    }

    Hit invert(double s_target, double t_target) const {
        Hit hit;
        long n = static_cast<long>(nj_);
        double s = s_target;
        if (periodic_) {
            double s0 = node(0, kc_).sigma;
            s = s0 + (s - s0) - std::floor((s - s0) / period_) * period_;
        }
        // Column bracket on the center row.
        long j;
        if (periodic_) {
            long lo = 0, hi = n;  // col(n) = col(0) + period
            while (hi - lo > 1) {
                long mid = (lo + hi) / 2;
                if (col(mid, kc_).sigma <= s) lo = mid; else hi = mid;
            }
            j = lo;
        } else {
            auto first = node(0, kc_).sigma, last = node(nj_ - 1, kc_).sigma;
            if (s < first) j = 0;
            else if (s >= last) j = n - 2;
            else {
                long lo = 0, hi = n - 1;
                while (hi - lo > 1) {
                    long mid = (lo + hi) / 2;
                    if (node(mid, kc_).sigma <= s) lo = mid; else hi = mid;
                }
                j = lo;
            }
        }
        // Row bracket in column j.
        long k;
        {
            long lo = 0, hi = static_cast<long>(nk_) - 1;
            if (t_target <= col(j, 0).tau) k = 0;
            else if (t_target >= col(j, nk_ - 1).tau) k = static_cast<long>(nk_) - 2;
            else {
                while (hi - lo > 1) {
                    long mid = (lo + hi) / 2;
                    if (col(j, mid).tau <= t_target) lo = mid; else hi = mid;
                }
                k = lo;
            }
        }
        double u = 0.5, r = 0.5;
        for (int moves = 0; moves < 12; ++moves) {
            ImageNode p00 = col(j, k), p10 = col(j + 1, k), p01 = col(j, k + 1), p11 = col(j + 1, k + 1);
            for (int it = 0; it < 30; ++it) {
                double fs = (1 - u) * (1 - r) * p00.sigma + u * (1 - r) * p10.sigma + (1 - u) * r * p01.sigma +
                            u * r * p11.sigma - s;
                double ft = (1 - u) * (1 - r) * p00.tau + u * (1 - r) * p10.tau + (1 - u) * r * p01.tau +
                            u * r * p11.tau - t_target;
                double a = (1 - r) * (p10.sigma - p00.sigma) + r * (p11.sigma - p01.sigma);
                double b = (1 - u) * (p01.sigma - p00.sigma) + u * (p11.sigma - p10.sigma);
                double c = (1 - r) * (p10.tau - p00.tau) + r * (p11.tau - p01.tau);
                double d = (1 - u) * (p01.tau - p00.tau) + u * (p11.tau - p10.tau);
                double det = a * d - b * c;
                if (det == 0) break;
                double du = (d * fs - b * ft) / det, dr = (-c * fs + a * ft) / det;
                u -= du;
                r -= dr;
                if (std::abs(du) + std::abs(dr) < 1e-15) break;
            }
            long dj = u < -1e-12 ? -1 : (u > 1 + 1e-12 ? 1 : 0);
            long dk = r < -1e-12 ? -1 : (r > 1 + 1e-12 ? 1 : 0);
            bool jfree = periodic_ || (j + dj >= 0 && j + dj <= n - 2);
            bool kfree = k + dk >= 0 && k + dk <= static_cast<long>(nk_) - 2;
            if ((dj == 0 || !jfree) && (dk == 0 || !kfree)) {
                hit.inside = dj == 0 && dk == 0;
                hit.ok = u >= -1 && u <= 2 && r >= -1 && r <= 2;
                hit.j = j;
                hit.k = k;
                hit.value = (1 - u) * (1 - r) * p00.value + u * (1 - r) * p10.value +
                            (1 - u) * r * p01.value + u * r * p11.value;
                return hit;
            }
            if (jfree) j += dj;
            if (kfree) k += dk;
            u = 0.5;
            r = 0.5;
        }
        return hit;
    }

private:
    const GraphSection& src_;
    std::vector<ImageNode> img_;
    bool periodic_;
    double period_;
    size_t nj_, nk_, kc_;
};

} // namespace detail

/**
 * One graph transform step. cu sections are pushed by g from tier i-1 to
 * tier i and projected along S; cs sections are pulled by g^-1 from tier
 * i+1 and projected along U. Non-cyclic chains keep the boundary tier and
 * sweep in order, so one step reaches the fixed point of a finite chain.
 * `tube_radius` bounds projected offsets (delta2).
 */
inline Sections transform_step(const TubeChain& chain, const DynamicalSystem& g, const Sections& xi,
                               double tube_radius, StepStats* stats = nullptr) {
    const size_t nt = chain.tubes.size();
    require(xi.tiers.size() == nt, "sections do not match the chain");
    const bool cu = xi.kind == StripKind::cu;
    Sections out = xi;
    StepStats st;
    auto src_of = [&](size_t i) -> long {
        if (cu) return chain.cyclic ? static_cast<long>((i + nt - 1) % nt) : static_cast<long>(i) - 1;
        return chain.cyclic ? static_cast<long>((i + 1) % nt) : (i + 1 < nt ? static_cast<long>(i) + 1 : -1);
    };
    std::vector<size_t> order(nt);
    for (size_t i = 0; i < nt; ++i) order[i] = cu ? i : nt - 1 - i;
    for (size_t i : order) {
        long si = src_of(i);
        if (si < 0) continue;
        // Cyclic chains use the previous iterate (Jacobi); finite chains
        // use the updated predecessor.
        const GraphSection& src = chain.cyclic ? xi.tiers[si] : out.tiers[si];
        const TubularFrame& ts = chain.tubes[si];
        const TubularFrame& tt = chain.tubes[i];
        GraphSection& dst = out.tiers[i];
        const size_t nj = src.sigma.size(), nk = src.tau.size();
        std::vector<detail::ImageNode> img(nj * nk);
        double guess = std::numeric_limits<double>::quiet_NaN();
        for (size_t j = 0; j < nj; ++j) {
            for (size_t kk = 0; kk < nk; ++kk) {
                // Sweep outward from the center row for good Newton guesses.
                size_t k = (kk % 2 == 0) ? nk / 2 + kk / 2 : nk / 2 - (kk + 1) / 2;
                double v = src.at(j, k), t = src.tau[k];
                Vec3 p = cu ? ts.point(src.sigma[j], v, t) : ts.point(src.sigma[j], t, v);
                ChartPoint q = normalize(ts.manifold, p);
                ChartPoint y = cu ? g.forward(q) : g.inverse(q);
                double sg = guess;
                if (kk > 0) sg = img[j * nk + nk / 2].sigma;
                if (std::isnan(sg)) sg = tt.param(tt.nearest_node(y));
                auto c = tt.locate(y, sg);
                if (!c.ok) fail(ErrorKind::step, "tube coordinates did not converge", {{"column", j}, {"row", k}});
                detail::ImageNode& nd = img[j * nk + k];
                nd.sigma = c.sigma;
                nd.tau = cu ? c.b : c.a;
                nd.value = cu ? c.a : c.b;
                if (std::abs(nd.value) > tube_radius)
                    fail(ErrorKind::step, "projection left the tube", {{"column", j}, {"row", k}});
                st.max_offset = std::max(st.max_offset, std::abs(nd.value));
                if (kk == 0) {
                    // Keep guesses continuous across the seam.
                    if (!std::isnan(guess) && tt.compact && std::abs(c.sigma - guess) > 0.5 * tt.len)
                        nd.sigma += std::round((guess - c.sigma) / tt.len) * tt.len;
                    guess = nd.sigma;
                }
            }
        }
        detail::ImageInverter inv(src, std::move(img), chain.cyclic && tt.compact, tt.len);
        for (size_t j = 0; j < dst.sigma.size(); ++j)
            for (size_t k = 0; k < dst.tau.size(); ++k) {
                auto hit = inv.invert(dst.sigma[j], dst.tau[k]);
                size_t idx = j * dst.tau.size() + k;
                if (!hit.ok) {
                    if (chain.cyclic)
                        fail(ErrorKind::step, "interpolation needs extrapolation beyond one cell",
                             {{"tier", i}, {"column", j}, {"row", k}});
                    dst.trusted[idx] = 0;
                    ++st.untrusted;
                    continue;
                }
                // Finite chains trust a node when its source cell is
                // interior and trusted.
                bool src_trusted = chain.cyclic || hit.inside;
                if (!chain.cyclic)
                    for (long dj = 0; dj <= 1; ++dj)
                        for (long dk = 0; dk <= 1; ++dk)
                            src_trusted = src_trusted && src.trusted[inv.corner(hit.j + dj, hit.k + dk)];
                double old = xi.tiers[i].val[idx];
                dst.val[idx] = hit.value;
                dst.trusted[idx] = src_trusted ? 1 : 0;
                if (dst.trusted[idx]) st.change = std::max(st.change, std::abs(hit.value - old));
                else ++st.untrusted;
            }
    }
    if (stats) *stats = st;
    return out;
}

inline double section_distance(const Sections& a, const Sections& b, bool trusted_only = true) {
    double d = 0;
    for (size_t i = 0; i < a.tiers.size(); ++i)
        for (size_t n = 0; n < a.tiers[i].val.size(); ++n) {
            if (trusted_only && !(a.tiers[i].trusted[n] && b.tiers[i].trusted[n])) continue;
            d = std::max(d, std::abs(a.tiers[i].val[n] - b.tiers[i].val[n]));
        }
    return d;
}

struct Certificate {
    double delta_prime = 0;
    double lambda = 0;
    std::vector<double> history;   ///< d(xi_{n+1}, xi_n)
    bool bound_ok = false;
    double fixed_point_residual = 0;
    double total_displacement = 0; ///< d(xi_0, xi_inf)
    int iterations = 0;
};

inline nlohmann::json to_json_value(const Certificate& c) {
    return {{"delta_prime", c.delta_prime}, {"lambda", c.lambda}, {"history", c.history},
            {"bound_ok", c.bound_ok}, {"fixed_point_residual", c.fixed_point_residual},
            {"total_displacement", c.total_displacement}, {"iterations", c.iterations}};
}

/// Iterates to the fixed point and checks the history against 2 delta' lambda^n.
inline Sections iterate_to_fixed_point(const TubeChain& chain, const DynamicalSystem& g, Sections xi0,
                                       const RateReport& rates, const GraphTransformOptions& opt,
                                       Certificate* cert_out = nullptr) {
    Certificate cert;
    cert.delta_prime = rates.delta_prime;
    cert.lambda = rates.lambda;
    cert.bound_ok = true;
    Sections cur = xi0;
    double bound_total = 2 * rates.delta_prime / (1 - rates.lambda);
    for (int n = 0; n < opt.max_iter; ++n) {
        StepStats st;
        Sections next = transform_step(chain, g, cur, rates.delta2, &st);
        double h = st.change;
        cert.history.push_back(h);
        cert.iterations = n + 1;
        double bound = 2 * rates.delta_prime * std::pow(rates.lambda, n);
        // Changes below the fixed-point tolerance are roundoff.
        if (h > std::max(opt.slack * bound, opt.fixed_point_tol)) {
            cert.bound_ok = false;
            if (cert_out) *cert_out = cert;
            fail(ErrorKind::model_violation, "graph transform history exceeds its contraction bound",
                 {{"iteration", n}, {"change", h}, {"bound", bound}});
        }
        cur = std::move(next);
        cert.total_displacement = section_distance(cur, xi0);
        if (cert.total_displacement > std::max(opt.slack * bound_total, opt.fixed_point_tol))
            fail(ErrorKind::model_violation, "sections drifted beyond 2 delta'/(1 - lambda)",
                 {{"iteration", n}, {"drift", cert.total_displacement}});
        if (h < opt.fixed_point_tol) break;
        if (n + 1 == opt.max_iter)
            fail(ErrorKind::convergence, "graph transform did not converge", {{"last_change", h}});
    }
    // One more step measures the residual.
    StepStats st;
    transform_step(chain, g, cur, rates.delta2, &st);
    cert.fixed_point_residual = st.change;
    if (cert.fixed_point_residual >= std::max(opt.fixed_point_tol, 1e-15) * 10)
        fail(ErrorKind::convergence, "fixed point residual too large", {{"residual", cert.fixed_point_residual}});
    if (cert_out) *cert_out = cert;
    return cur;
}

/// Section built from low Fourier modes with sup norm at most `amplitude`
/// and slopes of order amplitude.
inline GraphSection random_section(const GraphSection& shape, double amplitude, std::mt19937_64& rng) {
    GraphSection g = shape;
    std::uniform_real_distribution<double> u(-1, 1);
    double c[3][3];
    for (auto& row : c)
        for (auto& v : row) v = u(rng);
    double w = shape.tau.back();
    double period = shape.periodic ? shape.period : (shape.sigma.back() - shape.sigma.front());
    double norm = 0;
    for (auto& row : c)
        for (auto& v : row) norm += std::abs(v);
    for (size_t j = 0; j < g.sigma.size(); ++j)
        for (size_t k = 0; k < g.tau.size(); ++k) {
            double s = 2 * pi * (g.sigma[j] - shape.sigma.front()) / period;
            double t = g.tau[k] / w;
            double v = 0;
            for (int m = 0; m < 3; ++m)
                for (int q = 0; q < 3; ++q) v += c[m][q] * std::cos(m * s + q) * std::pow(t, q);
            g.at(j, k) = amplitude * v / norm;
        }
    return g;
}

struct FiberPoint {
    double sigma = 0, a = 0, b = 0;
    bool trusted = true;
};

/// Continued leaf on one tier: fiberwise intersection of the two graphs.
struct ContinuedLeaf {
    std::vector<FiberPoint> fibers;
    LeafArc arc;  ///< raw samples of L' in the tube lift, t = arc length
    std::vector<double> sigma_of_t;  ///< fiber parameter of each arc sample
};

struct ContinuationResult {
    TubeChain chain;
    Sections cu, cs;
    Certificate cert_cu, cert_cs;
    std::vector<ContinuedLeaf> leaves;
    RateReport rates;
    double tangency = 0;      ///< max angle between L' and E^c_g
    double equivariance = 0;  ///< Hausdorff(g(L'_i), L'_{i+1})
    double displacement = 0;  ///< sup distance of L' from L
    double grid_change = 0;   ///< movement of L' under the last refinement
};

namespace detail {

/// Point of L' in the fiber over s: a = xcu(s, b), b = xcs(s, a).
inline std::pair<double, double> fiber_solve(const GraphSection& xcu, const GraphSection& xcs, double s) {
    double a = 0, b = 0;
    for (int it = 0; it < 100; ++it) {
        double an = xcu.value(s, b);
        double bn = xcs.value(s, an);
        double d = std::abs(an - a) + std::abs(bn - b);
        a = an;
        b = bn;
        if (d < 1e-17) break;
    }
    return {a, b};
}

inline ContinuedLeaf intersect_fibers(const TubularFrame& tube, const GraphSection& xcu, const GraphSection& xcs) {
    ContinuedLeaf cl;
    const auto& m = tube.manifold;
    for (size_t j = 0; j < xcu.sigma.size(); ++j) {
        double s = xcu.sigma[j];
        auto [a, b] = fiber_solve(xcu, xcs, s);
        FiberPoint fp{s, a, b, true};
        // Trust follows the nodes used by both sections.
        size_t k = xcu.tau.size() / 2;
        fp.trusted = xcu.trusted[j * xcu.tau.size() + k] != 0;
        if (j < xcs.sigma.size()) fp.trusted = fp.trusted && xcs.trusted[j * xcs.tau.size() + k];
        cl.fibers.push_back(fp);
    }
    // Arc samples, with one closing sample for compact tubes.
    size_t n = cl.fibers.size();
    size_t total = tube.compact ? n + 1 : n;
    std::vector<Vec3> pts;
    for (size_t j = 0; j < total; ++j) {
        const FiberPoint& fp = cl.fibers[j % n];
        double s = fp.sigma + (j >= n ? tube.len : 0.0);
        pts.push_back(tube.point(s, fp.a, fp.b));
        cl.sigma_of_t.push_back(s);
    }
    cl.arc.manifold = m;
    cl.arc.t.assign(total, 0.0);
    for (size_t j = 1; j < total; ++j) cl.arc.t[j] = cl.arc.t[j - 1] + (pts[j] - pts[j - 1]).norm();
    cl.arc.raw = pts;
    cl.arc.tangent.resize(total);
    for (size_t j = 0; j < total; ++j) {
        Vec3 d;
        if (j == 0) d = tube.compact ? Vec3(pts[1] - tube.seam_inv(pts[total - 2])) : Vec3(pts[1] - pts[0]);
        else if (j + 1 == total) d = tube.compact ? Vec3(tube.seam(pts[1]) - pts[j - 1]) : Vec3(pts[j] - pts[j - 1]);
        else d = pts[j + 1] - pts[j - 1];
        cl.arc.tangent[j] = unit(d);
    }
    return cl;
}

} // namespace detail

/// Iterates of a compact leaf: number of distinct leaves in its f-orbit
/// (up to max_period), detected by locating f^k(x) on the closed leaves.
inline TubeChain compact_chain(const DynamicalSystem& f, const Foliations& fol, const ChartPoint& x,
                               double step, double radius, int max_period = 6, double max_len = 5.0) {
    TubeChain chain;
    chain.cyclic = true;
    ChartPoint p = normalize(f.manifold(), x);
    Vec3 ref = fol.c->direction(p);
    for (int k = 0; k < max_period; ++k) {
        LeafArc leaf = close_leaf(*fol.c, p, step, max_len, 1e-9, &ref);
        chain.tubes.push_back(make_tubular_frame(fol, leaf, true, radius));
        ChartPoint q = f.forward(p);
        // Orientation of the next leaf follows Df.
        ref = f.jacobian(p) * leaf.chart_tangent(0);
        p = q;
        // Back on the first leaf?
        auto c = chain.tubes.front().locate(p, chain.tubes.front().param(chain.tubes.front().nearest_node(p)));
        if (c.ok && std::abs(c.a) < 1e-9 && std::abs(c.b) < 1e-9) return chain;
    }
    fail(ErrorKind::invalid_input, "leaf is not periodic within the period budget");
}

/**
 * Continues the compact leaf of f through x to a center leaf of g. Uses the
 * measured rates; the grid is refined once and the movement of L' reported.
 */
inline ContinuationResult continuation_leaf(const DynamicalSystem& f, const DynamicalSystem& g,
                                            const ChartPoint& x, const RateReport& rates,
                                            GraphTransformOptions opt = {}, bool refine = true) {
    if (!rates.accepted)
        fail(ErrorKind::model_violation, "delta' is above the cascade threshold",
             {{"delta_prime", rates.delta_prime}, {"threshold", rates.threshold()}});
    Foliations fol = foliations(f);
    double hc = opt.center_step > 0 ? opt.center_step : rates.delta3 / 10;
    ContinuationResult res;
    res.rates = rates;
    res.chain = compact_chain(f, fol, x, std::clamp(hc * 4, 1e-4, 1e-2), rates.delta2);
    auto run = [&](double step, ContinuationResult& r) {
        r.cu.kind = StripKind::cu;
        r.cs.kind = StripKind::cs;
        r.cu.tiers.clear();
        r.cs.tiers.clear();
        for (const auto& t : r.chain.tubes) {
            r.cu.tiers.push_back(zero_section(t, rates.delta3, opt.transverse_half, step, opt.grid_phase));
            r.cs.tiers.push_back(zero_section(t, rates.delta3, opt.transverse_half, step, opt.grid_phase));
        }
        r.cu = iterate_to_fixed_point(r.chain, g, r.cu, rates, opt, &r.cert_cu);
        r.cs = iterate_to_fixed_point(r.chain, g, r.cs, rates, opt, &r.cert_cs);
        r.leaves.clear();
        for (size_t i = 0; i < r.chain.tubes.size(); ++i)
            r.leaves.push_back(detail::intersect_fibers(r.chain.tubes[i], r.cu.tiers[i], r.cs.tiers[i]));
    };
    run(2 * hc, res);
    if (refine) {
        ContinuationResult fine = res;
        run(hc, fine);
        // Movement of L' between the two resolutions, at the coarse fibers.
        double moved = 0;
        for (size_t i = 0; i < res.leaves.size(); ++i)
            for (const auto& fp : res.leaves[i].fibers) {
                double a = fine.cu.tiers[i].value(fp.sigma, fp.b);
                double b = fine.cs.tiers[i].value(fp.sigma, a);
                moved = std::max({moved, std::abs(a - fp.a), std::abs(b - fp.b)});
            }
        res = std::move(fine);
        res.grid_change = moved;
    }

    // Tangency to E^c_g, displacement, equivariance.
    SplittingLineField cg(SplittingEstimator(g), Bundle::center);
    const auto& m = f.manifold();
    for (size_t i = 0; i < res.leaves.size(); ++i) {
        const auto& arc = res.leaves[i].arc;
        const auto& tube = res.chain.tubes[i];
        for (size_t j = 0; j + 1 < arc.size(); ++j) {
            Vec3 chord = arc.raw[j + 1] - arc.raw[j];
            Vec3 mid = 0.5 * (arc.raw[j + 1] + arc.raw[j]);
            Reduced r = reduce(m, mid);
            Vec3 e = deck_linear(m, r.k).inverse() * cg.direction(r.chart);
            res.tangency = std::max(res.tangency, line_angle(chord, e));
        }
        for (const auto& fp : res.leaves[i].fibers)
            res.displacement = std::max(res.displacement, (fp.a * tube.eval(fp.sigma).s + fp.b * tube.eval(fp.sigma).u).norm());
        size_t nxt = (i + 1) % res.leaves.size();
        std::vector<ChartPoint> img, target = res.leaves[nxt].arc.chart_points();
        for (size_t j = 0; j < arc.size(); ++j) img.push_back(g.forward(arc.chart(j)));
        res.equivariance = std::max(res.equivariance, curve_hausdorff(m, img, target));
    }
    if (res.tangency > 1e-5)
        fail(ErrorKind::tangency, "continued leaf is not tangent to E^c_g", {{"angle", res.tangency}});
    return res;
}

/// Result of continuing a center segment along its orbit.
struct Immersion {
    TubeChain chain;
    Sections cu, cs;
    std::vector<ContinuedLeaf> gamma;  ///< gamma_n for n = -N..N
    int n_max = 0;
    double max_offset = 0;             ///< sup d(f^n eta, gamma_n) on trusted fibers
    double equivariance = 0;           ///< Hausdorff(g gamma_n, gamma_{n+1}) on trusted interiors
    size_t trusted_fibers = 0;         ///< trusted fibers on gamma_0
};

/**
 * gamma_n for the center segment of f through x of half length `half`,
 * n = -N..N; tiers -N (cu) and +N (cs) start at the zero section.
 */
inline Immersion continue_immersion(const DynamicalSystem& f, const DynamicalSystem& g, const ChartPoint& x,
                                    double half, int n_max, const RateReport& rates,
                                    GraphTransformOptions opt = {}) {
    require(n_max >= 1, "need at least one iterate on each side");
    Foliations fol = foliations(f);
    double hc = opt.center_step > 0 ? opt.center_step : rates.delta3 / 10;
    Immersion im;
    im.n_max = n_max;
    im.chain.cyclic = false;
    im.chain.first_index = -n_max;
    ChartPoint p = normalize(f.manifold(), f.iterate(x, -n_max));
    Vec3 ref = fol.c->direction(p);
    // The window grows by a margin per tier so images cover the next tube.
    double margin = 0.05 * half + 4 * hc;
    IntegrationOptions io;
    io.step = std::clamp(hc, io.h_min, io.h_max);
    // A whole number of steps keeps the samples uniform.
    double reach = io.step * std::ceil((half + margin) / io.step - 1e-9);
    for (int n = -n_max; n <= n_max; ++n) {
        LeafArc leaf = integrate_leaf(*fol.c, p, reach, io, 1, ref);
        if (leaf.truncated) fail(ErrorKind::integration, "center segment left the chart", {{"iterate", n}});
        im.chain.tubes.push_back(make_tubular_frame(fol, leaf, false, 0.0));
        ref = f.jacobian(p) * align(fol.c->direction(p), ref);
        p = f.forward(p);
    }
    im.cu.kind = StripKind::cu;
    im.cs.kind = StripKind::cs;
    for (const auto& t : im.chain.tubes) {
        im.cu.tiers.push_back(zero_section(t, rates.delta3, opt.transverse_half, hc, opt.grid_phase));
        im.cs.tiers.push_back(zero_section(t, rates.delta3, opt.transverse_half, hc, opt.grid_phase));
    }
    StepStats st;
    im.cu = transform_step(im.chain, g, im.cu, rates.delta2, &st);
    im.cs = transform_step(im.chain, g, im.cs, rates.delta2, &st);
    const auto& m = f.manifold();
    for (size_t i = 0; i < im.chain.tubes.size(); ++i)
        im.gamma.push_back(detail::intersect_fibers(im.chain.tubes[i], im.cu.tiers[i], im.cs.tiers[i]));
    // Trusted interior: drop a margin of fibers at both window ends.
    auto interior = [&](size_t i) {
        std::vector<ChartPoint> pts;
        const auto& fb = im.gamma[i].fibers;
        for (size_t j = 0; j < fb.size(); ++j)
            if (fb[j].trusted && std::abs(fb[j].sigma) <= half) pts.push_back(im.gamma[i].arc.chart(j));
        return pts;
    };
    for (size_t i = 0; i < im.chain.tubes.size(); ++i) {
        const auto& tube = im.chain.tubes[i];
        for (const auto& fp : im.gamma[i].fibers)
            if (fp.trusted && std::abs(fp.sigma) <= half) {
                auto e = tube.eval(fp.sigma);
                im.max_offset = std::max(im.max_offset, (fp.a * e.s + fp.b * e.u).norm());
            }
        if (i + 1 < im.chain.tubes.size()) {
            auto a = interior(i);
            auto b = interior(i + 1);
            if (a.empty() || b.empty()) continue;
            // Only the interior of g(gamma_i) is compared, trimmed by the
            // boundary margin.
            std::vector<ChartPoint> ga;
            for (size_t j = a.size() / 10; j < a.size() - a.size() / 10; ++j) ga.push_back(g.forward(a[j]));
            double h = 0;
            for (const auto& q : ga) h = std::max(h, point_polyline_distance(m, q, b));
            im.equivariance = std::max(im.equivariance, h);
        }
    }
    size_t mid = static_cast<size_t>(n_max);
    for (const auto& fp : im.gamma[mid].fibers)
        if (fp.trusted) ++im.trusted_fibers;
    return im;
}

} // namespace dafkit
