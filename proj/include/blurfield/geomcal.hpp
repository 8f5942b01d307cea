#pragma once

#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <random>

#include <Eigen/Dense>

#include "image.hpp"
#include "json_util.hpp"

namespace blurfield::geomcal {

using Point = std::array<double, 2>;

// ---------------------------------------------------------------------------
// Homography
// ---------------------------------------------------------------------------

/// Row-major 3x3 projective map, scaled so that entry (3,3) is 1 when nonzero.
struct Homography {
    std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography from_matrix(const Eigen::Matrix3d& m) {
        Homography H;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) H.h[r * 3 + c] = m(r, c);
        return H.normalized();
    }

    Eigen::Matrix3d matrix() const {
        Eigen::Matrix3d m;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) m(r, c) = h[r * 3 + c];
        return m;
    }

    Homography normalized() const {
        Homography out = *this;
        if (std::abs(h[8]) > 1e-300)
            for (double& v : out.h) v /= h[8];
        return out;
    }

    double det() const { return matrix().determinant(); }

    void check_invertible() const {
        if (!(std::abs(normalized().det()) > 1e-12)) throw NumericError("homography is singular");
    }

    Point apply(const Point& p) const {
        double w = h[6] * p[0] + h[7] * p[1] + h[8];
        return {(h[0] * p[0] + h[1] * p[1] + h[2]) / w, (h[3] * p[0] + h[4] * p[1] + h[5]) / w};
    }

    Homography inverse() const {
        check_invertible();
        return from_matrix(matrix().inverse());
    }

    static Homography translation(double tx, double ty) {
        Homography H;
        H.h[2] = tx;
        H.h[5] = ty;
        return H;
    }
};

namespace detail {

/// Hartley normalisation: centroid to origin, mean distance sqrt(2).
inline Eigen::Matrix3d normalizing_transform(std::span<const Point> pts) {
    double mx = 0, my = 0;
    for (const auto& p : pts) mx += p[0], my += p[1];
    mx /= pts.size();
    my /= pts.size();
    double md = 0;
    for (const auto& p : pts) md += std::hypot(p[0] - mx, p[1] - my);
    md /= pts.size();
    double s = md > 0 ? std::sqrt(2.0) / md : 1.0;
    Eigen::Matrix3d T;
    T << s, 0, -s * mx, 0, s, -s * my, 0, 0, 1;
    return T;
}

inline Point transform(const Eigen::Matrix3d& T, const Point& p) {
    Eigen::Vector3d q = T * Eigen::Vector3d(p[0], p[1], 1.0);
    return {q[0] / q[2], q[1] / q[2]};
}

/// Normalised direct linear transform on the listed correspondences.
inline std::optional<Homography> dlt(std::span<const Point> src, std::span<const Point> dst,
                                     std::span<const std::size_t> idx) {
    const std::size_t n = idx.size();
    if (n < 4) return std::nullopt;
    std::vector<Point> s(n), d(n);
    for (std::size_t k = 0; k < n; ++k) s[k] = src[idx[k]], d[k] = dst[idx[k]];
    Eigen::Matrix3d Ts = normalizing_transform(s), Td = normalizing_transform(d);
    Eigen::MatrixXd A(2 * n, 9);
    for (std::size_t k = 0; k < n; ++k) {
        Point a = transform(Ts, s[k]), b = transform(Td, d[k]);
        double x = a[0], y = a[1], u = b[0], v = b[1];
        A.row(2 * k) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
        A.row(2 * k + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    Eigen::VectorXd hv = svd.matrixV().col(8);
    Eigen::Matrix3d Hn;
    Hn << hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8];
    Eigen::Matrix3d H = Td.inverse() * Hn * Ts;
    if (!H.allFinite() || std::abs(H(2, 2)) < 1e-300) return std::nullopt;
    Homography out = Homography::from_matrix(H);
    if (!(std::abs(out.det()) > 1e-12)) return std::nullopt;
    return out;
}

inline double reprojection_error(const Homography& H, const Point& s, const Point& d) {
    Point p = H.apply(s);
    return std::hypot(p[0] - d[0], p[1] - d[1]);
}

inline bool collinear(const Point& a, const Point& b, const Point& c) {
    double cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    double scale = std::hypot(b[0] - a[0], b[1] - a[1]) * std::hypot(c[0] - a[0], c[1] - a[1]);
    return std::abs(cross) <= 1e-9 * std::max(scale, 1e-300);
}

/// Gauss-Newton refinement of the 8 free entries on geometric reprojection error.
inline Homography refine_geometric(Homography H, std::span<const Point> src, std::span<const Point> dst,
                                   std::span<const std::size_t> idx, int iterations = 10) {
    for (int it = 0; it < iterations; ++it) {
        Eigen::Matrix<double, 8, 8> JtJ = Eigen::Matrix<double, 8, 8>::Zero();
        Eigen::Matrix<double, 8, 1> Jtr = Eigen::Matrix<double, 8, 1>::Zero();
        double cost = 0;
        const auto& h = H.h;
        for (std::size_t k : idx) {
            double x = src[k][0], y = src[k][1];
            double w = h[6] * x + h[7] * y + 1.0;
            double px = (h[0] * x + h[1] * y + h[2]) / w, py = (h[3] * x + h[4] * y + h[5]) / w;
            double rx = px - dst[k][0], ry = py - dst[k][1];
            cost += rx * rx + ry * ry;
            Eigen::Matrix<double, 8, 1> jx, jy;
            jx << x / w, y / w, 1 / w, 0, 0, 0, -px * x / w, -px * y / w;
            jy << 0, 0, 0, x / w, y / w, 1 / w, -py * x / w, -py * y / w;
            JtJ += jx * jx.transpose() + jy * jy.transpose();
            Jtr += jx * rx + jy * ry;
        }
        Eigen::Matrix<double, 8, 1> delta = JtJ.ldlt().solve(-Jtr);
        if (!delta.allFinite()) break;
        Homography next = H;
        for (int q = 0; q < 8; ++q) next.h[q] += delta[q];
        double next_cost = 0;
        for (std::size_t k : idx) {
            double e = reprojection_error(next, src[k], dst[k]);
            next_cost += e * e;
        }
        if (!(next_cost <= cost)) break;
        H = next;
        if (delta.norm() < 1e-15 * (1.0 + Eigen::Map<const Eigen::Matrix<double, 8, 1>>(H.h.data()).norm()))
            break;
    }
    return H;
}

}  // namespace detail

struct RansacOptions {
    double inlier_threshold_px = 1.5;
    int max_iterations = 2000;
    std::uint64_t seed = 0;
};

/// Robust homography src -> dst: seeded RANSAC over minimal 4-point DLT fits,
/// then a normalised DLT and geometric refinement on the consensus set.
inline Homography fit_homography_ransac(std::span<const Point> src, std::span<const Point> dst,
                                        const RansacOptions& opt = {}) {
    if (src.size() != dst.size()) throw InputError("correspondence lists differ in length");
    const std::size_t n = src.size();
    if (n < 4) throw InputError("homography needs at least 4 correspondences");
    std::mt19937_64 rng(derive_seed(opt.seed, 0x72616E736163ULL));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);

    auto inliers_of = [&](const Homography& H) {
        std::vector<std::size_t> in;
        for (std::size_t k = 0; k < n; ++k)
            if (detail::reprojection_error(H, src[k], dst[k]) < opt.inlier_threshold_px) in.push_back(k);
        return in;
    };

    std::vector<std::size_t> best;
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    if (n == 4) {
        best = all;
    } else {
        for (int it = 0; it < opt.max_iterations; ++it) {
            std::array<std::size_t, 4> s;
            for (int q = 0; q < 4; ++q) {
                bool fresh;
                do {
                    s[q] = pick(rng);
                    fresh = true;
                    for (int r = 0; r < q; ++r) fresh &= s[r] != s[q];
                } while (!fresh);
            }
            bool degenerate = false;
            for (int a = 0; a < 4 && !degenerate; ++a)
                for (int b = a + 1; b < 4 && !degenerate; ++b)
                    for (int c = b + 1; c < 4 && !degenerate; ++c)
                        degenerate = detail::collinear(src[s[a]], src[s[b]], src[s[c]]) ||
                                     detail::collinear(dst[s[a]], dst[s[b]], dst[s[c]]);
            if (degenerate) continue;
            auto H = detail::dlt(src, dst, s);
            if (!H) continue;
            auto in = inliers_of(*H);
            if (in.size() > best.size()) best = std::move(in);
            if (best.size() == n) break;
        }
    }
    if (best.size() * 2 < n) throw NumericError("no homography with at least 50% inliers");
    std::optional<Homography> H = detail::dlt(src, dst, best);
    if (!H) throw NumericError("degenerate homography fit");
    for (int pass = 0; pass < 2; ++pass) {
        auto in = inliers_of(*H);
        if (in.size() >= 4) best = std::move(in);
        auto refit = detail::dlt(src, dst, best);
        if (refit) H = detail::refine_geometric(*refit, src, dst, best);
    }
    return H->normalized();
}

// ---------------------------------------------------------------------------
// Radial distortion
// ---------------------------------------------------------------------------

/// Brown-Conrady radial model up to r^6 about the principal point, with
/// radius measured in units of `fn` pixels.
struct RadialDistortion {
    double k1 = 0, k2 = 0, k3 = 0;
    double cx = 0, cy = 0;
    double fn = 1;

    double factor(double rho2) const { return 1.0 + rho2 * (k1 + rho2 * (k2 + rho2 * k3)); }

    /// d/drho of rho * factor(rho^2).
    double radial_slope(double rho) const {
        double r2 = rho * rho;
        return 1.0 + r2 * (3 * k1 + r2 * (5 * k2 + r2 * 7 * k3));
    }

    Point apply(const Point& p) const {
        if (is_identity()) return p;
        double dx = (p[0] - cx) / fn, dy = (p[1] - cy) / fn;
        double f = factor(dx * dx + dy * dy);
        return {cx + (p[0] - cx) * f, cy + (p[1] - cy) * f};
    }

    /// Inverts apply() along the radial line with a damped Newton iteration
    /// on the radius; throws when it cannot reach 1e-6 px.
    Point undistort(const Point& q) const {
        if (is_identity()) return q;
        double dx = q[0] - cx, dy = q[1] - cy;
        double rd = std::hypot(dx, dy) / fn;
        if (rd == 0) return q;
        double rho = rd;
        auto g = [&](double r) { return r * factor(r * r) - rd; };
        for (int it = 0; it < 100; ++it) {
            double res = g(rho);
            if (std::abs(res) * fn < 1e-9) break;
            double slope = radial_slope(rho);
            if (!(slope > 0)) throw NumericError("radial distortion is not invertible here");
            double step = res / slope, lambda = 1.0;
            while (lambda > 1e-6 && std::abs(g(rho - lambda * step)) >= std::abs(res)) lambda *= 0.5;
            rho -= lambda * step;
        }
        double scale = rho / rd;
        Point p{cx + dx * scale, cy + dy * scale};
        Point back = apply(p);
        if (!(std::hypot(back[0] - q[0], back[1] - q[1]) < 1e-6))
            throw NumericError("undistortion did not converge");
        return p;
    }

    /// Forward map is monotone in radius out to `max_radius_px`.
    bool injective_up_to(double max_radius_px, int samples = 1000) const {
        for (int i = 0; i <= samples; ++i)
            if (!(radial_slope(max_radius_px / fn * i / samples) > 0)) return false;
        return true;
    }

    bool is_identity() const { return k1 == 0 && k2 == 0 && k3 == 0; }
};

// ---------------------------------------------------------------------------
// Dots
// ---------------------------------------------------------------------------

/// 1 where the pattern looks brighter than its inverse (strict inequality).
inline Image binarize_pair(const Image& img, const Image& img_inverse) {
    if (!img.same_shape(img_inverse)) throw InputError("binarize_pair: image dimensions differ");
    Image mask(img.width(), img.height(), img.channels());
    for (std::size_t k = 0; k < img.size(); ++k)
        mask.data()[k] = img.data()[k] > img_inverse.data()[k] ? 1.0f : 0.0f;
    return mask;
}

namespace detail {

struct Component {
    double sx = 0, sy = 0;
    std::size_t area = 0;
};

inline std::vector<Component> connected_components(const Image& binary) {
    const int w = binary.width(), h = binary.height();
    std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t start = static_cast<std::size_t>(y) * w + x;
            if (binary.at(x, y) <= 0.5f || label[start] >= 0) continue;
            Component c;
            const int id = static_cast<int>(comps.size());
            label[start] = id;
            stack.assign(1, static_cast<int>(start));
            while (!stack.empty()) {
                int p = stack.back();
                stack.pop_back();
                int px = p % w, py = p / w;
                c.sx += px;
                c.sy += py;
                ++c.area;
                const int nx[4] = {px - 1, px + 1, px, px};
                const int ny[4] = {py, py, py - 1, py + 1};
                for (int q = 0; q < 4; ++q) {
                    if (nx[q] < 0 || ny[q] < 0 || nx[q] >= w || ny[q] >= h) continue;
                    std::size_t qi = static_cast<std::size_t>(ny[q]) * w + nx[q];
                    if (label[qi] >= 0 || binary.at(nx[q], ny[q]) <= 0.5f) continue;
                    label[qi] = id;
                    stack.push_back(static_cast<int>(qi));
                }
            }
            comps.push_back(c);
        }
    return comps;
}

/// Intensity centre of mass inside a disc, background (disc minimum) removed.
inline Point refine_center(const Image& intensity, Point c, double radius) {
    for (int it = 0; it < 3; ++it) {
        int x0 = static_cast<int>(std::floor(c[0] - radius)), x1 = static_cast<int>(std::ceil(c[0] + radius));
        int y0 = static_cast<int>(std::floor(c[1] - radius)), y1 = static_cast<int>(std::ceil(c[1] + radius));
        double lo = std::numeric_limits<double>::infinity();
        for (int y = std::max(0, y0); y <= std::min(intensity.height() - 1, y1); ++y)
            for (int x = std::max(0, x0); x <= std::min(intensity.width() - 1, x1); ++x)
                if (std::hypot(x - c[0], y - c[1]) <= radius) lo = std::min(lo, double(intensity.at(x, y)));
        double sw = 0, sx = 0, sy = 0;
        for (int y = std::max(0, y0); y <= std::min(intensity.height() - 1, y1); ++y)
            for (int x = std::max(0, x0); x <= std::min(intensity.width() - 1, x1); ++x) {
                if (std::hypot(x - c[0], y - c[1]) > radius) continue;
                double wgt = intensity.at(x, y) - lo;
                sw += wgt;
                sx += wgt * x;
                sy += wgt * y;
            }
        if (!(sw > 0)) break;
        Point next{sx / sw, sy / sw};
        bool done = std::hypot(next[0] - c[0], next[1] - c[1]) < 1e-4;
        c = next;
        if (done) break;
    }
    return c;
}

}  // namespace detail

/// Orders points row-major on a (rows x cols) grid: dominant axes come from
/// nearest-neighbour directions, rows are split along the second axis, and
/// each row is sorted along the first.
inline std::vector<Point> order_grid(std::vector<Point> pts, int rows, int cols) {
    if (static_cast<int>(pts.size()) != rows * cols) throw InputError("point count does not match grid");
    if (pts.size() == 1) return pts;
    double s4 = 0, c4 = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        Point v{0, 0};
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (i == j) continue;
            double d = std::hypot(pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]);
            if (d < best) best = d, v = {pts[j][0] - pts[i][0], pts[j][1] - pts[i][1]};
        }
        double th = std::atan2(v[1], v[0]);
        s4 += std::sin(4 * th);
        c4 += std::cos(4 * th);
    }
    double phi = std::atan2(s4, c4) / 4.0;
    Point a1{std::cos(phi), std::sin(phi)}, a2{-std::sin(phi), std::cos(phi)};
    if (std::abs(a1[0]) < std::abs(a2[0])) std::swap(a1, a2);  // a1 is the x-like axis
    if (a1[0] < 0) a1 = {-a1[0], -a1[1]};
    if (a2[1] < 0) a2 = {-a2[0], -a2[1]};
    auto proj = [](const Point& p, const Point& a) { return p[0] * a[0] + p[1] * a[1]; };

    std::stable_sort(pts.begin(), pts.end(), [&](const Point& p, const Point& q) {
        double dp = proj(p, a2), dq = proj(q, a2);
        if (dp != dq) return dp < dq;
        return p[0] < q[0];
    });
    std::vector<Point> out;
    out.reserve(pts.size());
    double prev_max = -std::numeric_limits<double>::infinity();
    for (int r = 0; r < rows; ++r) {
        std::vector<Point> row(pts.begin() + r * cols, pts.begin() + (r + 1) * cols);
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& p : row) lo = std::min(lo, proj(p, a2)), hi = std::max(hi, proj(p, a2));
        if (r > 0 && !(lo > prev_max)) throw InputError("dot grid ordering is ambiguous");
        prev_max = hi;
        std::stable_sort(row.begin(), row.end(), [&](const Point& p, const Point& q) {
            double dp = proj(p, a1), dq = proj(q, a1);
            if (dp != dq) return dp < dq;
            return p[1] < q[1];
        });
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

/// Sub-pixel dot centres, ordered row-major. `intensity` is the
/// pre-binarisation image in which dots are bright.
inline std::vector<Point> detect_dots(const Image& binary, const Image& intensity, int rows, int cols,
                                      double refine_radius_px) {
    if (!binary.same_shape(intensity)) throw InputError("detect_dots: image dimensions differ");
    if (rows <= 0 || cols <= 0) throw InputError("detect_dots: grid must be non-empty");
    auto comps = detail::connected_components(binary);
    if (comps.empty()) throw InputError("no dots found");
    std::vector<std::size_t> areas;
    for (const auto& c : comps) areas.push_back(c.area);
    std::nth_element(areas.begin(), areas.begin() + areas.size() / 2, areas.end());
    const double median = static_cast<double>(areas[areas.size() / 2]);
    std::vector<Point> centers;
    for (const auto& c : comps) {
        if (c.area < 0.25 * median || c.area > 4.0 * median) continue;
        Point p{c.sx / c.area, c.sy / c.area};
        centers.push_back(detail::refine_center(intensity, p, refine_radius_px));
    }
    const int expected = rows * cols;
    if (static_cast<int>(centers.size()) != expected)
        throw InputError("found " + std::to_string(centers.size()) + " dots, expected " + std::to_string(expected));
    return order_grid(std::move(centers), rows, cols);
}

// ---------------------------------------------------------------------------
// Distortion + homography estimation
// ---------------------------------------------------------------------------

struct DistortionFit {
    RadialDistortion distortion;
    Homography homography;  // scene (albedo) -> undistorted sensor
    double rms_residual_px = 0;
    double condition = 0;
};

struct DistortionOptions {
    double max_rms_px = 1.0;
    double fn = 0;  // 0: half the sensor diagonal
    double max_condition = 1e10;
    int iterations = 100;
};

/// Joint Levenberg-Marquardt fit of (k1, k2, k3, H) minimising
/// |D(H(scene_i)) - detected_i|^2 with the principal point at the sensor centre.
inline DistortionFit estimate_distortion(std::span<const Point> detected, std::span<const Point> scene,
                                         int sensor_width, int sensor_height,
                                         const DistortionOptions& opt = {}) {
    if (detected.size() != scene.size()) throw InputError("correspondence lists differ in length");
    const std::size_t n = detected.size();
    if (n < 30) throw InputError("distortion estimation needs at least 30 correspondences");
    double minx = 1e300, maxx = -1e300, miny = 1e300, maxy = -1e300;
    for (const auto& p : detected)
        minx = std::min(minx, p[0]), maxx = std::max(maxx, p[0]), miny = std::min(miny, p[1]), maxy = std::max(maxy, p[1]);
    if ((maxx - minx) < 0.6 * sensor_width || (maxy - miny) < 0.6 * sensor_height)
        log::warn("distortion correspondences span less than 60% of the sensor; fit may be degenerate");

    RadialDistortion D;
    D.cx = (sensor_width - 1) / 2.0;
    D.cy = (sensor_height - 1) / 2.0;
    D.fn = opt.fn > 0 ? opt.fn : 0.5 * std::hypot(sensor_width, sensor_height);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    auto H0 = detail::dlt(scene, detected, all);
    if (!H0) throw NumericError("degenerate homography initialisation");
    Homography H = *H0;

    using Vec = Eigen::Matrix<double, 11, 1>;
    auto pack = [](const RadialDistortion& d, const Homography& h) {
        Vec v;
        v << d.k1, d.k2, d.k3, h.h[0], h.h[1], h.h[2], h.h[3], h.h[4], h.h[5], h.h[6], h.h[7];
        return v;
    };
    auto unpack = [&](const Vec& v, RadialDistortion& d, Homography& h) {
        d.k1 = v[0], d.k2 = v[1], d.k3 = v[2];
        for (int q = 0; q < 8; ++q) h.h[q] = v[3 + q];
        h.h[8] = 1.0;
    };
    auto residuals = [&](const Vec& v) {
        RadialDistortion d = D;
        Homography h;
        unpack(v, d, h);
        Eigen::VectorXd r(2 * n);
        for (std::size_t k = 0; k < n; ++k) {
            Point p = d.apply(h.apply(scene[k]));
            r[2 * k] = p[0] - detected[k][0];
            r[2 * k + 1] = p[1] - detected[k][1];
        }
        return r;
    };
    auto jacobian = [&](const Vec& v) {
        Eigen::MatrixXd J(2 * n, 11);
        for (int q = 0; q < 11; ++q) {
            double step = 1e-7 * std::max(1.0, std::abs(v[q]));
            Vec a = v, b = v;
            a[q] += step;
            b[q] -= step;
            J.col(q) = (residuals(a) - residuals(b)) / (2 * step);
        }
        return J;
    };

    Vec x = pack(D, H);
    Eigen::VectorXd r = residuals(x);
    double cost = r.squaredNorm();
    double lambda = 1e-3;
    Eigen::MatrixXd J = jacobian(x);
    for (int it = 0; it < opt.iterations; ++it) {
        Eigen::Matrix<double, 11, 11> A = J.transpose() * J;
        Vec g = J.transpose() * r;
        bool improved = false;
        for (int tries = 0; tries < 20 && !improved; ++tries) {
            Eigen::Matrix<double, 11, 11> Ad = A;
            for (int q = 0; q < 11; ++q) Ad(q, q) += lambda * std::max(A(q, q), 1e-12);
            Vec delta = Ad.ldlt().solve(-g);
            Vec cand = x + delta;
            Eigen::VectorXd rc = residuals(cand);
            double cc = rc.squaredNorm();
            if (std::isfinite(cc) && cc < cost) {
                bool converged = (cost - cc) < 1e-14 * cost + 1e-20;
                x = cand, r = rc, cost = cc;
                lambda = std::max(lambda * 0.3, 1e-12);
                improved = true;
                if (converged) it = opt.iterations;
            } else {
                lambda *= 10;
            }
        }
        if (!improved) break;
        J = jacobian(x);
    }

    DistortionFit fit;
    fit.distortion = D;
    unpack(x, fit.distortion, fit.homography);
    fit.rms_residual_px = std::sqrt(cost / n);

    // Conditioning of the column-scaled normal equations.
    Eigen::MatrixXd Js = J;
    for (int q = 0; q < 11; ++q) {
        double nrm = Js.col(q).norm();
        if (nrm > 0) Js.col(q) /= nrm;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Js);
    auto sv = svd.singularValues();
    fit.condition = sv[sv.size() - 1] > 0 ? sv[0] / sv[sv.size() - 1] : std::numeric_limits<double>::infinity();
    if (!(fit.condition < opt.max_condition))
        throw NumericError("distortion fit is degenerate (condition number " + std::to_string(fit.condition) + ")");
    if (fit.rms_residual_px > opt.max_rms_px)
        throw NumericError("calibration failure: RMS residual " + std::to_string(fit.rms_residual_px) + " px");
    if (!fit.distortion.injective_up_to(std::hypot(sensor_width, sensor_height)))
        log::warn("estimated distortion is not injective over the sensor extent");
    return fit;
}

/// Least-squares isotropic scale s about c with in_focus ~ c + s (defocus - c).
inline double estimate_scale(std::span<const Point> in_focus, std::span<const Point> defocus, const Point& c) {
    if (in_focus.size() != defocus.size()) throw InputError("estimate_scale: lists differ in length");
    double num = 0, den = 0;
    for (std::size_t k = 0; k < in_focus.size(); ++k) {
        double px = in_focus[k][0] - c[0], py = in_focus[k][1] - c[1];
        double qx = defocus[k][0] - c[0], qy = defocus[k][1] - c[1];
        num += px * qx + py * qy;
        den += qx * qx + qy * qy;
    }
    if (!(den > 0)) throw InputError("estimate_scale: all points at the principal point");
    return num / den;
}

// ---------------------------------------------------------------------------
// Registration chain
// ---------------------------------------------------------------------------

/// Maps distorted sensor positions at a (focus, distance) setting back to
/// scene-plane albedo coordinates: p = H^-1(c + s (D^-1(x) - c)).
struct RegistrationChain {
    Homography H;
    std::map<std::pair<int, int>, double> scales;  // (focus_index, distance_index) -> s
    RadialDistortion D;

    double scale(int focus_index, int distance_index) const {
        auto it = scales.find({focus_index, distance_index});
        if (it == scales.end())
            throw InputError("registration chain has no scale for focus_index " + std::to_string(focus_index) +
                             ", distance_index " + std::to_string(distance_index));
        return it->second;
    }

    Point invproj(const Point& x, int focus_index, int distance_index) const {
        return invproj_with(x, scale(focus_index, distance_index), H.inverse());
    }

    Point invproj_with(const Point& x, double s, const Homography& Hinv) const {
        Point y = D.is_identity() ? x : D.undistort(x);
        Point z{D.cx + s * (y[0] - D.cx), D.cy + s * (y[1] - D.cy)};
        return Hinv.apply(z);
    }

    /// Forward map scene -> distorted sensor.
    Point project(const Point& p, int focus_index, int distance_index) const {
        Point z = H.apply(p);
        double s = scale(focus_index, distance_index);
        Point y{D.cx + (z[0] - D.cx) / s, D.cy + (z[1] - D.cy) / s};
        return D.apply(y);
    }
};

inline json chain_to_json(const RegistrationChain& c) {
    json scales = json::array();
    for (const auto& [key, s] : c.scales)
        scales.push_back({{"focus_index", key.first}, {"distance_index", key.second}, {"scale", s}});
    return {{"homography", c.H.h},
            {"distortion",
             {{"k1", c.D.k1}, {"k2", c.D.k2}, {"k3", c.D.k3}, {"cx", c.D.cx}, {"cy", c.D.cy}, {"fn", c.D.fn}}},
            {"scales", scales}};
}

inline RegistrationChain chain_from_json(const json& j) {
    require_keys_subset(j, {"homography", "distortion", "scales"}, "registration chain");
    RegistrationChain c;
    auto h = get_required<std::vector<double>>(j, "homography", "registration chain");
    if (h.size() != 9) throw InputError("homography must have 9 entries");
    std::copy(h.begin(), h.end(), c.H.h.begin());
    c.H.check_invertible();
    const json& d = j.at("distortion");
    require_keys_subset(d, {"k1", "k2", "k3", "cx", "cy", "fn"}, "distortion");
    c.D.k1 = get_required<double>(d, "k1", "distortion");
    c.D.k2 = get_required<double>(d, "k2", "distortion");
    c.D.k3 = get_required<double>(d, "k3", "distortion");
    c.D.cx = get_required<double>(d, "cx", "distortion");
    c.D.cy = get_required<double>(d, "cy", "distortion");
    c.D.fn = get_required<double>(d, "fn", "distortion");
    for (const auto& s : j.at("scales"))
        c.scales[{get_required<int>(s, "focus_index", "scale"), get_required<int>(s, "distance_index", "scale")}] =
            get_required<double>(s, "scale", "scale");
    return c;
}

struct WarpResult {
    Image image;
    Image valid;  // 1 where the source point fell inside the albedo
};

/// Bilinear sample at (x, y) in pixel-centre coordinates; nullopt outside.
inline std::optional<float> sample_bilinear(const Image& img, double x, double y, int c = 0) {
    const double eps = 1e-9;
    if (!(x >= -eps && y >= -eps && x <= img.width() - 1 + eps && y <= img.height() - 1 + eps))
        return std::nullopt;
    x = std::clamp(x, 0.0, img.width() - 1.0);
    y = std::clamp(y, 0.0, img.height() - 1.0);
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double ax = x - x0, ay = y - y0;
    int x1 = ax > 0 ? x0 + 1 : x0, y1 = ay > 0 ? y0 + 1 : y0;
    double top = (1 - ax) * img.at(x0, y0, c) + ax * img.at(x1, y0, c);
    double bot = (1 - ax) * img.at(x0, y1, c) + ax * img.at(x1, y1, c);
    if (ay == 0) return static_cast<float>(top);
    return static_cast<float>((1 - ay) * top + ay * bot);
}

/// Resamples a scene-plane albedo into capture space for one setting.
inline WarpResult warp_to_capture_space(const Image& albedo, const RegistrationChain& chain, int focus_index,
                                        int distance_index, int out_width, int out_height) {
    const double s = chain.scale(focus_index, distance_index);
    const Homography Hinv = chain.H.inverse();
    WarpResult res{Image(out_width, out_height, albedo.channels()), Image(out_width, out_height, 1)};
    parallel_chunks(static_cast<std::size_t>(out_height), 16, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t yy = b; yy < e; ++yy) {
            const int y = static_cast<int>(yy);
            for (int x = 0; x < out_width; ++x) {
                Point p = chain.invproj_with({double(x), double(y)}, s, Hinv);
                bool ok = true;
                for (int c = 0; c < albedo.channels(); ++c) {
                    auto v = sample_bilinear(albedo, p[0], p[1], c);
                    ok &= v.has_value();
                    res.image.at(x, y, c) = v.value_or(0.0f);
                }
                res.valid.at(x, y) = ok ? 1.0f : 0.0f;
            }
        }
    });
    return res;
}

inline WarpResult warp_to_capture_space(const Image& albedo, const RegistrationChain& chain, int focus_index,
                                        int distance_index) {
    return warp_to_capture_space(albedo, chain, focus_index, distance_index, albedo.width(), albedo.height());
}

/// Renders an analytic scene through the chain with (ss x ss) box filtering;
/// used to synthesise calibration captures.
template <class AlbedoFn>
Image render_through_chain(AlbedoFn&& albedo, const RegistrationChain& chain, int focus_index, int distance_index,
                           int width, int height, int ss = 4) {
    const double s = chain.scale(focus_index, distance_index);
    const Homography Hinv = chain.H.inverse();
    Image out(width, height, 1);
    parallel_chunks(static_cast<std::size_t>(height), 8, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t yy = b; yy < e; ++yy)
            for (int x = 0; x < width; ++x) {
                double acc = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx) {
                        Point q{x - 0.5 + (sx + 0.5) / ss, double(yy) - 0.5 + (sy + 0.5) / ss};
                        Point p = chain.invproj_with(q, s, Hinv);
                        acc += albedo(p[0], p[1]);
                    }
                out.at(x, static_cast<int>(yy)) = static_cast<float>(acc / (ss * ss));
            }
    });
    return out;
}

}  // namespace blurfield::geomcal
