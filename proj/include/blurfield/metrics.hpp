#pragma once

#include "image.hpp"

namespace blurfield::evalkit {

inline constexpr double kPsnrCap = 99.0;

namespace detail {

inline void check_pair(const Image& a, const Image& b, const Image* mask) {
    if (!a.same_shape(b)) throw InputError("metric: image dimensions differ");
    if (mask && !(mask->width() == a.width() && mask->height() == a.height() &&
                  (mask->channels() == 1 || mask->channels() == a.channels())))
        throw InputError("metric: mask dimensions differ");
}

inline bool selected(const Image* mask, int x, int y, int c) {
    return !mask || mask->at(x, y, mask->channels() == 1 ? 0 : c) > 0.5f;
}

}  // namespace detail

/// Mean squared error over pixels where `mask` (optional) is set.
inline double mse(const Image& a, const Image& b, const Image* mask = nullptr) {
    detail::check_pair(a, b, mask);
    double acc = 0;
    std::size_t n = 0;
    for (int c = 0; c < a.channels(); ++c)
        for (int y = 0; y < a.height(); ++y)
            for (int x = 0; x < a.width(); ++x)
                if (detail::selected(mask, x, y, c)) {
                    double d = double(a.at(x, y, c)) - b.at(x, y, c);
                    acc += d * d;
                    ++n;
                }
    if (n == 0) throw InputError("metric: empty mask");
    return acc / n;
}

inline double rmse(const Image& a, const Image& b, const Image* mask = nullptr) { return std::sqrt(mse(a, b, mask)); }

/// Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs.
inline double psnr(const Image& a, const Image& b, double peak = 1.0, const Image* mask = nullptr) {
    const double m = mse(a, b, mask);
    if (m <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

namespace detail {

inline std::vector<double> gaussian_window(int size = 11, double sigma = 1.5) {
    std::vector<double> w(size);
    double s = 0;
    for (int i = 0; i < size; ++i) {
        double d = i - (size - 1) / 2.0;
        w[i] = std::exp(-d * d / (2 * sigma * sigma));
        s += w[i];
    }
    for (double& v : w) v /= s;
    return w;
}

/// Separable valid-region Gaussian filter of a w x h double plane.
inline std::vector<double> filter_valid(const std::vector<double>& p, int w, int h, const std::vector<double>& g) {
    const int n = static_cast<int>(g.size()), ow = w - n + 1, oh = h - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(ow) * h), out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int k = 0; k < n; ++k) s += g[k] * p[static_cast<std::size_t>(y) * w + x + k];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int k = 0; k < n; ++k) s += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    return out;
}

}  // namespace detail

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, dynamic
/// range `peak`). The map is evaluated where the window fits and averaged
/// per channel over window centres selected by `mask`, then across channels.
inline double ssim(const Image& a, const Image& b, double peak = 1.0, const Image* mask = nullptr) {
    detail::check_pair(a, b, mask);
    const int win = 11, half = win / 2;
    if (a.width() < win || a.height() < win) throw InputError("ssim: image smaller than the 11x11 window");
    const double C1 = (0.01 * peak) * (0.01 * peak), C2 = (0.03 * peak) * (0.03 * peak);
    const auto g = detail::gaussian_window(win, 1.5);
    const int w = a.width(), h = a.height(), ow = w - win + 1, oh = h - win + 1;
    double total = 0;
    int used_channels = 0;
    for (int c = 0; c < a.channels(); ++c) {
        std::vector<double> pa(a.plane(c).begin(), a.plane(c).end()), pb(b.plane(c).begin(), b.plane(c).end());
        std::vector<double> aa(pa.size()), bb(pa.size()), ab(pa.size());
        for (std::size_t k = 0; k < pa.size(); ++k) aa[k] = pa[k] * pa[k], bb[k] = pb[k] * pb[k], ab[k] = pa[k] * pb[k];
        auto mu_a = detail::filter_valid(pa, w, h, g), mu_b = detail::filter_valid(pb, w, h, g);
        auto s_aa = detail::filter_valid(aa, w, h, g), s_bb = detail::filter_valid(bb, w, h, g);
        auto s_ab = detail::filter_valid(ab, w, h, g);
        double acc = 0;
        std::size_t n = 0;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                if (!detail::selected(mask, x + half, y + half, c)) continue;
                std::size_t k = static_cast<std::size_t>(y) * ow + x;
                double ma = mu_a[k], mb = mu_b[k];
                double va = s_aa[k] - ma * ma, vb = s_bb[k] - mb * mb, cov = s_ab[k] - ma * mb;
                acc += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                ++n;
            }
        if (n == 0) continue;
        total += acc / n;
        ++used_channels;
    }
    if (used_channels == 0) throw InputError("ssim: empty mask");
    return total / used_channels;
}

struct FrameMetrics {
    double psnr = 0;
    double rmse = 0;
    double ssim = 0;
};

inline FrameMetrics frame_metrics(const Image& reference, const Image& estimate, const Image* mask = nullptr,
                                  double peak = 1.0) {
    return {psnr(reference, estimate, peak, mask), rmse(reference, estimate, mask),
            ssim(reference, estimate, peak, mask)};
}

/// Bounding box of the nonzero support of `gt` (all channels), dilated by
/// `dilation` samples and clipped to the grid.
struct Inset {
    int i0 = 0, j0 = 0, i1 = -1, j1 = -1;  // inclusive
    bool empty() const { return i1 < i0 || j1 < j0; }
};

inline Inset support_inset(const Kernel2D& gt, int dilation = 2, double threshold = 0.0) {
    Inset r{gt.ku, gt.kv, -1, -1};
    for (int c = 0; c < gt.channels; ++c)
        for (int j = 0; j < gt.kv; ++j)
            for (int i = 0; i < gt.ku; ++i)
                if (gt.at(i, j, c) > threshold) {
                    r.i0 = std::min(r.i0, i), r.i1 = std::max(r.i1, i);
                    r.j0 = std::min(r.j0, j), r.j1 = std::max(r.j1, j);
                }
    if (r.empty()) return {0, 0, -1, -1};
    r.i0 = std::max(0, r.i0 - dilation), r.j0 = std::max(0, r.j0 - dilation);
    r.i1 = std::min(gt.ku - 1, r.i1 + dilation), r.j1 = std::min(gt.kv - 1, r.j1 + dilation);
    return r;
}

/// Centred inset covering `fraction` of each kernel dimension.
inline Inset centered_inset(const Kernel2D& k, double fraction) {
    if (!(fraction > 0 && fraction <= 1)) throw InputError("inset fraction must lie in (0, 1]");
    int nu = std::max(1, static_cast<int>(std::lround(k.ku * fraction))) | 1;
    int nv = std::max(1, static_cast<int>(std::lround(k.kv * fraction))) | 1;
    nu = std::min(nu, k.ku), nv = std::min(nv, k.kv);
    return {k.half_u() - nu / 2, k.half_v() - nv / 2, k.half_u() + nu / 2, k.half_v() + nv / 2};
}

inline double inset_rmse(const Kernel2D& est, const Kernel2D& gt, const Inset& inset) {
    if (!est.same_shape(gt)) throw InputError("inset_rmse: kernel grids differ");
    if (inset.empty()) throw InputError("inset_rmse: empty inset");
    double acc = 0;
    std::size_t n = 0;
    for (int c = 0; c < gt.channels; ++c)
        for (int j = inset.j0; j <= inset.j1; ++j)
            for (int i = inset.i0; i <= inset.i1; ++i) {
                double d = double(est.at(i, j, c)) - gt.at(i, j, c);
                acc += d * d;
                ++n;
            }
    return std::sqrt(acc / n);
}

/// Inset RMSE with the default inset: gt support bounding box dilated by 2.
inline double inset_rmse(const Kernel2D& est, const Kernel2D& gt) { return inset_rmse(est, gt, support_inset(gt, 2)); }

inline double inset_rmse(const Kernel2D& est, const Kernel2D& gt, double inset_fraction) {
    return inset_rmse(est, gt, centered_inset(gt, inset_fraction));
}

}  // namespace blurfield::evalkit
