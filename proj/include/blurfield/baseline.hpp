#pragma once

#include "image.hpp"

namespace blurfield::evalkit {

struct BaselineOptions {
    int iterations = 2000;
    double tolerance = 1e-10;  // relative objective change that counts as converged
    int power_iterations = 50;
};

struct BaselineResult {
    Kernel2D kernel;
    bool converged = false;
    int iterations = 0;
    std::vector<double> objective;  // per channel: final objective
    std::vector<std::vector<double>> history;  // per channel objective trace (starts at K = 0)
};

namespace detail {

/// A K: valid correlation of the sharp patch with the kernel.
inline void apply_forward(const std::vector<double>& S, int pw, const std::vector<double>& K, int ku, int kv, int ow,
                          int oh, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (int j = 0; j < kv; ++j)
        for (int i = 0; i < ku; ++i) {
            const double k = K[static_cast<std::size_t>(j) * ku + i];
            if (k == 0.0) continue;
            for (int y = 0; y < oh; ++y) {
                const double* src = S.data() + static_cast<std::size_t>(y + kv - 1 - j) * pw + (ku - 1 - i);
                double* dst = out.data() + static_cast<std::size_t>(y) * ow;
                for (int x = 0; x < ow; ++x) dst[x] += k * src[x];
            }
        }
}

/// A^T r.
inline void apply_adjoint(const std::vector<double>& S, int pw, const std::vector<double>& r, int ku, int kv, int ow,
                          int oh, std::vector<double>& out) {
    for (int j = 0; j < kv; ++j)
        for (int i = 0; i < ku; ++i) {
            double acc = 0;
            for (int y = 0; y < oh; ++y) {
                const double* src = S.data() + static_cast<std::size_t>(y + kv - 1 - j) * pw + (ku - 1 - i);
                const double* rr = r.data() + static_cast<std::size_t>(y) * ow;
                for (int x = 0; x < ow; ++x) acc += rr[x] * src[x];
            }
            out[static_cast<std::size_t>(j) * ku + i] = acc;
        }
}

}  // namespace detail

/// Nonnegative least-squares kernel from a sharp/blurry patch pair by
/// projected gradient descent on |M (I - K * S)|^2. The blurry patch covers
/// the valid region of the sharp patch; `mask` (optional, blurry-sized)
/// selects supervised pixels. Step size 1 / (1.05 L) from a power-iteration
/// Lipschitz estimate, halved whenever the objective would increase.
inline BaselineResult baseline_ls_kernel(const Image& sharp, const Image& blurry, int ku, int kv,
                                         const BaselineOptions& opt = {}, const Image* mask = nullptr) {
    Kernel2D probe(ku, kv, 1);
    const int pw = sharp.width(), ph = sharp.height();
    const int ow = pw - ku + 1, oh = ph - kv + 1;
    if (pw < 2 * ku || ph < 2 * kv) throw InputError("baseline patch must be at least twice the kernel size");
    if (blurry.width() != ow || blurry.height() != oh || blurry.channels() != sharp.channels())
        throw InputError("blurry patch must cover the valid region of the sharp patch");
    if (mask && (mask->width() != ow || mask->height() != oh)) throw InputError("baseline mask dimensions differ");
    const int C = sharp.channels();
    BaselineResult res;
    res.kernel = Kernel2D(ku, kv, C);
    res.converged = true;
    const std::size_t nk = static_cast<std::size_t>(ku) * kv, no = static_cast<std::size_t>(ow) * oh;
    for (int c = 0; c < C; ++c) {
        std::vector<double> S(sharp.plane(c).begin(), sharp.plane(c).end());
        std::vector<double> I(blurry.plane(c).begin(), blurry.plane(c).end());
        std::vector<double> M(no, 1.0);
        if (mask)
            for (std::size_t q = 0; q < no; ++q) M[q] = mask->plane(mask->channels() == 1 ? 0 : c)[q] > 0.5f ? 1.0 : 0.0;

        auto objective = [&](const std::vector<double>& K, std::vector<double>& resid) {
            detail::apply_forward(S, pw, K, ku, kv, ow, oh, resid);
            double f = 0;
            for (std::size_t q = 0; q < no; ++q) {
                resid[q] = M[q] * (resid[q] - I[q]);
                f += resid[q] * resid[q];
            }
            return f;
        };

        // Largest eigenvalue of A^T M A by power iteration from a fixed start.
        std::vector<double> v(nk, 1.0 / std::sqrt(double(nk))), Av(no), w(nk);
        double lambda = 0;
        for (int it = 0; it < opt.power_iterations; ++it) {
            detail::apply_forward(S, pw, v, ku, kv, ow, oh, Av);
            for (std::size_t q = 0; q < no; ++q) Av[q] *= M[q];
            detail::apply_adjoint(S, pw, Av, ku, kv, ow, oh, w);
            double n = 0;
            for (double x : w) n += x * x;
            n = std::sqrt(n);
            if (!(n > 0)) break;
            lambda = n;
            for (std::size_t q = 0; q < nk; ++q) v[q] = w[q] / n;
        }
        const double L = 2.0 * lambda;
        double step = L > 0 ? 1.0 / (1.05 * L) : 0.0;

        std::vector<double> K(nk, 0.0), resid(no), grad(nk), cand(nk), cand_resid(no);
        double f = objective(K, resid);
        std::vector<double> trace{f};
        bool converged = step == 0.0;
        int it = 0;
        for (; it < opt.iterations && !converged; ++it) {
            detail::apply_adjoint(S, pw, resid, ku, kv, ow, oh, grad);
            double fc = 0;
            for (int tries = 0; tries < 30; ++tries) {
                for (std::size_t q = 0; q < nk; ++q) cand[q] = std::max(0.0, K[q] - step * 2.0 * grad[q]);
                fc = objective(cand, cand_resid);
                if (fc <= f) break;
                step *= 0.5;
            }
            if (!(fc <= f)) break;
            const double change = f - fc;
            K.swap(cand);
            resid.swap(cand_resid);
            f = fc;
            trace.push_back(f);
            if (change <= opt.tolerance * std::max(f, 1e-300)) converged = true;
        }
        for (std::size_t q = 0; q < nk; ++q) res.kernel.plane(c)[q] = static_cast<float>(K[q]);
        res.objective.push_back(f);
        res.history.push_back(std::move(trace));
        res.iterations = std::max(res.iterations, it);
        res.converged = res.converged && converged;
    }
    if (!res.converged) log::debug("baseline solver reached its iteration cap; returning the last iterate");
    return res;
}

/// Elementwise (1 - alpha) a + alpha b.
inline Kernel2D interpolate_kernels(const Kernel2D& a, const Kernel2D& b, double alpha) {
    if (!a.same_shape(b)) throw InputError("interpolate_kernels: kernel grids differ");
    if (!(alpha >= 0 && alpha <= 1)) throw InputError("interpolate_kernels: alpha must lie in [0, 1]");
    Kernel2D out = a;
    for (std::size_t q = 0; q < out.samples.size(); ++q)
        out.samples[q] = static_cast<float>((1.0 - alpha) * a.samples[q] + alpha * b.samples[q]);
    return out;
}

}  // namespace blurfield::evalkit
