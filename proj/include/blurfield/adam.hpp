#pragma once

#include "common.hpp"

namespace blurfield {

struct AdamConfig {
    double beta1 = 0.5;
    double beta2 = 0.999;
    double lr = 1e-5;
    double eps = 1e-15;
    double weight_decay = 1e-6;
    double decay_gamma = 0.98;
    std::uint64_t decay_every = 10000;

    void validate() const {
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw InputError("adam betas must lie in [0,1)");
        if (!(lr > 0) || !(eps > 0) || !(weight_decay >= 0) || !(decay_gamma > 0) || decay_every == 0)
            throw InputError("invalid adam hyperparameters");
    }

    /// Learning rate used for the update after `steps_taken` prior steps.
    double lr_at(std::uint64_t steps_taken) const {
        return lr * std::pow(decay_gamma, static_cast<double>(steps_taken / decay_every));
    }
};

/// Moments are kept in the parameter precision.
template <class Scalar>
struct BasicAdamState {
    std::uint64_t step = 0;
    std::vector<Scalar> m;
    std::vector<Scalar> v;

    explicit BasicAdamState(std::size_t n = 0) : m(n, Scalar(0)), v(n, Scalar(0)) {}
};

using AdamState = BasicAdamState<float>;

/// Bias-corrected Adam with decoupled weight decay (theta -= lr * wd * theta).
template <class Scalar>
void adam_step(std::span<Scalar> params, BasicAdamState<Scalar>& state, std::span<const Scalar> grad,
               const AdamConfig& cfg) {
    if (grad.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw InputError("adam_step: gradient/state shape mismatch");
    for (Scalar g : grad)
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient (training diverged)");
    const double lr = cfg.lr_at(state.step);
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
    const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
    const Scalar step_size = static_cast<Scalar>(lr / bc1);
    const Scalar inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const Scalar eps = static_cast<Scalar>(cfg.eps);
    const Scalar decay = static_cast<Scalar>(lr * cfg.weight_decay);
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Scalar g = grad[k];
        state.m[k] = b1 * state.m[k] + (Scalar(1) - b1) * g;
        state.v[k] = b2 * state.v[k] + (Scalar(1) - b2) * g * g;
        const Scalar denom = std::sqrt(state.v[k] * inv_bc2) + eps;
        params[k] -= step_size * state.m[k] / denom + decay * params[k];
    }
    ++state.step;
}

}  // namespace blurfield
