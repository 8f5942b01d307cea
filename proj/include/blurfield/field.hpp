#pragma once

#include <random>

#include <Eigen/Dense>

#include "image.hpp"
#include "json_util.hpp"
#include "manifest.hpp"

namespace blurfield {

/// MLP shape. `hidden_layers` counts hidden activations, so there are
/// hidden_layers + 1 weight matrices.
struct FieldArchitecture {
    int input_dim = 5;
    int hidden_layers = 7;
    int hidden_width = 512;
    int output_dim = 4;
    double output_gain = 1.0;

    void validate() const {
        if (input_dim != 5 && input_dim != 6) throw InputError("field input_dim must be 5 or 6");
        if (hidden_layers < 1 || hidden_width < 1 || output_dim < 1)
            throw InputError("field layers and widths must be positive");
        if (!(output_gain > 0) || !std::isfinite(output_gain)) throw InputError("output_gain must be positive");
    }

    int layer_count() const { return hidden_layers + 1; }
    int fan_in(int l) const { return l == 0 ? input_dim : hidden_width; }
    int fan_out(int l) const { return l == hidden_layers ? output_dim : hidden_width; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (int l = 0; l < layer_count(); ++l)
            n += static_cast<std::size_t>(fan_out(l)) * fan_in(l) + fan_out(l);
        return n;
    }

    bool operator==(const FieldArchitecture&) const = default;
};

/// Affine maps of raw coordinates onto [-1, 1]. Coordinate order is
/// (x, y, f, u, v) with distance d appended for 6-D fields.
struct NormalizationSpec {
    double x_min = 0, x_max = 1;
    double y_min = 0, y_max = 1;
    double f_min = 0, f_max = 1;  // focus, diopters
    double d_min = 0, d_max = 1;  // distance, diopters
    double u_max = 1, v_max = 1;  // kernel half-support, samples

    static double map(double v, double lo, double hi) {
        return hi > lo ? 2.0 * (v - lo) / (hi - lo) - 1.0 : 0.0;
    }

    /// Writes the normalised row for `raw` (length input_dim) into `out`.
    template <class T>
    void apply(const double* raw, int input_dim, T* out) const {
        out[0] = static_cast<T>(map(raw[0], x_min, x_max));
        out[1] = static_cast<T>(map(raw[1], y_min, y_max));
        out[2] = static_cast<T>(map(raw[2], f_min, f_max));
        out[3] = static_cast<T>(u_max > 0 ? raw[3] / u_max : 0.0);
        out[4] = static_cast<T>(v_max > 0 ? raw[4] / v_max : 0.0);
        if (input_dim == 6) out[5] = static_cast<T>(map(raw[5], d_min, d_max));
    }

    bool operator==(const NormalizationSpec&) const = default;
};

inline json normalization_to_json(const NormalizationSpec& n) {
    return {{"x", {n.x_min, n.x_max}}, {"y", {n.y_min, n.y_max}}, {"f", {n.f_min, n.f_max}},
            {"d", {n.d_min, n.d_max}}, {"u_max", n.u_max},       {"v_max", n.v_max}};
}

inline NormalizationSpec normalization_from_json(const json& j) {
    require_keys_subset(j, {"x", "y", "f", "d", "u_max", "v_max"}, "normalization");
    NormalizationSpec n;
    auto pair = [&](const char* key, double& lo, double& hi) {
        auto v = get_required<std::vector<double>>(j, key, "normalization");
        if (v.size() != 2) throw InputError(std::string("normalization.") + key + " must have 2 entries");
        lo = v[0], hi = v[1];
    };
    pair("x", n.x_min, n.x_max);
    pair("y", n.y_min, n.y_max);
    pair("f", n.f_min, n.f_max);
    pair("d", n.d_min, n.d_max);
    n.u_max = get_required<double>(j, "u_max", "normalization");
    n.v_max = get_required<double>(j, "v_max", "normalization");
    return n;
}

/// Normalisation for a sensor and focal-stack range with (ku x kv) kernels.
inline NormalizationSpec make_normalization(const SensorDescriptor& s, double f_min, double f_max, double d_min,
                                            double d_max, int ku, int kv) {
    NormalizationSpec n;
    n.x_min = 0, n.x_max = s.width - 1;
    n.y_min = 0, n.y_max = s.height - 1;
    n.f_min = f_min, n.f_max = f_max;
    n.d_min = d_min, n.d_max = d_max;
    n.u_max = (ku - 1) / 2.0;
    n.v_max = (kv - 1) / 2.0;
    return n;
}

/// Vector storage at Eigen's maximum alignment.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Coordinate MLP with rectifier hidden layers and a scaled logistic output.
/// Parameters live in one flat vector, layer by layer: weights row-major
/// (out x in), then bias.
template <class Scalar>
class BasicBlurField {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    static constexpr std::size_t kBlockRows = 512;

    FieldArchitecture arch;
    NormalizationSpec norm;
    SensorDescriptor sensor;
    AlignedVector<Scalar> params;

    BasicBlurField() = default;
    BasicBlurField(FieldArchitecture a, NormalizationSpec n, SensorDescriptor s)
        : arch(a), norm(n), sensor(s), params(a.parameter_count(), Scalar(0)) {
        arch.validate();
        compute_offsets();
    }

    std::size_t parameter_count() const { return params.size(); }
    std::size_t weight_offset(int l) const { return offsets_[l]; }
    std::size_t bias_offset(int l) const {
        return offsets_[l] + static_cast<std::size_t>(arch.fan_out(l)) * arch.fan_in(l);
    }

    /// Glorot-uniform weights and zero biases, deterministic per seed.
    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(derive_seed(seed, 0x696E6974ULL));
        std::fill(params.begin(), params.end(), Scalar(0));
        for (int l = 0; l < arch.layer_count(); ++l) {
            const double lim = std::sqrt(6.0 / (arch.fan_in(l) + arch.fan_out(l)));
            std::uniform_real_distribution<double> U(-lim, lim);
            const std::size_t n = static_cast<std::size_t>(arch.fan_out(l)) * arch.fan_in(l);
            for (std::size_t k = 0; k < n; ++k) params[offsets_[l] + k] = static_cast<Scalar>(U(rng));
        }
    }

    /// Raw coordinates, batch x input_dim row-major -> batch x C row-major.
    std::vector<Scalar> eval_batch(std::span<const double> coords) const {
        const std::size_t B = batch_of(coords);
        const int C = arch.output_dim;
        std::vector<Scalar> out(B * C);
        const std::size_t blocks = (B + kBlockRows - 1) / kBlockRows;
        parallel_chunks(blocks, 1, [&](std::size_t, std::size_t b0, std::size_t b1) {
            std::vector<Matrix> acts;
            for (std::size_t blk = b0; blk < b1; ++blk) {
                const std::size_t r0 = blk * kBlockRows, r1 = std::min(B, r0 + kBlockRows);
                forward(coords, r0, r1, acts);
                const Matrix& y = acts.back();
                for (std::size_t r = r0; r < r1; ++r)
                    for (int c = 0; c < C; ++c) out[r * C + c] = y(c, static_cast<Eigen::Index>(r - r0));
            }
        });
        return out;
    }

    /// Gradient of sum(upstream .* eval_batch(coords)) with respect to params.
    /// Rows are processed in fixed blocks whose partial gradients are summed
    /// in block order, so the result does not depend on the thread count.
    std::vector<Scalar> grad_batch(std::span<const double> coords, std::span<const Scalar> upstream) const {
        const std::size_t B = batch_of(coords);
        if (upstream.size() != B * static_cast<std::size_t>(arch.output_dim))
            throw InputError("grad_batch: upstream gradient shape mismatch");
        const std::size_t P = params.size();
        std::vector<Scalar> total(P, Scalar(0));
        const std::size_t blocks = (B + kBlockRows - 1) / kBlockRows;
        constexpr std::size_t kWave = 4;
        std::vector<AlignedVector<Scalar>> partial(std::min(blocks, kWave), AlignedVector<Scalar>(P));
        for (std::size_t w0 = 0; w0 < blocks; w0 += kWave) {
            const std::size_t wn = std::min(kWave, blocks - w0);
            parallel_chunks(wn, 1, [&](std::size_t, std::size_t b0, std::size_t b1) {
                std::vector<Matrix> acts;
                for (std::size_t k = b0; k < b1; ++k) {
                    const std::size_t blk = w0 + k;
                    const std::size_t r0 = blk * kBlockRows, r1 = std::min(B, r0 + kBlockRows);
                    forward(coords, r0, r1, acts);
                    backward(upstream, r0, r1, acts, partial[k]);
                }
            });
            for (std::size_t k = 0; k < wn; ++k)
                for (std::size_t p = 0; p < P; ++p) total[p] += partial[k][p];
        }
        return total;
    }

    template <class Other>
    BasicBlurField<Other> cast() const {
        BasicBlurField<Other> out(arch, norm, sensor);
        for (std::size_t k = 0; k < params.size(); ++k) out.params[k] = static_cast<Other>(params[k]);
        return out;
    }

private:
    std::vector<std::size_t> offsets_;

    void compute_offsets() {
        offsets_.clear();
        std::size_t off = 0;
        for (int l = 0; l < arch.layer_count(); ++l) {
            offsets_.push_back(off);
            off += static_cast<std::size_t>(arch.fan_out(l)) * arch.fan_in(l) + arch.fan_out(l);
        }
    }

    std::size_t batch_of(std::span<const double> coords) const {
        if (coords.size() % arch.input_dim != 0) throw InputError("coordinate array is not a multiple of input_dim");
        for (double v : coords)
            if (!std::isfinite(v)) throw InputError("non-finite field coordinate");
        return coords.size() / arch.input_dim;
    }

    Eigen::Map<const RowMatrix> W(int l) const {
        return {params.data() + offsets_[l], arch.fan_out(l), arch.fan_in(l)};
    }
    Eigen::Map<const Vector> bvec(int l) const { return {params.data() + bias_offset(l), arch.fan_out(l)}; }

    // acts[0] = normalised input, acts[l+1] = activation of layer l
    // (the last entry is the output after the scaled sigmoid).
    void forward(std::span<const double> coords, std::size_t r0, std::size_t r1, std::vector<Matrix>& acts) const {
        const auto n = static_cast<Eigen::Index>(r1 - r0);
        const int D = arch.input_dim;
        acts.resize(arch.layer_count() + 1);
        acts[0].resize(D, n);
        for (Eigen::Index r = 0; r < n; ++r) norm.apply(coords.data() + (r0 + r) * D, D, acts[0].col(r).data());
        for (int l = 0; l < arch.layer_count(); ++l) {
            Matrix& z = acts[l + 1];
            z.noalias() = W(l) * acts[l];
            z.colwise() += bvec(l);
            if (l < arch.hidden_layers) {
                z = z.cwiseMax(Scalar(0));
            } else {
                const Scalar g = static_cast<Scalar>(arch.output_gain);
                z = z.unaryExpr([g](Scalar v) { return g / (Scalar(1) + std::exp(-v)); });
            }
        }
    }

    void backward(std::span<const Scalar> upstream, std::size_t r0, std::size_t r1, const std::vector<Matrix>& acts,
                  AlignedVector<Scalar>& grad) const {
        const auto n = static_cast<Eigen::Index>(r1 - r0);
        const int C = arch.output_dim;
        const Scalar g = static_cast<Scalar>(arch.output_gain);
        Matrix delta(C, n);
        const Matrix& y = acts.back();
        for (Eigen::Index r = 0; r < n; ++r)
            for (int c = 0; c < C; ++c) {
                const Scalar s = y(c, r) / g;
                delta(c, r) = upstream[(r0 + r) * C + c] * g * s * (Scalar(1) - s);
            }
        for (int l = arch.layer_count() - 1; l >= 0; --l) {
            Eigen::Map<RowMatrix> dW(grad.data() + offsets_[l], arch.fan_out(l), arch.fan_in(l));
            Eigen::Map<Vector> db(grad.data() + bias_offset(l), arch.fan_out(l));
            dW.noalias() = delta * acts[l].transpose();
            db = delta.rowwise().sum();
            if (l == 0) break;
            Matrix prev = W(l).transpose() * delta;
            const Matrix& a = acts[l];
            delta = prev.cwiseProduct(a.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); }));
        }
    }
};

using BlurField = BasicBlurField<float>;
using BlurFieldD = BasicBlurField<double>;

template <class Scalar>
BasicBlurField<Scalar> init_field(const FieldArchitecture& arch, const NormalizationSpec& norm,
                                  const SensorDescriptor& sensor, std::uint64_t seed) {
    BasicBlurField<Scalar> f(arch, norm, sensor);
    f.initialize(seed);
    return f;
}

inline BlurField init_field(const FieldArchitecture& arch, const NormalizationSpec& norm,
                            const SensorDescriptor& sensor, std::uint64_t seed) {
    return init_field<float>(arch, norm, sensor, seed);
}

}  // namespace blurfield
