#pragma once

#include <chrono>
#include <functional>
#include <random>

#include "adam.hpp"
#include "field.hpp"
#include "manifest.hpp"
#include "metrics.hpp"

namespace blurfield::trainer {

struct TrainConfig {
    int ku = 25;
    int kv = 25;
    double patch_factor = 1.5;
    std::uint64_t iterations = 200000;
    int batch_elements = 1;
    std::uint64_t seed = 0;
    std::string split = "alternate";  // "alternate": even focus indices train; "all"
    FieldArchitecture arch;           // output_dim follows the sensor
    AdamConfig adam;
    std::uint64_t log_every = 1000;
    std::uint64_t checkpoint_every = 10000;

    static int odd_ceil(double v) {
        int n = static_cast<int>(std::ceil(v - 1e-9));
        return n % 2 == 0 ? n + 1 : n;
    }
    int patch_u() const { return odd_ceil(patch_factor * ku); }
    int patch_v() const { return odd_ceil(patch_factor * kv); }
    int valid_u() const { return patch_u() - ku + 1; }
    int valid_v() const { return patch_v() - kv + 1; }

    void validate() const {
        Kernel2D probe(ku, kv, 1);  // odd and <= 120
        if (!(patch_factor >= 1.0)) throw InputError("patch_factor must be at least 1");
        if (batch_elements < 1) throw InputError("batch_elements must be positive");
        if (split != "alternate" && split != "all") throw InputError("split must be 'alternate' or 'all'");
        if (log_every == 0 || checkpoint_every == 0) throw InputError("log/checkpoint intervals must be positive");
        adam.validate();
    }
};

inline json config_to_json(const TrainConfig& c) {
    return {{"kernel_samples", {c.ku, c.kv}},
            {"patch_factor", c.patch_factor},
            {"iterations", c.iterations},
            {"batch_elements", c.batch_elements},
            {"seed", c.seed},
            {"split", c.split},
            {"architecture",
             {{"input_dim", c.arch.input_dim},
              {"hidden_layers", c.arch.hidden_layers},
              {"hidden_width", c.arch.hidden_width},
              {"output_gain", c.arch.output_gain}}},
            {"adam",
             {{"lr", c.adam.lr},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"eps", c.adam.eps},
              {"weight_decay", c.adam.weight_decay},
              {"decay_gamma", c.adam.decay_gamma},
              {"decay_every", c.adam.decay_every}}},
            {"log_every", c.log_every},
            {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig config_from_json(const json& j) {
    const std::string where = "train config";
    require_keys_subset(j,
                        {"kernel_samples", "patch_factor", "iterations", "batch_elements", "seed", "split",
                         "architecture", "adam", "log_every", "checkpoint_every"},
                        where);
    TrainConfig c;
    if (j.contains("kernel_samples")) {
        const json& k = j["kernel_samples"];
        if (k.is_number_integer()) {
            c.ku = c.kv = k.get<int>();
        } else {
            auto v = k.get<std::vector<int>>();
            if (v.size() != 2) throw InputError("kernel_samples must be an integer or [ku, kv]");
            c.ku = v[0], c.kv = v[1];
        }
    }
    c.patch_factor = get_or(j, "patch_factor", c.patch_factor);
    c.iterations = get_or(j, "iterations", c.iterations);
    c.batch_elements = get_or(j, "batch_elements", c.batch_elements);
    c.seed = get_or(j, "seed", c.seed);
    c.split = get_or(j, "split", c.split);
    if (j.contains("architecture")) {
        const json& a = j["architecture"];
        require_keys_subset(a, {"input_dim", "hidden_layers", "hidden_width", "output_gain"}, "architecture");
        c.arch.input_dim = get_or(a, "input_dim", c.arch.input_dim);
        c.arch.hidden_layers = get_or(a, "hidden_layers", c.arch.hidden_layers);
        c.arch.hidden_width = get_or(a, "hidden_width", c.arch.hidden_width);
        c.arch.output_gain = get_or(a, "output_gain", c.arch.output_gain);
    }
    if (j.contains("adam")) {
        const json& a = j["adam"];
        require_keys_subset(a, {"lr", "beta1", "beta2", "eps", "weight_decay", "decay_gamma", "decay_every"}, "adam");
        c.adam.lr = get_or(a, "lr", c.adam.lr);
        c.adam.beta1 = get_or(a, "beta1", c.adam.beta1);
        c.adam.beta2 = get_or(a, "beta2", c.adam.beta2);
        c.adam.eps = get_or(a, "eps", c.adam.eps);
        c.adam.weight_decay = get_or(a, "weight_decay", c.adam.weight_decay);
        c.adam.decay_gamma = get_or(a, "decay_gamma", c.adam.decay_gamma);
        c.adam.decay_every = get_or(a, "decay_every", c.adam.decay_every);
    }
    c.log_every = get_or(j, "log_every", c.log_every);
    c.checkpoint_every = get_or(j, "checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct StackEntry {
    int pattern = 0;
    int focus_index = 0;
    int distance_index = 0;
    double focus_diopter = 0;
    double distance_diopter = 0;
    Image blurry;  // linearised, burst-averaged capture
    Image sharp;   // blur-free sensor-space image
};

struct Dataset {
    SensorDescriptor sensor;
    std::vector<StackEntry> entries;
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<Image> masks;  // per channel, sensor resolution
    double f_min = 0, f_max = 0, d_min = 0, d_max = 0;

    void finalize(const std::string& split) {
        train.clear();
        validation.clear();
        for (std::size_t k = 0; k < entries.size(); ++k) {
            if (split == "all" || entries[k].focus_index % 2 == 0) train.push_back(k);
            else validation.push_back(k);
        }
        masks.clear();
        for (int c = 0; c < sensor.channels(); ++c) masks.push_back(channel_mask(sensor, c));
        if (!entries.empty()) {
            f_min = f_max = entries[0].focus_diopter;
            d_min = d_max = entries[0].distance_diopter;
            for (const auto& e : entries) {
                f_min = std::min(f_min, e.focus_diopter), f_max = std::max(f_max, e.focus_diopter);
                d_min = std::min(d_min, e.distance_diopter), d_max = std::max(d_max, e.distance_diopter);
            }
        }
    }
};

/// Loads every (pattern, focus, distance) with a blurry capture and its sharp frame.
inline Dataset load_dataset(const FocalStackManifest& m, const std::string& split = "alternate") {
    Dataset ds;
    ds.sensor = m.sensor;
    for (auto [t, i, d] : m.blurry_keys()) {
        if (!m.has(FrameRole::sharp, i, d, t))
            throw InputError("manifest lacks a sharp frame for pattern " + std::to_string(t) + ", focus_index " +
                             std::to_string(i) + " (run preprocess first)");
        StackEntry e;
        e.pattern = t, e.focus_index = i, e.distance_index = d;
        e.focus_diopter = m.focus_diopters.at(i);
        e.distance_diopter = m.distance_diopter(d);
        e.blurry = load_averaged(m, FrameRole::blurry, i, d, t);
        e.sharp = load_averaged(m, FrameRole::sharp, i, d, t);
        ds.entries.push_back(std::move(e));
    }
    ds.finalize(split);
    return ds;
}

// ---------------------------------------------------------------------------
// Samples and the discrete forward model
// ---------------------------------------------------------------------------

struct TrainSample {
    std::size_t entry = 0;
    int cx = 0, cy = 0;  // patch centre pixel
    Image sharp;         // patch_u x patch_v
    Image blurry;        // valid_u x valid_v
    Image mask;          // valid_u x valid_v, per channel
};

inline TrainSample make_sample(const Dataset& ds, const TrainConfig& cfg, std::size_t entry, int cx, int cy) {
    const int pu = cfg.patch_u(), pv = cfg.patch_v(), vu = cfg.valid_u(), vv = cfg.valid_v();
    const auto& e = ds.entries.at(entry);
    if (cx - pu / 2 < 0 || cy - pv / 2 < 0 || cx + pu / 2 >= ds.sensor.width || cy + pv / 2 >= ds.sensor.height)
        throw InputError("sample patch extends outside the image");
    TrainSample s;
    s.entry = entry, s.cx = cx, s.cy = cy;
    s.sharp = e.sharp.crop(cx - pu / 2, cy - pv / 2, pu, pv);
    s.blurry = e.blurry.crop(cx - vu / 2, cy - vv / 2, vu, vv);
    s.mask = Image(vu, vv, ds.sensor.channels());
    for (int c = 0; c < ds.sensor.channels(); ++c) {
        Image m = ds.masks[c].crop(cx - vu / 2, cy - vv / 2, vu, vv);
        std::copy(m.data().begin(), m.data().end(), s.mask.plane(c).begin());
    }
    return s;
}

/// Uniform over the listed entries and over centres whose patch fits.
inline TrainSample sample_element(const Dataset& ds, std::span<const std::size_t> entries, const TrainConfig& cfg,
                                  std::mt19937_64& rng) {
    if (entries.empty()) throw InputError("training split is empty");
    const int pu = cfg.patch_u(), pv = cfg.patch_v();
    const int nx = ds.sensor.width - pu + 1, ny = ds.sensor.height - pv + 1;
    if (nx <= 0 || ny <= 0) throw InputError("patch is larger than the image");
    std::uniform_int_distribution<std::size_t> pick_entry(0, entries.size() - 1);
    std::uniform_int_distribution<int> pick_x(0, nx - 1), pick_y(0, ny - 1);
    const std::size_t e = entries[pick_entry(rng)];
    const int x = pick_x(rng), y = pick_y(rng);
    return make_sample(ds, cfg, e, x + pu / 2, y + pv / 2);
}

/// Field query rows for one kernel grid at pixel (cx, cy): rows ordered
/// v-major, u-minor, matching Kernel2D sample order.
inline void kernel_coords(double cx, double cy, double f, double d, int input_dim, int ku, int kv,
                          std::vector<double>& out) {
    for (int j = 0; j < kv; ++j)
        for (int i = 0; i < ku; ++i) {
            out.insert(out.end(), {cx, cy, f, double(i - ku / 2), double(j - kv / 2)});
            if (input_dim == 6) out.push_back(d);
        }
}

template <class Scalar>
Kernel2D query_kernel(const BasicBlurField<Scalar>& field, double cx, double cy, double f, double d, int ku,
                      int kv) {
    std::vector<double> coords;
    kernel_coords(cx, cy, f, d, field.arch.input_dim, ku, kv, coords);
    auto vals = field.eval_batch(coords);
    const int C = field.arch.output_dim;
    Kernel2D k(ku, kv, C);
    for (int r = 0; r < ku * kv; ++r)
        for (int c = 0; c < C; ++c) k.samples[static_cast<std::size_t>(c) * ku * kv + r] = static_cast<float>(vals[r * C + c]);
    return k;
}

namespace detail {

/// pred(o) = sum_{i,j} K(i,j) S(o + (ku-1-i, kv-1-j)) on the valid region.
template <class Scalar>
void forward_plane(const float* S, int pu, const Scalar* K, int ku, int kv, int vu, int vv, Scalar* pred) {
    std::fill(pred, pred + static_cast<std::size_t>(vu) * vv, Scalar(0));
    for (int j = 0; j < kv; ++j)
        for (int i = 0; i < ku; ++i) {
            const Scalar k = K[j * ku + i];
            for (int oy = 0; oy < vv; ++oy) {
                const float* src = S + static_cast<std::size_t>(oy + kv - 1 - j) * pu + (ku - 1 - i);
                Scalar* dst = pred + static_cast<std::size_t>(oy) * vu;
                for (int ox = 0; ox < vu; ++ox) dst[ox] += k * static_cast<Scalar>(src[ox]);
            }
        }
}

/// dK(i,j) = sum_o g(o) S(o + (ku-1-i, kv-1-j)).
template <class Scalar>
void kernel_gradient_plane(const float* S, int pu, const Scalar* g, int ku, int kv, int vu, int vv, Scalar* dK) {
    for (int j = 0; j < kv; ++j)
        for (int i = 0; i < ku; ++i) {
            Scalar acc = 0;
            for (int oy = 0; oy < vv; ++oy) {
                const float* src = S + static_cast<std::size_t>(oy + kv - 1 - j) * pu + (ku - 1 - i);
                const Scalar* gr = g + static_cast<std::size_t>(oy) * vu;
                for (int ox = 0; ox < vu; ++ox) acc += gr[ox] * static_cast<Scalar>(src[ox]);
            }
            dK[j * ku + i] = acc;
        }
}

}  // namespace detail

/// Predicted blurry valid region for a sample from kernels `K`
/// (C planes of ku x kv, values in Scalar).
template <class Scalar>
std::vector<Scalar> predict_from_kernels(const TrainSample& s, std::span<const Scalar> K, int C, const TrainConfig& cfg) {
    const int ku = cfg.ku, kv = cfg.kv, pu = cfg.patch_u(), vu = cfg.valid_u(), vv = cfg.valid_v();
    std::vector<Scalar> pred(static_cast<std::size_t>(vu) * vv * C);
    for (int c = 0; c < C; ++c)
        detail::forward_plane<Scalar>(s.sharp.plane(c).data(), pu, K.data() + static_cast<std::size_t>(c) * ku * kv, ku, kv,
                                      vu, vv, pred.data() + static_cast<std::size_t>(c) * vu * vv);
    return pred;
}

/// One field query at the patch centre, then per-channel valid convolution.
template <class Scalar>
Image predict_patch(const BasicBlurField<Scalar>& field, const Dataset& ds, const TrainSample& s,
                    const TrainConfig& cfg) {
    const auto& e = ds.entries.at(s.entry);
    const int C = field.arch.output_dim;
    std::vector<double> coords;
    kernel_coords(s.cx, s.cy, e.focus_diopter, e.distance_diopter, field.arch.input_dim, cfg.ku, cfg.kv, coords);
    auto vals = field.eval_batch(coords);
    std::vector<Scalar> K(static_cast<std::size_t>(C) * cfg.ku * cfg.kv);
    for (int r = 0; r < cfg.ku * cfg.kv; ++r)
        for (int c = 0; c < C; ++c) K[static_cast<std::size_t>(c) * cfg.ku * cfg.kv + r] = vals[r * C + c];
    auto pred = predict_from_kernels<Scalar>(s, K, C, cfg);
    Image out(cfg.valid_u(), cfg.valid_v(), C);
    for (std::size_t q = 0; q < pred.size(); ++q) out.data()[q] = static_cast<float>(pred[q]);
    return out;
}

template <class Scalar>
struct LossAndGrad {
    double loss = 0;
    std::vector<Scalar> grad;
    std::size_t masked_pixels = 0;
};

/// Batch-averaged masked squared error and its parameter gradient.
template <class Scalar>
LossAndGrad<Scalar> loss_and_grads(const BasicBlurField<Scalar>& field, const Dataset& ds,
                                   std::span<const TrainSample> batch, const TrainConfig& cfg,
                                   bool need_grad = true) {
    if (batch.empty()) throw InputError("loss_and_grads: empty batch");
    const int C = field.arch.output_dim, ku = cfg.ku, kv = cfg.kv, vu = cfg.valid_u(), vv = cfg.valid_v();
    const std::size_t nk = static_cast<std::size_t>(ku) * kv;
    const std::size_t B = batch.size();
    std::vector<double> coords;
    coords.reserve(B * nk * field.arch.input_dim);
    for (const auto& s : batch) {
        const auto& e = ds.entries.at(s.entry);
        kernel_coords(s.cx, s.cy, e.focus_diopter, e.distance_diopter, field.arch.input_dim, ku, kv, coords);
    }
    const std::vector<Scalar> vals = field.eval_batch(coords);
    for (Scalar v : vals)
        if (!(v >= Scalar(0))) throw NumericError("field produced a negative or non-finite kernel sample");

    LossAndGrad<Scalar> out;
    std::vector<Scalar> upstream(need_grad ? vals.size() : 0, Scalar(0));
    std::vector<Scalar> K(C * nk), g(static_cast<std::size_t>(vu) * vv), dK(nk);
    const Scalar inv_b = Scalar(1) / static_cast<Scalar>(B);
    for (std::size_t b = 0; b < B; ++b) {
        const TrainSample& s = batch[b];
        for (std::size_t r = 0; r < nk; ++r)
            for (int c = 0; c < C; ++c) K[c * nk + r] = vals[(b * nk + r) * C + c];
        auto pred = predict_from_kernels<Scalar>(s, K, C, cfg);
        for (int c = 0; c < C; ++c) {
            const float* I = s.blurry.plane(c).data();
            const float* M = s.mask.plane(c).data();
            const Scalar* P = pred.data() + static_cast<std::size_t>(c) * vu * vv;
            bool any = false;
            for (std::size_t q = 0; q < g.size(); ++q) {
                if (M[q] > 0.5f) {
                    const Scalar r = P[q] - static_cast<Scalar>(I[q]);
                    out.loss += static_cast<double>(r * r) / B;
                    g[q] = Scalar(2) * r * inv_b;
                    ++out.masked_pixels;
                    any = true;
                } else {
                    g[q] = Scalar(0);
                }
            }
            if (!need_grad || !any) continue;
            detail::kernel_gradient_plane<Scalar>(s.sharp.plane(c).data(), cfg.patch_u(), g.data(), ku, kv, vu, vv,
                                                  dK.data());
            for (std::size_t r = 0; r < nk; ++r) upstream[(b * nk + r) * C + c] = dK[r];
        }
    }
    if (out.masked_pixels == 0) log::warn("every pixel in the batch is masked out; loss is 0");
    if (!std::isfinite(out.loss)) throw NumericError("non-finite training loss (diverged)");
    if (need_grad) out.grad = field.grad_batch(coords, upstream);
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LogRow {
    std::uint64_t step = 0;
    double loss = 0;  // mean over the logging window
    double lr = 0;
    double wall_ms = 0;
};

struct TrainCallbacks {
    std::function<void(const LogRow&)> on_log;
    std::function<void(std::uint64_t step, const BlurField&, const AdamState&)> on_checkpoint;
};

struct TrainResult {
    BlurField field;
    AdamState adam;
    std::vector<LogRow> log;
};

inline BlurField initial_field(const Dataset& ds, const TrainConfig& cfg) {
    FieldArchitecture arch = cfg.arch;
    arch.output_dim = ds.sensor.channels();
    auto norm = make_normalization(ds.sensor, ds.f_min, ds.f_max, ds.d_min, ds.d_max, cfg.ku, cfg.kv);
    return init_field(arch, norm, ds.sensor, derive_seed(cfg.seed, 1));
}

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const TrainCallbacks& cb = {}) {
    cfg.validate();
    TrainResult res{initial_field(ds, cfg), AdamState(), {}};
    res.adam = AdamState(res.field.parameter_count());
    if (cfg.iterations > 0 && ds.train.empty()) throw InputError("training split is empty");
    std::mt19937_64 rng(derive_seed(cfg.seed, 2));
    const auto t0 = std::chrono::steady_clock::now();
    double window = 0;
    std::uint64_t window_n = 0;
    std::vector<TrainSample> batch(cfg.batch_elements);
    for (std::uint64_t step = 0; step < cfg.iterations; ++step) {
        for (auto& s : batch) s = sample_element(ds, ds.train, cfg, rng);
        auto lg = loss_and_grads<float>(res.field, ds, batch, cfg);
        const double lr = cfg.adam.lr_at(res.adam.step);
        adam_step<float>(res.field.params, res.adam, lg.grad, cfg.adam);
        window += lg.loss;
        ++window_n;
        const std::uint64_t done = step + 1;
        if (done % cfg.log_every == 0 || done == cfg.iterations) {
            LogRow row{done, window / window_n, lr,
                       std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
            res.log.push_back(row);
            if (cb.on_log) cb.on_log(row);
            window = 0, window_n = 0;
        }
        if (cb.on_checkpoint && done % cfg.checkpoint_every == 0) cb.on_checkpoint(done, res.field, res.adam);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct RenderedFrame {
    Image predicted;  // sensor size; zero outside the domain
    Image domain;     // 1 where a prediction exists
};

/// Tiles the frame with patches on a stride equal to the valid region; each
/// tile uses one field query at its centre. Later tiles never overwrite.
template <class Scalar>
RenderedFrame render_frame(const BasicBlurField<Scalar>& field, const Dataset& ds, std::size_t entry,
                           const TrainConfig& cfg) {
    const int W = ds.sensor.width, H = ds.sensor.height, C = ds.sensor.channels();
    const int pu = cfg.patch_u(), pv = cfg.patch_v(), vu = cfg.valid_u(), vv = cfg.valid_v();
    if (W < pu || H < pv) throw InputError("frame smaller than one patch");
    RenderedFrame out{Image(W, H, C), Image(W, H, 1)};
    auto centres = [](int size, int patch, int valid) {
        std::vector<int> cs;
        const int lo = patch / 2, hi = size - 1 - patch / 2;
        for (int c = lo;; c += valid) {
            cs.push_back(std::min(c, hi));
            if (c >= hi) break;
        }
        return cs;
    };
    const auto cxs = centres(W, pu, vu), cys = centres(H, pv, vv);
    for (int cy : cys)
        for (int cx : cxs) {
            TrainSample s = make_sample(ds, cfg, entry, cx, cy);
            Image pred = predict_patch(field, ds, s, cfg);
            for (int oy = 0; oy < vv; ++oy)
                for (int ox = 0; ox < vu; ++ox) {
                    const int x = cx - vu / 2 + ox, y = cy - vv / 2 + oy;
                    if (out.domain.at(x, y) > 0.5f) continue;
                    out.domain.at(x, y) = 1.0f;
                    for (int c = 0; c < C; ++c) out.predicted.at(x, y, c) = pred.at(ox, oy, c);
                }
        }
    return out;
}

struct FrameReport {
    std::size_t entry = 0;
    int pattern = 0;
    int focus_index = 0;
    int distance_index = 0;
    evalkit::FrameMetrics metrics;
};

/// Metrics of tiled predictions against the captures over measured pixels
/// inside the predicted domain.
template <class Scalar>
std::vector<FrameReport> validate(const BasicBlurField<Scalar>& field, const Dataset& ds,
                                  std::span<const std::size_t> entries, const TrainConfig& cfg) {
    std::vector<FrameReport> reports(entries.size());
    parallel_for(entries.size(), [&](std::size_t k) {
        const std::size_t e = entries[k];
        RenderedFrame rf = render_frame(field, ds, e, cfg);
        const int C = ds.sensor.channels();
        Image mask(ds.sensor.width, ds.sensor.height, C);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < mask.height(); ++y)
                for (int x = 0; x < mask.width(); ++x)
                    mask.at(x, y, c) = rf.domain.at(x, y) * ds.masks[c].at(x, y);
        const auto& en = ds.entries[e];
        reports[k] = {e, en.pattern, en.focus_index, en.distance_index,
                      evalkit::frame_metrics(en.blurry, rf.predicted, &mask)};
    });
    return reports;
}

}  // namespace blurfield::trainer
