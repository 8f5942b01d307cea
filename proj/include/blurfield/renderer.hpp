#pragma once

#include "convolve.hpp"
#include "field.hpp"
#include "trainer.hpp"

namespace blurfield::renderer {

/// Depth-quantised scene; layer 0 is the farthest.
struct LayeredScene {
    Image image;
    std::vector<Image> masks;   // a_k, single channel, partition of unity
    std::vector<Image> layers;  // l_k = image * a_k
    std::vector<double> layer_diopters;
    double focus_diopter = 0;
    int count() const { return static_cast<int>(masks.size()); }
};

/// Splits pixels into K bins uniform in diopters (1 / depth).
inline LayeredScene quantize_depth(const Image& image, const Image& depth_m, int K, double focus_diopter) {
    if (K < 1) throw InputError("layer count must be at least 1");
    if (depth_m.width() != image.width() || depth_m.height() != image.height() || depth_m.channels() != 1)
        throw InputError("depth map must be single-channel and match the image");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (float z : depth_m.data()) {
        if (!(z > 0) || !std::isfinite(z)) throw InputError("depth values must be finite and positive");
        lo = std::min(lo, 1.0 / z), hi = std::max(hi, 1.0 / z);
    }
    LayeredScene s;
    s.image = image;
    s.focus_diopter = focus_diopter;
    const int W = image.width(), H = image.height();
    s.masks.assign(K, Image(W, H, 1));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double dio = 1.0 / depth_m.at(x, y);
            int k = hi > lo ? static_cast<int>(std::floor((dio - lo) / (hi - lo) * K)) : 0;
            s.masks[std::clamp(k, 0, K - 1)].at(x, y) = 1.0f;
        }
    for (int k = 0; k < K; ++k) {
        s.layer_diopters.push_back(hi > lo ? lo + (k + 0.5) * (hi - lo) / K : lo);
        Image l(W, H, image.channels());
        for (int c = 0; c < image.channels(); ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) l.at(x, y, c) = image.at(x, y, c) * s.masks[k].at(x, y);
        s.layers.push_back(std::move(l));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Kernel slicing
// ---------------------------------------------------------------------------

struct SliceInfo {
    double query_focus = 0;
    double query_distance = 0;
    bool clamped = false;
};

/// Field coordinates for a layer: 6-D fields are queried at (f, d) directly;
/// 5-D fields proxy depth by shifting focus, f = focus + (d_cal - layer).
inline SliceInfo slice_coordinates(const BlurField& field, double focus_diopter, double layer_diopter) {
    SliceInfo s;
    const auto& n = field.norm;
    if (field.arch.input_dim == 6) {
        s.query_focus = focus_diopter;
        s.query_distance = layer_diopter;
    } else {
        s.query_focus = focus_diopter + (n.d_min - layer_diopter);
        s.query_distance = n.d_min;
    }
    const double f = std::clamp(s.query_focus, std::min(n.f_min, n.f_max), std::max(n.f_min, n.f_max));
    const double d = std::clamp(s.query_distance, std::min(n.d_min, n.d_max), std::max(n.d_min, n.d_max));
    if (f != s.query_focus || d != s.query_distance) {
        s.clamped = true;
        log::warn("kernel query clamped to the calibrated range (focus " + std::to_string(s.query_focus) + " -> " +
                  std::to_string(f) + ", distance " + std::to_string(s.query_distance) + " -> " + std::to_string(d) + ")");
    }
    s.query_focus = f;
    s.query_distance = d;
    return s;
}

inline std::vector<Kernel2D> slice_kernels(const BlurField& field, double focus_diopter, double layer_diopter,
                                           std::span<const std::array<double, 2>> tile_centers, int ku, int kv,
                                           SliceInfo* info = nullptr) {
    SliceInfo s = slice_coordinates(field, focus_diopter, layer_diopter);
    if (info) *info = s;
    std::vector<Kernel2D> out;
    for (const auto& c : tile_centers)
        out.push_back(trainer::query_kernel(field, c[0], c[1], s.query_focus, s.query_distance, ku, kv));
    return out;
}

/// Collapses sensor channels onto image channels: dual-pixel halves are
/// summed, Bayer sites map to R, G, B; each result is renormalised to sum 1.
inline Kernel2D image_kernel(const Kernel2D& sensor_kernel, Layout layout, int image_channels, bool renormalize = true) {
    const int ku = sensor_kernel.ku, kv = sensor_kernel.kv;
    auto plane_sum = [&](std::initializer_list<int> chans, Kernel2D& dst, int dc) {
        for (int c : chans)
            for (std::size_t q = 0; q < dst.plane_size(); ++q) dst.plane(dc)[q] += sensor_kernel.plane(c)[q];
    };
    Kernel2D out;
    switch (layout) {
        case Layout::mono:
            out = sensor_kernel.channel(0);
            break;
        case Layout::dp_g_lr:
            out = Kernel2D(ku, kv, 1);
            plane_sum({0, 1}, out, 0);
            break;
        case Layout::rggb:
            if (image_channels == 3) {
                out = Kernel2D(ku, kv, 3);
                plane_sum({0}, out, 0), plane_sum({1}, out, 1), plane_sum({3}, out, 2);
            } else {
                out = Kernel2D(ku, kv, 1);
                plane_sum({1}, out, 0);
            }
            break;
        case Layout::rggb_dp:
            if (image_channels == 3) {
                out = Kernel2D(ku, kv, 3);
                plane_sum({0, 1}, out, 0), plane_sum({2, 3}, out, 1), plane_sum({6, 7}, out, 2);
            } else {
                out = Kernel2D(ku, kv, 1);
                plane_sum({2, 3}, out, 0);
            }
            break;
    }
    if (renormalize)
        for (int c = 0; c < out.channels; ++c) {
            const double s = out.sum(c);
            if (!(s > 0)) throw NumericError("kernel has no mass to renormalise");
            for (float& v : out.plane(c)) v = static_cast<float>(v / s);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Compositing (one spatially invariant kernel per layer)
// ---------------------------------------------------------------------------

namespace detail {

/// Copy with replicated borders so that masks keep partitioning the padding.
inline Image pad_replicate(const Image& img, int px, int py) {
    Image out(img.width() + 2 * px, img.height() + 2 * py, img.channels());
    for (int c = 0; c < img.channels(); ++c)
        for (int y = 0; y < out.height(); ++y)
            for (int x = 0; x < out.width(); ++x)
                out.at(x, y, c) = img.at(std::clamp(x - px, 0, img.width() - 1), std::clamp(y - py, 0, img.height() - 1), c);
    return out;
}

/// Same-size convolution of every image channel with the matching kernel
/// channel (a single-channel kernel serves all), borders replicated,
/// accumulated in double.
inline Image convolve(const Image& img, const Kernel2D& k, int channels) {
    Image src = img;
    if (img.channels() == 1 && channels > 1) {
        src = Image(img.width(), img.height(), channels);
        for (int c = 0; c < channels; ++c) std::copy(img.plane(0).begin(), img.plane(0).end(), src.plane(c).begin());
    }
    return convolve_valid<double>(pad_replicate(src, k.half_u(), k.half_v()), k);
}

}  // namespace detail

inline void check_kernels(const LayeredScene& scene, const std::vector<Kernel2D>& kernels) {
    if (static_cast<int>(kernels.size()) != scene.count()) throw InputError("need one kernel per layer");
    for (const auto& k : kernels)
        if (k.channels != 1 && k.channels != scene.image.channels())
            throw InputError("kernel channels must be 1 or match the image");
}

/// sum_k K_k * l_k
inline Image composite_linear(const LayeredScene& scene, const std::vector<Kernel2D>& kernels) {
    check_kernels(scene, kernels);
    const int C = scene.image.channels();
    std::vector<double> acc(scene.image.size(), 0.0);
    for (int k = 0; k < scene.count(); ++k) {
        Image b = detail::convolve(scene.layers[k], kernels[k], C);
        for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += b.data()[q];
    }
    Image out(scene.image.width(), scene.image.height(), C);
    for (std::size_t q = 0; q < acc.size(); ++q) out.data()[q] = static_cast<float>(acc[q]);
    return out;
}

/// sum_k (K_k * l_k) prod_{k' > k} (1 - K_k' * a_k')
inline Image composite_layered(const LayeredScene& scene, const std::vector<Kernel2D>& kernels) {
    check_kernels(scene, kernels);
    const int C = scene.image.channels(), K = scene.count();
    const std::size_t n = scene.image.size();
    std::vector<double> acc(n, 0.0), transmit(n, 1.0);
    for (int k = K - 1; k >= 0; --k) {  // near to far
        Image b = detail::convolve(scene.layers[k], kernels[k], C);
        Image a = detail::convolve(scene.masks[k], kernels[k], C);
        for (std::size_t q = 0; q < n; ++q) {
            acc[q] += double(b.data()[q]) * transmit[q];
            transmit[q] *= 1.0 - a.data()[q];
        }
    }
    Image out(scene.image.width(), scene.image.height(), C);
    for (std::size_t q = 0; q < n; ++q) out.data()[q] = static_cast<float>(acc[q]);
    return out;
}

/// sum_k l~_k prod_{k' > k} (1 - a~_k') with l~_k = (K_k * l_k) / E_k,
/// a~_k = (K_k * a_k) / E_k and E_k = K_k * sum_{k' <= k} a_k'.
inline Image composite_normalized(const LayeredScene& scene, const std::vector<Kernel2D>& kernels,
                                  double epsilon = 1e-6) {
    check_kernels(scene, kernels);
    const int C = scene.image.channels(), K = scene.count();
    const std::size_t n = scene.image.size();
    const int W = scene.image.width(), H = scene.image.height();
    std::vector<Image> cumulative;
    Image cum(W, H, 1);
    for (int k = 0; k < K; ++k) {
        for (std::size_t q = 0; q < cum.size(); ++q) cum.data()[q] += scene.masks[k].data()[q];
        cumulative.push_back(cum);
    }
    std::vector<double> acc(n, 0.0), transmit(n, 1.0);
    std::size_t guarded = 0;
    for (int k = K - 1; k >= 0; --k) {
        Image b = detail::convolve(scene.layers[k], kernels[k], C);
        Image a = detail::convolve(scene.masks[k], kernels[k], C);
        Image E = detail::convolve(cumulative[k], kernels[k], C);
        for (std::size_t q = 0; q < n; ++q) {
            const double e = E.data()[q];
            double lt = 0, at = 0;
            if (e > epsilon) {
                lt = b.data()[q] / e;
                at = a.data()[q] / e;
            } else if (b.data()[q] > epsilon) {
                ++guarded;
            }
            acc[q] += lt * transmit[q];
            transmit[q] *= 1.0 - at;
        }
    }
    if (guarded) log::warn(std::to_string(guarded) + " pixels had negligible normalisation energy and were dropped");
    Image out(W, H, C);
    for (std::size_t q = 0; q < n; ++q) out.data()[q] = static_cast<float>(acc[q]);
    return out;
}

enum class Model { linear, layered, normalized };

inline Model parse_model(const std::string& s) {
    if (s == "linear") return Model::linear;
    if (s == "layered") return Model::layered;
    if (s == "normalized") return Model::normalized;
    throw InputError("unknown compositing model '" + s + "'");
}

inline std::string to_string(Model m) {
    switch (m) {
        case Model::linear: return "linear";
        case Model::layered: return "layered";
        case Model::normalized: return "normalized";
    }
    return "?";
}

inline Image composite(const LayeredScene& scene, const std::vector<Kernel2D>& kernels, Model model) {
    switch (model) {
        case Model::linear: return composite_linear(scene, kernels);
        case Model::layered: return composite_layered(scene, kernels);
        case Model::normalized: return composite_normalized(scene, kernels);
    }
    throw InputError("unknown compositing model");
}

// ---------------------------------------------------------------------------
// Full render
// ---------------------------------------------------------------------------

struct RenderOptions {
    int layers = 8;
    Model model = Model::normalized;
    int tile_size = 64;
    int ku = 0, kv = 0;  // 0: the field's full kernel support
    bool renormalize = true;
};

struct RenderResult {
    Image image;
    json metadata;
};

/// Tiles the image, slices one kernel per tile and layer at the tile centre,
/// composites each tile on a crop with a kernel-sized margin and keeps the
/// tile interior.
inline RenderResult render(const BlurField& field, const Image& image, const Image& depth_m, double focus_diopter,
                           const RenderOptions& opt) {
    if (opt.tile_size < 1) throw InputError("tile size must be positive");
    const int ku = opt.ku > 0 ? opt.ku : 2 * static_cast<int>(std::lround(field.norm.u_max)) + 1;
    const int kv = opt.kv > 0 ? opt.kv : 2 * static_cast<int>(std::lround(field.norm.v_max)) + 1;
    LayeredScene full = quantize_depth(image, depth_m, opt.layers, focus_diopter);
    const int W = image.width(), H = image.height(), T = opt.tile_size;
    const int mu = ku / 2, mv = kv / 2;
    std::vector<SliceInfo> slices(opt.layers);
    for (int k = 0; k < opt.layers; ++k) slices[k] = slice_coordinates(field, focus_diopter, full.layer_diopters[k]);

    const Image padded_image = detail::pad_replicate(image, mu, mv);
    std::vector<Image> padded_masks;
    for (const auto& m : full.masks) padded_masks.push_back(detail::pad_replicate(m, mu, mv));
    Image out(W, H, image.channels());
    const int tiles_x = (W + T - 1) / T, tiles_y = (H + T - 1) / T;
    parallel_for(static_cast<std::size_t>(tiles_x) * tiles_y, [&](std::size_t t) {
        const int tx = static_cast<int>(t % tiles_x) * T, ty = static_cast<int>(t / tiles_x) * T;
        const int tw = std::min(T, W - tx), th = std::min(T, H - ty);
        const double cx = tx + (tw - 1) / 2.0, cy = ty + (th - 1) / 2.0;
        // Crop in padded coordinates: tile origin shifts by the margin.
        Image img_crop = padded_image.crop(tx, ty, tw + 2 * mu, th + 2 * mv);
        LayeredScene scene;
        scene.image = img_crop;
        scene.focus_diopter = focus_diopter;
        scene.layer_diopters = full.layer_diopters;
        for (int k = 0; k < opt.layers; ++k) {
            Image mask = padded_masks[k].crop(tx, ty, tw + 2 * mu, th + 2 * mv);
            Image layer(img_crop.width(), img_crop.height(), img_crop.channels());
            for (int c = 0; c < layer.channels(); ++c)
                for (std::size_t q = 0; q < mask.size(); ++q) layer.plane(c)[q] = img_crop.plane(c)[q] * mask.data()[q];
            scene.masks.push_back(std::move(mask));
            scene.layers.push_back(std::move(layer));
        }
        std::vector<Kernel2D> kernels;
        for (int k = 0; k < opt.layers; ++k) {
            Kernel2D sk = trainer::query_kernel(field, cx, cy, slices[k].query_focus, slices[k].query_distance, ku, kv);
            kernels.push_back(image_kernel(sk, field.sensor.layout, image.channels(), opt.renormalize));
        }
        Image tile = composite(scene, kernels, opt.model);
        for (int c = 0; c < image.channels(); ++c)
            for (int y = 0; y < th; ++y)
                for (int x = 0; x < tw; ++x) out.at(tx + x, ty + y, c) = tile.at(mu + x, mv + y, c);
    });

    json layers = json::array();
    for (int k = 0; k < opt.layers; ++k)
        layers.push_back({{"layer_diopter", full.layer_diopters[k]},
                          {"query_focus_diopter", slices[k].query_focus},
                          {"query_distance_diopter", slices[k].query_distance},
                          {"clamped", slices[k].clamped}});
    RenderResult r{std::move(out),
                   {{"model", to_string(opt.model)},
                    {"layers", opt.layers},
                    {"tile_size", T},
                    {"kernel_samples", {ku, kv}},
                    {"focus_diopter", focus_diopter},
                    {"kernels_renormalized", opt.renormalize},
                    {"depth_proxy", field.arch.input_dim == 6 ? "field distance axis" : "focus offset"},
                    {"layer_queries", layers}}};
    return r;
}

}  // namespace blurfield::renderer
