#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "common.hpp"

namespace blurfield {

/// Float raster stored as channel planes, each plane row-major and top-down.
/// Values are linear intensities; every sample must be finite.
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels = 1, float fill = 0.0f)
        : width_(width), height_(height), channels_(channels) {
        if (width <= 0 || height <= 0 || channels <= 0)
            throw InputError("image dimensions must be positive");
        data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
    }
    Image(int width, int height, int channels, std::vector<float> data)
        : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
        if (width <= 0 || height <= 0 || channels <= 0)
            throw InputError("image dimensions must be positive");
        if (data_.size() != static_cast<std::size_t>(width) * height * channels)
            throw InputError("image data length does not match width*height*channels");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    std::size_t plane_size() const { return static_cast<std::size_t>(width_) * height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
    float at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

    std::span<float> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const {
        return {data_.data() + c * plane_size(), plane_size()};
    }
    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    bool same_shape(const Image& o) const {
        return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
    }
    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Copy of the rectangle [x0, x0+w) x [y0, y0+h); pixels outside read as `outside`.
    Image crop(int x0, int y0, int w, int h, float outside = 0.0f) const {
        Image out(w, h, channels_);
        for (int c = 0; c < channels_; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int sx = x0 + x, sy = y0 + y;
                    bool inside = sx >= 0 && sy >= 0 && sx < width_ && sy < height_;
                    out.at(x, y, c) = inside ? at(sx, sy, c) : outside;
                }
        return out;
    }

    Image channel(int c) const {
        Image out(width_, height_, 1);
        auto src = plane(c);
        std::copy(src.begin(), src.end(), out.data().begin());
        return out;
    }

private:
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int width_ = 0;
    int height_ = 0;
    int channels_ = 0;
    std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Sensor layouts
// ---------------------------------------------------------------------------

enum class Layout { mono, rggb, dp_g_lr, rggb_dp };

inline int channel_count(Layout layout) {
    switch (layout) {
        case Layout::mono: return 1;
        case Layout::rggb: return 4;
        case Layout::dp_g_lr: return 2;
        case Layout::rggb_dp: return 8;
    }
    return 0;
}

inline std::string to_string(Layout layout) {
    switch (layout) {
        case Layout::mono: return "MONO";
        case Layout::rggb: return "RGGB";
        case Layout::dp_g_lr: return "DP_G_LR";
        case Layout::rggb_dp: return "RGGB_DP";
    }
    return "?";
}

inline Layout parse_layout(std::string_view s) {
    if (s == "MONO") return Layout::mono;
    if (s == "RGGB") return Layout::rggb;
    if (s == "DP_G_LR") return Layout::dp_g_lr;
    if (s == "RGGB_DP") return Layout::rggb_dp;
    throw InputError("unknown sensor layout '" + std::string(s) + "'");
}

struct SensorDescriptor {
    int width = 0;
    int height = 0;
    Layout layout = Layout::mono;
    double black_level = 0.0;
    double white_level = 1.0;

    int channels() const { return channel_count(layout); }

    void validate() const {
        if (width <= 0 || height <= 0) throw InputError("sensor resolution must be positive");
        if (!(black_level < white_level))
            throw InputError("sensor black_level must be below white_level");
    }

    /// Raw digital number to linear [0, 1] intensity.
    float linearize(float dn) const {
        return static_cast<float>((dn - black_level) / (white_level - black_level));
    }

    bool operator==(const SensorDescriptor&) const = default;
};

/// Bayer site of channel c: 0 = R (even row, even col), 1 = G1 (even, odd),
/// 2 = G2 (odd, even), 3 = B (odd, odd). Dual-pixel layouts interleave the
/// left/right photodiodes as channel = 2 * site + side.
inline bool measures(const SensorDescriptor& sensor, int channel, int x, int y) {
    auto bayer_site = [&] { return (y & 1) * 2 + (x & 1); };
    switch (sensor.layout) {
        case Layout::mono: return true;
        case Layout::rggb: return bayer_site() == channel;
        case Layout::dp_g_lr: {
            int s = bayer_site();
            return s == 1 || s == 2;
        }
        case Layout::rggb_dp: return bayer_site() == channel / 2;
    }
    return false;
}

/// Binary supervision mask: 1 exactly at the sites measuring `channel_index`.
inline Image channel_mask(const SensorDescriptor& sensor, int channel_index) {
    if (channel_index < 0 || channel_index >= sensor.channels())
        throw InputError("channel index " + std::to_string(channel_index) + " out of range for " +
                         to_string(sensor.layout));
    Image mask(sensor.width, sensor.height, 1);
    for (int y = 0; y < sensor.height; ++y)
        for (int x = 0; x < sensor.width; ++x)
            mask.at(x, y) = measures(sensor, channel_index, x, y) ? 1.0f : 0.0f;
    return mask;
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

inline constexpr int kMaxKernelSamples = 120;

/// Discrete PSF samples on an odd (ku x kv) grid centred on zero displacement.
/// Sample (i, j) sits at displacement u = (i - ku/2) * pitch, v = (j - kv/2) * pitch.
struct Kernel2D {
    int ku = 0;
    int kv = 0;
    int channels = 1;
    double pixel_pitch = 1.0;
    std::vector<float> samples;  // channel planes, each kv rows of ku

    Kernel2D() = default;
    Kernel2D(int ku_, int kv_, int channels_ = 1, float fill = 0.0f)
        : ku(ku_), kv(kv_), channels(channels_) {
        if (ku <= 0 || kv <= 0 || ku % 2 == 0 || kv % 2 == 0)
            throw InputError("kernel sample counts must be odd and positive");
        if (ku > kMaxKernelSamples || kv > kMaxKernelSamples)
            throw InputError("kernel exceeds 120 samples per dimension");
        if (channels <= 0) throw InputError("kernel channel count must be positive");
        samples.assign(static_cast<std::size_t>(ku) * kv * channels, fill);
    }

    int half_u() const { return ku / 2; }
    int half_v() const { return kv / 2; }
    std::size_t plane_size() const { return static_cast<std::size_t>(ku) * kv; }

    float& at(int i, int j, int c = 0) { return samples[(c * plane_size()) + j * ku + i]; }
    float at(int i, int j, int c = 0) const { return samples[(c * plane_size()) + j * ku + i]; }

    std::span<float> plane(int c) { return {samples.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const {
        return {samples.data() + c * plane_size(), plane_size()};
    }

    double sum(int c = 0) const {
        double s = 0;
        for (float v : plane(c)) s += v;
        return s;
    }

    bool same_shape(const Kernel2D& o) const {
        return ku == o.ku && kv == o.kv && channels == o.channels;
    }

    void check_nonnegative() const {
        for (float v : samples)
            if (!(v >= 0.0f)) throw NumericError("kernel has a negative or non-finite sample");
    }

    Kernel2D channel(int c) const {
        Kernel2D out(ku, kv, 1);
        out.pixel_pitch = pixel_pitch;
        auto src = plane(c);
        std::copy(src.begin(), src.end(), out.samples.begin());
        return out;
    }

    Image to_image() const { return Image(ku, kv, channels, samples); }
};

}  // namespace blurfield
