#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "convolve.hpp"
#include "manifest.hpp"

namespace blurfield::synthcam {

enum class Sweep { one_sided, two_sided };

struct ThinLensConfig {
    double focal_length = 0.030;    // m
    double target_distance = 0.40;  // m
    int n_focus = 21;
    double r_min = 0.5;  // px
    double r_max = 24.0;
    Sweep sweep = Sweep::one_sided;
    double diopter_span = 2.0;  // width of the focus sweep

    void validate() const {
        if (!(r_min > 0) || !(r_min <= r_max)) throw InputError("need 0 < r_min <= r_max");
        if (n_focus < 2) throw InputError("n_focus must be at least 2");
        if (!(target_distance > 0) || !(focal_length > 0) || !(diopter_span > 0))
            throw InputError("lens distances and diopter span must be positive");
    }
    double target_diopter() const { return 1.0 / target_distance; }
};

struct NoiseConfig {
    bool enabled = true;
    double read_sigma = 0.01;
    double full_scale_electrons = 10000.0;
    int bit_depth = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (read_sigma < 0) throw InputError("read_sigma must be non-negative");
        if (bit_depth < 8 || bit_depth > 16) throw InputError("bit_depth must lie in [8, 16]");
        if (!(full_scale_electrons > 0)) throw InputError("full_scale_electrons must be positive");
    }
};

struct FocusSetting {
    double focus_diopter;
    double radius_px;
    int side_sign;
};

// ---------------------------------------------------------------------------
// Parametric PSFs
// ---------------------------------------------------------------------------

inline void check_disc_grid(double radius_px, int grid_size) {
    if (!(radius_px > 0)) throw InputError("disc radius must be positive");
    if (grid_size % 2 == 0 || grid_size < 2.0 * radius_px + 1.0)
        throw InputError("grid of " + std::to_string(grid_size) + " samples too small for radius " +
                         std::to_string(radius_px));
    if (grid_size > kMaxKernelSamples) throw InputError("grid exceeds the kernel size limit");
}

/// Fraction of each grid cell covered by the disc, estimated on an
/// (ss x ss) sub-sample lattice per cell. Sums to roughly pi * r^2.
inline std::vector<double> disc_coverage(double radius_px, int grid_size, int ss) {
    const int half = grid_size / 2;
    std::vector<double> cov(static_cast<std::size_t>(grid_size) * grid_size, 0.0);
    const double r2 = radius_px * radius_px;
    for (int j = 0; j < grid_size; ++j)
        for (int i = 0; i < grid_size; ++i) {
            int hits = 0;
            for (int sj = 0; sj < ss; ++sj)
                for (int si = 0; si < ss; ++si) {
                    double u = (i - half) + (si + 0.5) / ss - 0.5;
                    double v = (j - half) + (sj + 0.5) / ss - 0.5;
                    if (u * u + v * v <= r2) ++hits;
                }
            cov[static_cast<std::size_t>(j) * grid_size + i] = static_cast<double>(hits) / (ss * ss);
        }
    return cov;
}

/// Antialiased (4x4 supersampled) disc normalised to unit sum.
inline Kernel2D disc_psf(double radius_px, int grid_size) {
    check_disc_grid(radius_px, grid_size);
    auto cov = disc_coverage(radius_px, grid_size, 4);
    double total = 0;
    for (double c : cov) total += c;
    if (total <= 0) {  // radius far below a sample: all mass in the centre
        cov[cov.size() / 2] = 1.0;
        total = 1.0;
    }
    Kernel2D k(grid_size, grid_size, 1);
    for (std::size_t n = 0; n < cov.size(); ++n) k.samples[n] = static_cast<float>(cov[n] / total);
    return k;
}

/// Half-aperture dual-pixel kernels: the disc split by a linear ramp along u.
/// left + right reproduces disc_psf bit-exactly and right(u, v) = left(-u, v).
inline std::pair<Kernel2D, Kernel2D> dual_pixel_pair(double radius_px, int grid_size, int side_sign) {
    if (side_sign != 1 && side_sign != -1) throw InputError("side_sign must be +1 or -1");
    Kernel2D disc = disc_psf(radius_px, grid_size);
    Kernel2D left(grid_size, grid_size, 1), right(grid_size, grid_size, 1);
    const int half = grid_size / 2;
    auto ramp = [&](double t) { return std::clamp(t / (2.0 * radius_px), 0.0, 1.0); };
    for (int j = 0; j < grid_size; ++j)
        for (int i = 0; i < grid_size; ++i) {
            const double a = side_sign * static_cast<double>(i - half);
            const float d = disc.at(i, j);
            const double wl = ramp(radius_px - a), wr = ramp(radius_px + a);
            // Round the larger half and obtain the smaller by exact subtraction,
            // so the halves add back to the disc without rounding error.
            if (a <= 0) {
                float l = static_cast<float>(d * wl);
                left.at(i, j) = l;
                right.at(i, j) = d - l;
            } else {
                float r = static_cast<float>(d * wr);
                right.at(i, j) = r;
                left.at(i, j) = d - r;
            }
        }
    return {std::move(left), std::move(right)};
}

/// Focus settings linear in diopters; radius affine in the diopter offset
/// from the target with the extremes pinned to r_min and r_max.
inline std::vector<FocusSetting> radius_schedule(const ThinLensConfig& cfg) {
    cfg.validate();
    const double dt = cfg.target_diopter();
    const int n = cfg.n_focus;
    std::vector<double> diopters(n);
    for (int i = 0; i < n; ++i) {
        double t = static_cast<double>(i) / (n - 1);
        diopters[i] = cfg.sweep == Sweep::one_sided ? dt + t * cfg.diopter_span
                                                    : dt + (t - 0.5) * cfg.diopter_span;
    }
    double max_offset = 0;
    for (double f : diopters) max_offset = std::max(max_offset, std::abs(f - dt));
    std::vector<FocusSetting> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        double offset = std::abs(diopters[i] - dt);
        double r = cfg.r_min + (cfg.r_max - cfg.r_min) * offset / max_offset;
        if (cfg.sweep == Sweep::one_sided) {
            // exact endpoints and linear spacing independent of diopter rounding
            r = cfg.r_min + (cfg.r_max - cfg.r_min) * static_cast<double>(i) / (n - 1);
        }
        int side = (cfg.sweep == Sweep::two_sided && diopters[i] < dt) ? -1 : 1;
        out.push_back({diopters[i], r, side});
    }
    return out;
}

/// Smallest odd grid holding every scheduled disc.
inline int schedule_grid_size(const ThinLensConfig& cfg) {
    return 2 * static_cast<int>(std::ceil(cfg.r_max)) + 1;
}

/// Ground-truth kernel for one setting: 1 channel for MONO, (L, R) for DP_G_LR.
inline Kernel2D ground_truth_kernel(const FocusSetting& s, int grid_size, Layout layout) {
    if (layout == Layout::mono) return disc_psf(s.radius_px, grid_size);
    if (layout != Layout::dp_g_lr) throw InputError("simulation supports MONO and DP_G_LR sensors");
    auto [l, r] = dual_pixel_pair(s.radius_px, grid_size, s.side_sign);
    Kernel2D k(grid_size, grid_size, 2);
    std::copy(l.samples.begin(), l.samples.end(), k.plane(0).begin());
    std::copy(r.samples.begin(), r.samples.end(), k.plane(1).begin());
    return k;
}

// ---------------------------------------------------------------------------
// Patterns and noise
// ---------------------------------------------------------------------------

inline constexpr double kBandSigma[5] = {16.0, 8.0, 4.0, 2.0, 1.0};

namespace detail {

inline std::vector<double> gaussian_taps(double sigma) {
    int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> taps(2 * radius + 1);
    double sum = 0;
    for (int k = -radius; k <= radius; ++k) sum += taps[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    for (double& t : taps) t /= sum;
    return taps;
}

inline int reflect(int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
}

/// Separable Gaussian blur with mirrored borders, in double precision.
inline std::vector<double> gaussian_blur(const std::vector<double>& src, int w, int h, double sigma) {
    auto taps = gaussian_taps(sigma);
    const int r = static_cast<int>(taps.size() / 2);
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int k = -r; k <= r; ++k) s += taps[k + r] * src[static_cast<std::size_t>(y) * w + reflect(x + k, w)];
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0;
            for (int k = -r; k <= r; ++k) s += taps[k + r] * tmp[static_cast<std::size_t>(reflect(y + k, h)) * w + x];
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

}  // namespace detail

/// Band-limited noise in [0, 1]: Gaussian-filtered white noise, band 0 the
/// coarsest (sigma 16 samples) through band 4 the finest (sigma 1).
inline Image noise_pattern(int band, int size, std::uint64_t seed) {
    if (band < 0 || band > 4) throw InputError("noise band must lie in 0..4");
    if (size < 64) throw InputError("noise pattern size must be at least 64");
    std::mt19937_64 rng(derive_seed(seed, 0x6E6F697365ULL, static_cast<std::uint64_t>(band)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> white(static_cast<std::size_t>(size) * size);
    for (double& v : white) v = normal(rng);
    auto smooth = detail::gaussian_blur(white, size, size, kBandSigma[band]);
    auto [lo, hi] = std::minmax_element(smooth.begin(), smooth.end());
    const double a = *lo, span = *hi - *lo;
    Image img(size, size, 1);
    for (std::size_t k = 0; k < smooth.size(); ++k)
        img.data()[k] = static_cast<float>((smooth[k] - a) / span);
    return img;
}

/// Shot (Poisson), read (Gaussian) and quantisation noise on [0, 1] data.
inline Image add_noise(const Image& image, const NoiseConfig& cfg) {
    cfg.validate();
    if (!cfg.enabled) return image;
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x726561644E6FULL));
    std::normal_distribution<double> read(0.0, 1.0);
    const double ne = cfg.full_scale_electrons;
    const double levels = std::ldexp(1.0, cfg.bit_depth) - 1.0;
    Image out(image.width(), image.height(), image.channels());
    for (std::size_t k = 0; k < image.size(); ++k) {
        double x = std::clamp(static_cast<double>(image.data()[k]), 0.0, 1.0);
        double mean = x * ne;
        double electrons = 0;
        if (mean > 0) {
            std::poisson_distribution<long long> shot(mean);
            electrons = static_cast<double>(shot(rng));
        }
        double y = electrons / ne + cfg.read_sigma * read(rng);
        y = std::clamp(y, 0.0, 1.0);
        out.data()[k] = static_cast<float>(std::round(y * levels) / levels);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Focal stack simulation
// ---------------------------------------------------------------------------

struct SimulationResult {
    FocalStackManifest manifest;
    std::vector<FocusSetting> schedule;
    int grid_size = 0;
};

/// Blurs and noises every pattern at every scheduled focus and writes PFM
/// frames plus a manifest under `out_dir`. Patterns must exceed the sensor
/// by the kernel margin; their central sensor-sized crop is the sharp frame.
inline SimulationResult simulate_stack(const std::vector<Image>& patterns, const ThinLensConfig& lens,
                                       const NoiseConfig& noise, const SensorDescriptor& sensor,
                                       const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    if (patterns.empty()) throw InputError("simulate_stack needs at least one pattern");
    if (sensor.layout != Layout::mono && sensor.layout != Layout::dp_g_lr)
        throw InputError("simulate_stack supports MONO and DP_G_LR sensors");
    sensor.validate();
    noise.validate();
    SimulationResult res;
    res.schedule = radius_schedule(lens);
    res.grid_size = schedule_grid_size(lens);
    const int g = res.grid_size;
    const int need_w = sensor.width + g - 1, need_h = sensor.height + g - 1;
    for (const auto& p : patterns) {
        if (p.channels() != 1) throw InputError("patterns must be single-channel");
        if (p.width() < need_w || p.height() < need_h)
            throw InputError("pattern smaller than the sensor plus the largest kernel (" +
                             std::to_string(need_w) + "x" + std::to_string(need_h) + " required)");
    }
    fs::create_directories(out_dir / "frames");

    auto& m = res.manifest;
    m.sensor = sensor;
    m.sensor.black_level = 0.0;
    m.sensor.white_level = 1.0;
    m.distances_m = {lens.target_distance};
    for (const auto& s : res.schedule) m.focus_diopters.push_back(s.focus_diopter);

    const int C = sensor.channels();
    const int nf = static_cast<int>(res.schedule.size());
    const int np = static_cast<int>(patterns.size());
    std::vector<Kernel2D> kernels;
    for (const auto& s : res.schedule) kernels.push_back(ground_truth_kernel(s, g, sensor.layout));

    auto frame_path = [&](const std::string& role, int t, int i) {
        return out_dir / "frames" / (role + "_t" + std::to_string(t) + "_f" + std::to_string(i) + ".pfm");
    };
    auto noised = [&](const Image& img, std::uint64_t stream_a, std::uint64_t stream_b) {
        NoiseConfig nc = noise;
        nc.seed = derive_seed(noise.seed, stream_a, stream_b);
        return add_noise(img, nc);
    };

    // Sharp frames: central crops of the patterns.
    std::vector<Image> sharps;
    for (const auto& p : patterns) {
        int x0 = (p.width() - sensor.width) / 2, y0 = (p.height() - sensor.height) / 2;
        sharps.push_back(p.crop(x0, y0, sensor.width, sensor.height));
    }

    parallel_for(static_cast<std::size_t>(np) * nf, [&](std::size_t job) {
        const int t = static_cast<int>(job / nf), i = static_cast<int>(job % nf);
        const Image& p = patterns[t];
        int x0 = (p.width() - sensor.width) / 2 - g / 2, y0 = (p.height() - sensor.height) / 2 - g / 2;
        Image region = p.crop(x0, y0, sensor.width + g - 1, sensor.height + g - 1);
        Image blurred(sensor.width, sensor.height, C);
        for (int c = 0; c < C; ++c)
            convolve_valid<float>(region.plane(0), region.width(), region.height(), kernels[i].plane(c),
                                  g, g, blurred.plane(c));
        write_pfm_planar(noised(blurred, static_cast<std::uint64_t>(t) + 1, static_cast<std::uint64_t>(i)),
                         frame_path("blurry", t, i));
        write_pfm_planar(sharps[t], frame_path("sharp", t, i));
    });
    // Black and white references: blurred constants are constants.
    parallel_for(static_cast<std::size_t>(nf), [&](std::size_t ii) {
        const int i = static_cast<int>(ii);
        Image lo(sensor.width, sensor.height, C, 0.0f), hi(sensor.width, sensor.height, C);
        for (int c = 0; c < C; ++c) {
            float mass = static_cast<float>(kernels[i].sum(c));
            std::fill(hi.plane(c).begin(), hi.plane(c).end(), mass);
        }
        write_pfm_planar(noised(lo, 0x6D696EULL, ii), frame_path("min", 0, i));
        write_pfm_planar(noised(hi, 0x6D6178ULL, ii), frame_path("max", 0, i));
    });

    for (int t = 0; t < np; ++t)
        for (int i = 0; i < nf; ++i) {
            m.frames.push_back({t, i, 0, FrameRole::blurry, fs::absolute(frame_path("blurry", t, i))});
            m.frames.push_back({t, i, 0, FrameRole::sharp, fs::absolute(frame_path("sharp", t, i))});
        }
    for (int i = 0; i < nf; ++i) {
        m.frames.push_back({0, i, 0, FrameRole::min, fs::absolute(frame_path("min", 0, i))});
        m.frames.push_back({0, i, 0, FrameRole::max, fs::absolute(frame_path("max", 0, i))});
    }
    m.validate_structure();
    save_manifest(m, out_dir / "manifest.json");

    json gt = {{"grid_size", g}, {"layout", to_string(sensor.layout)}, {"settings", json::array()}};
    for (const auto& s : res.schedule)
        gt["settings"].push_back({{"focus_diopter", s.focus_diopter}, {"radius_px", s.radius_px}, {"side_sign", s.side_sign}});
    write_json_file(gt, out_dir / "ground_truth.json");
    return res;
}

// ---------------------------------------------------------------------------
// Dot grids for geometric calibration
// ---------------------------------------------------------------------------

/// Regular grid of dots on the scene plane (albedo coordinates in pixels).
struct DotGrid {
    int rows = 9;
    int cols = 12;
    double spacing = 40.0;
    double radius = 10.0;
    double origin_x = 40.0;  // centre of dot (0, 0)
    double origin_y = 40.0;
    bool white_dots = true;

    std::vector<std::array<double, 2>> centers() const {
        std::vector<std::array<double, 2>> out;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out.push_back({origin_x + c * spacing, origin_y + r * spacing});
        return out;
    }

    /// Point-sampled albedo at scene position (x, y).
    double albedo(double x, double y) const {
        double cx = std::round((x - origin_x) / spacing), cy = std::round((y - origin_y) / spacing);
        bool inside = false;
        if (cx >= 0 && cx < cols && cy >= 0 && cy < rows) {
            double dx = x - (origin_x + cx * spacing), dy = y - (origin_y + cy * spacing);
            inside = dx * dx + dy * dy <= radius * radius;
        }
        return inside == white_dots ? 1.0 : 0.0;
    }

    /// Box-filtered albedo raster (ss x ss samples per pixel).
    Image render(int width, int height, int ss = 4) const {
        Image img(width, height, 1);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double acc = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx)
                        acc += albedo(x - 0.5 + (sx + 0.5) / ss, y - 0.5 + (sy + 0.5) / ss);
                img.at(x, y) = static_cast<float>(acc / (ss * ss));
            }
        return img;
    }

    DotGrid inverted() const {
        DotGrid g = *this;
        g.white_dots = !white_dots;
        return g;
    }
};

}  // namespace blurfield::synthcam
