#pragma once

#include "geomcal.hpp"
#include "manifest.hpp"
#include "pfm.hpp"
#include "radcal.hpp"

namespace blurfield::preprocess {

struct PatternSource {
    int pattern_id = 0;
    std::filesystem::path albedo;  // single-channel PFM on the scene plane
};

struct DotGridSpec {
    int rows = 9;
    int cols = 12;
    double spacing = 40;
    double origin_x = 40;
    double origin_y = 40;

    std::vector<geomcal::Point> centers() const {
        std::vector<geomcal::Point> out;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out.push_back({origin_x + c * spacing, origin_y + r * spacing});
        return out;
    }
};

struct PreprocessConfig {
    std::vector<PatternSource> patterns;
    DotGridSpec dot_grid;
    double A_min = 0.0;
    double A_max = 1.0;
    int in_focus_index = -1;  // -1: sharpest dot image
    double refine_radius_px = 12.0;
    double max_rms_px = 1.0;
    std::uint64_t seed = 0;
    std::filesystem::path chain;  // optional precomputed chain(s); skips dot calibration
};

inline PreprocessConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
    require_keys_subset(j,
                        {"patterns", "dot_grid", "A_min", "A_max", "in_focus_index", "refine_radius_px", "max_rms_px",
                         "seed", "chain"},
                        "preprocess config");
    PreprocessConfig c;
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    for (const auto& p : j.at("patterns")) {
        require_keys_subset(p, {"pattern_id", "albedo"}, "pattern");
        c.patterns.push_back({get_required<int>(p, "pattern_id", "pattern"),
                              resolve(get_required<std::string>(p, "albedo", "pattern"))});
    }
    if (j.contains("dot_grid")) {
        const json& g = j["dot_grid"];
        require_keys_subset(g, {"rows", "cols", "spacing", "origin"}, "dot_grid");
        c.dot_grid.rows = get_or(g, "rows", c.dot_grid.rows);
        c.dot_grid.cols = get_or(g, "cols", c.dot_grid.cols);
        c.dot_grid.spacing = get_or(g, "spacing", c.dot_grid.spacing);
        if (g.contains("origin")) {
            auto o = g["origin"].get<std::vector<double>>();
            if (o.size() != 2) throw InputError("dot_grid.origin must be [x, y]");
            c.dot_grid.origin_x = o[0], c.dot_grid.origin_y = o[1];
        }
    }
    c.A_min = get_or(j, "A_min", c.A_min);
    c.A_max = get_or(j, "A_max", c.A_max);
    c.in_focus_index = get_or(j, "in_focus_index", c.in_focus_index);
    c.refine_radius_px = get_or(j, "refine_radius_px", c.refine_radius_px);
    c.max_rms_px = get_or(j, "max_rms_px", c.max_rms_px);
    c.seed = get_or(j, "seed", c.seed);
    if (j.contains("chain")) c.chain = resolve(j["chain"].get<std::string>());
    if (!(c.A_min >= 0 && c.A_min < c.A_max && c.A_max <= 1)) throw InputError("need 0 <= A_min < A_max <= 1");
    return c;
}

inline json config_to_json(const PreprocessConfig& c) {
    json pats = json::array();
    for (const auto& p : c.patterns) pats.push_back({{"pattern_id", p.pattern_id}, {"albedo", p.albedo.string()}});
    json j = {{"patterns", pats},
              {"dot_grid",
               {{"rows", c.dot_grid.rows},
                {"cols", c.dot_grid.cols},
                {"spacing", c.dot_grid.spacing},
                {"origin", {c.dot_grid.origin_x, c.dot_grid.origin_y}}}},
              {"A_min", c.A_min},
              {"A_max", c.A_max},
              {"in_focus_index", c.in_focus_index},
              {"refine_radius_px", c.refine_radius_px},
              {"max_rms_px", c.max_rms_px},
              {"seed", c.seed}};
    if (!c.chain.empty()) j["chain"] = c.chain.string();
    return j;
}

/// Per-distance chains, keyed by distance index.
using ChainSet = std::map<int, geomcal::RegistrationChain>;

inline json chains_to_json(const ChainSet& chains) {
    json arr = json::array();
    for (const auto& [d, c] : chains) {
        json e = geomcal::chain_to_json(c);
        e["distance_index"] = d;
        arr.push_back(e);
    }
    return {{"chains", arr}};
}

inline ChainSet chains_from_json(const json& j) {
    require_keys_subset(j, {"chains"}, "chain file");
    ChainSet out;
    for (json e : j.at("chains")) {
        const int d = get_required<int>(e, "distance_index", "chain");
        e.erase("distance_index");
        out[d] = geomcal::chain_from_json(e);
    }
    return out;
}

/// Mean over channels of a sensor-channel image.
inline Image luminance(const Image& img) {
    Image out(img.width(), img.height(), 1);
    for (int c = 0; c < img.channels(); ++c)
        for (std::size_t q = 0; q < out.size(); ++q) out.data()[q] += img.plane(c)[q] / img.channels();
    return out;
}

/// Mean squared gradient, used to pick the in-focus dot image.
inline double sharpness(const Image& img) {
    double acc = 0;
    for (int y = 0; y + 1 < img.height(); ++y)
        for (int x = 0; x + 1 < img.width(); ++x) {
            double gx = img.at(x + 1, y) - img.at(x, y), gy = img.at(x, y + 1) - img.at(x, y);
            acc += gx * gx + gy * gy;
        }
    return acc / std::max(1, (img.width() - 1) * (img.height() - 1));
}

struct CalibrationReport {
    int distance_index = 0;
    int in_focus_index = 0;
    double rms_residual_px = 0;
    std::map<int, double> scales;
};

/// Calibrates one distance from its dots / dots_inv captures.
inline geomcal::RegistrationChain calibrate_distance(const FocalStackManifest& m, int d, const PreprocessConfig& cfg,
                                                     CalibrationReport* report = nullptr) {
    const int nf = static_cast<int>(m.focus_diopters.size());
    std::map<int, std::vector<geomcal::Point>> detected;
    std::map<int, double> sharp;
    for (int i = 0; i < nf; ++i) {
        if (!m.has(FrameRole::dots, i, d) || !m.has(FrameRole::dots_inv, i, d)) continue;
        Image dots = luminance(load_averaged(m, FrameRole::dots, i, d));
        Image inv = luminance(load_averaged(m, FrameRole::dots_inv, i, d));
        Image bin = geomcal::binarize_pair(dots, inv);
        detected[i] = geomcal::detect_dots(bin, dots, cfg.dot_grid.rows, cfg.dot_grid.cols, cfg.refine_radius_px);
        sharp[i] = sharpness(dots);
    }
    if (detected.empty())
        throw InputError("no dots/dots_inv frames at distance_index " + std::to_string(d) + " and no chain given");
    int in_focus = cfg.in_focus_index;
    if (in_focus < 0) {
        in_focus = detected.begin()->first;
        for (const auto& [i, s] : sharp)
            if (s > sharp[in_focus]) in_focus = i;
    }
    if (!detected.count(in_focus)) throw InputError("in-focus index has no dot frames");
    const auto scene = cfg.dot_grid.centers();
    geomcal::DistortionOptions dopt;
    dopt.max_rms_px = cfg.max_rms_px;
    auto fit = geomcal::estimate_distortion(detected[in_focus], scene, m.sensor.width, m.sensor.height, dopt);
    geomcal::RegistrationChain chain;
    chain.H = fit.homography;
    chain.D = fit.distortion;
    auto undistorted = [&](const std::vector<geomcal::Point>& pts) {
        std::vector<geomcal::Point> out;
        for (const auto& p : pts) out.push_back(chain.D.undistort(p));
        return out;
    };
    const auto ref = undistorted(detected[in_focus]);
    const geomcal::Point c{chain.D.cx, chain.D.cy};
    for (const auto& [i, pts] : detected)
        chain.scales[{i, d}] = i == in_focus ? 1.0 : geomcal::estimate_scale(ref, undistorted(pts), c);
    // Foci without dot captures take the scale of the nearest calibrated focus.
    for (int i = 0; i < nf; ++i) {
        if (chain.scales.count({i, d})) continue;
        int best = detected.begin()->first;
        for (const auto& [j, pts] : detected)
            if (std::abs(m.focus_diopters[j] - m.focus_diopters[i]) < std::abs(m.focus_diopters[best] - m.focus_diopters[i]))
                best = j;
        chain.scales[{i, d}] = chain.scales[{best, d}];
    }
    if (report) {
        report->distance_index = d;
        report->in_focus_index = in_focus;
        report->rms_residual_px = fit.rms_residual_px;
        for (int i = 0; i < nf; ++i) report->scales[i] = chain.scales[{i, d}];
    }
    return chain;
}

struct PreprocessResult {
    FocalStackManifest manifest;
    ChainSet chains;
    std::vector<CalibrationReport> reports;
};

/// Writes sharp frames (warped albedo, radiometrically compensated) for every
/// blurry capture and a training manifest plus chain sidecar under `out_dir`.
inline PreprocessResult run(const FocalStackManifest& raw, const PreprocessConfig& cfg,
                            const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "frames");
    PreprocessResult res;
    res.manifest = raw;
    res.manifest.frames.erase(std::remove_if(res.manifest.frames.begin(), res.manifest.frames.end(),
                                             [](const FrameRef& f) { return f.role == FrameRole::sharp; }),
                              res.manifest.frames.end());
    std::set<int> distances;
    for (auto [t, i, d] : raw.blurry_keys()) distances.insert(d);

    if (!cfg.chain.empty()) {
        res.chains = chains_from_json(read_json_file(cfg.chain));
    } else {
        for (int d : distances) {
            CalibrationReport rep;
            res.chains[d] = calibrate_distance(raw, d, cfg, &rep);
            res.reports.push_back(rep);
        }
    }

    std::map<int, Image> albedo;
    for (const auto& p : cfg.patterns) {
        Image a = read_pfm(p.albedo);
        if (a.channels() != 1) throw InputError("albedo " + p.albedo.string() + " must be single-channel");
        for (float v : a.data())
            if (!(v >= 0 && v <= 1)) throw InputError("albedo " + p.albedo.string() + " has values outside [0, 1]");
        albedo[p.pattern_id] = std::move(a);
    }

    const auto keys = raw.blurry_keys();
    std::vector<FrameRef> produced(keys.size());
    parallel_for(keys.size(), [&](std::size_t k) {
        auto [t, i, d] = keys[k];
        auto it = albedo.find(t);
        if (it == albedo.end()) throw InputError("no albedo for pattern_id " + std::to_string(t));
        auto ch = res.chains.find(d);
        if (ch == res.chains.end()) throw InputError("no registration chain for distance_index " + std::to_string(d));
        radcal::RadiometricPair pair{load_averaged(raw, FrameRole::min, i, d), load_averaged(raw, FrameRole::max, i, d),
                                     cfg.A_min, cfg.A_max};
        auto warped = geomcal::warp_to_capture_space(it->second, ch->second, i, d, raw.sensor.width, raw.sensor.height);
        for (std::size_t q = 0; q < warped.image.size(); ++q) {
            if (warped.valid.data()[q] < 0.5f) warped.image.data()[q] = static_cast<float>(cfg.A_min);
            warped.image.data()[q] = std::clamp(warped.image.data()[q], float(cfg.A_min), float(cfg.A_max));
        }
        Image sharp = radcal::compensate(warped.image, pair);
        fs::path path = out_dir / "frames" /
                        ("sharp_t" + std::to_string(t) + "_f" + std::to_string(i) + "_d" + std::to_string(d) + ".pfm");
        write_pfm_planar(sharp, path);
        produced[k] = {t, i, d, FrameRole::sharp, fs::absolute(path)};
    });
    for (auto& f : produced) res.manifest.frames.push_back(f);
    res.manifest.validate_structure();
    save_manifest(res.manifest, out_dir / "manifest.json");
    write_json_file(chains_to_json(res.chains), out_dir / "registration.json");
    return res;
}

}  // namespace blurfield::preprocess
