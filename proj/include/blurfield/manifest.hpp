#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <tuple>

#include "json_util.hpp"
#include "pfm.hpp"

namespace blurfield {

enum class FrameRole { blurry, sharp, min, max, dots, dots_inv };

inline std::string to_string(FrameRole r) {
    switch (r) {
        case FrameRole::blurry: return "blurry";
        case FrameRole::sharp: return "sharp";
        case FrameRole::min: return "min";
        case FrameRole::max: return "max";
        case FrameRole::dots: return "dots";
        case FrameRole::dots_inv: return "dots_inv";
    }
    return "?";
}

inline FrameRole parse_role(const std::string& s) {
    if (s == "blurry") return FrameRole::blurry;
    if (s == "sharp") return FrameRole::sharp;
    if (s == "min") return FrameRole::min;
    if (s == "max") return FrameRole::max;
    if (s == "dots") return FrameRole::dots;
    if (s == "dots_inv") return FrameRole::dots_inv;
    throw InputError("unknown frame role '" + s + "'");
}

/// Captures are linearised with the sensor black/white levels; sharp frames
/// are already linear.
inline bool is_capture(FrameRole r) { return r != FrameRole::sharp; }

struct FrameRef {
    int pattern_id = 0;
    int focus_index = 0;
    int distance_index = 0;
    FrameRole role = FrameRole::blurry;
    std::filesystem::path file;  // absolute after loading
};

struct FocalStackManifest {
    SensorDescriptor sensor;
    std::vector<double> focus_diopters;
    std::vector<double> distances_m;
    std::vector<FrameRef> frames;

    /// Distinct (pattern, focus, distance) triples that have a blurry frame.
    std::vector<std::tuple<int, int, int>> blurry_keys() const {
        std::set<std::tuple<int, int, int>> keys;
        for (const auto& f : frames)
            if (f.role == FrameRole::blurry)
                keys.emplace(f.pattern_id, f.focus_index, f.distance_index);
        return {keys.begin(), keys.end()};
    }

    std::vector<const FrameRef*> find(FrameRole role, int focus, int distance,
                                      std::optional<int> pattern = std::nullopt) const {
        std::vector<const FrameRef*> out;
        for (const auto& f : frames)
            if (f.role == role && f.focus_index == focus && f.distance_index == distance &&
                (!pattern || f.pattern_id == *pattern))
                out.push_back(&f);
        return out;
    }

    bool has(FrameRole role, int focus, int distance, std::optional<int> pattern = std::nullopt) const {
        return !find(role, focus, distance, pattern).empty();
    }

    double distance_diopter(int distance_index) const { return 1.0 / distances_m.at(distance_index); }

    /// Structural checks that do not touch the filesystem.
    void validate_structure() const {
        sensor.validate();
        if (focus_diopters.empty()) throw InputError("manifest has no focus_diopters");
        if (distances_m.empty()) throw InputError("manifest has no distances_m");
        for (double d : distances_m)
            if (!(d > 0) || !std::isfinite(d)) throw InputError("distances_m must be positive");
        for (double f : focus_diopters)
            if (!std::isfinite(f)) throw InputError("focus_diopters must be finite");
        const int nf = static_cast<int>(focus_diopters.size());
        const int nd = static_cast<int>(distances_m.size());
        for (const auto& f : frames) {
            if (f.focus_index < 0 || f.focus_index >= nf)
                throw InputError("frame focus_index " + std::to_string(f.focus_index) + " out of range");
            if (f.distance_index < 0 || f.distance_index >= nd)
                throw InputError("frame distance_index " + std::to_string(f.distance_index) +
                                 " out of range");
        }
        for (const auto& f : frames) {
            if (f.role != FrameRole::blurry) continue;
            for (FrameRole needed : {FrameRole::min, FrameRole::max})
                if (!has(needed, f.focus_index, f.distance_index))
                    throw InputError("missing '" + to_string(needed) + "' frame for focus_index " +
                                     std::to_string(f.focus_index) + ", distance_index " +
                                     std::to_string(f.distance_index));
        }
    }
};

inline json sensor_to_json(const SensorDescriptor& s) {
    return {{"width", s.width},
            {"height", s.height},
            {"layout", to_string(s.layout)},
            {"black_level", s.black_level},
            {"white_level", s.white_level}};
}

inline SensorDescriptor sensor_from_json(const json& j) {
    require_keys_subset(j, {"width", "height", "layout", "black_level", "white_level"}, "sensor");
    SensorDescriptor s;
    s.width = get_required<int>(j, "width", "sensor");
    s.height = get_required<int>(j, "height", "sensor");
    s.layout = parse_layout(get_required<std::string>(j, "layout", "sensor"));
    s.black_level = get_required<double>(j, "black_level", "sensor");
    s.white_level = get_required<double>(j, "white_level", "sensor");
    s.validate();
    return s;
}

/// Parses manifest JSON; relative frame paths resolve against `base_dir`.
inline FocalStackManifest manifest_from_json(const json& j, const std::filesystem::path& base_dir) {
    require_keys_subset(j, {"version", "sensor", "focus_diopters", "distances_m", "frames"},
                        "manifest");
    if (get_required<int>(j, "version", "manifest") != 1)
        throw InputError("unsupported manifest version");
    FocalStackManifest m;
    m.sensor = sensor_from_json(j.at("sensor"));
    m.focus_diopters = get_required<std::vector<double>>(j, "focus_diopters", "manifest");
    m.distances_m = get_required<std::vector<double>>(j, "distances_m", "manifest");
    if (!j.contains("frames") || !j.at("frames").is_array())
        throw InputError("manifest 'frames' must be an array");
    for (const auto& fj : j.at("frames")) {
        require_keys_subset(fj, {"pattern_id", "focus_index", "distance_index", "role", "file"},
                            "frame");
        FrameRef f;
        f.pattern_id = get_required<int>(fj, "pattern_id", "frame");
        f.focus_index = get_required<int>(fj, "focus_index", "frame");
        f.distance_index = get_required<int>(fj, "distance_index", "frame");
        f.role = parse_role(get_required<std::string>(fj, "role", "frame"));
        std::filesystem::path p = get_required<std::string>(fj, "file", "frame");
        f.file = p.is_absolute() ? p : base_dir / p;
        m.frames.push_back(std::move(f));
    }
    m.validate_structure();
    return m;
}

inline FocalStackManifest load_manifest(const std::filesystem::path& path) {
    json j = read_json_file(path);
    FocalStackManifest m = manifest_from_json(j, path.parent_path());
    for (const auto& f : m.frames)
        if (!std::filesystem::exists(f.file))
            throw InputError("manifest references missing file " + f.file.string());
    return m;
}

/// Writes the manifest; frame paths under the manifest directory become relative.
inline void save_manifest(const FocalStackManifest& m, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::absolute(path).parent_path();
    json frames = json::array();
    for (const auto& f : m.frames) {
        fs::path file = fs::absolute(f.file).lexically_normal();
        fs::path rel = file.lexically_relative(base);
        bool inside = !rel.empty() && *rel.begin() != "..";
        frames.push_back({{"pattern_id", f.pattern_id},
                          {"focus_index", f.focus_index},
                          {"distance_index", f.distance_index},
                          {"role", to_string(f.role)},
                          {"file", (inside ? rel : file).generic_string()}});
    }
    json j = {{"version", 1},
              {"sensor", sensor_to_json(m.sensor)},
              {"focus_diopters", m.focus_diopters},
              {"distances_m", m.distances_m},
              {"frames", frames}};
    write_json_file(j, path);
}

/// Expands a single-plane file to the sensor's channel planes. Each pixel of
/// a mosaic belongs to the channel(s) measuring it; the other planes take the
/// value of the same-channel site in the pixel's 2x2 Bayer cell, which is
/// adequate for the low-frequency black/white references.
inline Image expand_to_channels(const Image& single, const SensorDescriptor& sensor, bool mosaic_fill) {
    const int C = sensor.channels();
    if (single.channels() == C) return single;
    if (single.channels() != 1) throw InputError("cannot expand multi-channel image");
    Image out(single.width(), single.height(), C);
    const bool bayer = sensor.layout == Layout::rggb || sensor.layout == Layout::rggb_dp;
    for (int c = 0; c < C; ++c) {
        int site = sensor.layout == Layout::rggb ? c : c / 2;
        int sx = site & 1, sy = site >> 1;
        for (int y = 0; y < single.height(); ++y)
            for (int x = 0; x < single.width(); ++x) {
                if (mosaic_fill && bayer) {
                    int xx = std::min((x & ~1) + sx, single.width() - 1);
                    int yy = std::min((y & ~1) + sy, single.height() - 1);
                    out.at(x, y, c) = single.at(xx, yy);
                } else {
                    out.at(x, y, c) = single.at(x, y);
                }
            }
    }
    return out;
}

/// Loads one frame as sensor-channel planes; captures are linearised.
inline Image load_frame(const FocalStackManifest& m, const FrameRef& f) {
    const int C = m.sensor.channels();
    Image img = read_pfm_planar(f.file, m.sensor.height, C);
    if (img.width() != m.sensor.width || img.height() != m.sensor.height)
        throw InputError("frame " + f.file.string() + " does not match the sensor resolution");
    if (is_capture(f.role) && (m.sensor.black_level != 0.0 || m.sensor.white_level != 1.0))
        for (float& v : img.data()) v = m.sensor.linearize(v);
    bool fill = f.role == FrameRole::min || f.role == FrameRole::max;
    return expand_to_channels(img, m.sensor, fill);
}

/// Averages every frame matching the key (bursts), after linearisation.
inline Image load_averaged(const FocalStackManifest& m, FrameRole role, int focus, int distance,
                           std::optional<int> pattern = std::nullopt) {
    auto refs = m.find(role, focus, distance, pattern);
    if (refs.empty())
        throw InputError("no '" + to_string(role) + "' frame at focus_index " + std::to_string(focus) +
                         ", distance_index " + std::to_string(distance));
    Image acc = load_frame(m, *refs[0]);
    if (refs.size() == 1) return acc;
    std::vector<double> sum(acc.data().begin(), acc.data().end());
    for (std::size_t i = 1; i < refs.size(); ++i) {
        Image next = load_frame(m, *refs[i]);
        if (!next.same_shape(acc)) throw InputError("burst frames differ in shape");
        for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += next.data()[k];
    }
    for (std::size_t k = 0; k < sum.size(); ++k)
        acc.data()[k] = static_cast<float>(sum[k] / static_cast<double>(refs.size()));
    return acc;
}

}  // namespace blurfield
