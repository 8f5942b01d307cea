#pragma once

#include <fstream>

#include "checkpoint.hpp"
#include "field.hpp"

namespace blurfield::evalkit {

/// Sampling lattice: nx x ny x nf positions/foci, ku x kv kernel samples.
/// Axis values are evenly spaced over each inclusive range (a single
/// sample sits at the lower bound). `d` is used by 6-D fields only.
struct GridSpec {
    int nx = 1, ny = 1, nf = 1, ku = 1, kv = 1;
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0, f0 = 0, f1 = 0;
    double d = 0;

    void validate() const {
        if (nx < 1 || ny < 1 || nf < 1) throw InputError("grid dims must be positive");
        Kernel2D probe(ku, kv, 1);
    }

    static double axis(double lo, double hi, int n, int i) { return n == 1 ? lo : lo + (hi - lo) * i / (n - 1); }

    std::uint64_t values(int channels) const {
        return std::uint64_t(nx) * ny * nf * ku * kv * static_cast<std::uint64_t>(channels);
    }
    std::uint64_t payload_bytes(int channels) const { return values(channels) * 4; }

    /// Lattice covering a field's calibrated x, y and focus ranges.
    static GridSpec covering(const NormalizationSpec& n, int nx, int ny, int nf, int ku, int kv) {
        GridSpec g;
        g.nx = nx, g.ny = ny, g.nf = nf, g.ku = ku, g.kv = kv;
        g.x0 = n.x_min, g.x1 = n.x_max, g.y0 = n.y_min, g.y1 = n.y_max, g.f0 = n.f_min, g.f1 = n.f_max;
        g.d = n.d_min;
        return g;
    }
};

inline json grid_spec_to_json(const GridSpec& g) {
    return {{"dims", {g.nx, g.ny, g.nf, g.ku, g.kv}},
            {"x_range", {g.x0, g.x1}},
            {"y_range", {g.y0, g.y1}},
            {"f_range", {g.f0, g.f1}},
            {"d", g.d}};
}

inline GridSpec grid_spec_from_json(const json& j) {
    require_keys_subset(j, {"dims", "x_range", "y_range", "f_range", "d"}, "grid");
    GridSpec g;
    auto dims = get_required<std::vector<int>>(j, "dims", "grid");
    if (dims.size() != 5) throw InputError("grid dims must be [nx, ny, nf, ku, kv]");
    g.nx = dims[0], g.ny = dims[1], g.nf = dims[2], g.ku = dims[3], g.kv = dims[4];
    auto range = [&](const char* key, double& lo, double& hi) {
        if (!j.contains(key)) return;
        auto v = j.at(key).get<std::vector<double>>();
        if (v.size() != 2) throw InputError(std::string("grid.") + key + " must have 2 entries");
        lo = v[0], hi = v[1];
    };
    range("x_range", g.x0, g.x1);
    range("y_range", g.y0, g.y1);
    range("f_range", g.f0, g.f1);
    g.d = get_or(j, "d", g.d);
    g.validate();
    return g;
}

/// Samples for one lattice position, ordered (u, v, c) slowest to fastest.
template <class Scalar>
std::vector<Scalar> sample_position(const BasicBlurField<Scalar>& field, const GridSpec& g, double x, double y,
                                    double f) {
    std::vector<double> coords;
    coords.reserve(static_cast<std::size_t>(g.ku) * g.kv * field.arch.input_dim);
    for (int i = 0; i < g.ku; ++i)
        for (int j = 0; j < g.kv; ++j) {
            coords.insert(coords.end(), {x, y, f, double(i - g.ku / 2), double(j - g.kv / 2)});
            if (field.arch.input_dim == 6) coords.push_back(g.d);
        }
    return field.eval_batch(coords);
}

/// Whole lattice in (x, y, f, u, v, c) order. Intended for small lattices.
inline std::vector<float> sample_grid(const BlurField& field, const GridSpec& g) {
    g.validate();
    std::vector<float> out;
    out.reserve(g.values(field.arch.output_dim));
    for (int ix = 0; ix < g.nx; ++ix)
        for (int iy = 0; iy < g.ny; ++iy)
            for (int jf = 0; jf < g.nf; ++jf) {
                auto v = sample_position(field, g, GridSpec::axis(g.x0, g.x1, g.nx, ix),
                                         GridSpec::axis(g.y0, g.y1, g.ny, iy), GridSpec::axis(g.f0, g.f1, g.nf, jf));
                out.insert(out.end(), v.begin(), v.end());
            }
    return out;
}

inline constexpr char kGridMagic[4] = {'B', 'F', 'G', 'D'};

struct GridExport {
    GridSpec spec;
    int channels = 0;
    std::uint64_t payload_bytes = 0;
    std::vector<float> values;  // filled by read_grid only
};

inline json grid_header(const GridSpec& g, int channels) {
    json h = grid_spec_to_json(g);
    h["channels"] = channels;
    h["index_order"] = {"x", "y", "f", "u", "v", "c"};
    h["dtype"] = "float32_le";
    h["payload_bytes"] = g.payload_bytes(channels);
    return h;
}

/// Size accounting without sampling the field.
inline GridExport export_grid_dry_run(const GridSpec& g, int channels) {
    g.validate();
    return {g, channels, g.payload_bytes(channels), {}};
}

/// Writes "BFGD", u32 header length, JSON header, then the little-endian
/// float payload, streamed one lattice position at a time.
inline GridExport export_grid(const BlurField& field, const GridSpec& g, const std::filesystem::path& path) {
    g.validate();
    const int C = field.arch.output_dim;
    const std::string text = grid_header(g, C).dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write grid " + path.string());
    os.write(kGridMagic, 4);
    blurfield::detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (int ix = 0; ix < g.nx; ++ix)
        for (int iy = 0; iy < g.ny; ++iy)
            for (int jf = 0; jf < g.nf; ++jf) {
                auto v = sample_position(field, g, GridSpec::axis(g.x0, g.x1, g.nx, ix),
                                         GridSpec::axis(g.y0, g.y1, g.ny, iy), GridSpec::axis(g.f0, g.f1, g.nf, jf));
                blurfield::detail::put_floats(os, v);
            }
    if (!os) throw Error("I/O failure writing " + path.string());
    return {g, C, g.payload_bytes(C), {}};
}

inline GridExport read_grid(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open grid " + path.string());
    char magic[4];
    blurfield::detail::get_exact(is, magic, 4, "magic");
    if (std::memcmp(magic, kGridMagic, 4) != 0) throw InputError("not a blur field grid (bad magic)");
    const std::uint32_t len = blurfield::detail::get_u32(is, "header length");
    std::string text(len, '\0');
    blurfield::detail::get_exact(is, text.data(), len, "header");
    json h = json::parse(text);
    GridExport g;
    json spec = {{"dims", h.at("dims")}, {"x_range", h.at("x_range")}, {"y_range", h.at("y_range")},
                 {"f_range", h.at("f_range")}, {"d", h.at("d")}};
    g.spec = grid_spec_from_json(spec);
    g.channels = h.at("channels").get<int>();
    g.payload_bytes = h.at("payload_bytes").get<std::uint64_t>();
    if (g.payload_bytes != g.spec.payload_bytes(g.channels)) throw InputError("grid header payload size is inconsistent");
    g.values.resize(g.spec.values(g.channels));
    blurfield::detail::get_floats(is, g.values, "payload");
    return g;
}

// ---------------------------------------------------------------------------
// Cross-field comparison
// ---------------------------------------------------------------------------

struct GroupStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // sample standard deviation (n - 1); 0 for one member
    double mean_std = 0;
};

struct FieldComparison {
    GroupStats a;
    GroupStats b;
    double rms_difference = 0;  // RMS of mean_a - mean_b over the lattice
    double mean_std = 0;        // average of the two groups' mean std
    double ratio = 0;           // rms_difference / mean_std (0 when both vanish)
};

inline GroupStats group_stats(const std::vector<std::vector<float>>& samples) {
    if (samples.empty()) throw InputError("comparison group is empty");
    const std::size_t n = samples[0].size();
    GroupStats g;
    g.mean.assign(n, 0.0);
    g.stddev.assign(n, 0.0);
    for (const auto& s : samples) {
        if (s.size() != n) throw InputError("comparison samples differ in size");
        for (std::size_t k = 0; k < n; ++k) g.mean[k] += s[k];
    }
    for (double& m : g.mean) m /= samples.size();
    if (samples.size() > 1) {
        for (const auto& s : samples)
            for (std::size_t k = 0; k < n; ++k) g.stddev[k] += (s[k] - g.mean[k]) * (s[k] - g.mean[k]);
        for (double& v : g.stddev) v = std::sqrt(v / (samples.size() - 1));
    }
    for (double v : g.stddev) g.mean_std += v;
    g.mean_std /= std::max<std::size_t>(n, 1);
    return g;
}

inline void check_compatible(const BlurField& ref, const BlurField& f) {
    if (!(ref.norm == f.norm)) throw InputError("fields have incompatible normalization ranges");
    if (ref.arch.input_dim != f.arch.input_dim || ref.arch.output_dim != f.arch.output_dim)
        throw InputError("fields have incompatible input or output dimensions");
}

inline FieldComparison compare_fields(const std::vector<BlurField>& group_a, const std::vector<BlurField>& group_b,
                                      const GridSpec& lattice) {
    if (group_a.empty() || group_b.empty()) throw InputError("compare_fields needs two non-empty groups");
    const BlurField& ref = group_a.front();
    std::vector<std::vector<float>> sa, sb;
    for (const auto& f : group_a) check_compatible(ref, f), sa.push_back(sample_grid(f, lattice));
    for (const auto& f : group_b) check_compatible(ref, f), sb.push_back(sample_grid(f, lattice));
    FieldComparison cmp;
    cmp.a = group_stats(sa);
    cmp.b = group_stats(sb);
    double acc = 0;
    for (std::size_t k = 0; k < cmp.a.mean.size(); ++k) {
        const double d = cmp.a.mean[k] - cmp.b.mean[k];
        acc += d * d;
    }
    cmp.rms_difference = std::sqrt(acc / std::max<std::size_t>(cmp.a.mean.size(), 1));
    cmp.mean_std = 0.5 * (cmp.a.mean_std + cmp.b.mean_std);
    if (cmp.mean_std > 0) cmp.ratio = cmp.rms_difference / cmp.mean_std;
    else cmp.ratio = cmp.rms_difference > 0 ? std::numeric_limits<double>::infinity() : 0.0;
    return cmp;
}

}  // namespace blurfield::evalkit
