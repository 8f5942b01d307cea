#pragma once

#include <bit>
#include <cstring>
#include <fstream>

#include "adam.hpp"
#include "field.hpp"

namespace blurfield {

inline constexpr char kCheckpointMagic[4] = {'B', 'F', 'L', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline json architecture_to_json(const FieldArchitecture& a) {
    return {{"input_dim", a.input_dim},
            {"hidden_layers", a.hidden_layers},
            {"hidden_width", a.hidden_width},
            {"output_dim", a.output_dim},
            {"output_gain", a.output_gain},
            {"hidden_activation", "relu"},
            {"output_activation", "sigmoid"},
            {"layer_count_semantics", "hidden_layers"}};
}

/// Accepts either layer-count convention: "hidden_layers" counts hidden
/// activations, "weight_matrices" counts linear layers.
inline FieldArchitecture architecture_from_json(const json& j) {
    require_keys_subset(j,
                        {"input_dim", "hidden_layers", "hidden_width", "output_dim", "output_gain",
                         "hidden_activation", "output_activation", "layer_count_semantics"},
                        "architecture");
    FieldArchitecture a;
    a.input_dim = get_required<int>(j, "input_dim", "architecture");
    a.hidden_layers = get_required<int>(j, "hidden_layers", "architecture");
    a.hidden_width = get_required<int>(j, "hidden_width", "architecture");
    a.output_dim = get_required<int>(j, "output_dim", "architecture");
    a.output_gain = get_or<double>(j, "output_gain", 1.0);
    const std::string sem = get_or<std::string>(j, "layer_count_semantics", "hidden_layers");
    if (sem == "weight_matrices") a.hidden_layers -= 1;
    else if (sem != "hidden_layers") throw InputError("unknown layer_count_semantics '" + sem + "'");
    if (get_or<std::string>(j, "hidden_activation", "relu") != "relu" ||
        get_or<std::string>(j, "output_activation", "sigmoid") != "sigmoid")
        throw InputError("unsupported activation in checkpoint");
    a.validate();
    return a;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_floats(std::ostream& os, std::span<const float> v) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    } else {
        for (float f : v) put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
}

inline void get_exact(std::istream& is, void* dst, std::size_t n, const std::string& what) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw InputError("checkpoint truncated while reading " + what);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    get_exact(is, b, 4, what);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const std::string& what) {
    std::uint64_t lo = get_u32(is, what);
    return lo | (static_cast<std::uint64_t>(get_u32(is, what)) << 32);
}

inline void get_floats(std::istream& is, std::span<float> v, const std::string& what) {
    get_exact(is, v.data(), v.size() * 4, what);
    if constexpr (std::endian::native != std::endian::little)
        for (float& f : v) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
}

}  // namespace detail

struct Checkpoint {
    BlurField field;
    std::optional<AdamState> adam;
    json metadata = json::object();  // training provenance (config, seed, steps)
};

inline void save_checkpoint(const std::filesystem::path& path, const BlurField& field,
                            const AdamState* adam = nullptr, const json& metadata = json::object()) {
    json header = {{"architecture", architecture_to_json(field.arch)},
                   {"normalization", normalization_to_json(field.norm)},
                   {"sensor", sensor_to_json(field.sensor)},
                   {"parameter_count", field.parameter_count()},
                   {"parameter_dtype", "float32_le"},
                   {"weight_decay_mode", "decoupled"},
                   {"metadata", metadata}};
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::put_floats(os, field.params);
    detail::put_u32(os, adam ? 1u : 0u);
    if (adam) {
        if (adam->m.size() != field.params.size() || adam->v.size() != field.params.size())
            throw InputError("adam state does not match the field");
        detail::put_u64(os, adam->step);
        detail::put_floats(os, adam->m);
        detail::put_floats(os, adam->v);
    }
    if (!os) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path.string());
    char magic[4];
    detail::get_exact(is, magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw InputError("not a blur field checkpoint (bad magic)");
    const std::uint32_t version = detail::get_u32(is, "version");
    if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t len = detail::get_u32(is, "header length");
    std::string text(len, '\0');
    detail::get_exact(is, text.data(), len, "header");
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("corrupt checkpoint header: ") + e.what());
    }
    if (!header.is_object()) throw InputError("corrupt checkpoint header");
    for (const char* key : {"architecture", "normalization", "sensor"})
        if (!header.contains(key)) throw InputError(std::string("checkpoint header lacks '") + key + "'");
    Checkpoint ck;
    FieldArchitecture arch = architecture_from_json(header.at("architecture"));
    ck.field = BlurField(arch, normalization_from_json(header.at("normalization")),
                         sensor_from_json(header.at("sensor")));
    if (header.value("parameter_count", std::size_t{0}) != arch.parameter_count())
        throw InputError("checkpoint parameter_count disagrees with its architecture");
    if (arch.output_dim != ck.field.sensor.channels())
        throw InputError("checkpoint output_dim does not match the sensor channel count");
    detail::get_floats(is, ck.field.params, "parameters");
    const std::uint32_t has_adam = detail::get_u32(is, "adam flag");
    if (has_adam > 1) throw InputError("corrupt adam presence flag");
    if (has_adam) {
        AdamState st(arch.parameter_count());
        st.step = detail::get_u64(is, "adam step");
        detail::get_floats(is, st.m, "adam first moment");
        detail::get_floats(is, st.v, "adam second moment");
        ck.adam = std::move(st);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw InputError("checkpoint has trailing bytes");
    if (header.contains("metadata")) ck.metadata = header["metadata"];
    return ck;
}

}  // namespace blurfield
