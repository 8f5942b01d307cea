#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "image.hpp"

namespace blurfield {

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

inline float float_from_bytes(const unsigned char* p, bool little_endian) {
    std::uint32_t bits;
    std::memcpy(&bits, p, 4);
    bool host_little = std::endian::native == std::endian::little;
    if (host_little != little_endian) bits = byteswap32(bits);
    return std::bit_cast<float>(bits);
}

inline void float_to_le_bytes(float v, unsigned char* p) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native != std::endian::little) bits = byteswap32(bits);
    std::memcpy(p, &bits, 4);
}

}  // namespace detail

/// Reads a portable float map ("Pf" grey or "PF" RGB). Rows are flipped to
/// top-down order and RGB is de-interleaved into planes.
inline Image read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open PFM file " + path.string());
    std::string magic;
    in >> magic;
    int channels = 0;
    if (magic == "Pf")
        channels = 1;
    else if (magic == "PF")
        channels = 3;
    else
        throw InputError("bad PFM magic in " + path.string());
    long long w = 0, h = 0;
    double scale = 0;
    if (!(in >> w >> h >> scale)) throw InputError("malformed PFM header in " + path.string());
    if (w <= 0 || h <= 0 || w > (1 << 20) || h > (1 << 20) || scale == 0.0 ||
        !std::isfinite(scale))
        throw InputError("invalid PFM header values in " + path.string());
    in.get();  // single whitespace byte terminating the header
    const bool little = scale < 0;
    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<unsigned char> raw(count * 4);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw InputError("truncated PFM payload in " + path.string());

    Image img(static_cast<int>(w), static_cast<int>(h), channels);
    std::size_t k = 0;
    for (long long row = 0; row < h; ++row) {
        int y = static_cast<int>(h - 1 - row);  // stored bottom-up
        for (long long x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c, ++k) {
                float v = detail::float_from_bytes(&raw[k * 4], little);
                if (!std::isfinite(v)) throw InputError("non-finite PFM sample in " + path.string());
                img.at(static_cast<int>(x), y, c) = v;
            }
    }
    return img;
}

/// Writes a little-endian PFM (scale -1.0). Only 1- and 3-channel images fit the format.
inline void write_pfm(const Image& image, const std::filesystem::path& path) {
    const int channels = image.channels();
    if (channels != 1 && channels != 3)
        throw InputError("PFM supports 1 or 3 channels, got " + std::to_string(channels));
    std::ostringstream header;
    header << (channels == 1 ? "Pf" : "PF") << '\n'
           << image.width() << ' ' << image.height() << '\n'
           << "-1.0\n";
    std::vector<unsigned char> raw(image.size() * 4);
    std::size_t k = 0;
    for (int row = 0; row < image.height(); ++row) {
        int y = image.height() - 1 - row;
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < channels; ++c, ++k)
                detail::float_to_le_bytes(image.at(x, y, c), &raw[k * 4]);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write PFM file " + path.string());
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw Error("I/O failure writing " + path.string());
}

/// Stores a C-channel image as a single-channel PFM with the planes stacked
/// vertically (height * C rows). One-channel images are written unchanged.
inline void write_pfm_planar(const Image& image, const std::filesystem::path& path) {
    Image stacked(image.width(), image.height() * image.channels(), 1, image.data());
    write_pfm(stacked, path);
}

/// Inverse of write_pfm_planar. A file of the plain sensor height is accepted
/// as a single plane.
inline Image read_pfm_planar(const std::filesystem::path& path, int height, int channels) {
    Image img = read_pfm(path);
    if (img.channels() != 1) throw InputError("expected single-channel PFM in " + path.string());
    if (img.height() == height) return img;
    if (img.height() != height * channels)
        throw InputError("PFM " + path.string() + " has " + std::to_string(img.height()) +
                         " rows; expected " + std::to_string(height) + " or " +
                         std::to_string(height * channels));
    return Image(img.width(), height, channels, std::move(img.data()));
}

}  // namespace blurfield
