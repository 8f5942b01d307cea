#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include <blurfield/blurfield.hpp>

namespace testutil {

/// Fresh directory under the system temp dir, named after the running test.
inline std::filesystem::path temp_dir(const std::string& tag = "") {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = std::string("blurfield_") + info->test_suite_name() + "_" + info->name() + tag;
    for (char& c : name)
        if (c == '/') c = '_';
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline blurfield::Image random_image(int w, int h, int c, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> U(lo, hi);
    blurfield::Image img(w, h, c);
    for (float& v : img.data()) v = U(rng);
    return img;
}

inline blurfield::Kernel2D random_kernel(int ku, int kv, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> U(0.0f, 1.0f);
    blurfield::Kernel2D k(ku, kv, c);
    for (float& v : k.samples) v = U(rng);
    return k;
}

inline double max_abs_diff(const blurfield::Image& a, const blurfield::Image& b) {
    double m = 0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(double(a.data()[k]) - b.data()[k]));
    return m;
}

/// Captures warnings emitted through the library log for the scope's lifetime.
struct LogCapture {
    std::vector<std::string> warnings;
    LogCapture() {
        blurfield::log::set_handler([this](blurfield::log::Level l, const std::string& m) {
            if (l == blurfield::log::Level::warn) warnings.push_back(m);
        });
    }
    ~LogCapture() { blurfield::log::set_handler(nullptr); }
};

}  // namespace testutil
