#pragma once

#include <span>

#include "image.hpp"

namespace blurfield {

/// Valid-region 2D convolution of one plane: out(x, y) = sum_u K(u) * in(c - u)
/// where c is the input pixel under the kernel centre. Output is
/// (w - ku + 1) x (h - kv + 1). Acc selects the accumulator precision.
template <class Acc = float>
void convolve_valid(std::span<const float> in, int w, int h, std::span<const float> kernel, int ku,
                    int kv, std::span<float> out) {
    const int ow = w - ku + 1, oh = h - kv + 1;
    if (ow <= 0 || oh <= 0) throw InputError("image smaller than kernel in valid convolution");
    std::vector<Acc> row(ow);
    for (int y = 0; y < oh; ++y) {
        std::fill(row.begin(), row.end(), Acc(0));
        for (int j = 0; j < kv; ++j) {
            const float* src_row = in.data() + static_cast<std::size_t>(y + kv - 1 - j) * w;
            for (int i = 0; i < ku; ++i) {
                const Acc k = kernel[static_cast<std::size_t>(j) * ku + i];
                if (k == Acc(0)) continue;
                const float* src = src_row + (ku - 1 - i);
                for (int x = 0; x < ow; ++x) row[x] += k * static_cast<Acc>(src[x]);
            }
        }
        float* dst = out.data() + static_cast<std::size_t>(y) * ow;
        for (int x = 0; x < ow; ++x) dst[x] = static_cast<float>(row[x]);
    }
}

/// Per-channel valid convolution; kernel channel c applies to image channel c
/// (a single-channel kernel applies to every channel).
template <class Acc = float>
Image convolve_valid(const Image& img, const Kernel2D& k) {
    if (k.channels != 1 && k.channels != img.channels())
        throw InputError("kernel/image channel mismatch");
    Image out(img.width() - k.ku + 1, img.height() - k.kv + 1, img.channels());
    for (int c = 0; c < img.channels(); ++c)
        convolve_valid<Acc>(img.plane(c), img.width(), img.height(),
                            k.plane(k.channels == 1 ? 0 : c), k.ku, k.kv, out.plane(c));
    return out;
}

/// Same-size convolution with zero padding outside the image.
template <class Acc = float>
Image convolve_same(const Image& img, const Kernel2D& k) {
    Image padded = img.crop(-k.half_u(), -k.half_v(), img.width() + k.ku - 1,
                            img.height() + k.kv - 1, 0.0f);
    return convolve_valid<Acc>(padded, k);
}

}  // namespace blurfield
