#pragma once

#include "image.hpp"

namespace blurfield::radcal {

/// Black/white captures at one focus/distance setting and the display
/// albedos that produced them.
struct RadiometricPair {
    Image I_min;
    Image I_max;
    double A_min = 0.0;
    double A_max = 1.0;

    void validate() const {
        if (!I_min.same_shape(I_max)) throw InputError("radiometric pair: image dimensions differ");
        if (!(A_min >= 0 && A_max <= 1 && A_min < A_max)) throw InputError("radiometric pair: need 0 <= A_min < A_max <= 1");
    }
};

/// Blur-free sensor image as the affine combination of the pair,
/// weighted by the albedo normalised over [A_min, A_max].
inline Image compensate(const Image& albedo_warped, const RadiometricPair& pair) {
    pair.validate();
    if (albedo_warped.width() != pair.I_min.width() || albedo_warped.height() != pair.I_min.height())
        throw InputError("compensate: albedo and capture dimensions differ");
    const int ac = albedo_warped.channels(), pc = pair.I_min.channels();
    if (ac != 1 && ac != pc) throw InputError("compensate: albedo channel count must be 1 or match the captures");
    // endpoints at float precision
    const double a_lo = static_cast<float>(pair.A_min), a_hi = static_cast<float>(pair.A_max);
    const double span = a_hi - a_lo, tol = 1e-6;
    Image out(pair.I_min.width(), pair.I_min.height(), pc);
    const std::size_t plane = static_cast<std::size_t>(out.width()) * out.height();
    for (int c = 0; c < pc; ++c) {
        const float* a = albedo_warped.plane(ac == 1 ? 0 : c).data();
        const float* lo = pair.I_min.plane(c).data();
        const float* hi = pair.I_max.plane(c).data();
        float* o = out.plane(c).data();
        for (std::size_t k = 0; k < plane; ++k) {
            double v = a[k];
            if (!(v >= a_lo - tol && v <= a_hi + tol))
                throw InputError("compensate: albedo " + std::to_string(v) + " outside [A_min, A_max]");
            double t = std::clamp((v - a_lo) / span, 0.0, 1.0);
            o[k] = static_cast<float>((1.0 - t) * lo[k] + t * hi[k]);
        }
    }
    return out;
}

struct PairReport {
    std::size_t pixels = 0;
    std::size_t violations = 0;
    double violation_fraction = 0;
    double max_gradient = 0;  // largest forward-difference magnitude of I_max
    Image violation_mask;
};

/// Flags pixels with I_max < I_min beyond `tolerance` and reports the
/// spatial smoothness of I_max. Never throws on content.
inline PairReport validate_pair(const RadiometricPair& pair, double tolerance = 1e-3) {
    if (!pair.I_min.same_shape(pair.I_max)) throw InputError("radiometric pair: image dimensions differ");
    PairReport r;
    const Image& lo = pair.I_min;
    const Image& hi = pair.I_max;
    r.violation_mask = Image(lo.width(), lo.height(), lo.channels());
    r.pixels = lo.size();
    for (std::size_t k = 0; k < lo.size(); ++k)
        if (hi.data()[k] < lo.data()[k] - tolerance) {
            r.violation_mask.data()[k] = 1.0f;
            ++r.violations;
        }
    r.violation_fraction = r.pixels ? double(r.violations) / r.pixels : 0.0;
    for (int c = 0; c < hi.channels(); ++c)
        for (int y = 0; y + 1 < hi.height(); ++y)
            for (int x = 0; x + 1 < hi.width(); ++x) {
                double gx = hi.at(x + 1, y, c) - hi.at(x, y, c);
                double gy = hi.at(x, y + 1, c) - hi.at(x, y, c);
                r.max_gradient = std::max(r.max_gradient, std::hypot(gx, gy));
            }
    return r;
}

}  // namespace blurfield::radcal
