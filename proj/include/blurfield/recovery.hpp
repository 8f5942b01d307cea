#pragma once

#include "baseline.hpp"
#include "synthcam.hpp"
#include "trainer.hpp"

namespace blurfield::evalkit {

/// Centred crop or zero pad of every channel onto a ku x kv grid.
inline Kernel2D fit_to_grid(const Kernel2D& k, int ku, int kv) {
    Kernel2D out(ku, kv, k.channels);
    const int du = k.half_u() - ku / 2, dv = k.half_v() - kv / 2;
    for (int c = 0; c < k.channels; ++c)
        for (int j = 0; j < kv; ++j)
            for (int i = 0; i < ku; ++i) {
                const int si = i + du, sj = j + dv;
                if (si >= 0 && si < k.ku && sj >= 0 && sj < k.kv) out.at(i, j, c) = k.at(si, sj, c);
            }
    return out;
}

/// Ground-truth kernels per focus index from a simulation's ground_truth.json.
inline std::vector<Kernel2D> ground_truth_kernels(const json& gt, int ku, int kv) {
    require_keys_subset(gt, {"grid_size", "layout", "settings"}, "ground truth");
    const int g = get_required<int>(gt, "grid_size", "ground truth");
    const Layout layout = parse_layout(get_required<std::string>(gt, "layout", "ground truth"));
    std::vector<Kernel2D> out;
    for (const auto& s : gt.at("settings")) {
        synthcam::FocusSetting fs{get_required<double>(s, "focus_diopter", "setting"),
                                  get_required<double>(s, "radius_px", "setting"),
                                  get_required<int>(s, "side_sign", "setting")};
        out.push_back(fit_to_grid(synthcam::ground_truth_kernel(fs, g, layout), ku, kv));
    }
    return out;
}

/// RMSE between channel 0 at (u, v) and channel 1 at (-u, v), relative to
/// the largest sample of either channel.
inline double mirror_rmse_relative(const Kernel2D& k) {
    if (k.channels != 2) throw InputError("mirror consistency needs a two-channel kernel");
    double acc = 0, peak = 0;
    for (int j = 0; j < k.kv; ++j)
        for (int i = 0; i < k.ku; ++i) {
            const double d = double(k.at(i, j, 0)) - k.at(k.ku - 1 - i, j, 1);
            acc += d * d;
            peak = std::max({peak, double(k.at(i, j, 0)), double(k.at(i, j, 1))});
        }
    if (!(peak > 0)) throw NumericError("kernel has no mass");
    return std::sqrt(acc / (static_cast<double>(k.ku) * k.kv)) / peak;
}

struct BaselineStackOptions {
    int ku = 25, kv = 25;
    int cx = -1, cy = -1;     // patch centre; -1: image centre
    int patch_factor = 2;     // sharp patch = patch_factor * k + 1 per dimension
    BaselineOptions solver;
};

/// Baseline kernels for every focus index in the dataset. Training foci are
/// fitted directly (mean over patterns); the other foci interpolate linearly
/// in diopters between the nearest fitted foci.
inline std::map<int, Kernel2D> baseline_stack(const trainer::Dataset& ds, const BaselineStackOptions& opt) {
    const int pu = opt.patch_factor * opt.ku + 1, pv = opt.patch_factor * opt.kv + 1;
    const int vu = pu - opt.ku + 1, vv = pv - opt.kv + 1;
    const int cx = opt.cx >= 0 ? opt.cx : ds.sensor.width / 2, cy = opt.cy >= 0 ? opt.cy : ds.sensor.height / 2;
    if (cx - pu / 2 < 0 || cy - pv / 2 < 0 || cx + pu / 2 >= ds.sensor.width || cy + pv / 2 >= ds.sensor.height)
        throw InputError("baseline patch extends outside the image");

    std::map<int, std::vector<std::size_t>> by_focus;
    std::map<int, double> diopter;
    for (std::size_t e : ds.train) {
        by_focus[ds.entries[e].focus_index].push_back(e);
        diopter[ds.entries[e].focus_index] = ds.entries[e].focus_diopter;
    }
    if (by_focus.empty()) throw InputError("baseline needs at least one training focus");
    std::vector<int> foci;
    for (const auto& kv : by_focus) foci.push_back(kv.first);

    std::vector<Kernel2D> fitted(foci.size());
    parallel_for(foci.size(), [&](std::size_t q) {
        const auto& entries = by_focus.at(foci[q]);
        Kernel2D mean(opt.ku, opt.kv, ds.sensor.channels());
        for (std::size_t e : entries) {
            const auto& en = ds.entries[e];
            Image sharp = en.sharp.crop(cx - pu / 2, cy - pv / 2, pu, pv);
            Image blurry = en.blurry.crop(cx - vu / 2, cy - vv / 2, vu, vv);
            Image mask(vu, vv, ds.sensor.channels());
            for (int c = 0; c < mask.channels(); ++c)
                for (int y = 0; y < vv; ++y)
                    for (int x = 0; x < vu; ++x) mask.at(x, y, c) = ds.masks[c].at(cx - vu / 2 + x, cy - vv / 2 + y);
            auto r = baseline_ls_kernel(sharp, blurry, opt.ku, opt.kv, opt.solver, &mask);
            for (std::size_t s = 0; s < mean.samples.size(); ++s)
                mean.samples[s] += static_cast<float>(r.kernel.samples[s] / double(entries.size()));
        }
        fitted[q] = std::move(mean);
    });

    std::map<int, Kernel2D> out;
    for (std::size_t q = 0; q < foci.size(); ++q) out[foci[q]] = fitted[q];
    std::set<int> all;
    std::map<int, double> all_diopter;
    for (const auto& en : ds.entries) all.insert(en.focus_index), all_diopter[en.focus_index] = en.focus_diopter;
    for (int f : all) {
        if (out.count(f)) continue;
        const double d = all_diopter[f];
        int lo = -1, hi = -1;
        for (int t : foci) {
            if (diopter[t] <= d && (lo < 0 || diopter[t] > diopter[lo])) lo = t;
            if (diopter[t] >= d && (hi < 0 || diopter[t] < diopter[hi])) hi = t;
        }
        if (lo < 0) out[f] = out[hi];
        else if (hi < 0 || hi == lo) out[f] = out[lo];
        else out[f] = interpolate_kernels(out[lo], out[hi], (d - diopter[lo]) / (diopter[hi] - diopter[lo]));
    }
    return out;
}

struct KernelScore {
    int focus_index = 0;
    double focus_diopter = 0;
    bool train = false;
    double field_rmse = 0;
    double baseline_rmse = std::numeric_limits<double>::quiet_NaN();
};

/// Inset RMSE of field kernels (queried at the patch centre) and, when given,
/// baseline kernels against ground truth for every focus in the dataset.
inline std::vector<KernelScore> score_kernels(const BlurField& field, const trainer::Dataset& ds,
                                              const std::vector<Kernel2D>& ground_truth, int cx, int cy,
                                              const std::map<int, Kernel2D>* baseline = nullptr) {
    const int ku = 2 * static_cast<int>(std::lround(field.norm.u_max)) + 1;
    const int kv = 2 * static_cast<int>(std::lround(field.norm.v_max)) + 1;
    std::map<int, std::pair<double, double>> foci;  // focus -> (diopter, distance diopter)
    std::set<int> train;
    for (const auto& en : ds.entries) foci[en.focus_index] = {en.focus_diopter, en.distance_diopter};
    for (std::size_t e : ds.train) train.insert(ds.entries[e].focus_index);
    std::vector<KernelScore> out;
    for (const auto& [f, dd] : foci) {
        const Kernel2D& gt = ground_truth.at(f);
        if (gt.ku != ku || gt.kv != kv) throw InputError("ground-truth kernels do not match the field's kernel grid");
        KernelScore s;
        s.focus_index = f, s.focus_diopter = dd.first, s.train = train.count(f) > 0;
        s.field_rmse = inset_rmse(trainer::query_kernel(field, cx, cy, dd.first, dd.second, ku, kv), gt);
        if (baseline) s.baseline_rmse = inset_rmse(baseline->at(f), gt);
        out.push_back(s);
    }
    return out;
}

}  // namespace blurfield::evalkit
