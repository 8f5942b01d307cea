// blurfield: command-line front end for simulation, calibration, training,
// evaluation and rendering.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <numeric>

#include <blurfield/blurfield.hpp>

namespace fs = std::filesystem;
using namespace blurfield;

namespace {

/// Bad invocation or configuration; exits with status 2.
class UsageError : public InputError {
public:
    using InputError::InputError;
};

template <class Fn>
auto as_usage(Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const InputError& e) {
        throw UsageError(e.what());
    } catch (const json::exception& e) {
        throw UsageError(e.what());
    }
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    return as_usage([&] { return read_json_file(path); });
}

std::string abs_str(const fs::path& p) { return p.empty() ? std::string() : fs::absolute(p).lexically_normal().string(); }

void write_snapshot(const fs::path& dir, const std::string& command, json body) {
    fs::create_directories(dir);
    body["command"] = command;
    body["threads"] = thread_count();
    write_json_file(body, dir / "resolved_config.json");
}

log::Level parse_level(const std::string& s) {
    if (s == "debug") return log::Level::debug;
    if (s == "info") return log::Level::info;
    if (s == "warn") return log::Level::warn;
    if (s == "error") return log::Level::error;
    if (s == "off") return log::Level::off;
    throw UsageError("unknown log level '" + s + "'");
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateConfig {
    SensorDescriptor sensor{512, 512, Layout::dp_g_lr, 0, 1};
    synthcam::ThinLensConfig lens;
    synthcam::NoiseConfig noise;
    std::vector<int> bands{0, 1, 2, 3, 4};
    std::uint64_t seed = 0;
};

SimulateConfig simulate_config(const json& j) {
    return as_usage([&] {
        require_keys_subset(j, {"sensor", "lens", "noise", "bands", "seed"}, "simulate config");
        SimulateConfig c;
        if (j.contains("sensor")) {
            const json& s = j["sensor"];
            require_keys_subset(s, {"width", "height", "layout"}, "sensor");
            c.sensor.width = get_or(s, "width", c.sensor.width);
            c.sensor.height = get_or(s, "height", c.sensor.height);
            c.sensor.layout = parse_layout(get_or(s, "layout", to_string(c.sensor.layout)));
        }
        if (j.contains("lens")) {
            const json& l = j["lens"];
            require_keys_subset(l, {"focal_length", "target_distance", "n_focus", "r_min", "r_max", "sweep", "diopter_span"},
                                "lens");
            auto& L = c.lens;
            L.focal_length = get_or(l, "focal_length", L.focal_length);
            L.target_distance = get_or(l, "target_distance", L.target_distance);
            L.n_focus = get_or(l, "n_focus", L.n_focus);
            L.r_min = get_or(l, "r_min", L.r_min);
            L.r_max = get_or(l, "r_max", L.r_max);
            L.diopter_span = get_or(l, "diopter_span", L.diopter_span);
            const std::string sweep = get_or<std::string>(l, "sweep", "one_sided");
            if (sweep == "one_sided") L.sweep = synthcam::Sweep::one_sided;
            else if (sweep == "two_sided") L.sweep = synthcam::Sweep::two_sided;
            else throw InputError("lens.sweep must be 'one_sided' or 'two_sided'");
        }
        if (j.contains("noise")) {
            const json& n = j["noise"];
            require_keys_subset(n, {"enabled", "read_sigma", "full_scale_electrons", "bit_depth"}, "noise");
            c.noise.enabled = get_or(n, "enabled", c.noise.enabled);
            c.noise.read_sigma = get_or(n, "read_sigma", c.noise.read_sigma);
            c.noise.full_scale_electrons = get_or(n, "full_scale_electrons", c.noise.full_scale_electrons);
            c.noise.bit_depth = get_or(n, "bit_depth", c.noise.bit_depth);
        }
        c.bands = get_or(j, "bands", c.bands);
        c.seed = get_or(j, "seed", c.seed);
        c.sensor.validate();
        c.lens.validate();
        c.noise.validate();
        if (c.bands.empty()) throw InputError("bands must not be empty");
        for (int b : c.bands)
            if (b < 0 || b > 4) throw InputError("bands entries must lie in [0, 4]");
        return c;
    });
}

json simulate_config_json(const SimulateConfig& c) {
    return {{"sensor", {{"width", c.sensor.width}, {"height", c.sensor.height}, {"layout", to_string(c.sensor.layout)}}},
            {"lens",
             {{"focal_length", c.lens.focal_length},
              {"target_distance", c.lens.target_distance},
              {"n_focus", c.lens.n_focus},
              {"r_min", c.lens.r_min},
              {"r_max", c.lens.r_max},
              {"sweep", c.lens.sweep == synthcam::Sweep::one_sided ? "one_sided" : "two_sided"},
              {"diopter_span", c.lens.diopter_span}}},
            {"noise",
             {{"enabled", c.noise.enabled},
              {"read_sigma", c.noise.read_sigma},
              {"full_scale_electrons", c.noise.full_scale_electrons},
              {"bit_depth", c.noise.bit_depth}}},
            {"bands", c.bands},
            {"seed", c.seed}};
}

void run_simulate(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed) {
    SimulateConfig c = simulate_config(load_config(config_path));
    if (seed) c.seed = *seed;
    c.noise.seed = derive_seed(c.seed, 200);
    const int g = synthcam::schedule_grid_size(c.lens);
    const int size = std::max(c.sensor.width, c.sensor.height) + g - 1;
    std::vector<Image> patterns(c.bands.size());
    parallel_for(c.bands.size(), [&](std::size_t t) {
        patterns[t] = synthcam::noise_pattern(c.bands[t], size, derive_seed(c.seed, 100, t));
    });
    auto res = synthcam::simulate_stack(patterns, c.lens, c.noise, c.sensor, out);

    // Albedos and the exact registration for preprocess.
    const double x0 = (size - c.sensor.width) / 2, y0 = (size - c.sensor.height) / 2;
    geomcal::RegistrationChain chain;
    chain.H.h = {1, 0, -x0, 0, 1, -y0, 0, 0, 1};
    chain.D.cx = (c.sensor.width - 1) / 2.0, chain.D.cy = (c.sensor.height - 1) / 2.0;
    chain.D.fn = std::hypot(c.sensor.width, c.sensor.height) / 2;
    for (int i = 0; i < c.lens.n_focus; ++i) chain.scales[{i, 0}] = 1.0;
    write_json_file(preprocess::chains_to_json({{0, chain}}), out / "registration_exact.json");
    json albedos = json::array();
    for (std::size_t t = 0; t < patterns.size(); ++t) {
        const std::string name = "albedo_t" + std::to_string(t) + ".pfm";
        write_pfm(patterns[t], out / name);
        albedos.push_back({{"pattern_id", t}, {"albedo", name}});
    }
    write_json_file({{"patterns", albedos}, {"chain", "registration_exact.json"}}, out / "preprocess_exact.json");

    write_snapshot(out, "simulate", {{"config", simulate_config_json(c)}, {"out", abs_str(out)}});
    log::info("simulated " + std::to_string(res.manifest.frames.size()) + " frames into " + out.string());
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

void run_preprocess(const std::string& manifest_path, const std::string& config_path, const fs::path& out) {
    auto m = as_usage([&] { return load_manifest(manifest_path); });
    const fs::path base = config_path.empty() ? fs::path(".") : fs::path(config_path).parent_path();
    auto cfg = as_usage([&] { return preprocess::config_from_json(load_config(config_path), base); });
    auto res = preprocess::run(m, cfg, out);
    json reports = json::array();
    for (const auto& r : res.reports)
        reports.push_back({{"distance_index", r.distance_index},
                           {"in_focus_index", r.in_focus_index},
                           {"rms_residual_px", r.rms_residual_px}});
    write_json_file({{"calibration", reports}}, out / "calibration_report.json");
    json cj = preprocess::config_to_json(cfg);
    for (auto& p : cj["patterns"]) p["albedo"] = abs_str(p["albedo"].get<std::string>());
    if (cj.contains("chain")) cj["chain"] = abs_str(cj["chain"].get<std::string>());
    write_snapshot(out, "preprocess", {{"manifest", abs_str(manifest_path)}, {"config", cj}, {"out", abs_str(out)}});
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string manifest, config;
    fs::path out;
    std::optional<std::uint64_t> seed, iterations;
};

void run_train(const TrainArgs& a) {
    auto cfg = as_usage([&] { return trainer::config_from_json(load_config(a.config)); });
    if (a.seed) cfg.seed = *a.seed;
    if (a.iterations) cfg.iterations = *a.iterations;
    as_usage([&] { cfg.validate(); return 0; });
    auto m = as_usage([&] { return load_manifest(a.manifest); });
    auto ds = trainer::load_dataset(m, cfg.split);
    fs::create_directories(a.out);
    const json cfg_json = trainer::config_to_json(cfg);
    auto metadata = [&](std::uint64_t steps) {
        return json{{"train_config", cfg_json}, {"steps", steps}, {"manifest", abs_str(a.manifest)}};
    };
    write_snapshot(a.out, "train", {{"manifest", abs_str(a.manifest)}, {"config", cfg_json}, {"out", abs_str(a.out)}});

    std::ofstream log_csv(a.out / "train_log.csv", std::ios::trunc);
    if (!log_csv) throw Error("cannot write " + (a.out / "train_log.csv").string());
    log_csv << "step,loss,lr,wall_ms\n";
    trainer::TrainCallbacks cb;
    cb.on_log = [&](const trainer::LogRow& r) {
        log_csv << r.step << ',' << fmt(r.loss) << ',' << fmt(r.lr) << ',' << fmt(r.wall_ms) << '\n';
        log_csv.flush();
        log::info("step " + std::to_string(r.step) + " loss " + fmt(r.loss));
    };
    cb.on_checkpoint = [&](std::uint64_t step, const BlurField& f, const AdamState& st) {
        save_checkpoint(a.out / "checkpoint_latest.bfld", f, &st, metadata(step));
    };
    auto res = trainer::train(ds, cfg, cb);
    save_checkpoint(a.out / "checkpoint.bfld", res.field, &res.adam, metadata(cfg.iterations));
    log::info("wrote " + (a.out / "checkpoint.bfld").string());
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

trainer::TrainConfig config_for_checkpoint(const Checkpoint& ck, const std::string& override_path) {
    if (!override_path.empty()) return as_usage([&] { return trainer::config_from_json(load_config(override_path)); });
    if (ck.metadata.contains("train_config"))
        return as_usage([&] { return trainer::config_from_json(ck.metadata["train_config"]); });
    trainer::TrainConfig c;
    c.ku = 2 * static_cast<int>(std::lround(ck.field.norm.u_max)) + 1;
    c.kv = 2 * static_cast<int>(std::lround(ck.field.norm.v_max)) + 1;
    c.arch = ck.field.arch;
    return c;
}

std::vector<std::size_t> select_split(const trainer::Dataset& ds, const std::string& split) {
    if (split == "train") return ds.train;
    if (split == "validation") return ds.validation;
    std::vector<std::size_t> all(ds.entries.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
}

struct EvalArgs {
    std::string checkpoint, manifest, config, ground_truth, split = "validation";
    fs::path out;
    bool baseline = false;
    int baseline_iterations = 2000;
};

void write_slices(std::ostream& os, int focus, const std::string& source, const Kernel2D& k) {
    for (int c = 0; c < k.channels; ++c)
        for (int i = 0; i < k.ku; ++i)
            os << focus << ',' << source << ',' << c << ',' << (i - k.ku / 2) << ',' << fmt(k.at(i, k.kv / 2, c)) << '\n';
}

void run_eval(const EvalArgs& a) {
    auto ck = load_checkpoint(a.checkpoint);
    auto cfg = config_for_checkpoint(ck, a.config);
    auto m = as_usage([&] { return load_manifest(a.manifest); });
    if (a.split != "train" && a.split != "validation" && a.split != "all")
        throw UsageError("--split must be train, validation or all");
    if (!(m.sensor == ck.field.sensor)) throw UsageError("manifest sensor differs from the checkpoint's");
    auto ds = trainer::load_dataset(m, cfg.split);
    const auto entries = select_split(ds, a.split);
    fs::create_directories(a.out);
    write_snapshot(a.out, "eval",
                   {{"checkpoint", abs_str(a.checkpoint)},
                    {"manifest", abs_str(a.manifest)},
                    {"train_config", trainer::config_to_json(cfg)},
                    {"split", a.split},
                    {"ground_truth", abs_str(a.ground_truth)},
                    {"baseline", a.baseline},
                    {"baseline_iterations", a.baseline_iterations},
                    {"out", abs_str(a.out)}});

    auto reports = trainer::validate(ck.field, ds, entries, cfg);
    std::ofstream csv(a.out / "frames.csv", std::ios::trunc);
    csv << "entry,pattern,focus_index,distance_index,focus_diopter,psnr,rmse,ssim\n";
    double psnr_sum = 0, psnr_sq = 0;
    for (const auto& r : reports) {
        csv << r.entry << ',' << r.pattern << ',' << r.focus_index << ',' << r.distance_index << ','
            << fmt(ds.entries[r.entry].focus_diopter) << ',' << fmt(r.metrics.psnr) << ',' << fmt(r.metrics.rmse) << ','
            << fmt(r.metrics.ssim) << '\n';
        psnr_sum += r.metrics.psnr, psnr_sq += r.metrics.psnr * r.metrics.psnr;
    }
    const double n = std::max<std::size_t>(reports.size(), 1);
    const double mean = psnr_sum / n;
    json summary = {{"frames", reports.size()},
                    {"split", a.split},
                    {"psnr_mean", mean},
                    {"psnr_std", std::sqrt(std::max(0.0, psnr_sq / n - mean * mean))}};

    if (!a.ground_truth.empty()) {
        auto gt = as_usage([&] { return evalkit::ground_truth_kernels(read_json_file(a.ground_truth), cfg.ku, cfg.kv); });
        const int cx = ds.sensor.width / 2, cy = ds.sensor.height / 2;
        std::map<int, Kernel2D> base;
        if (a.baseline) {
            evalkit::BaselineStackOptions bo;
            bo.ku = cfg.ku, bo.kv = cfg.kv, bo.cx = cx, bo.cy = cy;
            bo.solver.iterations = a.baseline_iterations;
            base = evalkit::baseline_stack(ds, bo);
        }
        auto scores = evalkit::score_kernels(ck.field, ds, gt, cx, cy, a.baseline ? &base : nullptr);
        std::ofstream kc(a.out / "kernels.csv", std::ios::trunc), sl(a.out / "kernel_slices.csv", std::ios::trunc);
        kc << "focus_index,focus_diopter,split,field_inset_rmse,baseline_inset_rmse\n";
        sl << "focus_index,source,channel,u,value\n";
        int wins = 0;
        for (const auto& s : scores) {
            kc << s.focus_index << ',' << fmt(s.focus_diopter) << ',' << (s.train ? "train" : "validation") << ','
               << fmt(s.field_rmse) << ',' << (a.baseline ? fmt(s.baseline_rmse) : "") << '\n';
            if (a.baseline && s.field_rmse < s.baseline_rmse) ++wins;
            const double d = ds.entries.front().distance_diopter;
            write_slices(sl, s.focus_index, "field", trainer::query_kernel(ck.field, cx, cy, s.focus_diopter, d, cfg.ku, cfg.kv));
            write_slices(sl, s.focus_index, "ground_truth", gt.at(s.focus_index));
            if (a.baseline) write_slices(sl, s.focus_index, "baseline", base.at(s.focus_index));
        }
        summary["kernel_foci"] = scores.size();
        if (a.baseline) summary["field_beats_baseline_fraction"] = scores.empty() ? 0.0 : double(wins) / scores.size();
    }
    write_json_file(summary, a.out / "metrics.json");
    std::cout << summary.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

double clamp_coord(double v, double lo, double hi, const char* name) {
    const double c = std::clamp(v, std::min(lo, hi), std::max(lo, hi));
    if (c != v) log::warn(std::string(name) + " = " + fmt(v) + " lies outside the calibrated range; clamped to " + fmt(c));
    return c;
}

/// 8-bit preview of all channels side by side, normalised to the largest
/// sample and encoded with gamma 1/2.2.
void write_preview(const Kernel2D& k, int scale, const fs::path& path) {
    const int gap = 1;
    const int W = (k.ku * k.channels + gap * (k.channels - 1)) * scale, H = k.kv * scale;
    float peak = 0;
    for (float v : k.samples) peak = std::max(peak, v);
    std::vector<unsigned char> px(static_cast<std::size_t>(W) * H, 0);
    for (int c = 0; c < k.channels; ++c)
        for (int j = 0; j < k.kv; ++j)
            for (int i = 0; i < k.ku; ++i) {
                const double t = peak > 0 ? std::clamp(double(k.at(i, j, c)) / peak, 0.0, 1.0) : 0.0;
                const auto b = static_cast<unsigned char>(std::lround(255.0 * std::pow(t, 1.0 / 2.2)));
                const int x0 = (c * (k.ku + gap) + i) * scale, y0 = j * scale;
                for (int y = 0; y < scale; ++y)
                    for (int x = 0; x < scale; ++x) px[static_cast<std::size_t>(y0 + y) * W + x0 + x] = b;
            }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << "P5\n" << W << ' ' << H << "\n255\n";
    os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

struct SampleArgs {
    std::string checkpoint;
    double x = 0, y = 0, f = 0;
    std::optional<double> d;
    int kernel_samples = 0, preview_scale = 8;
    fs::path out;
};

void run_sample(const SampleArgs& a) {
    auto ck = load_checkpoint(a.checkpoint);
    const auto& n = ck.field.norm;
    const double x = clamp_coord(a.x, n.x_min, n.x_max, "x");
    const double y = clamp_coord(a.y, n.y_min, n.y_max, "y");
    const double f = clamp_coord(a.f, n.f_min, n.f_max, "f");
    const double d = clamp_coord(a.d.value_or(n.d_min), n.d_min, n.d_max, "d");
    const int k = a.kernel_samples > 0 ? a.kernel_samples : 2 * static_cast<int>(std::lround(n.u_max)) + 1;
    if (k % 2 == 0) throw UsageError("--kernel-samples must be odd");
    if (a.preview_scale < 1) throw UsageError("--preview-scale must be positive");
    Kernel2D kernel = trainer::query_kernel(ck.field, x, y, f, d, k, k);
    fs::create_directories(a.out);
    json sums = json::array();
    for (int c = 0; c < kernel.channels; ++c) {
        write_pfm(kernel.channel(c).to_image(), a.out / ("kernel_c" + std::to_string(c) + ".pfm"));
        sums.push_back(kernel.sum(c));
    }
    write_preview(kernel, a.preview_scale, a.out / "preview.pgm");
    write_snapshot(a.out, "sample",
                   {{"checkpoint", abs_str(a.checkpoint)},
                    {"requested", {{"x", a.x}, {"y", a.y}, {"f", a.f}, {"d", a.d ? json(*a.d) : json(nullptr)}}},
                    {"queried", {{"x", x}, {"y", y}, {"f", f}, {"d", d}}},
                    {"kernel_samples", k},
                    {"preview_scale", a.preview_scale},
                    {"channel_sums", sums},
                    {"out", abs_str(a.out)}});
}

// ---------------------------------------------------------------------------
// export-grid
// ---------------------------------------------------------------------------

struct GridArgs {
    std::string checkpoint;
    std::vector<int> dims;
    int channels = 0;
    bool dry_run = false;
    fs::path out;
};

void run_export_grid(const GridArgs& a) {
    if (a.dims.size() != 5) throw UsageError("--dims takes nx ny nf ku kv");
    std::optional<Checkpoint> ck;
    if (!a.checkpoint.empty()) ck = load_checkpoint(a.checkpoint);
    if (!ck && !a.dry_run) throw UsageError("export-grid needs --checkpoint unless --dry-run is given");
    const int C = ck ? ck->field.arch.output_dim : a.channels;
    if (C < 1) throw UsageError("--channels is required for a dry run without a checkpoint");
    evalkit::GridSpec g;
    if (ck) g = evalkit::GridSpec::covering(ck->field.norm, a.dims[0], a.dims[1], a.dims[2], a.dims[3], a.dims[4]);
    else g.nx = a.dims[0], g.ny = a.dims[1], g.nf = a.dims[2], g.ku = a.dims[3], g.kv = a.dims[4];
    as_usage([&] { g.validate(); return 0; });
    evalkit::GridExport e = a.dry_run ? evalkit::export_grid_dry_run(g, C)
                                      : evalkit::export_grid(ck->field, g, a.out / "grid.bfgd");
    json report = {{"grid", evalkit::grid_spec_to_json(g)},
                   {"channels", C},
                   {"values", g.values(C)},
                   {"payload_bytes", e.payload_bytes},
                   {"payload_gib", double(e.payload_bytes) / double(1ull << 30)},
                   {"payload_gb", double(e.payload_bytes) / 1e9},
                   {"dry_run", a.dry_run}};
    if (ck) {
        report["parameter_blob_bytes"] = ck->field.parameter_count() * 4;
        report["checkpoint_bytes"] = fs::file_size(a.checkpoint);
    }
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_json_file(report, a.out / "export.json");
        write_snapshot(a.out, "export-grid",
                       {{"checkpoint", abs_str(a.checkpoint)}, {"dims", a.dims}, {"channels", C}, {"dry_run", a.dry_run},
                        {"out", abs_str(a.out)}});
    }
    std::cout << report.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// baseline
// ---------------------------------------------------------------------------

struct BaselineArgs {
    std::string manifest, ground_truth, split = "alternate";
    int kernel_samples = 25, cx = -1, cy = -1, iterations = 2000;
    fs::path out;
};

void run_baseline(const BaselineArgs& a) {
    auto m = as_usage([&] { return load_manifest(a.manifest); });
    if (a.split != "alternate" && a.split != "all") throw UsageError("--split must be alternate or all");
    as_usage([&] { return Kernel2D(a.kernel_samples, a.kernel_samples, 1); });
    auto ds = trainer::load_dataset(m, a.split);
    evalkit::BaselineStackOptions bo;
    bo.ku = bo.kv = a.kernel_samples;
    bo.cx = a.cx, bo.cy = a.cy;
    bo.solver.iterations = a.iterations;
    auto kernels = evalkit::baseline_stack(ds, bo);
    fs::create_directories(a.out);
    write_snapshot(a.out, "baseline",
                   {{"manifest", abs_str(a.manifest)},
                    {"ground_truth", abs_str(a.ground_truth)},
                    {"split", a.split},
                    {"kernel_samples", a.kernel_samples},
                    {"center", {a.cx, a.cy}},
                    {"iterations", a.iterations},
                    {"out", abs_str(a.out)}});
    std::vector<Kernel2D> gt;
    if (!a.ground_truth.empty())
        gt = as_usage([&] { return evalkit::ground_truth_kernels(read_json_file(a.ground_truth), bo.ku, bo.kv); });
    std::ofstream csv(a.out / "baseline.csv", std::ios::trunc);
    csv << "focus_index,inset_rmse\n";
    for (const auto& [f, k] : kernels) {
        write_pfm_planar(k.to_image(), a.out / ("baseline_f" + std::to_string(f) + ".pfm"));
        csv << f << ',' << (gt.empty() ? "" : fmt(evalkit::inset_rmse(k, gt.at(f)))) << '\n';
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> a, b;
    std::vector<int> dims{3, 3, 3};
    fs::path out;
};

void run_compare(const CompareArgs& a) {
    if (a.dims.size() != 3) throw UsageError("--dims takes nx ny nf");
    auto load = [](const std::vector<std::string>& paths) {
        std::vector<BlurField> out;
        for (const auto& p : paths) out.push_back(load_checkpoint(p).field);
        return out;
    };
    auto A = load(a.a), B = load(a.b);
    const auto& n = A.front().norm;
    auto g = evalkit::GridSpec::covering(n, a.dims[0], a.dims[1], a.dims[2], 2 * int(std::lround(n.u_max)) + 1,
                                         2 * int(std::lround(n.v_max)) + 1);
    auto cmp = as_usage([&] { return evalkit::compare_fields(A, B, g); });
    json report = {{"rms_difference", cmp.rms_difference},
                   {"mean_std", cmp.mean_std},
                   {"mean_std_a", cmp.a.mean_std},
                   {"mean_std_b", cmp.b.mean_std},
                   {"ratio", cmp.ratio},
                   {"lattice", evalkit::grid_spec_to_json(g)}};
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_json_file(report, a.out / "compare.json");
        json pa = json::array(), pb = json::array();
        for (const auto& p : a.a) pa.push_back(abs_str(p));
        for (const auto& p : a.b) pb.push_back(abs_str(p));
        write_snapshot(a.out, "compare", {{"a", pa}, {"b", pb}, {"dims", a.dims}, {"out", abs_str(a.out)}});
    }
    std::cout << report.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

struct RenderArgs {
    std::string checkpoint, image, depth, model = "normalized";
    double focus = 0;
    int layers = 8, tile = 64, kernel_samples = 0;
    bool no_renormalize = false;
    fs::path out;
};

void run_render(const RenderArgs& a) {
    auto ck = load_checkpoint(a.checkpoint);
    renderer::RenderOptions opt;
    opt.model = as_usage([&] { return renderer::parse_model(a.model); });
    opt.layers = a.layers, opt.tile_size = a.tile, opt.renormalize = !a.no_renormalize;
    opt.ku = opt.kv = a.kernel_samples;
    Image img = read_pfm(a.image);
    Image depth = read_pfm(a.depth);
    auto r = as_usage([&] { return renderer::render(ck.field, img, depth, a.focus, opt); });
    fs::create_directories(a.out);
    write_pfm(r.image, a.out / "rendered.pfm");
    write_json_file(r.metadata, a.out / "render.json");
    write_snapshot(a.out, "render",
                   {{"checkpoint", abs_str(a.checkpoint)},
                    {"image", abs_str(a.image)},
                    {"depth", abs_str(a.depth)},
                    {"focus_diopter", a.focus},
                    {"layers", a.layers},
                    {"model", a.model},
                    {"tile_size", a.tile},
                    {"kernel_samples", a.kernel_samples},
                    {"renormalize", opt.renormalize},
                    {"out", abs_str(a.out)}});
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Blur field calibration, training and rendering"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);
    int threads = 0;
    std::string level = "info";
    app.add_option("--threads", threads, "Worker threads (default: BLURFIELD_THREADS or 1)")->check(CLI::NonNegativeNumber);
    app.add_option("--log-level", level, "debug, info, warn, error or off");

    std::function<void()> action;

    auto* sim = app.add_subcommand("simulate", "Render a synthetic focal stack");
    std::string sim_config;
    fs::path sim_out;
    std::uint64_t sim_seed = 0;
    sim->add_option("--config", sim_config, "Simulation config JSON")->check(CLI::ExistingFile);
    sim->add_option("--out", sim_out, "Output directory")->required();
    auto* sim_seed_opt = sim->add_option("--seed", sim_seed, "Overrides the config seed");
    sim->callback([&] {
        action = [&] {
            run_simulate(sim_config, sim_out, sim_seed_opt->count() ? std::optional(sim_seed) : std::nullopt);
        };
    });

    auto* pre = app.add_subcommand("preprocess", "Register albedos to captures and build sharp frames");
    std::string pre_manifest, pre_config;
    fs::path pre_out;
    pre->add_option("--manifest", pre_manifest, "Raw capture manifest")->required()->check(CLI::ExistingFile);
    pre->add_option("--config", pre_config, "Preprocess config JSON")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", pre_out, "Output directory")->required();
    pre->callback([&] { action = [&] { run_preprocess(pre_manifest, pre_config, pre_out); }; });

    auto* tr = app.add_subcommand("train", "Fit a blur field to a focal stack");
    TrainArgs ta;
    std::uint64_t tr_seed = 0, tr_iters = 0;
    tr->add_option("--manifest", ta.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
    tr->add_option("--config", ta.config, "Training config JSON")->check(CLI::ExistingFile);
    tr->add_option("--out", ta.out, "Output directory")->required();
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Overrides the config seed");
    auto* tr_iter_opt = tr->add_option("--iterations", tr_iters, "Overrides the config iteration count");
    tr->callback([&] {
        if (tr_seed_opt->count()) ta.seed = tr_seed;
        if (tr_iter_opt->count()) ta.iterations = tr_iters;
        action = [&] { run_train(ta); };
    });

    auto* ev = app.add_subcommand("eval", "Image metrics and kernel scores for a trained field");
    EvalArgs ea;
    ev->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", ea.manifest)->required()->check(CLI::ExistingFile);
    ev->add_option("--config", ea.config, "Training config (default: the checkpoint's)")->check(CLI::ExistingFile);
    ev->add_option("--ground-truth", ea.ground_truth, "ground_truth.json from simulate")->check(CLI::ExistingFile);
    ev->add_option("--split", ea.split, "train, validation or all");
    ev->add_flag("--baseline", ea.baseline, "Also score the least-squares baseline");
    ev->add_option("--baseline-iterations", ea.baseline_iterations);
    ev->add_option("--out", ea.out, "Output directory")->required();
    ev->callback([&] { action = [&] { run_eval(ea); }; });

    auto* sa = app.add_subcommand("sample", "Query one kernel from a trained field");
    SampleArgs sarg;
    double sd = 0;
    sa->add_option("--checkpoint", sarg.checkpoint)->required()->check(CLI::ExistingFile);
    sa->add_option("-x,--x", sarg.x, "Sensor x (pixels)")->required();
    sa->add_option("-y,--y", sarg.y, "Sensor y (pixels)")->required();
    sa->add_option("-f,--f", sarg.f, "Focus (diopters)")->required();
    auto* sd_opt = sa->add_option("-d,--d", sd, "Distance (diopters)");
    sa->add_option("--kernel-samples", sarg.kernel_samples, "Odd kernel width (default: the field's)");
    sa->add_option("--preview-scale", sarg.preview_scale);
    sa->add_option("--out", sarg.out, "Output directory")->required();
    sa->callback([&] {
        if (sd_opt->count()) sarg.d = sd;
        action = [&] { run_sample(sarg); };
    });

    auto* eg = app.add_subcommand("export-grid", "Sample a field on a dense lattice");
    GridArgs ga;
    eg->add_option("--checkpoint", ga.checkpoint)->check(CLI::ExistingFile);
    eg->add_option("--dims", ga.dims, "nx ny nf ku kv")->required()->expected(5);
    eg->add_option("--channels", ga.channels, "Channel count for a dry run without a checkpoint");
    eg->add_flag("--dry-run", ga.dry_run, "Report sizes without sampling");
    eg->add_option("--out", ga.out, "Output directory");
    eg->callback([&] { action = [&] { run_export_grid(ga); }; });

    auto* bl = app.add_subcommand("baseline", "Least-squares kernels per focus");
    BaselineArgs ba;
    bl->add_option("--manifest", ba.manifest)->required()->check(CLI::ExistingFile);
    bl->add_option("--ground-truth", ba.ground_truth)->check(CLI::ExistingFile);
    bl->add_option("--kernel-samples", ba.kernel_samples);
    bl->add_option("--split", ba.split, "alternate or all");
    bl->add_option("--cx", ba.cx);
    bl->add_option("--cy", ba.cy);
    bl->add_option("--iterations", ba.iterations);
    bl->add_option("--out", ba.out, "Output directory")->required();
    bl->callback([&] { action = [&] { run_baseline(ba); }; });

    auto* cp = app.add_subcommand("compare", "Compare two groups of trained fields");
    CompareArgs ca;
    cp->add_option("--a", ca.a, "Checkpoints of group A")->required()->check(CLI::ExistingFile);
    cp->add_option("--b", ca.b, "Checkpoints of group B")->required()->check(CLI::ExistingFile);
    cp->add_option("--dims", ca.dims, "nx ny nf")->expected(3);
    cp->add_option("--out", ca.out, "Output directory");
    cp->callback([&] { action = [&] { run_compare(ca); }; });

    auto* rd = app.add_subcommand("render", "Render a depth-layered scene with field kernels");
    RenderArgs ra;
    rd->add_option("--checkpoint", ra.checkpoint)->required()->check(CLI::ExistingFile);
    rd->add_option("--image", ra.image, "All-in-focus PFM")->required()->check(CLI::ExistingFile);
    rd->add_option("--depth", ra.depth, "Depth PFM in metres")->required()->check(CLI::ExistingFile);
    rd->add_option("--focus-diopter", ra.focus)->required();
    rd->add_option("--layers", ra.layers);
    rd->add_option("--model", ra.model, "linear, layered or normalized");
    rd->add_option("--tile-size", ra.tile);
    rd->add_option("--kernel-samples", ra.kernel_samples);
    rd->add_flag("--no-renormalize", ra.no_renormalize);
    rd->add_option("--out", ra.out, "Output directory")->required();
    rd->callback([&] { action = [&] { run_render(ra); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        log::set_level(parse_level(level));
        if (threads > 0) set_thread_count(threads);
        if (action) action();
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
