#include "test_util.hpp"

using namespace blurfield;
using namespace blurfield::trainer;

namespace {

TrainConfig small_config(int k = 5) {
    TrainConfig c;
    c.ku = c.kv = k;
    c.arch.hidden_layers = 2;
    c.arch.hidden_width = 16;
    c.iterations = 0;
    c.log_every = 10;
    return c;
}

/// In-memory dataset with random sharp frames and blurry = sharp.
Dataset make_dataset(int w, int h, Layout layout, int n_focus, int n_patterns = 1, std::uint64_t seed = 1) {
    Dataset ds;
    ds.sensor = {w, h, layout, 0, 1};
    for (int t = 0; t < n_patterns; ++t)
        for (int i = 0; i < n_focus; ++i) {
            StackEntry e;
            e.pattern = t, e.focus_index = i, e.focus_diopter = 2.5 + 0.1 * i, e.distance_diopter = 2.5;
            e.sharp = testutil::random_image(w, h, ds.sensor.channels(), seed + 100 * t + i);
            e.blurry = e.sharp;
            ds.entries.push_back(std::move(e));
        }
    ds.finalize("alternate");
    return ds;
}

/// One-hidden-layer field that is ~1 at (u, v) = (0, 0) and ~0 elsewhere.
BlurFieldD delta_field(const SensorDescriptor& sensor, int k) {
    FieldArchitecture a;
    a.hidden_layers = 1;
    a.hidden_width = 4;
    a.output_dim = sensor.channels();
    BlurFieldD f(a, make_normalization(sensor, 2.0, 3.0, 2.5, 2.5, k, k), sensor);
    // hidden: relu(u), relu(-u), relu(v), relu(-v) of the normalised inputs
    const int iu = 3, iv = 4;
    f.params[0 * 5 + iu] = 1, f.params[1 * 5 + iu] = -1, f.params[2 * 5 + iv] = 1, f.params[3 * 5 + iv] = -1;
    const std::size_t w1 = f.weight_offset(1), b1 = f.bias_offset(1);
    const double step = 1.0 / ((k - 1) / 2.0);
    for (int c = 0; c < a.output_dim; ++c) {
        for (int q = 0; q < 4; ++q) f.params[w1 + c * 4 + q] = -60.0 / step;
        f.params[b1 + c] = 25.0;
    }
    return f;
}

double direct_conv(const Image& sharp, const Kernel2D& k, int c, int ox, int oy) {
    double acc = 0;
    for (int j = 0; j < k.kv; ++j)
        for (int i = 0; i < k.ku; ++i) {
            int u = i - k.ku / 2, v = j - k.kv / 2;
            acc += double(k.at(i, j, c)) * sharp.at(ox + k.ku / 2 - u, oy + k.kv / 2 - v, c);
        }
    return acc;
}

}  // namespace

TEST(TrainConfig, PatchGeometry) {
    TrainConfig c;
    EXPECT_EQ(c.patch_u(), 39);
    EXPECT_EQ(c.valid_u(), 15);
    c.ku = c.kv = 5;
    EXPECT_EQ(c.patch_u(), 9);
    c.ku = 7;
    EXPECT_EQ(c.patch_u(), 11);
    c.ku = 119;
    EXPECT_EQ(c.patch_u() % 2, 1);
    EXPECT_GE(c.patch_u(), 1.5 * 119);
}

TEST(TrainConfig, Defaults) {
    TrainConfig c;
    EXPECT_EQ(c.iterations, 200000u);
    EXPECT_EQ(c.batch_elements, 1);
    EXPECT_EQ(c.patch_factor, 1.5);
    EXPECT_EQ(c.split, "alternate");
    EXPECT_EQ(c.log_every, 1000u);
    EXPECT_EQ(c.checkpoint_every, 10000u);
}

TEST(TrainConfig, JsonRoundTripAndSchema) {
    TrainConfig c = small_config(7);
    c.seed = 99;
    c.adam.lr = 3e-4;
    TrainConfig d = config_from_json(config_to_json(c));
    EXPECT_EQ(d.ku, 7);
    EXPECT_EQ(d.seed, 99u);
    EXPECT_EQ(d.adam.lr, 3e-4);
    EXPECT_EQ(d.arch.hidden_width, 16);
    EXPECT_THROW(config_from_json(json{{"iterationz", 5}}), InputError);
    EXPECT_THROW(config_from_json(json{{"adam", {{"beta3", 1}}}}), InputError);
    EXPECT_THROW(config_from_json(json{{"kernel_samples", 121}}), InputError);
    EXPECT_THROW(config_from_json(json{{"kernel_samples", 24}}), InputError);
    EXPECT_THROW(config_from_json(json{{"split", "odd"}}), InputError);
    EXPECT_EQ(config_from_json(json{{"kernel_samples", {9, 11}}}).kv, 11);
}

TEST(Dataset, AlternateSplit) {
    auto ds = make_dataset(16, 16, Layout::mono, 21);
    EXPECT_EQ(ds.train.size(), 11u);
    EXPECT_EQ(ds.validation.size(), 10u);
    for (auto k : ds.train) EXPECT_EQ(ds.entries[k].focus_index % 2, 0);
    for (auto k : ds.validation) EXPECT_EQ(ds.entries[k].focus_index % 2, 1);
    ds.finalize("all");
    EXPECT_EQ(ds.train.size(), 21u);
    EXPECT_NEAR(ds.f_min, 2.5, 1e-12);
    EXPECT_NEAR(ds.f_max, 4.5, 1e-12);
}

TEST(Dataset, LoadRequiresSharpFrames) {
    auto dir = testutil::temp_dir();
    FocalStackManifest m;
    m.sensor = {8, 8, Layout::mono, 0, 1};
    m.focus_diopters = {2.0};
    m.distances_m = {0.4};
    for (auto role : {FrameRole::blurry, FrameRole::min, FrameRole::max}) {
        auto p = dir / (to_string(role) + ".pfm");
        write_pfm(Image(8, 8, 1, 0.5f), p);
        m.frames.push_back({0, 0, 0, role, p});
    }
    EXPECT_THROW(load_dataset(m), InputError);
    auto p = dir / "sharp.pfm";
    write_pfm(Image(8, 8, 1, 0.25f), p);
    m.frames.push_back({0, 0, 0, FrameRole::sharp, p});
    auto ds = load_dataset(m);
    ASSERT_EQ(ds.entries.size(), 1u);
    EXPECT_EQ(ds.entries[0].sharp.at(3, 3), 0.25f);
    EXPECT_NEAR(ds.entries[0].distance_diopter, 2.5, 1e-12);
}

TEST(Sampling, PatchSizedImageGivesCentredSample) {
    auto cfg = small_config(5);
    auto ds = make_dataset(9, 9, Layout::mono, 1);
    std::mt19937_64 rng(1);
    for (int k = 0; k < 20; ++k) {
        auto s = sample_element(ds, ds.train, cfg, rng);
        EXPECT_EQ(s.cx, 4);
        EXPECT_EQ(s.cy, 4);
        EXPECT_EQ(s.sharp.data(), ds.entries[0].sharp.data());
        EXPECT_EQ(s.blurry.width(), 5);
    }
}

TEST(Sampling, PatchLargerThanImageFails) {
    auto cfg = small_config(7);
    auto ds = make_dataset(10, 20, Layout::mono, 1);
    std::mt19937_64 rng(1);
    EXPECT_THROW(sample_element(ds, ds.train, cfg, rng), InputError);
    std::vector<std::size_t> none;
    EXPECT_THROW(sample_element(make_dataset(20, 20, Layout::mono, 1), none, cfg, rng), InputError);
}

TEST(Sampling, UniformOverFocusAndPosition) {
    auto cfg = small_config(5);
    auto ds = make_dataset(20, 14, Layout::mono, 4);  // train foci 0 and 2
    std::mt19937_64 rng(7);
    const int n = 100000;
    std::map<int, int> focus;
    std::vector<int> xs(20, 0);
    for (int k = 0; k < n; ++k) {
        auto s = sample_element(ds, ds.train, cfg, rng);
        focus[ds.entries[s.entry].focus_index]++;
        xs[s.cx]++;
        ASSERT_GE(s.cx, 4);
        ASSERT_LE(s.cx, 15);
    }
    ASSERT_EQ(focus.size(), 2u);
    for (auto [f, c] : focus) EXPECT_NEAR(double(c) / n, 0.5, 0.01) << f;
    // Chi-squared over the 12 admissible centre columns (11 dof, p = 0.001 critical value 31.26).
    double chi2 = 0;
    for (int x = 4; x <= 15; ++x) chi2 += std::pow(xs[x] - n / 12.0, 2) / (n / 12.0);
    EXPECT_LT(chi2, 31.26);
}

TEST(Sampling, DeterministicPerRngState) {
    auto cfg = small_config(5);
    auto ds = make_dataset(30, 30, Layout::mono, 3);
    std::mt19937_64 a(5), b(5);
    for (int k = 0; k < 50; ++k) {
        auto s = sample_element(ds, ds.train, cfg, a), t = sample_element(ds, ds.train, cfg, b);
        EXPECT_EQ(s.cx, t.cx);
        EXPECT_EQ(s.entry, t.entry);
    }
}

TEST(Sampling, MasksFollowSensorLayout) {
    auto cfg = small_config(5);
    auto ds = make_dataset(20, 20, Layout::dp_g_lr, 1);
    auto s = make_sample(ds, cfg, 0, 9, 8);
    for (int oy = 0; oy < 5; ++oy)
        for (int ox = 0; ox < 5; ++ox) {
            int x = 9 - 2 + ox, y = 8 - 2 + oy;
            float expected = (x + y) % 2 == 1 ? 1.0f : 0.0f;
            EXPECT_EQ(s.mask.at(ox, oy, 0), expected);
            EXPECT_EQ(s.mask.at(ox, oy, 1), expected);
        }
}

TEST(Predict, DeltaFieldReturnsCentralCrop) {
    auto cfg = small_config(5);
    auto ds = make_dataset(24, 24, Layout::mono, 1);
    auto f = delta_field(ds.sensor, 5);
    auto k = query_kernel(f, 10, 10, 2.5, 2.5, 5, 5);
    EXPECT_GT(k.at(2, 2), 0.999f);
    EXPECT_LT(k.at(1, 2), 1e-6f);
    auto s = make_sample(ds, cfg, 0, 11, 12);
    Image pred = predict_patch(f, ds, s, cfg);
    Image crop = s.sharp.crop(2, 2, 5, 5);
    EXPECT_LT(testutil::max_abs_diff(pred, crop), 1e-3);
}

TEST(Predict, MatchesBruteForceConvolution) {
    for (int k : {3, 5, 9}) {
        auto cfg = small_config(k);
        auto ds = make_dataset(40, 40, Layout::dp_g_lr, 1, 1, 3 + k);
        auto s = make_sample(ds, cfg, 0, 20, 19);
        Kernel2D K = testutil::random_kernel(k, k, 2, 50 + k);
        std::vector<double> Kd(K.samples.begin(), K.samples.end());
        auto pred = predict_from_kernels<double>(s, Kd, 2, cfg);
        const int vu = cfg.valid_u();
        double worst = 0;
        for (int c = 0; c < 2; ++c)
            for (int oy = 0; oy < vu; ++oy)
                for (int ox = 0; ox < vu; ++ox)
                    worst = std::max(worst, std::abs(pred[(c * vu + oy) * vu + ox] - direct_conv(s.sharp, K, c, ox, oy)));
        EXPECT_LT(worst, 1e-6) << k;
    }
}

TEST(Predict, ConstantSharpGivesScaledKernelMass) {
    auto cfg = small_config(7);
    auto ds = make_dataset(30, 30, Layout::mono, 1);
    ds.entries[0].sharp = Image(30, 30, 1, 0.3f);
    auto f = init_field<double>(FieldArchitecture{5, 2, 8, 1, 1.0}, make_normalization(ds.sensor, 2, 3, 2.5, 2.5, 7, 7),
                                ds.sensor, 3);
    auto s = make_sample(ds, cfg, 0, 15, 15);
    Image pred = predict_patch(f, ds, s, cfg);
    double mass = query_kernel(f, 15, 15, 2.5, 2.5, 7, 7).sum();
    for (float v : pred.data()) EXPECT_NEAR(v, 0.3 * mass, 1e-5);
}

TEST(Loss, ExactFitGivesZeroLossAndGradient) {
    auto cfg = small_config(5);
    auto ds = make_dataset(20, 20, Layout::mono, 1);
    ds.entries[0].sharp = Image(20, 20, 1, 0.0625f);
    ds.entries[0].blurry = Image(20, 20, 1, 0.78125f);  // 25 samples of 0.5 * 0.0625
    FieldArchitecture a{5, 2, 8, 1, 1.0};
    BlurField f(a, make_normalization(ds.sensor, 2, 3, 2.5, 2.5, 5, 5), ds.sensor);
    std::vector<TrainSample> batch{make_sample(ds, cfg, 0, 10, 10)};
    auto lg = loss_and_grads<float>(f, ds, batch, cfg);
    EXPECT_EQ(lg.loss, 0.0);
    for (float g : lg.grad) EXPECT_EQ(g, 0.0f);
}

TEST(Loss, MatchesFiniteDifferences) {
    auto cfg = small_config(5);
    auto ds = make_dataset(24, 24, Layout::dp_g_lr, 2, 1, 9);
    for (auto& e : ds.entries)
        for (float& v : e.blurry.data()) v *= 3.0f;
    FieldArchitecture a{5, 2, 12, 2, 1.0};
    auto f = init_field<double>(a, make_normalization(ds.sensor, 2.5, 2.6, 2.5, 2.5, 5, 5), ds.sensor, 4);
    std::mt19937_64 rng(2);
    std::vector<TrainSample> batch;
    for (int b = 0; b < 3; ++b) batch.push_back(sample_element(ds, ds.train, cfg, rng));
    auto lg = loss_and_grads<double>(f, ds, batch, cfg);
    EXPECT_GT(lg.loss, 0);
    std::uniform_int_distribution<std::size_t> pick(0, f.parameter_count() - 1);
    double num = 0, den = 0;
    const double h = 1e-5;
    for (int t = 0; t < 100; ++t) {
        auto p = pick(rng);
        auto plus = f, minus = f;
        plus.params[p] += h;
        minus.params[p] -= h;
        double fd = (loss_and_grads<double>(plus, ds, batch, cfg, false).loss -
                     loss_and_grads<double>(minus, ds, batch, cfg, false).loss) / (2 * h);
        num += (fd - lg.grad[p]) * (fd - lg.grad[p]);
        den += lg.grad[p] * lg.grad[p];
    }
    ASSERT_GT(den, 0);
    EXPECT_LT(std::sqrt(num / den), 1e-4);
}

TEST(Loss, BatchAverages) {
    auto cfg = small_config(5);
    auto ds = make_dataset(24, 24, Layout::mono, 1, 1, 11);
    for (float& v : ds.entries[0].blurry.data()) v *= 2.0f;
    FieldArchitecture a{5, 2, 8, 1, 1.0};
    auto f = init_field<double>(a, make_normalization(ds.sensor, 2, 3, 2.5, 2.5, 5, 5), ds.sensor, 5);
    std::vector<TrainSample> one{make_sample(ds, cfg, 0, 10, 10)};
    std::vector<TrainSample> two{one[0], one[0]};
    auto a1 = loss_and_grads<double>(f, ds, one, cfg), a2 = loss_and_grads<double>(f, ds, two, cfg);
    EXPECT_NEAR(a1.loss, a2.loss, 1e-12 * a1.loss);
    for (std::size_t k = 0; k < a1.grad.size(); ++k) EXPECT_NEAR(a1.grad[k], a2.grad[k], 1e-12 + 1e-9 * std::abs(a1.grad[k]));
}

TEST(Loss, FullyMaskedBatchWarns) {
    auto cfg = small_config(5);
    auto ds = make_dataset(20, 20, Layout::mono, 1);
    ds.masks[0] = Image(20, 20, 1, 0.0f);
    FieldArchitecture a{5, 2, 8, 1, 1.0};
    auto f = init_field(a, make_normalization(ds.sensor, 2, 3, 2.5, 2.5, 5, 5), ds.sensor, 6);
    std::vector<TrainSample> batch{make_sample(ds, cfg, 0, 10, 10)};
    testutil::LogCapture log;
    auto lg = loss_and_grads<float>(f, ds, batch, cfg);
    EXPECT_EQ(lg.loss, 0.0);
    EXPECT_EQ(lg.masked_pixels, 0u);
    EXPECT_EQ(log.warnings.size(), 1u);
    for (float g : lg.grad) EXPECT_EQ(g, 0.0f);
}

TEST(Train, ZeroIterationsReturnsInitialField) {
    auto cfg = small_config(5);
    auto ds = make_dataset(20, 20, Layout::mono, 2);
    auto r = train(ds, cfg);
    EXPECT_EQ(r.field.params, initial_field(ds, cfg).params);
    EXPECT_TRUE(r.log.empty());
    EXPECT_EQ(r.field.arch.output_dim, 1);
}

TEST(Train, DeterministicAcrossRunsAndThreads) {
    auto cfg = small_config(5);
    cfg.iterations = 30;
    cfg.batch_elements = 2;
    auto ds = make_dataset(24, 24, Layout::dp_g_lr, 3);
    set_thread_count(1);
    auto a = train(ds, cfg);
    auto b = train(ds, cfg);
    set_thread_count(3);
    auto c = train(ds, cfg);
    set_thread_count(0);
    EXPECT_EQ(a.field.params, b.field.params);
    EXPECT_EQ(a.field.params, c.field.params);
    EXPECT_EQ(a.adam.m, c.adam.m);
    cfg.seed = 1;
    EXPECT_NE(train(ds, cfg).field.params, a.field.params);
}

TEST(Train, LogsAndCheckpointsOnSchedule) {
    auto cfg = small_config(5);
    cfg.iterations = 25;
    cfg.log_every = 10;
    cfg.checkpoint_every = 10;
    auto ds = make_dataset(20, 20, Layout::mono, 2);
    std::vector<std::uint64_t> logged, saved;
    TrainCallbacks cb;
    cb.on_log = [&](const LogRow& r) { logged.push_back(r.step); };
    cb.on_checkpoint = [&](std::uint64_t s, const BlurField&, const AdamState& st) {
        saved.push_back(s);
        EXPECT_EQ(st.step, s);
    };
    auto r = train(ds, cfg, cb);
    EXPECT_EQ(logged, (std::vector<std::uint64_t>{10, 20, 25}));
    EXPECT_EQ(saved, (std::vector<std::uint64_t>{10, 20}));
    EXPECT_EQ(r.log.back().lr, cfg.adam.lr);
}

TEST(Train, LossDecreasesOnLearnableBlur) {
    // Blurry frames are sharp frames convolved with a fixed 3x3 box.
    auto cfg = small_config(3);
    cfg.iterations = 1500;
    cfg.log_every = 100;
    cfg.batch_elements = 2;
    cfg.adam.lr = 2e-3;
    cfg.adam.beta1 = 0.9;
    auto ds = make_dataset(32, 32, Layout::mono, 2, 2, 17);
    Kernel2D box(3, 3, 1);
    for (float& v : box.samples) v = 1.0f / 9;
    for (auto& e : ds.entries) e.blurry = convolve_same<double>(e.sharp, box);
    auto r = train(ds, cfg);
    ASSERT_EQ(r.log.size(), 15u);
    EXPECT_LT(r.log.back().loss, 0.2 * r.log.front().loss);
    auto k = query_kernel(r.field, 16, 16, ds.entries[0].focus_diopter, 2.5, 3, 3);
    for (float v : k.samples) EXPECT_NEAR(v, 1.0 / 9, 0.03);
}

TEST(Validate, DeltaFieldOnNearIdentityFrame) {
    auto dir = testutil::temp_dir();
    synthcam::ThinLensConfig lens;
    lens.n_focus = 2;
    lens.r_min = 0.5;
    lens.r_max = 1.0;
    synthcam::NoiseConfig noise;
    noise.enabled = false;
    SensorDescriptor sensor{48, 40, Layout::mono, 0, 1};
    synthcam::simulate_stack({synthcam::noise_pattern(3, 64, 1)}, lens, noise, sensor, dir);
    auto ds = load_dataset(load_manifest(dir / "manifest.json"));
    auto cfg = small_config(5);
    auto f = delta_field(ds.sensor, 5);
    std::vector<std::size_t> first{ds.train[0]};
    auto rep = validate(f, ds, first, cfg);
    ASSERT_EQ(rep.size(), 1u);
    EXPECT_EQ(rep[0].focus_index, 0);
    EXPECT_GT(rep[0].metrics.psnr, 40.0);
}

TEST(Validate, RenderedDomainCoversInterior) {
    auto cfg = small_config(5);
    auto ds = make_dataset(31, 26, Layout::mono, 1);
    auto f = delta_field(ds.sensor, 5);
    auto rf = render_frame(f, ds, 0, cfg);
    for (int y = 0; y < 26; ++y)
        for (int x = 0; x < 31; ++x) {
            bool interior = x >= 2 && x <= 28 && y >= 2 && y <= 23;
            EXPECT_EQ(rf.domain.at(x, y), interior ? 1.0f : 0.0f) << x << "," << y;
        }
    Image crop = ds.entries[0].sharp.crop(2, 2, 27, 22), pred = rf.predicted.crop(2, 2, 27, 22);
    EXPECT_LT(testutil::max_abs_diff(crop, pred), 1e-3);
}
