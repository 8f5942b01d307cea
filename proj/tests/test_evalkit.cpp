#include "test_util.hpp"

using namespace blurfield;
using namespace blurfield::evalkit;

namespace {

/// SSIM by direct weighted sums over each 11x11 window.
double ssim_oracle(const Image& a, const Image& b, double peak) {
    const int win = 11;
    std::vector<double> g1(win);
    double s = 0;
    for (int i = 0; i < win; ++i) {
        double d = i - 5;
        g1[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
        s += g1[i];
    }
    for (double& v : g1) v /= s;
    const double C1 = std::pow(0.01 * peak, 2), C2 = std::pow(0.03 * peak, 2);
    double total = 0;
    for (int c = 0; c < a.channels(); ++c) {
        double acc = 0;
        int n = 0;
        for (int y = 0; y + win <= a.height(); ++y)
            for (int x = 0; x + win <= a.width(); ++x) {
                double ma = 0, mb = 0;
                for (int j = 0; j < win; ++j)
                    for (int i = 0; i < win; ++i) {
                        double w = g1[i] * g1[j];
                        ma += w * a.at(x + i, y + j, c);
                        mb += w * b.at(x + i, y + j, c);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int j = 0; j < win; ++j)
                    for (int i = 0; i < win; ++i) {
                        double w = g1[i] * g1[j];
                        double da = a.at(x + i, y + j, c) - ma, db = b.at(x + i, y + j, c) - mb;
                        va += w * da * da, vb += w * db * db, cov += w * da * db;
                    }
                acc += (2 * ma * mb + C1) * (2 * cov + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                ++n;
            }
        total += acc / n;
    }
    return total / a.channels();
}

Image blur_valid(const Image& sharp, const Kernel2D& k) { return convolve_valid<double>(sharp, k); }

BlurField small_field(std::uint64_t seed, double f_max = 3.0) {
    FieldArchitecture a;
    a.hidden_layers = 2;
    a.hidden_width = 8;
    a.output_dim = 1;
    SensorDescriptor s{64, 48, Layout::mono, 0, 1};
    return init_field(a, make_normalization(s, 2.0, f_max, 2.5, 2.5, 5, 5), s, seed);
}

}  // namespace

TEST(Metrics, IdenticalImages) {
    Image a = testutil::random_image(32, 24, 2, 1);
    EXPECT_EQ(rmse(a, a), 0.0);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Metrics, ConstantOffset) {
    Image a = testutil::random_image(32, 32, 1, 2, 0.0f, 0.5f);
    Image b = a;
    for (float& v : b.data()) v += 0.1f;
    EXPECT_NEAR(rmse(a, b), 0.1, 1e-6);
    EXPECT_NEAR(psnr(a, b, 1.0), 20.0, 1e-4);
    EXPECT_NEAR(psnr(a, b, 2.0), 20.0 + 20.0 * std::log10(2.0), 1e-4);
}

TEST(Metrics, MatchDirectFormulas) {
    Image a = testutil::random_image(27, 23, 2, 3), b = testutil::random_image(27, 23, 2, 4);
    double acc = 0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += std::pow(double(a.data()[k]) - b.data()[k], 2);
    const double m = acc / a.size();
    EXPECT_NEAR(rmse(a, b), std::sqrt(m), 1e-9);
    EXPECT_NEAR(psnr(a, b), 10 * std::log10(1.0 / m), 1e-9);
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b, 1.0), 1e-9);
    EXPECT_NEAR(ssim(a, b, 2.0), ssim_oracle(a, b, 2.0), 1e-9);
}

TEST(Metrics, Symmetric) {
    Image a = testutil::random_image(20, 20, 1, 5), b = testutil::random_image(20, 20, 1, 6);
    EXPECT_EQ(rmse(a, b), rmse(b, a));
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
}

TEST(Metrics, MaskAndErrors) {
    Image a = testutil::random_image(16, 16, 1, 7), b = a;
    Image mask(16, 16, 1, 0.0f);
    for (int x = 0; x < 8; ++x) b.at(x, 0) += 0.5f;
    for (int y = 8; y < 16; ++y)
        for (int x = 0; x < 16; ++x) mask.at(x, y) = 1;
    EXPECT_EQ(rmse(a, b, &mask), 0.0);
    EXPECT_GT(rmse(a, b), 0.0);
    EXPECT_THROW(rmse(a, Image(15, 16, 1)), InputError);
    EXPECT_THROW(ssim(Image(8, 8, 1), Image(8, 8, 1)), InputError);
    Image none(16, 16, 1, 0.0f);
    EXPECT_THROW(rmse(a, b, &none), InputError);
}

TEST(InsetRmse, ExactAndOffsetInsideInset) {
    Kernel2D gt(15, 15, 1);
    for (int j = 6; j <= 8; ++j)
        for (int i = 5; i <= 9; ++i) gt.at(i, j) = 0.1f;
    EXPECT_EQ(inset_rmse(gt, gt), 0.0);
    Inset in = support_inset(gt, 2);
    EXPECT_EQ(in.i0, 3);
    EXPECT_EQ(in.i1, 11);
    EXPECT_EQ(in.j0, 4);
    EXPECT_EQ(in.j1, 10);
    Kernel2D est = gt;
    for (int j = in.j0; j <= in.j1; ++j)
        for (int i = in.i0; i <= in.i1; ++i) est.at(i, j) += 0.01f;
    EXPECT_NEAR(inset_rmse(est, gt), 0.01, 1e-7);
    est.at(0, 0) = 5.0f;  // outside the inset
    EXPECT_NEAR(inset_rmse(est, gt), 0.01, 1e-7);
}

TEST(InsetRmse, CenteredFraction) {
    Kernel2D gt(21, 21, 1);
    Inset in = centered_inset(gt, 0.5);
    EXPECT_EQ(in.i1 - in.i0 + 1, 11);
    EXPECT_EQ(in.i0 + in.i1, 20);
    Kernel2D est = gt;
    for (int j = in.j0; j <= in.j1; ++j)
        for (int i = in.i0; i <= in.i1; ++i) est.at(i, j) = 0.01f;
    EXPECT_NEAR(inset_rmse(est, gt, 0.5), 0.01, 1e-7);
    EXPECT_THROW(centered_inset(gt, 0.0), InputError);
}

TEST(InsetRmse, EmptyInsetErrors) {
    Kernel2D zero(9, 9, 1);
    EXPECT_TRUE(support_inset(zero).empty());
    EXPECT_THROW(inset_rmse(zero, zero), InputError);
    EXPECT_THROW(inset_rmse(zero, Kernel2D(7, 9, 1), 0.5), InputError);
}

TEST(Baseline, RecoversKnownKernel) {
    Kernel2D k = testutil::random_kernel(9, 9, 1, 11);
    double s = k.sum();
    for (float& v : k.samples) v = static_cast<float>(v / s);
    Image sharp = testutil::random_image(40, 40, 1, 12);
    Image blurry = blur_valid(sharp, k);
    BaselineOptions opt;
    opt.iterations = 5000;
    auto r = baseline_ls_kernel(sharp, blurry, 9, 9, opt);
    double acc = 0;
    for (std::size_t q = 0; q < k.samples.size(); ++q) acc += std::pow(double(r.kernel.samples[q]) - k.samples[q], 2);
    EXPECT_LT(std::sqrt(acc / k.samples.size()), 1e-3);
}

TEST(Baseline, DeltaBlur) {
    Image sharp = testutil::random_image(22, 22, 2, 13);
    Kernel2D delta(7, 7, 1);
    delta.at(3, 3) = 1;
    auto r = baseline_ls_kernel(sharp, blur_valid(sharp, delta), 7, 7);
    for (int c = 0; c < 2; ++c) EXPECT_GE(r.kernel.at(3, 3, c), 0.99f);
}

TEST(Baseline, NonnegativeAndMonotone) {
    Image sharp = testutil::random_image(24, 24, 1, 14);
    Image blurry = testutil::random_image(24 - 5 + 1, 24 - 5 + 1, 1, 15, -1.0f, 1.0f);
    BaselineOptions opt;
    opt.iterations = 300;
    auto r = baseline_ls_kernel(sharp, blurry, 5, 5, opt);
    for (float v : r.kernel.samples) EXPECT_GE(v, 0.0f);
    ASSERT_EQ(r.history.size(), 1u);
    for (std::size_t i = 1; i < r.history[0].size(); ++i) EXPECT_LE(r.history[0][i], r.history[0][i - 1]);
    auto r2 = baseline_ls_kernel(sharp, blurry, 5, 5, opt);
    EXPECT_EQ(r.kernel.samples, r2.kernel.samples);
}

TEST(Baseline, Errors) {
    Image sharp = testutil::random_image(16, 16, 1, 16);
    EXPECT_THROW(baseline_ls_kernel(sharp, Image(8, 8, 1), 9, 9), InputError);
    EXPECT_THROW(baseline_ls_kernel(sharp, Image(11, 11, 1), 5, 5), InputError);
}

TEST(Interpolate, EndpointsAndDeltas) {
    Kernel2D a(9, 9, 1), b(9, 9, 1);
    a.at(2, 4) = 1, b.at(6, 4) = 1;
    EXPECT_EQ(interpolate_kernels(a, b, 0).samples, a.samples);
    EXPECT_EQ(interpolate_kernels(a, b, 1).samples, b.samples);
    Kernel2D m = interpolate_kernels(a, b, 0.5);
    EXPECT_EQ(m.at(2, 4), 0.5f);
    EXPECT_EQ(m.at(6, 4), 0.5f);
    EXPECT_EQ(m.at(4, 4), 0.0f);
    EXPECT_THROW(interpolate_kernels(a, Kernel2D(7, 9, 1), 0.5), InputError);
    EXPECT_THROW(interpolate_kernels(a, b, 1.5), InputError);
}

TEST(Interpolate, SumsInterpolateLinearly) {
    Kernel2D a = testutil::random_kernel(7, 7, 2, 17), b = testutil::random_kernel(7, 7, 2, 18);
    for (double alpha : {0.1, 0.37, 0.8}) {
        Kernel2D m = interpolate_kernels(a, b, alpha);
        for (int c = 0; c < 2; ++c) EXPECT_NEAR(m.sum(c), (1 - alpha) * a.sum(c) + alpha * b.sum(c), 1e-5);
    }
}

TEST(Grid, DryRunTableSize) {
    GridSpec g;
    g.nx = 75, g.ny = 100, g.nf = 15, g.ku = 73, g.kv = 73;
    auto e = export_grid_dry_run(g, 4);
    const std::uint64_t expected = 75ull * 100 * 15 * 73 * 73 * 4 * 4;
    EXPECT_EQ(expected, 9592200000ull);
    EXPECT_EQ(e.payload_bytes, expected);
    const double gib = e.payload_bytes / std::pow(2.0, 30);
    EXPECT_GE(gib, 8.9);
    EXPECT_LE(gib, 9.0);
}

TEST(Grid, TinyPayload) {
    GridSpec g;
    g.ku = g.kv = 3;
    EXPECT_EQ(export_grid_dry_run(g, 1).payload_bytes, 36u);
    EXPECT_THROW(export_grid_dry_run(GridSpec{1, 1, 1, 4, 3}, 1), InputError);
}

TEST(Grid, ExportReadMatchesQueries) {
    auto dir = testutil::temp_dir();
    BlurField f = small_field(3);
    GridSpec g = GridSpec::covering(f.norm, 3, 2, 2, 5, 5);
    auto e = export_grid(f, g, dir / "grid.bfg");
    EXPECT_EQ(e.payload_bytes, 3u * 2 * 2 * 25 * 4);
    EXPECT_GT(std::filesystem::file_size(dir / "grid.bfg"), e.payload_bytes + 8);
    auto r = read_grid(dir / "grid.bfg");
    EXPECT_EQ(r.channels, 1);
    EXPECT_EQ(r.spec.nx, 3);
    auto direct = sample_grid(f, g);
    ASSERT_EQ(r.values.size(), direct.size());
    EXPECT_EQ(0, std::memcmp(r.values.data(), direct.data(), direct.size() * 4));
    // index order: x slowest, then y, f, u, v
    double x = GridSpec::axis(g.x0, g.x1, 3, 2), y = GridSpec::axis(g.y0, g.y1, 2, 1);
    auto one = f.eval_batch(std::vector<double>{x, y, g.f1, 1.0, -2.0});
    const std::size_t idx = ((((2 * 2 + 1) * 2 + 1) * 5 + 3) * 5 + 0);
    EXPECT_NEAR(r.values[idx], one[0], 1e-6);
}

TEST(Grid, JsonRoundTrip) {
    GridSpec g{4, 5, 6, 7, 9, 0, 10, 1, 2, 2.0, 3.0, 2.5};
    GridSpec h = grid_spec_from_json(grid_spec_to_json(g));
    EXPECT_EQ(h.nx, 4);
    EXPECT_EQ(h.kv, 9);
    EXPECT_EQ(h.f1, 3.0);
    EXPECT_THROW(grid_spec_from_json(json{{"dims", {1, 1, 1, 3, 3}}, {"bogus", 1}}), InputError);
    EXPECT_THROW(grid_spec_from_json(json{{"dims", {1, 1, 3, 3}}}), InputError);
}

TEST(CompareFields, SameCheckpointHasZeroSpreadAndDistance) {
    BlurField f = small_field(4);
    GridSpec g = GridSpec::covering(f.norm, 2, 2, 2, 5, 5);
    auto cmp = compare_fields({f, f}, {f, f}, g);
    for (double s : cmp.a.stddev) EXPECT_EQ(s, 0.0);
    EXPECT_EQ(cmp.rms_difference, 0.0);
    EXPECT_EQ(cmp.ratio, 0.0);
    auto one = compare_fields({f}, {f}, g);
    auto direct = sample_grid(f, g);
    for (std::size_t k = 0; k < direct.size(); ++k) EXPECT_EQ(one.a.mean[k], double(direct[k]));
}

TEST(CompareFields, RatioOrdersGroups) {
    BlurField a1 = small_field(5), a2 = small_field(6), b1 = small_field(7), b2 = small_field(8);
    for (auto* f : {&b1, &b2}) {
        const std::size_t bias = f->bias_offset(f->arch.layer_count() - 1);
        f->params[bias] += 3.0f;
    }
    GridSpec g = GridSpec::covering(a1.norm, 2, 2, 2, 5, 5);
    auto cmp = compare_fields({a1, a2}, {b1, b2}, g);
    for (double s : cmp.a.stddev) EXPECT_GE(s, 0.0);
    EXPECT_GT(cmp.ratio, 1.0);
}

TEST(CompareFields, IncompatibleNormalizationThrows) {
    BlurField a = small_field(1), b = small_field(2, 3.5);
    GridSpec g = GridSpec::covering(a.norm, 1, 1, 1, 5, 5);
    EXPECT_THROW(compare_fields({a}, {b}, g), InputError);
    EXPECT_THROW(compare_fields({}, {b}, g), InputError);
}
