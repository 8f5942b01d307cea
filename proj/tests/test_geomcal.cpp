#include "test_util.hpp"

using namespace blurfield;
using namespace blurfield::geomcal;

namespace {

std::vector<Point> random_points(int n, std::uint64_t seed, double extent = 500) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0, extent);
    std::vector<Point> pts(n);
    for (auto& p : pts) p = {U(rng), U(rng)};
    return pts;
}

Homography example_homography() {
    Homography H;
    H.h = {1.1, 0.05, 10, -0.03, 0.95, 5, 1e-4, -5e-5, 1};
    return H;
}

double max_rel_entry_diff(const Homography& a, const Homography& b) {
    double scale = 0, diff = 0;
    for (int q = 0; q < 9; ++q) scale = std::max(scale, std::abs(b.h[q]));
    for (int q = 0; q < 9; ++q) diff = std::max(diff, std::abs(a.h[q] - b.h[q]));
    return diff / scale;
}

/// Dot grid covering most of a 640x480 sensor through `chain`.
synthcam::DotGrid sensor_grid() {
    synthcam::DotGrid g;
    g.rows = 9;
    g.cols = 12;
    g.spacing = 40;
    g.radius = 10;
    g.origin_x = 40;
    g.origin_y = 40;
    return g;
}

}  // namespace

TEST(Binarize, ExactComplementsThresholdAtHalf) {
    Image a = testutil::random_image(40, 30, 1, 1);
    Image inv = a;
    for (float& v : inv.data()) v = 1.0f - v;
    Image m = binarize_pair(a, inv);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(m.data()[k], a.data()[k] > 0.5f ? 1.0f : 0.0f);
}

TEST(Binarize, TiesAreZero) {
    Image a = testutil::random_image(16, 16, 1, 2);
    Image m = binarize_pair(a, a);
    for (float v : m.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_THROW(binarize_pair(a, Image(16, 15, 1)), InputError);
}

TEST(Binarize, RobustToModerateNoise) {
    auto grid = sensor_grid();
    grid.origin_x = 40.3;
    grid.origin_y = 40.7;
    Image clean = grid.render(520, 400, 8), clean_inv = grid.inverted().render(520, 400, 8);
    Image reference = binarize_pair(clean, clean_inv);
    std::mt19937_64 rng(9);
    std::normal_distribution<float> N(0.0f, 0.02f);
    Image a = clean, b = clean_inv;
    for (float& v : a.data()) v += N(rng);
    for (float& v : b.data()) v += N(rng);
    Image m = binarize_pair(a, b);
    std::size_t same = 0;
    for (std::size_t k = 0; k < m.size(); ++k) same += m.data()[k] == reference.data()[k];
    EXPECT_GE(double(same) / m.size(), 0.999);
}

TEST(DetectDots, SharpGridWithinTenthPixel) {
    auto grid = sensor_grid();
    Image img = grid.render(520, 400), inv = grid.inverted().render(520, 400);
    auto centers = detect_dots(binarize_pair(img, inv), img, 9, 12, 12.0);
    auto truth = grid.centers();
    ASSERT_EQ(centers.size(), truth.size());
    for (std::size_t k = 0; k < truth.size(); ++k)
        EXPECT_LT(std::hypot(centers[k][0] - truth[k][0], centers[k][1] - truth[k][1]), 0.1) << k;
}

TEST(DetectDots, BlurredGridWithinThreeTenthsPixel) {
    auto grid = sensor_grid();
    Kernel2D disc = synthcam::disc_psf(10.0, 21);
    Image img = convolve_same(grid.render(520, 400), disc);
    Image inv = convolve_same(grid.inverted().render(520, 400), disc);
    auto centers = detect_dots(binarize_pair(img, inv), img, 9, 12, 16.0);
    auto truth = grid.centers();
    ASSERT_EQ(centers.size(), truth.size());
    for (std::size_t k = 0; k < truth.size(); ++k)
        EXPECT_LT(std::hypot(centers[k][0] - truth[k][0], centers[k][1] - truth[k][1]), 0.3) << k;
}

TEST(DetectDots, SingleCentredDot) {
    synthcam::DotGrid g;
    g.rows = g.cols = 1;
    g.origin_x = 32;
    g.origin_y = 24;
    g.radius = 6;
    Image img = g.render(65, 49), inv = g.inverted().render(65, 49);
    auto c = detect_dots(binarize_pair(img, inv), img, 1, 1, 8.0);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_NEAR(c[0][0], 32.0, 1e-6);
    EXPECT_NEAR(c[0][1], 24.0, 1e-6);
}

TEST(DetectDots, WrongCountFails) {
    auto grid = sensor_grid();
    Image img = grid.render(520, 400), inv = grid.inverted().render(520, 400);
    EXPECT_THROW(detect_dots(binarize_pair(img, inv), img, 9, 11, 12.0), InputError);
}

TEST(DetectDots, FollowedByHomographyRecoversRendering) {
    RegistrationChain chain;
    chain.H.h = {1.15, 0.02, 30, -0.01, 1.15, 20, 0, 0, 1};
    chain.D.cx = 319.5;
    chain.D.cy = 239.5;
    chain.scales[{0, 0}] = 1.0;
    auto grid = sensor_grid();
    Kernel2D disc = synthcam::disc_psf(10.0, 21);
    Image img = convolve_same(render_through_chain([&](double x, double y) { return grid.albedo(x, y); }, chain, 0, 0, 640, 480), disc);
    Image inv = convolve_same(render_through_chain([&](double x, double y) { return 1 - grid.albedo(x, y); }, chain, 0, 0, 640, 480), disc);
    auto centers = detect_dots(binarize_pair(img, inv), img, 9, 12, 16.0);
    auto scene = grid.centers();
    Homography H = fit_homography_ransac(scene, centers);
    double mean = 0;
    for (std::size_t k = 0; k < scene.size(); ++k) {
        Point p = H.apply(scene[k]), q = chain.H.apply(scene[k]);
        mean += std::hypot(p[0] - q[0], p[1] - q[1]);
    }
    EXPECT_LT(mean / scene.size(), 0.5);
}

TEST(Homography, IdentityCorrespondences) {
    auto pts = random_points(20, 3);
    Homography H = fit_homography_ransac(pts, pts);
    Homography I;
    for (int q = 0; q < 9; ++q) EXPECT_NEAR(H.h[q], I.h[q], 1e-10);
}

TEST(Homography, KnownHomographyExactPoints) {
    Homography truth = example_homography();
    EXPECT_LT(truth.matrix().jacobiSvd().singularValues()(0) / truth.matrix().jacobiSvd().singularValues()(2), 1e5);
    auto src = random_points(20, 4);
    std::vector<Point> dst;
    for (const auto& p : src) dst.push_back(truth.apply(p));
    EXPECT_LT(max_rel_entry_diff(fit_homography_ransac(src, dst), truth), 1e-6);
}

TEST(Homography, TwentyPercentOutliers) {
    Homography truth = example_homography();
    auto src = random_points(50, 5);
    std::vector<Point> dst;
    for (const auto& p : src) dst.push_back(truth.apply(p));
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> U(20, 80);
    for (int k = 0; k < 10; ++k) dst[k * 5] = {dst[k * 5][0] + U(rng), dst[k * 5][1] - U(rng)};
    EXPECT_LT(max_rel_entry_diff(fit_homography_ransac(src, dst, {1.5, 2000, 7}), truth), 1e-4);
}

TEST(Homography, DeterministicPerSeed) {
    Homography truth = example_homography();
    auto src = random_points(40, 8);
    std::vector<Point> dst;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> N(0, 0.3);
    for (const auto& p : src) {
        auto q = truth.apply(p);
        dst.push_back({q[0] + N(rng), q[1] + N(rng)});
    }
    auto a = fit_homography_ransac(src, dst, {1.5, 2000, 3});
    auto b = fit_homography_ransac(src, dst, {1.5, 2000, 3});
    EXPECT_EQ(a.h, b.h);
}

TEST(Homography, InvariantToHomogeneousScaling) {
    Homography truth = example_homography();
    Homography scaled = truth;
    for (double& v : scaled.h) v *= -3.7;
    auto src = random_points(20, 11);
    std::vector<Point> d1, d2;
    for (const auto& p : src) d1.push_back(truth.apply(p)), d2.push_back(scaled.apply(p));
    EXPECT_LT(max_rel_entry_diff(fit_homography_ransac(src, d1), fit_homography_ransac(src, d2)), 1e-9);
    EXPECT_LT(max_rel_entry_diff(scaled.normalized(), truth), 1e-15);
}

TEST(Homography, TooFewInliersFails) {
    auto src = random_points(20, 12);
    auto dst = random_points(20, 13);
    EXPECT_THROW(fit_homography_ransac(src, dst), NumericError);
    EXPECT_THROW(fit_homography_ransac(std::vector<Point>(3), std::vector<Point>(3)), InputError);
}

TEST(Distortion, ZeroCoefficientsAreIdentity) {
    RadialDistortion D{0, 0, 0, 320, 240, 400};
    for (const auto& p : random_points(20, 14)) {
        EXPECT_EQ(D.apply(p), p);
        EXPECT_EQ(D.undistort(p), p);
    }
}

TEST(Distortion, RoundTripOnGrid) {
    RadialDistortion D{-0.1, 0.01, 0, 320, 240, 400};
    double worst = 0;
    for (int j = 0; j < 10; ++j)
        for (int i = 0; i < 10; ++i) {
            Point p{i * 640.0 / 9, j * 480.0 / 9};
            Point q = D.undistort(D.apply(p));
            worst = std::max(worst, std::hypot(q[0] - p[0], q[1] - p[1]));
        }
    EXPECT_LT(worst, 1e-6);
}

TEST(Distortion, PrincipalPointFixed) {
    RadialDistortion D{0.3, -0.2, 0.05, 101.5, 77.25, 150};
    Point c{101.5, 77.25};
    EXPECT_EQ(D.apply(c), c);
    EXPECT_EQ(D.undistort(c), c);
}

TEST(Distortion, NonInjectiveCoefficientsDetected) {
    RadialDistortion D{-0.9, 0, 0, 0, 0, 100};
    EXPECT_FALSE(D.injective_up_to(200));
    EXPECT_TRUE((RadialDistortion{-0.1, 0.01, 0, 0, 0, 100}).injective_up_to(150));
}

namespace {

struct SyntheticCalibration {
    std::vector<Point> scene, detected;
};

SyntheticCalibration distorted_grid(double k1, double k2, double k3, double extent = 1.0) {
    SyntheticCalibration s;
    Homography H;
    H.h = {1.15 * extent, 0.02 * extent, 30 + (1 - extent) * 250, -0.01 * extent, 1.15 * extent,
           20 + (1 - extent) * 180, 1e-5 * extent, 0, 1};
    RadialDistortion D{k1, k2, k3, 319.5, 239.5, 400};
    s.scene = sensor_grid().centers();
    for (const auto& p : s.scene) s.detected.push_back(D.apply(H.apply(p)));
    return s;
}

}  // namespace

TEST(EstimateDistortion, RecoversKnownCoefficients) {
    auto s = distorted_grid(-0.15, 0.02, 0);
    auto fit = estimate_distortion(s.detected, s.scene, 640, 480);
    EXPECT_NEAR(fit.distortion.k1, -0.15, 0.02 * 0.15);
    EXPECT_NEAR(fit.distortion.k2, 0.02, 0.02 * 0.02);
    EXPECT_NEAR(fit.distortion.k3, 0.0, 0.02 * 0.02);
    EXPECT_LT(fit.rms_residual_px, 0.05);
    EXPECT_EQ(fit.distortion.cx, 319.5);
    EXPECT_EQ(fit.distortion.fn, 400);
}

TEST(EstimateDistortion, NullCase) {
    auto s = distorted_grid(0, 0, 0);
    auto fit = estimate_distortion(s.detected, s.scene, 640, 480);
    EXPECT_LT(std::abs(fit.distortion.k1), 1e-4);
    EXPECT_LT(std::abs(fit.distortion.k2), 1e-4);
    EXPECT_LT(std::abs(fit.distortion.k3), 1e-4);
}

TEST(EstimateDistortion, ConfinedSupportFailsOrWarns) {
    auto s = distorted_grid(-0.15, 0.02, 0, 0.1);
    testutil::LogCapture log;
    bool threw = false;
    try {
        estimate_distortion(s.detected, s.scene, 640, 480);
    } catch (const Error&) {
        threw = true;
    }
    EXPECT_TRUE(threw || !log.warnings.empty());
}

TEST(EstimateDistortion, LargeResidualIsCalibrationFailure) {
    auto s = distorted_grid(-0.15, 0.02, 0);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> N(0, 3.0);
    for (auto& p : s.detected) p = {p[0] + N(rng), p[1] + N(rng)};
    EXPECT_THROW(estimate_distortion(s.detected, s.scene, 640, 480), NumericError);
}

TEST(EstimateScale, ClosedForm) {
    auto pts = random_points(30, 15);
    Point c{250, 250};
    EXPECT_NEAR(estimate_scale(pts, pts, c), 1.0, 1e-15);
    std::vector<Point> scaled;
    for (const auto& p : pts) scaled.push_back({c[0] + (p[0] - c[0]) / 1.02, c[1] + (p[1] - c[1]) / 1.02});
    EXPECT_NEAR(estimate_scale(pts, scaled, c), 1.02, 1e-9);
    EXPECT_THROW(estimate_scale(std::vector<Point>{c}, std::vector<Point>{c}, c), InputError);
}

TEST(EstimateScale, NoisyGrid) {
    auto grid = sensor_grid().centers();
    Point c{260, 200};
    std::mt19937_64 rng(16);
    std::normal_distribution<double> N(0, 0.05);
    std::vector<Point> in_focus, defocus;
    for (const auto& q : grid) {
        defocus.push_back(q);
        in_focus.push_back({c[0] + 1.02 * (q[0] - c[0]) + N(rng), c[1] + 1.02 * (q[1] - c[1]) + N(rng)});
    }
    EXPECT_NEAR(estimate_scale(in_focus, defocus, c), 1.02, 1e-3);
}

namespace {

RegistrationChain identity_chain(int w, int h) {
    RegistrationChain c;
    c.D.cx = (w - 1) / 2.0;
    c.D.cy = (h - 1) / 2.0;
    c.D.fn = 0.5 * std::hypot(w, h);
    c.scales[{0, 0}] = 1.0;
    return c;
}

double oracle_bilinear(const Image& img, double x, double y) {
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto at = [&](int xx, int yy) { return double(img.at(std::min(xx, img.width() - 1), std::min(yy, img.height() - 1))); };
    return (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) + fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
}

}  // namespace

TEST(Warp, IdentityChainIsExact) {
    Image albedo = testutil::random_image(50, 40, 1, 17);
    auto r = warp_to_capture_space(albedo, identity_chain(50, 40), 0, 0);
    EXPECT_EQ(r.image.data(), albedo.data());
    for (float v : r.valid.data()) EXPECT_EQ(v, 1.0f);
}

TEST(Warp, ScaleMatchesAnalyticOracle) {
    Image albedo = testutil::random_image(80, 60, 1, 18);
    auto chain = identity_chain(80, 60);
    chain.scales[{3, 0}] = 1.02;
    auto r = warp_to_capture_space(albedo, chain, 3, 0);
    double worst = 0;
    for (int y = 5; y < 55; ++y)
        for (int x = 5; x < 75; ++x) {
            double px = chain.D.cx + 1.02 * (x - chain.D.cx), py = chain.D.cy + 1.02 * (y - chain.D.cy);
            worst = std::max(worst, std::abs(r.image.at(x, y) - oracle_bilinear(albedo, px, py)));
            EXPECT_EQ(r.valid.at(x, y), 1.0f);
        }
    EXPECT_LT(worst, 1e-6);
    EXPECT_EQ(r.valid.at(0, 0), 0.0f);
}

TEST(Warp, HalfPixelTranslationOfRampIsExact) {
    Image ramp(64, 32, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 64; ++x) ramp.at(x, y) = 0.25f + 0.0078125f * x + 0.00390625f * y;
    auto chain = identity_chain(64, 32);
    chain.H = Homography::translation(10.5, 0);
    auto r = warp_to_capture_space(ramp, chain, 0, 0);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 64; ++x) {
            if (x < 11) {
                EXPECT_EQ(r.valid.at(x, y), 0.0f);
                continue;
            }
            EXPECT_EQ(r.valid.at(x, y), 1.0f);
            EXPECT_NEAR(r.image.at(x, y), 0.25 + 0.0078125 * (x - 10.5) + 0.00390625 * y, 1e-7);
        }
}

TEST(Warp, MissingScaleFails) {
    Image albedo(10, 10, 1);
    EXPECT_THROW(warp_to_capture_space(albedo, identity_chain(10, 10), 1, 0), InputError);
}

TEST(Chain, JsonRoundTripAndProjectInverse) {
    RegistrationChain c;
    c.H.h = {1.1, 0.01, 3, 0.02, 0.9, -4, 1e-5, 2e-5, 1};
    c.D = {-0.08, 0.005, 0.0, 320, 240, 400};
    c.scales[{0, 0}] = 1.0;
    c.scales[{4, 1}] = 1.013;
    auto d = chain_from_json(json::parse(chain_to_json(c).dump()));
    EXPECT_EQ(d.H.h, c.H.h);
    EXPECT_EQ(d.scales, c.scales);
    EXPECT_EQ(d.D.k2, c.D.k2);
    for (const auto& p : random_points(20, 19, 400)) {
        Point x = d.project(p, 4, 1);
        Point back = d.invproj(x, 4, 1);
        EXPECT_NEAR(back[0], p[0], 1e-6);
        EXPECT_NEAR(back[1], p[1], 1e-6);
    }
    json bad = chain_to_json(c);
    bad["extra"] = 1;
    EXPECT_THROW(chain_from_json(bad), InputError);
}

TEST(Chain, SelfConsistentCalibrationFromRenderedDots) {
    RegistrationChain truth;
    truth.H.h = {1.15, 0.02, 30, -0.01, 1.15, 20, 0, 0, 1};
    truth.D = {-0.05, 0.0, 0.0, 319.5, 239.5, 400};
    truth.scales[{0, 0}] = 1.0;
    auto grid = sensor_grid();
    auto fn = [&](double x, double y) { return grid.albedo(x, y); };
    auto fi = [&](double x, double y) { return 1 - grid.albedo(x, y); };
    Image img = render_through_chain(fn, truth, 0, 0, 640, 480);
    Image inv = render_through_chain(fi, truth, 0, 0, 640, 480);
    auto detected = detect_dots(binarize_pair(img, inv), img, 9, 12, 14.0);
    auto scene = grid.centers();
    auto fit = estimate_distortion(detected, scene, 640, 480);
    RegistrationChain est{fit.homography, {{{0, 0}, 1.0}}, fit.distortion};
    for (std::size_t k = 0; k < scene.size(); ++k) {
        Point p = est.project(scene[k], 0, 0);
        EXPECT_LT(std::hypot(p[0] - detected[k][0], p[1] - detected[k][1]), 0.5);
    }
}
