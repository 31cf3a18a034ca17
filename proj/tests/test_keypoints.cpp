#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "gradcheck.hpp"

using namespace monkeynet;

namespace {

KeypointSet single(double hx, double hy, double sxx, double sxy, double syy) {
    return keypoint_set_from({{Keypoint{hx, hy, sxx, sxy, syy}}});
}

/// Normalizes every map of a stack to unit mass.
Tensor normalized(const Tensor& maps) {
    const std::int64_t P = maps.dim(2) * maps.dim(3), NK = maps.dim(0) * maps.dim(1);
    std::vector<double> v(maps.data().begin(), maps.data().end());
    for (std::int64_t s = 0; s < NK; ++s) {
        const double tot = std::accumulate(v.begin() + s * P, v.begin() + (s + 1) * P, 0.0);
        for (std::int64_t p = 0; p < P; ++p) v[s * P + p] /= tot;
    }
    return Tensor(maps.shape(), std::move(v));
}

double pitch(std::int64_t n) { return 2.0 / static_cast<double>(n - 1); }

KeypointDetector small_detector(std::int64_t K, std::uint64_t seed = 3) {
    Initializer init(seed);
    return KeypointDetector({K, 0.1, {4, 16, 5}, NormMode::Batch}, init);
}

}  // namespace

// ---------------------------------------------------------------------------
// detect

TEST(Detect, MapsSumToOne) {
    auto det = small_detector(3);
    Rng rng(1);
    auto img = gradcheck::uniform(rng, {2, 3, 32, 32}, 0, 1);
    const auto maps = det.detect(img, ForwardContext{false});
    ASSERT_EQ(maps.shape(), (Shape{2, 3, 32, 32}));
    for (int s = 0; s < 6; ++s) {
        double tot = 0;
        for (int p = 0; p < 1024; ++p) {
            EXPECT_GE(maps.data()[s * 1024 + p], 0.0);
            tot += maps.data()[s * 1024 + p];
        }
        EXPECT_NEAR(tot, 1.0, 1e-9);
    }
}

TEST(Detect, DefaultsAndDeterminism) {
    EXPECT_EQ(DetectorConfig{}.num_keypoints, 10);
    EXPECT_DOUBLE_EQ(DetectorConfig{}.temperature, 0.1);
    EXPECT_EQ(UNetWidths{}.base, 32);
    EXPECT_EQ(UNetWidths{}.blocks, 5);
    auto det = small_detector(2);
    Rng rng(2);
    auto img = gradcheck::uniform(rng, {1, 3, 32, 32}, 0, 1);
    const auto a = det.detect(img, ForwardContext{false});
    const auto b = det.detect(img, ForwardContext{false});
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Detect, RejectsSizeNotMultipleOf32) {
    auto det = small_detector(2);
    EXPECT_THROW(det.detect(Tensor::zeros({1, 3, 48, 48}), ForwardContext{false}), std::invalid_argument);
    EXPECT_THROW(det.detect(Tensor::zeros({1, 1, 32, 32}), ForwardContext{false}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// heatmaps_to_keypoints

TEST(HeatmapsToKeypoints, UniformMapGivesCentreAndLatticeVariance) {
    const std::int64_t H = 9, W = 12;
    const auto kp = heatmaps_to_keypoints(Tensor::full({1, 1, H, W}, 1.0 / (H * W)));
    EXPECT_NEAR(kp.mean.data()[0], 0.0, 1e-12);
    EXPECT_NEAR(kp.mean.data()[1], 0.0, 1e-12);
    auto var = [](std::int64_t n) {
        double s = 0;
        for (std::int64_t i = 0; i < n; ++i) s += lattice_coord(i, n) * lattice_coord(i, n);
        return s / static_cast<double>(n);
    };
    EXPECT_NEAR(kp.cov.data()[0], var(W) + kCovarianceEpsilon, 1e-12);
    EXPECT_NEAR(kp.cov.data()[1], 0.0, 1e-12);
    EXPECT_NEAR(kp.cov.data()[2], 0.0, 1e-12);
    EXPECT_NEAR(kp.cov.data()[3], var(H) + kCovarianceEpsilon, 1e-12);
}

TEST(HeatmapsToKeypoints, OneHotGivesLatticePointAndEpsilonCovariance) {
    const std::int64_t H = 8, W = 8;
    auto m = Tensor::zeros({1, 1, H, W});
    m.data()[3 * W + 6] = 1.0;
    const auto kp = heatmaps_to_keypoints(m);
    EXPECT_DOUBLE_EQ(kp.mean.data()[0], lattice_coord(6, W));
    EXPECT_DOUBLE_EQ(kp.mean.data()[1], lattice_coord(3, H));
    EXPECT_DOUBLE_EQ(kp.cov.data()[0], kCovarianceEpsilon);
    EXPECT_DOUBLE_EQ(kp.cov.data()[1], 0.0);
    EXPECT_DOUBLE_EQ(kp.cov.data()[3], kCovarianceEpsilon);
}

TEST(HeatmapsToKeypoints, DiscretizedGaussianMatchesLatticeSum) {
    // Brute-force oracle: a normalized exp(-|p-c|^2 / (2 s^2)) on the lattice.
    const std::int64_t n = 64;
    const double s = 0.2, cx = 0.25, cy = -0.25;
    std::vector<double> v(n * n);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            const double dx = lattice_coord(j, n) - cx, dy = lattice_coord(i, n) - cy;
            v[i * n + j] = std::exp(-(dx * dx + dy * dy) / (2 * s * s));
        }
    const auto kp = heatmaps_to_keypoints(normalized(Tensor({1, 1, n, n}, v)));
    EXPECT_NEAR(kp.mean.data()[0], cx, 1e-3);
    EXPECT_NEAR(kp.mean.data()[1], cy, 1e-3);
    EXPECT_NEAR(kp.cov.data()[0], s * s, 0.05 * s * s);
    EXPECT_NEAR(kp.cov.data()[3], s * s, 0.05 * s * s);
    EXPECT_NEAR(kp.cov.data()[1], 0.0, 1e-4);
}

TEST(HeatmapsToKeypoints, RejectsMasslessMap) {
    EXPECT_THROW(heatmaps_to_keypoints(Tensor::zeros({1, 2, 4, 4})), std::invalid_argument);
}

TEST(HeatmapsToKeypoints, TranslationEquivariance) {
    const std::int64_t n = 32;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const int sx = static_cast<int>(rng.below(9)) - 4, sy = static_cast<int>(rng.below(9)) - 4;
        std::vector<double> a(n * n, 0.0), b(n * n, 0.0);
        for (int i = 10; i < 22; ++i)
            for (int j = 10; j < 22; ++j) {
                const double w = rng.uniform(0, 1);
                a[i * n + j] = w;
                b[(i + sy) * n + (j + sx)] = w;
            }
        const auto ka = heatmaps_to_keypoints(normalized(Tensor({1, 1, n, n}, a)));
        const auto kb = heatmaps_to_keypoints(normalized(Tensor({1, 1, n, n}, b)));
        EXPECT_NEAR(kb.mean.data()[0] - ka.mean.data()[0], sx * pitch(n), 1e-12);
        EXPECT_NEAR(kb.mean.data()[1] - ka.mean.data()[1], sy * pitch(n), 1e-12);
        for (int e = 0; e < 4; ++e) EXPECT_NEAR(kb.cov.data()[e], ka.cov.data()[e], 1e-9);
    }
}

TEST(HeatmapsToKeypoints, CovarianceSymmetricAndPositive) {
    Rng rng(12);
    auto maps = normalized(gradcheck::uniform(rng, {2, 3, 8, 8}, 0, 1));
    const auto kp = heatmaps_to_keypoints(maps);
    for (int s = 0; s < 6; ++s) {
        const double* c = kp.cov.data().data() + s * 4;
        EXPECT_EQ(c[1], c[2]);
        EXPECT_GT(c[0], 0.0);
        EXPECT_GT(c[0] * c[3] - c[1] * c[2], 0.0);
        EXPECT_LE(std::abs(kp.mean.data()[s * 2]), 1.0);
        EXPECT_LE(std::abs(kp.mean.data()[s * 2 + 1]), 1.0);
    }
}

// ---------------------------------------------------------------------------
// keypoints_to_gaussian_maps

TEST(GaussianMaps, PeakIsOneAtLatticeMean) {
    const std::int64_t n = 17;
    const auto m = keypoints_to_gaussian_maps(single(lattice_coord(5, n), lattice_coord(11, n), 0.03, 0.01, 0.05), n, n);
    EXPECT_EQ(m.data()[11 * n + 5], 1.0);
    for (double v : m.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(GaussianMaps, IsotropicLevelSetsAreCircles) {
    const std::int64_t n = 21;  // centre at lattice point 10
    const auto m = keypoints_to_gaussian_maps(single(0, 0, 0.04, 0, 0.04), n, n);
    auto at = [&](int i, int j) { return m.data()[(10 + i) * n + 10 + j]; };
    for (int r = 1; r <= 6; ++r) {
        EXPECT_NEAR(at(r, 0), at(-r, 0), 1e-12);
        EXPECT_NEAR(at(r, 0), at(0, r), 1e-12);
        EXPECT_NEAR(at(r, 0), at(0, -r), 1e-12);
    }
    EXPECT_NEAR(at(3, 4), at(5, 0), 1e-12);  // both at radius 5
    EXPECT_NEAR(at(-4, 3), at(0, -5), 1e-12);
}

TEST(GaussianMaps, RoundTripRecoversMean) {
    const std::int64_t n = 64;
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const double hx = rng.uniform(-0.3, 0.3), hy = rng.uniform(-0.3, 0.3);
        const auto m = keypoints_to_gaussian_maps(single(hx, hy, 0.02, 0.005, 0.03), n, n);
        const auto kp = heatmaps_to_keypoints(normalized(m));
        EXPECT_NEAR(kp.mean.data()[0], hx, 0.5 * pitch(n));
        EXPECT_NEAR(kp.mean.data()[1], hy, 0.5 * pitch(n));
    }
}

TEST(GaussianMaps, RejectsSingularCovariance) {
    EXPECT_THROW(keypoints_to_gaussian_maps(single(0, 0, 0.1, 0.1, 0.1), 8, 8), std::invalid_argument);
    EXPECT_THROW(keypoints_to_gaussian_maps(single(0, 0, 0, 0, 0), 8, 8), std::invalid_argument);
}

TEST(GaussianMaps, RelabelingPermutesMaps) {
    std::vector<Keypoint> kps{{0.1, -0.2, 0.02, 0, 0.03}, {-0.5, 0.4, 0.05, 0.01, 0.02}, {0.6, 0.6, 0.01, 0, 0.01}};
    const std::vector<int> perm{2, 0, 1};
    std::vector<Keypoint> permuted;
    for (int p : perm) permuted.push_back(kps[p]);
    const auto a = keypoints_to_gaussian_maps(keypoint_set_from({kps}), 10, 12);
    const auto b = keypoints_to_gaussian_maps(keypoint_set_from({permuted}), 10, 12);
    for (int k = 0; k < 3; ++k)
        for (int p = 0; p < 120; ++p) EXPECT_EQ(b.data()[k * 120 + p], a.data()[perm[k] * 120 + p]);
}

TEST(GaussianMaps, FixedCovarianceAblation) {
    const auto f = with_fixed_covariance(single(0.3, 0.1, 0.2, 0.05, 0.4));
    EXPECT_EQ(f.mean.data()[0], 0.3);
    EXPECT_EQ(f.cov.data()[0], 0.01);
    EXPECT_EQ(f.cov.data()[1], 0.0);
    EXPECT_EQ(f.cov.data()[3], 0.01);
}

// ---------------------------------------------------------------------------
// heatmap_difference

TEST(HeatmapDifference, IdentityAndAntisymmetry) {
    Rng rng(5);
    auto a = gradcheck::uniform(rng, {1, 2, 6, 6}, 0, 1);
    auto b = gradcheck::uniform(rng, {1, 2, 6, 6}, 0, 1);
    const auto aa = heatmap_difference(a, a);
    for (double v : aa.data()) EXPECT_EQ(v, 0.0);
    const auto ab = heatmap_difference(a, b), ba = heatmap_difference(b, a);
    for (std::int64_t i = 0; i < ab.numel(); ++i) {
        EXPECT_EQ(ab.data()[i], -ba.data()[i]);
        EXPECT_LE(std::abs(ab.data()[i]), 1.0);
    }
    EXPECT_THROW(heatmap_difference(a, Tensor::zeros({1, 2, 6, 5})), std::invalid_argument);
}

TEST(HeatmapDifference, OnePixelDipoleSumsToZero) {
    const std::int64_t n = 64;
    const auto h0 = keypoints_to_gaussian_maps(single(lattice_coord(30, n), lattice_coord(32, n), 0.01, 0, 0.01), n, n);
    const auto h1 = keypoints_to_gaussian_maps(single(lattice_coord(31, n), lattice_coord(32, n), 0.01, 0, 0.01), n, n);
    const auto d = heatmap_difference(h1, h0);
    double tot = 0, pos = 0;
    for (double v : d.data()) {
        tot += v;
        pos = std::max(pos, v);
    }
    EXPECT_NEAR(tot, 0.0, 1e-9);
    EXPECT_GT(pos, 0.01);  // an actual dipole, not an empty map
}

// ---------------------------------------------------------------------------
// track format

TEST(Tracks, RoundTripIsExact) {
    KeypointTrack t(3);
    Rng rng(6);
    for (auto& f : t)
        for (int k = 0; k < 4; ++k)
            f.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(-1, 1), 1.0 / 3.0});
    std::stringstream ss;
    write_tracks(ss, t);
    const auto back = read_tracks(ss);
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_EQ(back[f][k].x, t[f][k].x);
            EXPECT_EQ(back[f][k].y, t[f][k].y);
            EXPECT_EQ(back[f][k].sxx, t[f][k].sxx);
            EXPECT_EQ(back[f][k].sxy, t[f][k].sxy);
            EXPECT_EQ(back[f][k].syy, t[f][k].syy);
        }
    std::stringstream bad("0 0 1 2 3\n");
    EXPECT_THROW(read_tracks(bad), std::invalid_argument);
}

TEST(Tracks, SetConversionRoundTrip) {
    std::vector<FrameKeypoints> samples{{{0.1, 0.2, 0.3, 0.04, 0.5}}, {{-0.1, -0.2, 0.03, -0.01, 0.05}}};
    const auto set = keypoint_set_from(samples);
    EXPECT_EQ(set.mean.shape(), (Shape{2, 1, 2}));
    const auto back = keypoints_of_sample(set, 1);
    EXPECT_EQ(back[0].x, -0.1);
    EXPECT_EQ(back[0].sxy, -0.01);
    EXPECT_EQ(set.cov.data()[4 + 2], -0.01);  // symmetric off-diagonal
}
