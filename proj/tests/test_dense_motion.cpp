#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace monkeynet;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor vectors(std::vector<double> v) {
    const auto n = static_cast<std::int64_t>(v.size() / 2);
    return Tensor({n, 2}, std::move(v));
}

MotionNetwork small_motion(std::int64_t K, bool appearance = true, std::uint64_t seed = 5) {
    Initializer init(seed);
    return MotionNetwork({K, {4, 16, 5}, NormMode::Batch, appearance}, init);
}

}  // namespace

// ---------------------------------------------------------------------------
// broadcast_vector

TEST(BroadcastVector, ConstantField) {
    const auto z = broadcast_vector(vectors({0, 0}), 4, 5);
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
    const auto f = broadcast_vector(vectors({0.1, -0.2}), 3, 7);
    ASSERT_EQ(f.shape(), (Shape{1, 3, 7, 2}));
    double sx = 0, sy = 0;
    for (std::int64_t p = 0; p < 21; ++p) {
        EXPECT_EQ(f.data()[p * 2], 0.1);
        EXPECT_EQ(f.data()[p * 2 + 1], -0.2);
        sx += f.data()[p * 2];
        sy += f.data()[p * 2 + 1];
    }
    EXPECT_NEAR(sx, 21 * 0.1, 1e-12);
    EXPECT_NEAR(sy, 21 * -0.2, 1e-12);
    EXPECT_THROW(broadcast_vector(Tensor::zeros({1, 3}), 2, 2), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// locally_aligned_inputs

TEST(LocallyAligned, ZeroDisplacementIsExactCopy) {
    Rng rng(1);
    auto x = gradcheck::uniform(rng, {2, 3, 8, 8}, 0, 1);
    const auto out = locally_aligned_inputs(x, Tensor::zeros({2, 4, 2}));
    ASSERT_EQ(out.size(), 4u);
    for (const auto& o : out) EXPECT_EQ(vec(o), vec(x));
}

TEST(LocallyAligned, IntegerPitchIsIntegerShift) {
    Rng rng(2);
    const std::int64_t n = 16;
    auto x = gradcheck::uniform(rng, {1, 3, n, n}, 0, 1);
    const double p = 2.0 / (n - 1);
    const auto out = locally_aligned_inputs(x, Tensor({1, 2, 2}, {2 * p, -p, -3 * p, 0}));
    ASSERT_EQ(out.size(), 2u);
    const int sx[2] = {2, -3}, sy[2] = {-1, 0};
    for (int k = 0; k < 2; ++k)
        for (int c = 0; c < 3; ++c)
            for (int i = 3; i < n - 3; ++i)
                for (int j = 3; j < n - 3; ++j)
                    EXPECT_NEAR(out[k].data()[(c * n + i) * n + j], x.data()[(c * n + i + sy[k]) * n + j + sx[k]], 1e-9);
}

// ---------------------------------------------------------------------------
// motion network

TEST(MotionNetwork, MasksArePartitionOfUnity) {
    const std::int64_t K = 3, n = 32;
    auto net = small_motion(K);
    Rng rng(3);
    auto x = gradcheck::uniform(rng, {2, 3, n, n}, 0, 1);
    auto hd = gradcheck::uniform(rng, {2, K, n, n}, -1, 1);
    auto d = gradcheck::uniform(rng, {2, K, 2}, -0.2, 0.2);
    const auto out = net(hd, x, locally_aligned_inputs(x, d), ForwardContext{true});
    ASSERT_EQ(out.masks.shape(), (Shape{2, K + 1, n, n}));
    ASSERT_EQ(out.residual.shape(), (Shape{2, n, n, 2}));
    for (int s = 0; s < 2; ++s)
        for (int p = 0; p < n * n; ++p) {
            double tot = 0;
            for (int k = 0; k <= K; ++k) {
                const double m = out.masks.data()[(s * (K + 1) + k) * n * n + p];
                EXPECT_GE(m, 0.0);
                EXPECT_LE(m, 1.0);
                tot += m;
            }
            EXPECT_NEAR(tot, 1.0, 1e-9);
        }
    // Zero-initialized residual head.
    for (double v : out.residual.data()) EXPECT_EQ(v, 0.0);
}

TEST(MotionNetwork, InputChannelArithmetic) {
    EXPECT_EQ((MotionConfig{10, {}, NormMode::Batch, true}.input_channels()), 10 + 30 + 3);
    EXPECT_EQ((MotionConfig{4, {}, NormMode::Batch, true}.input_channels()), 19);
    EXPECT_EQ((MotionConfig{4, {}, NormMode::Batch, false}.input_channels()), 4);
}

TEST(MotionNetwork, RejectsChannelMismatch) {
    auto net = small_motion(3);
    const auto x = Tensor::zeros({1, 3, 32, 32});
    const auto aligned = locally_aligned_inputs(x, Tensor::zeros({1, 2, 2}));
    EXPECT_THROW(net(Tensor::zeros({1, 2, 32, 32}), x, aligned, ForwardContext{false}), std::invalid_argument);
    auto heat_only = small_motion(3, false);
    EXPECT_THROW(heat_only(Tensor::zeros({1, 4, 32, 32}), x, {}, ForwardContext{false}), std::invalid_argument);
}

TEST(MotionNetwork, DeterministicUnderFixedSeed) {
    Rng rng(4);
    auto x = gradcheck::uniform(rng, {1, 3, 32, 32}, 0, 1);
    auto hd = gradcheck::uniform(rng, {1, 2, 32, 32}, -1, 1);
    const auto aligned = locally_aligned_inputs(x, Tensor::zeros({1, 2, 2}));
    auto a = small_motion(2, true, 9), b = small_motion(2, true, 9);
    EXPECT_EQ(vec(a(hd, x, aligned, ForwardContext{false}).masks), vec(b(hd, x, aligned, ForwardContext{false}).masks));
}

// ---------------------------------------------------------------------------
// compose_flow

TEST(ComposeFlow, BackgroundOnlyGivesZeroFlow) {
    std::vector<double> m(3 * 16, 0.0);
    for (int p = 0; p < 16; ++p) m[2 * 16 + p] = 1.0;
    const auto f = compose_flow(Tensor({1, 3, 4, 4}, m), Tensor({1, 2, 2}, {0.3, 0.1, -0.5, 0.2}),
                                Tensor::zeros({1, 4, 4, 2}));
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(ComposeFlow, SingleFullMaskGivesConstantField) {
    std::vector<double> m(2 * 16, 0.0);
    for (int p = 0; p < 16; ++p) m[p] = 1.0;
    const auto f = compose_flow(Tensor({1, 2, 4, 4}, m), Tensor({1, 1, 2}, {0.1, 0.0}));
    for (int p = 0; p < 16; ++p) {
        EXPECT_EQ(f.data()[p * 2], 0.1);
        EXPECT_EQ(f.data()[p * 2 + 1], 0.0);
    }
}

TEST(ComposeFlow, HalfPlaneMasksMatchPerPixelSum) {
    Rng rng(6);
    const std::int64_t H = 6, W = 8, K = 2;
    std::vector<double> m((K + 1) * H * W, 0.0), d{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                                                  rng.uniform(-1, 1)};
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) m[((j < W / 2 ? 0 : 1) * H + i) * W + j] = 1.0;
    auto res = gradcheck::uniform(rng, {1, H, W, 2}, -0.1, 0.1);
    const auto f = compose_flow(Tensor({1, K + 1, H, W}, m), Tensor({1, K, 2}, d), res);
    for (std::int64_t p = 0; p < H * W; ++p)
        for (int c = 0; c < 2; ++c) {
            double expect = res.data()[p * 2 + c];
            for (std::int64_t k = 0; k < K; ++k) expect += m[k * H * W + p] * d[k * 2 + c];
            EXPECT_NEAR(f.data()[p * 2 + c], expect, 1e-15);
        }
}

TEST(ComposeFlow, LinearInDisplacements) {
    Rng rng(7);
    auto m = softmax_channels(gradcheck::uniform(rng, {2, 4, 5, 5}, -2, 2));
    auto d = gradcheck::uniform(rng, {2, 3, 2}, -0.5, 0.5);
    const double a = -1.7;
    const auto f = compose_flow(m, d), fa = compose_flow(m, scale(d, a));
    for (std::int64_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(fa.data()[i], a * f.data()[i], 1e-14);
}

TEST(ComposeFlow, RejectsCountMismatch) {
    EXPECT_THROW(compose_flow(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 2})), std::invalid_argument);
    EXPECT_THROW(compose_flow(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 4, 3, 2})),
                 std::invalid_argument);
}

TEST(ComposeFlow, ZeroMotionFixpoint) {
    Rng rng(8);
    auto m = softmax_channels(gradcheck::uniform(rng, {1, 5, 9, 11}, -2, 2));
    const auto f = compose_flow(m, Tensor::zeros({1, 4, 2}), Tensor::zeros({1, 9, 11, 2}));
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
    const auto grid = add(identity_grid<double>(1, 9, 11), f);
    EXPECT_EQ(vec(grid), vec(identity_grid<double>(1, 9, 11)));
    auto x = gradcheck::uniform(rng, {1, 3, 9, 11}, 0, 1);
    EXPECT_EQ(vec(warp(x, f)), vec(x));
}

TEST(ComposeFlow, OneHotPiecewiseTranslationOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto r = oracles::piecewise_translation(seed);
        EXPECT_GT(r.pixels, 0);
        EXPECT_LT(r.l1_outside_band, 1e-6) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// debug dumps

TEST(FlowDump, FloHeaderAndPixelUnits) {
    const auto path = (std::filesystem::temp_directory_path() / "monkeynet_test.flo").string();
    const double p = 2.0 / 7.0;
    write_flo(path, broadcast_vector(vectors({p, -2 * p}), 4, 8));
    std::ifstream is(path, std::ios::binary);
    float tag = 0, v[2];
    std::int32_t w = 0, h = 0;
    is.read(reinterpret_cast<char*>(&tag), 4);
    is.read(reinterpret_cast<char*>(&w), 4);
    is.read(reinterpret_cast<char*>(&h), 4);
    is.read(reinterpret_cast<char*>(v), 8);
    EXPECT_EQ(tag, 202021.25f);
    EXPECT_EQ(w, 8);
    EXPECT_EQ(h, 4);
    EXPECT_NEAR(v[0], 1.0f, 1e-6);
    EXPECT_NEAR(v[1], -2.0f * 3.0f / 7.0f, 1e-6);
    std::filesystem::remove(path);
}

TEST(FlowDump, ColorWheelZeroFlowIsWhite) {
    const auto img = flow_to_color(Tensor::zeros({1, 3, 3, 2}));
    for (double v : img.pixels) EXPECT_EQ(v, 1.0);
}
