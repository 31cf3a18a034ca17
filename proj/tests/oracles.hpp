#pragma once

// Independent oracles shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "monkeynet/dense_motion.hpp"
#include "monkeynet/random.hpp"

namespace oracles {

using monkeynet::Rng;
using monkeynet::Tensor;

// ---------------------------------------------------------------------------
// Render / fit round trip

struct RoundTripResult {
    double max_mean_err_px = 0;  // worst |h_hat - h| in pixel pitches
    double max_cov_rel_err = 0;  // worst entry error relative to the largest entry of the true covariance
    int trials = 0;
};

/// Renders (h, S) with the peak-normalized Gaussian, normalizes it to unit
/// mass and fits it again. The rendered map exp(-(p-h)^T S^-1 (p-h)) has
/// second moment S/2, so the recovered covariance is 2 (fit - eps I).
/// Eigenvalues of S are drawn in [lo, hi]; h is drawn so that the 2-sigma
/// ellipse of S lies inside the central 80% of the lattice.
inline RoundTripResult render_fit_round_trip(int trials, std::uint64_t seed, std::int64_t n = 64, double lo = 0.01,
                                             double hi = 0.1) {
    using namespace monkeynet;
    Rng rng(seed);
    RoundTripResult r;
    const double pitch = 2.0 / static_cast<double>(n - 1);
    for (int t = 0; t < trials; ++t) {
        const double l1 = rng.uniform(lo, hi), l2 = rng.uniform(lo, hi), th = rng.uniform(0, std::numbers::pi);
        const double c = std::cos(th), s = std::sin(th);
        const double sxx = c * c * l1 + s * s * l2, syy = s * s * l1 + c * c * l2, sxy = c * s * (l1 - l2);
        const double rx = 0.8 - 2.0 * std::sqrt(sxx), ry = 0.8 - 2.0 * std::sqrt(syy);
        const double hx = rng.uniform(-rx, rx), hy = rng.uniform(-ry, ry);

        const auto maps = keypoints_to_gaussian_maps(keypoint_set_from({{Keypoint{hx, hy, sxx, sxy, syy}}}), n, n);
        std::vector<double> v(maps.data().begin(), maps.data().end());
        double tot = 0;
        for (double x : v) tot += x;
        for (double& x : v) x /= tot;
        const auto kp = heatmaps_to_keypoints(Tensor({1, 1, n, n}, std::move(v)));

        const double* m = kp.mean.data().data();
        const double* f = kp.cov.data().data();
        r.max_mean_err_px = std::max({r.max_mean_err_px, std::abs(m[0] - hx) / pitch, std::abs(m[1] - hy) / pitch});
        const double est[3] = {2 * (f[0] - kCovarianceEpsilon), 2 * f[1], 2 * (f[3] - kCovarianceEpsilon)};
        const double ref[3] = {sxx, sxy, syy};
        const double scale = std::max({std::abs(sxx), std::abs(sxy), std::abs(syy)});
        for (int e = 0; e < 3; ++e) r.max_cov_rel_err = std::max(r.max_cov_rel_err, std::abs(est[e] - ref[e]) / scale);
        ++r.trials;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Piecewise-translation flow oracle

struct FlowOracleResult {
    double l1_outside_band = 0;  // mean |warped - target| away from part boundaries
    std::int64_t pixels = 0;     // pixels that entered the mean
};

/// Splits a random image into vertical strips, one per part, translates each
/// strip by an integer pixel offset (built by direct indexing, clamped at the
/// border), composes the flow from one-hot masks and the matching
/// displacements with zero residual, and warps the source with it. Columns
/// within `band` pixels of a strip boundary are excluded.
inline FlowOracleResult piecewise_translation(std::uint64_t seed, std::int64_t H = 32, std::int64_t W = 32,
                                              int parts = 3, int band = 2) {
    using namespace monkeynet;
    Rng rng(seed);
    std::vector<double> src(static_cast<std::size_t>(3 * H * W));
    for (auto& v : src) v = rng.uniform(0, 1);

    std::vector<int> ox(parts), oy(parts);
    for (int k = 0; k < parts; ++k) {
        ox[k] = static_cast<int>(rng.below(7)) - 3;
        oy[k] = static_cast<int>(rng.below(7)) - 3;
    }
    auto part_of = [&](std::int64_t j) { return static_cast<int>(j * parts / W); };

    // Target: pixel p shows the source at p + o_k (backward map).
    std::vector<double> target(src.size());
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                const int k = part_of(j);
                const auto si = std::clamp<std::int64_t>(i + oy[k], 0, H - 1);
                const auto sj = std::clamp<std::int64_t>(j + ox[k], 0, W - 1);
                target[(c * H + i) * W + j] = src[(c * H + si) * W + sj];
            }

    // One-hot masks (background channel empty) and pixel offsets in normalized units.
    std::vector<double> masks(static_cast<std::size_t>((parts + 1) * H * W), 0.0), disp;
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) masks[(part_of(j) * H + i) * W + j] = 1.0;
    for (int k = 0; k < parts; ++k)
        disp.insert(disp.end(), {ox[k] * 2.0 / static_cast<double>(W - 1), oy[k] * 2.0 / static_cast<double>(H - 1)});

    const auto flow = compose_flow(Tensor({1, parts + 1, H, W}, masks), Tensor({1, parts, 2}, disp),
                                   Tensor::zeros({1, H, W, 2}));
    const auto warped = warp(Tensor({1, 3, H, W}, src), flow);

    FlowOracleResult r;
    double sum = 0;
    for (std::int64_t j = 0; j < W; ++j) {
        bool near_boundary = false;
        for (int d = -band; d <= band; ++d) {
            const auto jj = j + d;
            if (jj >= 0 && jj < W && part_of(jj) != part_of(j)) near_boundary = true;
        }
        if (near_boundary) continue;
        for (int c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < H; ++i) {
                const auto idx = (c * H + i) * W + j;
                sum += std::abs(warped.data()[idx] - target[idx]);
                ++r.pixels;
            }
    }
    r.l1_outside_band = r.pixels ? sum / static_cast<double>(r.pixels) : 0.0;
    return r;
}

}  // namespace oracles
