#pragma once

// Keypoint overlays (markers plus 2-sigma covariance ellipses) and
// side-by-side comparison strips.

#include <Eigen/Eigenvalues>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "monkeynet/image_io.hpp"
#include "monkeynet/keypoints.hpp"

namespace monkeynet {

/// Color of keypoint k; a fixed function of k.
inline std::array<double, 3> keypoint_color(std::size_t k) {
    static constexpr double palette[][3] = {{0.90, 0.10, 0.10}, {0.10, 0.70, 0.10}, {0.10, 0.30, 0.95},
                                            {0.95, 0.80, 0.05}, {0.85, 0.10, 0.85}, {0.05, 0.85, 0.85},
                                            {1.00, 0.50, 0.00}, {0.50, 0.25, 0.05}, {0.55, 0.55, 0.55},
                                            {0.00, 0.00, 0.00}, {1.00, 1.00, 1.00}, {0.50, 0.00, 0.50},
                                            {0.00, 0.45, 0.45}, {0.60, 0.80, 0.20}, {0.95, 0.60, 0.70},
                                            {0.25, 0.25, 0.55}};
    const auto& c = palette[k % std::size(palette)];
    return {c[0], c[1], c[2]};
}

/// Semi-axes of the 2-sigma ellipse: eigenvectors of the covariance scaled by
/// 2*sqrt(eigenvalue), major axis first.
inline std::array<std::array<double, 2>, 2> ellipse_axes(const Keypoint& kp) {
    Eigen::Matrix2d S;
    S << kp.sxx, kp.sxy, kp.sxy, kp.syy;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(S);
    std::array<std::array<double, 2>, 2> axes{};
    for (int i = 0; i < 2; ++i) {
        const int j = 1 - i;  // eigenvalues come in ascending order
        const double s = 2.0 * std::sqrt(std::max(0.0, es.eigenvalues()(j)));
        axes[i] = {s * es.eigenvectors()(0, j), s * es.eigenvectors()(1, j)};
    }
    return axes;
}

namespace detail {

inline void put_pixel(Image& img, double x, double y, const std::array<double, 3>& c) {
    const auto xi = static_cast<std::int64_t>(std::lround(x)), yi = static_cast<std::int64_t>(std::lround(y));
    if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return;
    for (int ch = 0; ch < 3; ++ch) img.at(yi, xi, ch) = c[ch];
}

}  // namespace detail

/// Draws every keypoint as a small cross plus its 2-sigma ellipse.
inline Image overlay_keypoints(const Image& frame, const FrameKeypoints& kps) {
    Image out = frame;
    const double sx = 0.5 * static_cast<double>(frame.width - 1), sy = 0.5 * static_cast<double>(frame.height - 1);
    for (std::size_t k = 0; k < kps.size(); ++k) {
        const auto color = keypoint_color(k);
        const double cx = (kps[k].x + 1.0) * sx, cy = (kps[k].y + 1.0) * sy;
        const auto ax = ellipse_axes(kps[k]);
        constexpr int kSteps = 180;
        for (int i = 0; i < kSteps; ++i) {
            const double t = 2.0 * std::numbers::pi * i / kSteps, c = std::cos(t), s = std::sin(t);
            detail::put_pixel(out, cx + (c * ax[0][0] + s * ax[1][0]) * sx, cy + (c * ax[0][1] + s * ax[1][1]) * sy,
                              color);
        }
        for (int d = -2; d <= 2; ++d) {
            detail::put_pixel(out, cx + d, cy, color);
            detail::put_pixel(out, cx, cy + d, color);
        }
    }
    return out;
}

/// Images of equal height placed left to right.
inline Image hstack(const std::vector<const Image*>& parts, std::int64_t gap = 2) {
    detail::require(!parts.empty(), "hstack: nothing to stack");
    const std::int64_t H = parts.front()->height;
    std::int64_t W = gap * static_cast<std::int64_t>(parts.size() - 1);
    for (const auto* p : parts) {
        detail::require(p->height == H, "hstack: heights differ (", p->height, " vs ", H, ")");
        W += p->width;
    }
    Image out(H, W, 1.0);
    std::int64_t x0 = 0;
    for (const auto* p : parts) {
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < p->width; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = p->at(y, x, c);
        x0 += p->width + gap;
    }
    return out;
}

}  // namespace monkeynet
