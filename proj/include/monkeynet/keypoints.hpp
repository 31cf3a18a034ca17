#pragma once

// Unsupervised keypoint detector: a U-Net emits K confidence maps (spatial
// softmax at low temperature), each map is summarized by its mean and
// covariance over the lattice, and keypoints are re-rendered as peak-normalized
// Gaussian maps for the downstream networks.

#include <array>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "monkeynet/layers.hpp"

namespace monkeynet {

/// K keypoints per sample: mean [N,K,2] as (x, y), covariance [N,K,2,2].
struct KeypointSet {
    Tensor mean;
    Tensor cov;

    std::int64_t batch() const { return mean.dim(0); }
    std::int64_t count() const { return mean.dim(1); }
};

/// One keypoint as the five numbers exported in track files.
struct Keypoint {
    double x = 0, y = 0;
    double sxx = 0, sxy = 0, syy = 0;
};
using FrameKeypoints = std::vector<Keypoint>;
using KeypointTrack = std::vector<FrameKeypoints>;  // [frame][k]

inline constexpr double kCovarianceEpsilon = 1e-4;
inline constexpr double kFixedSigma = 0.01;

/// Fused mean/covariance fit of each map: [N,K,H,W] -> [N,K,6] laid out as
/// (h_x, h_y, S_xx, S_xy, S_yx, S_yy). Differentiable w.r.t. the maps.
inline Tensor gaussian_fit(const Tensor& stack) {
    detail::require_rank4(stack.shape(), "heatmaps_to_keypoints");
    const std::int64_t NK = stack.dim(0) * stack.dim(1), H = stack.dim(2), W = stack.dim(3), P = H * W;
    std::vector<double> px(P), py(P);
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            px[i * W + j] = lattice_coord(j, W);
            py[i * W + j] = lattice_coord(i, H);
        }
    std::vector<double> out(static_cast<std::size_t>(NK * 6));
    std::vector<double> mass(NK);
    const double* hd = stack.data().data();
    for (std::int64_t s = 0; s < NK; ++s) {
        const double* m = hd + s * P;
        double S = 0, hx = 0, hy = 0;
        for (std::int64_t p = 0; p < P; ++p) {
            S += m[p];
            hx += m[p] * px[p];
            hy += m[p] * py[p];
        }
        detail::require(S > 0.0, "heatmaps_to_keypoints: map ", s, " has non-positive total mass ", S);
        double sxx = 0, sxy = 0, syy = 0;
        for (std::int64_t p = 0; p < P; ++p) {
            const double ux = px[p] - hx, uy = py[p] - hy;
            sxx += m[p] * ux * ux;
            sxy += m[p] * ux * uy;
            syy += m[p] * uy * uy;
        }
        mass[s] = S;
        double* o = out.data() + s * 6;
        o[0] = hx;
        o[1] = hy;
        o[2] = sxx;
        o[3] = sxy;
        o[4] = sxy;
        o[5] = syy;
    }
    auto sn = stack.node();
    return make_result<double>(
        Shape{stack.dim(0), stack.dim(1), 6}, std::move(out), {sn},
        [sn, NK, P, px = std::move(px), py = std::move(py), mass = std::move(mass)](Node<double>& self) {
            double* g = detail::grad_of(sn);
            if (!g) return;
            for (std::int64_t s = 0; s < NK; ++s) {
                const double* o = self.data.data() + s * 6;
                const double* go = self.grad.data() + s * 6;
                const double hx = o[0], hy = o[1];
                // v = sum_p H_p (p - h) = (1 - S) h
                const double vx = (1.0 - mass[s]) * hx, vy = (1.0 - mass[s]) * hy;
                const double gxx = go[2], gxy = go[3], gyx = go[4], gyy = go[5];
                for (std::int64_t p = 0; p < P; ++p) {
                    const double qx = px[p], qy = py[p];
                    const double ux = qx - hx, uy = qy - hy;
                    double d = go[0] * qx + go[1] * qy;
                    d += gxx * (ux * ux - 2.0 * qx * vx);
                    d += gxy * (ux * uy - qx * vy - vx * qy);
                    d += gyx * (uy * ux - qy * vx - vy * qx);
                    d += gyy * (uy * uy - 2.0 * qy * vy);
                    g[s * P + p] += d;
                }
            }
        });
}

/// Mean and covariance of each confidence map, with eps * I added to the
/// covariance so it stays invertible for near-delta maps.
inline KeypointSet heatmaps_to_keypoints(const Tensor& stack, double eps = kCovarianceEpsilon) {
    const auto N = stack.dim(0), K = stack.dim(1);
    auto fit = gaussian_fit(stack);
    auto mean = slice(fit, 2, 0, 2);
    auto cov = reshape(slice(fit, 2, 2, 4), {N, K, 2, 2});
    std::vector<double> reg(static_cast<std::size_t>(N * K * 4), 0.0);
    for (std::int64_t i = 0; i < N * K; ++i) {
        reg[i * 4] = eps;
        reg[i * 4 + 3] = eps;
    }
    return {mean, add(cov, Tensor({N, K, 2, 2}, std::move(reg)))};
}

/// Replaces every covariance by value * I (the fixed-variance ablation).
inline KeypointSet with_fixed_covariance(const KeypointSet& kps, double value = kFixedSigma) {
    const auto N = kps.batch(), K = kps.count();
    std::vector<double> c(static_cast<std::size_t>(N * K * 4), 0.0);
    for (std::int64_t i = 0; i < N * K; ++i) {
        c[i * 4] = value;
        c[i * 4 + 3] = value;
    }
    return {kps.mean, Tensor({N, K, 2, 2}, std::move(c))};
}

/// H_k(p) = exp(-(p - h_k)^T S_k^-1 (p - h_k)), peak value 1 at p = h_k.
/// Differentiable w.r.t. means and covariances.
inline Tensor keypoints_to_gaussian_maps(const KeypointSet& kps, std::int64_t H, std::int64_t W) {
    detail::require(kps.mean.ndim() == 3 && kps.mean.dim(2) == 2,
                    "keypoints_to_gaussian_maps: mean must be [N,K,2], got ", shape_str(kps.mean.shape()));
    detail::require(kps.cov.shape() == Shape{kps.mean.dim(0), kps.mean.dim(1), 2, 2},
                    "keypoints_to_gaussian_maps: covariance must be [N,K,2,2], got ",
                    shape_str(kps.cov.shape()));
    const std::int64_t NK = kps.batch() * kps.count(), P = H * W;
    std::vector<std::array<double, 4>> inv(NK);
    const double* md = kps.mean.data().data();
    const double* cd = kps.cov.data().data();
    for (std::int64_t s = 0; s < NK; ++s) {
        const double a = cd[s * 4], b = cd[s * 4 + 1], c = cd[s * 4 + 2], d = cd[s * 4 + 3];
        const double det = a * d - b * c;
        detail::require(det > 0.0 && a > 0.0, "keypoints_to_gaussian_maps: covariance ", s,
                        " is singular or not positive definite (det ", det, ")");
        inv[s] = {d / det, -b / det, -c / det, a / det};
    }
    std::vector<double> out(static_cast<std::size_t>(NK * P));
    for (std::int64_t s = 0; s < NK; ++s) {
        const auto& A = inv[s];
        const double hx = md[s * 2], hy = md[s * 2 + 1];
        for (std::int64_t i = 0; i < H; ++i) {
            const double uy = lattice_coord(i, H) - hy;
            for (std::int64_t j = 0; j < W; ++j) {
                const double ux = lattice_coord(j, W) - hx;
                const double q = ux * (A[0] * ux + A[1] * uy) + uy * (A[2] * ux + A[3] * uy);
                out[s * P + i * W + j] = std::exp(-q);
            }
        }
    }
    auto mn = kps.mean.node(), cn = kps.cov.node();
    return make_result<double>(
        Shape{kps.batch(), kps.count(), H, W}, std::move(out), {mn, cn},
        [mn, cn, NK, H, W, P, inv = std::move(inv)](Node<double>& self) {
            double* gm = detail::grad_of(mn);
            double* gc = detail::grad_of(cn);
            for (std::int64_t s = 0; s < NK; ++s) {
                const auto& A = inv[s];
                const double hx = mn->data[s * 2], hy = mn->data[s * 2 + 1];
                double dhx = 0, dhy = 0, d00 = 0, d01 = 0, d10 = 0, d11 = 0;
                for (std::int64_t i = 0; i < H; ++i) {
                    const double uy = lattice_coord(i, H) - hy;
                    for (std::int64_t j = 0; j < W; ++j) {
                        const double ux = lattice_coord(j, W) - hx;
                        const double gv = self.grad[s * P + i * W + j] * self.data[s * P + i * W + j];
                        if (gv == 0.0) continue;
                        // (A + A^T) u
                        dhx += gv * ((2 * A[0]) * ux + (A[1] + A[2]) * uy);
                        dhy += gv * ((A[1] + A[2]) * ux + (2 * A[3]) * uy);
                        // A^T u u^T A^T
                        const double ax = A[0] * ux + A[2] * uy;  // (A^T u)_x
                        const double ay = A[1] * ux + A[3] * uy;  // (A^T u)_y
                        const double bx = ux * A[0] + uy * A[1];  // (u^T A^T)_x = (A u)_x
                        const double by = ux * A[2] + uy * A[3];
                        d00 += gv * ax * bx;
                        d01 += gv * ax * by;
                        d10 += gv * ay * bx;
                        d11 += gv * ay * by;
                    }
                }
                if (gm) {
                    gm[s * 2] += dhx;
                    gm[s * 2 + 1] += dhy;
                }
                if (gc) {
                    gc[s * 4] += d00;
                    gc[s * 4 + 1] += d01;
                    gc[s * 4 + 2] += d10;
                    gc[s * 4 + 3] += d11;
                }
            }
        });
}

/// H' - H; the compact motion code consumed by the generator and motion network.
inline Tensor heatmap_difference(const Tensor& driving, const Tensor& source) {
    detail::require(driving.shape() == source.shape(), "heatmap_difference: shape mismatch ",
                    shape_str(driving.shape()), " vs ", shape_str(source.shape()));
    return sub(driving, source);
}

struct DetectorConfig {
    std::int64_t num_keypoints = 10;
    double temperature = 0.1;
    UNetWidths widths;
    NormMode norm = NormMode::Batch;
};

class KeypointDetector {
public:
    KeypointDetector() = default;
    KeypointDetector(const DetectorConfig& cfg, Initializer& init)
        : cfg_(cfg), unet_(3, cfg.widths, cfg.norm, init), head_(unet_.out_channels(), cfg.num_keypoints, 3, init) {
        detail::require(cfg.num_keypoints >= 1, "KeypointDetector: K must be >= 1");
        detail::require(cfg.temperature > 0, "KeypointDetector: temperature must be positive");
    }

    /// [N,3,H,W] image batch -> [N,K,H,W] confidence maps, each summing to 1.
    Tensor detect(const Tensor& images, const ForwardContext& ctx) {
        detail::require(images.ndim() == 4 && images.dim(1) == 3, "detect: expected [N,3,H,W] images, got ",
                        shape_str(images.shape()));
        return softmax_spatial(head_(unet_(images, ctx)), cfg_.temperature);
    }

    KeypointSet operator()(const Tensor& images, const ForwardContext& ctx) {
        return heatmaps_to_keypoints(detect(images, ctx));
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        unet_.collect(prefix + ".unet", reg);
        head_.collect(prefix + ".head", reg);
    }

    const DetectorConfig& config() const { return cfg_; }

private:
    DetectorConfig cfg_;
    UNet unet_;
    Conv2d head_;
};

// ---------------------------------------------------------------------------
// Plain-data conversions and the five-number track format

inline FrameKeypoints keypoints_of_sample(const KeypointSet& kps, std::int64_t n) {
    FrameKeypoints out(static_cast<std::size_t>(kps.count()));
    const auto m = kps.mean.data();
    const auto c = kps.cov.data();
    for (std::int64_t k = 0; k < kps.count(); ++k) {
        const std::int64_t s = n * kps.count() + k;
        out[k] = {m[s * 2], m[s * 2 + 1], c[s * 4], c[s * 4 + 1], c[s * 4 + 3]};
    }
    return out;
}

/// Stacks per-sample keypoints into a constant (non-differentiable) set.
inline KeypointSet keypoint_set_from(const std::vector<FrameKeypoints>& samples) {
    detail::require(!samples.empty(), "keypoint_set_from: no samples");
    const auto N = static_cast<std::int64_t>(samples.size());
    const auto K = static_cast<std::int64_t>(samples.front().size());
    std::vector<double> m, c;
    for (const auto& f : samples) {
        detail::require(static_cast<std::int64_t>(f.size()) == K, "keypoint_set_from: K mismatch");
        for (const auto& kp : f) {
            m.insert(m.end(), {kp.x, kp.y});
            c.insert(c.end(), {kp.sxx, kp.sxy, kp.sxy, kp.syy});
        }
    }
    return {Tensor({N, K, 2}, std::move(m)), Tensor({N, K, 2, 2}, std::move(c))};
}

inline void write_tracks(std::ostream& os, const KeypointTrack& track) {
    os << "# frame k h_x h_y sigma_xx sigma_xy sigma_yy\n";
    char buf[256];
    for (std::size_t f = 0; f < track.size(); ++f)
        for (std::size_t k = 0; k < track[f].size(); ++k) {
            const auto& p = track[f][k];
            std::snprintf(buf, sizeof(buf), "%zu %zu %.17g %.17g %.17g %.17g %.17g\n", f, k, p.x, p.y, p.sxx,
                          p.sxy, p.syy);
            os << buf;
        }
}

inline KeypointTrack read_tracks(std::istream& is) {
    KeypointTrack track;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::size_t f = 0, k = 0;
        Keypoint p;
        if (!(ls >> f >> k >> p.x >> p.y >> p.sxx >> p.sxy >> p.syy))
            detail::fail("read_tracks: malformed row '", line, "'");
        if (track.size() <= f) track.resize(f + 1);
        if (track[f].size() <= k) track[f].resize(k + 1);
        track[f][k] = p;
    }
    return track;
}

}  // namespace monkeynet
