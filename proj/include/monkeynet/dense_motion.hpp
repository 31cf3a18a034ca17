#pragma once

// Sparse-to-dense motion. Every keypoint pair implies a constant
// displacement; a U-Net predicts soft part masks (K keypoint parts plus one
// static background) and a residual flow, and the dense backward flow is the
// mask-weighted sum of displacements plus that residual.
//
// Flow convention: F is aligned with the driving frame. Output pixel p samples
// the source at p + F(p), so the displacement of keypoint k is
// d_k = h_k(source) - h_k(driving).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "monkeynet/image_io.hpp"
#include "monkeynet/keypoints.hpp"

namespace monkeynet {

/// [N,K,2] per-keypoint displacement implied by a source/driving pair.
inline Tensor keypoint_displacements(const KeypointSet& source, const KeypointSet& driving) {
    detail::require(source.mean.shape() == driving.mean.shape(), "keypoint_displacements: K mismatch ",
                    shape_str(source.mean.shape()), " vs ", shape_str(driving.mean.shape()));
    return sub(source.mean, driving.mean);
}

/// x_k: the source translated globally by d_k, one image per keypoint.
inline std::vector<Tensor> locally_aligned_inputs(const Tensor& x, const Tensor& displacements) {
    detail::require(x.ndim() == 4, "locally_aligned_inputs: expected [N,C,H,W]");
    detail::require(displacements.ndim() == 3 && displacements.dim(0) == x.dim(0) && displacements.dim(2) == 2,
                    "locally_aligned_inputs: displacements must be [N,K,2], got ",
                    shape_str(displacements.shape()));
    std::vector<Tensor> out;
    const std::int64_t N = x.dim(0), K = displacements.dim(1);
    for (std::int64_t k = 0; k < K; ++k) {
        auto d = reshape(slice(displacements, 1, k, 1), {N, 2});
        out.push_back(warp(x, broadcast_vector(d, x.dim(2), x.dim(3))));
    }
    return out;
}

/// F_coarse = sum_k M_k * rho(d_k) over K+1 masks, the last one with zero
/// displacement; then F = F_coarse + residual. `residual` may be undefined.
inline Tensor compose_flow(const Tensor& masks, const Tensor& displacements, const Tensor& residual = {}) {
    detail::require_rank4(masks.shape(), "compose_flow");
    detail::require(displacements.ndim() == 3 && displacements.dim(2) == 2 &&
                        displacements.dim(0) == masks.dim(0),
                    "compose_flow: displacements must be [N,K,2], got ", shape_str(displacements.shape()));
    const std::int64_t N = masks.dim(0), K = displacements.dim(1), H = masks.dim(2), W = masks.dim(3), P = H * W;
    detail::require(masks.dim(1) == K + 1, "compose_flow: expected ", K + 1, " masks for ", K,
                    " displacements, got ", masks.dim(1));
    std::vector<double> out(static_cast<std::size_t>(N * P * 2), 0.0);
    const double* md = masks.data().data();
    const double* dd = displacements.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k) {
            const double dx = dd[(n * K + k) * 2], dy = dd[(n * K + k) * 2 + 1];
            const double* m = md + (n * (K + 1) + k) * P;
            double* o = out.data() + n * P * 2;
            for (std::int64_t p = 0; p < P; ++p) {
                o[p * 2] += m[p] * dx;
                o[p * 2 + 1] += m[p] * dy;
            }
        }
    auto mn = masks.node(), dn = displacements.node();
    auto coarse = make_result<double>(Shape{N, H, W, 2}, std::move(out), {mn, dn}, [mn, dn, N, K, P](Node<double>& self) {
        double* gm = detail::grad_of(mn);
        double* gd = detail::grad_of(dn);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k) {
                const double dx = dn->data[(n * K + k) * 2], dy = dn->data[(n * K + k) * 2 + 1];
                const double* m = mn->data.data() + (n * (K + 1) + k) * P;
                const double* g = self.grad.data() + n * P * 2;
                double sx = 0, sy = 0;
                for (std::int64_t p = 0; p < P; ++p) {
                    if (gm) gm[(n * (K + 1) + k) * P + p] += g[p * 2] * dx + g[p * 2 + 1] * dy;
                    sx += m[p] * g[p * 2];
                    sy += m[p] * g[p * 2 + 1];
                }
                if (gd) {
                    gd[(n * K + k) * 2] += sx;
                    gd[(n * K + k) * 2 + 1] += sy;
                }
            }
    });
    if (!residual.defined()) return coarse;
    detail::require(residual.shape() == coarse.shape(), "compose_flow: residual shape ",
                    shape_str(residual.shape()), " does not match ", shape_str(coarse.shape()));
    return add(coarse, residual);
}

struct MotionConfig {
    std::int64_t num_keypoints = 10;
    UNetWidths widths;
    NormMode norm = NormMode::Batch;
    bool use_appearance = true;  // feed x and {x_k}; false leaves only H' - H

    std::int64_t input_channels() const {
        return use_appearance ? num_keypoints + 3 * num_keypoints + 3 : num_keypoints;
    }
};

struct MotionOutput {
    Tensor masks;     // [N,K+1,H,W], per-pixel softmax partition
    Tensor residual;  // [N,H,W,2]
};

class MotionNetwork {
public:
    MotionNetwork() = default;
    MotionNetwork(const MotionConfig& cfg, Initializer& init)
        : cfg_(cfg),
          unet_(cfg.input_channels(), cfg.widths, cfg.norm, init),
          mask_head_(unet_.out_channels(), cfg.num_keypoints + 1, 3, init),
          residual_head_(unet_.out_channels(), 2, 3, init, 1, -1, /*zero_init=*/true) {}

    /// heat_diff [N,K,H,W]; source [N,3,H,W]; aligned: K tensors [N,3,H,W].
    MotionOutput operator()(const Tensor& heat_diff, const Tensor& source, const std::vector<Tensor>& aligned,
                            const ForwardContext& ctx) {
        Tensor input = heat_diff;
        if (cfg_.use_appearance) {
            detail::require(static_cast<std::int64_t>(aligned.size()) == cfg_.num_keypoints,
                            "MotionNetwork: expected ", cfg_.num_keypoints, " aligned inputs, got ", aligned.size());
            std::vector<Tensor> parts{heat_diff};
            parts.insert(parts.end(), aligned.begin(), aligned.end());
            parts.push_back(source);
            input = concat(parts, 1);
        }
        detail::require(input.dim(1) == cfg_.input_channels(), "MotionNetwork: input has ", input.dim(1),
                        " channels, parameters expect ", cfg_.input_channels());
        auto features = unet_(input, ctx);
        return {softmax_channels(mask_head_(features)), to_channels_last(residual_head_(features))};
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        unet_.collect(prefix + ".unet", reg);
        mask_head_.collect(prefix + ".mask", reg);
        residual_head_.collect(prefix + ".residual", reg);
    }

    const MotionConfig& config() const { return cfg_; }

private:
    MotionConfig cfg_;
    UNet unet_;
    Conv2d mask_head_, residual_head_;
};

// ---------------------------------------------------------------------------
// Debug dumps

/// Middlebury .flo file (tag 202021.25, int32 width/height, float32 (dx, dy)
/// pairs row-major) for sample n of a [N,H,W,2] flow, in pixel units.
inline void write_flo(const std::string& path, const Tensor& flow, std::int64_t n = 0) {
    detail::require(flow.ndim() == 4 && flow.dim(3) == 2, "write_flo: expected [N,H,W,2]");
    const std::int64_t H = flow.dim(1), W = flow.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ImageIoError("write_flo: cannot open '" + path + "'");
    const float tag = 202021.25f;
    const auto w32 = static_cast<std::int32_t>(W), h32 = static_cast<std::int32_t>(H);
    os.write(reinterpret_cast<const char*>(&tag), 4);
    os.write(reinterpret_cast<const char*>(&w32), 4);
    os.write(reinterpret_cast<const char*>(&h32), 4);
    const auto d = flow.data();
    const double sx = 0.5 * static_cast<double>(W - 1), sy = 0.5 * static_cast<double>(H - 1);
    for (std::int64_t p = 0; p < H * W; ++p) {
        const float v[2] = {static_cast<float>(d[(n * H * W + p) * 2] * sx),
                            static_cast<float>(d[(n * H * W + p) * 2 + 1] * sy)};
        os.write(reinterpret_cast<const char*>(v), 8);
    }
    if (!os) throw ImageIoError("write_flo: write to '" + path + "' failed");
}

/// Hue encodes direction, saturation encodes magnitude relative to the
/// largest vector in the field.
inline Image flow_to_color(const Tensor& flow, std::int64_t n = 0) {
    const std::int64_t H = flow.dim(1), W = flow.dim(2), P = H * W;
    const auto d = flow.data();
    double max_mag = 1e-12;
    for (std::int64_t p = 0; p < P; ++p)
        max_mag = std::max(max_mag, std::hypot(d[(n * P + p) * 2], d[(n * P + p) * 2 + 1]));
    Image img(H, W);
    for (std::int64_t p = 0; p < P; ++p) {
        const double fx = d[(n * P + p) * 2], fy = d[(n * P + p) * 2 + 1];
        const double hue = (std::atan2(-fy, -fx) / std::numbers::pi + 1.0) * 3.0;  // [0,6)
        const double sat = std::min(1.0, std::hypot(fx, fy) / max_mag);
        const int sector = static_cast<int>(std::floor(hue)) % 6;
        const double f = hue - std::floor(hue);
        const double rgb6[6][3] = {{1, f, 0}, {1 - f, 1, 0}, {0, 1, f}, {0, 1 - f, 1}, {f, 0, 1}, {1, 0, 1 - f}};
        for (int c = 0; c < 3; ++c) img.pixels[p * 3 + c] = 1.0 - sat * (1.0 - rgb6[sector][c]);
    }
    return img;
}

}  // namespace monkeynet
