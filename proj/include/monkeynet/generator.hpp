#pragma once

// Generator with a deformation module: encoder features of the source are
// warped by the dense flow at every pyramid level, concatenated with the
// down-sampled heatmap difference, and decoded; residual blocks at full
// resolution clean up warping artifacts before a sigmoid output.

#include <string>
#include <vector>

#include "monkeynet/dense_motion.hpp"

namespace monkeynet {

/// Encoder outputs, finest first (H/2 ... H/2^R), plus the full-resolution
/// input that serves as the level-0 skip.
struct FeaturePyramid {
    Tensor input;
    std::vector<Tensor> levels;
};

struct GeneratorConfig {
    std::int64_t num_keypoints = 10;
    UNetWidths widths;
    NormMode norm = NormMode::Batch;
    int residual_blocks = 4;
};

/// conv/norm/ReLU twice, added back onto the input.
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(std::int64_t channels, NormMode mode, Initializer& init)
        : conv1_(channels, channels, 3, init), conv2_(channels, channels, 3, init),
          norm1_(channels, mode), norm2_(channels, mode) {}

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        auto h = relu(norm1_(conv1_(x), ctx));
        h = relu(norm2_(conv2_(h), ctx));
        return add(x, h);
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        conv1_.collect(prefix + ".conv1", reg);
        norm1_.collect(prefix + ".norm1", reg);
        conv2_.collect(prefix + ".conv2", reg);
        norm2_.collect(prefix + ".norm2", reg);
    }

private:
    Conv2d conv1_, conv2_;
    Norm norm1_, norm2_;
};

/// Nearest-neighbour decimation of an [N,H,W,2] flow. Values are picked, not
/// rescaled, since flows live in normalized coordinates.
inline Tensor downsample_flow(const Tensor& flow, std::int64_t factor) {
    if (factor == 1) return flow;
    return to_channels_last(downsample_nearest(to_channels_first(flow), factor));
}

class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& cfg, Initializer& init)
        : cfg_(cfg), encoder_(3, cfg.widths, cfg.norm, init) {
        std::vector<std::int64_t> skips;
        for (int l = 0; l <= cfg.widths.blocks; ++l) skips.push_back(cfg.widths.skip(l, 3) + cfg.num_keypoints);
        decoder_ = Decoder(skips, cfg.widths, cfg.norm, init);
        for (int i = 0; i < cfg.residual_blocks; ++i) res_.emplace_back(decoder_.out_channels(), cfg.norm, init);
        out_ = Conv2d(decoder_.out_channels(), 3, 3, init);
    }

    FeaturePyramid encode(const Tensor& x, const ForwardContext& ctx) {
        detail::require(x.ndim() == 4 && x.dim(1) == 3, "Generator::encode: expected [N,3,H,W], got ",
                        shape_str(x.shape()));
        const std::int64_t f = std::int64_t{1} << cfg_.widths.blocks;
        detail::require(x.dim(2) % f == 0 && x.dim(3) % f == 0, "Generator::encode: spatial size ", x.dim(2),
                        "x", x.dim(3), " is not a multiple of ", f);
        return {x, encoder_(x, ctx)};
    }

    /// Warps every level by the flow, decimated to that level's resolution.
    static FeaturePyramid warp_pyramid(const FeaturePyramid& pyr, const Tensor& flow) {
        detail::require(flow.ndim() == 4 && flow.dim(1) == pyr.input.dim(2) && flow.dim(2) == pyr.input.dim(3),
                        "warp_pyramid: flow ", shape_str(flow.shape()), " is not at input resolution");
        FeaturePyramid out;
        out.input = warp(pyr.input, flow);
        for (std::size_t r = 0; r < pyr.levels.size(); ++r) {
            const std::int64_t factor = std::int64_t{1} << (r + 1);
            out.levels.push_back(warp(pyr.levels[r], downsample_flow(flow, factor)));
        }
        return out;
    }

    /// heat_diff [N,K,H,W] at full resolution; returns [N,3,H,W] in (0,1).
    Tensor decode(const FeaturePyramid& warped, const Tensor& heat_diff, const ForwardContext& ctx) {
        detail::require(heat_diff.ndim() == 4 && heat_diff.dim(1) == cfg_.num_keypoints,
                        "Generator::decode: heatmap difference must have ", cfg_.num_keypoints, " channels, got ",
                        shape_str(heat_diff.shape()));
        std::vector<Tensor> skips{concat<double>({warped.input, heat_diff}, 1)};
        for (std::size_t r = 0; r < warped.levels.size(); ++r) {
            const std::int64_t factor = std::int64_t{1} << (r + 1);
            skips.push_back(concat<double>({warped.levels[r], downsample_nearest(heat_diff, factor)}, 1));
        }
        auto h = decoder_(skips, ctx);
        for (auto& block : res_) h = block(h, ctx);
        return sigmoid(out_(h));
    }

    /// encode -> warp (skipped when flow is undefined) -> decode.
    Tensor operator()(const Tensor& source, const Tensor& flow, const Tensor& heat_diff, const ForwardContext& ctx) {
        auto pyr = encode(source, ctx);
        return decode(flow.defined() ? warp_pyramid(pyr, flow) : pyr, heat_diff, ctx);
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        encoder_.collect(prefix + ".enc", reg);
        decoder_.collect(prefix + ".dec", reg);
        for (std::size_t i = 0; i < res_.size(); ++i) res_[i].collect(prefix + ".res" + std::to_string(i), reg);
        out_.collect(prefix + ".out", reg);
    }

    const GeneratorConfig& config() const { return cfg_; }

private:
    GeneratorConfig cfg_;
    Encoder encoder_;
    Decoder decoder_;
    std::vector<ResBlock> res_;
    Conv2d out_;
};

}  // namespace monkeynet
