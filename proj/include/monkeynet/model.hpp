#pragma once

// The full animation model: keypoint detector, motion network, generator and
// discriminator, wired together with the ablation switches.

#include <cstdint>
#include <string>
#include <vector>

#include "monkeynet/adversarial.hpp"
#include "monkeynet/generator.hpp"

namespace monkeynet {

struct AblationFlags {
    bool no_flow = false;        // F = 0; the generator sees unwarped features
    bool no_coarse = false;      // F = F_residual
    bool no_residual = false;    // F = F_coarse
    bool fixed_sigma = false;    // rendered covariances fixed to 0.01 I
    bool no_appearance = false;  // motion network sees only H' - H

    bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
    std::int64_t num_keypoints = 10;
    double temperature = 0.1;
    std::int64_t base_width = 32;
    std::int64_t max_channels = 512;
    int blocks = 5;
    NormMode norm = NormMode::Batch;
    int discriminator_scales = 1;
    AblationFlags ablation;

    UNetWidths widths() const { return {base_width, max_channels, blocks}; }
};

/// Everything produced while reconstructing a driving frame from a source.
struct GenerationOutput {
    Tensor image;        // [N,3,H,W]
    Tensor flow;         // [N,H,W,2]; undefined under no_flow
    Tensor masks;        // [N,K+1,H,W]; undefined when no part masks are used
    Tensor heat_source;  // H  [N,K,H,W]
    Tensor heat_driving; // H' [N,K,H,W]
    Tensor heat_diff;    // H' - H
};

class MonkeyNet {
public:
    MonkeyNet() = default;
    MonkeyNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Initializer init(seed);
        const auto w = cfg.widths();
        detector_ = KeypointDetector({cfg.num_keypoints, cfg.temperature, w, cfg.norm}, init);
        motion_ = MotionNetwork({cfg.num_keypoints, w, cfg.norm, !cfg.ablation.no_appearance}, init);
        generator_ = Generator({cfg.num_keypoints, w, cfg.norm, 4}, init);
        discriminator_ = Discriminator(
            {cfg.num_keypoints, 2 * cfg.base_width, cfg.max_channels, 4, cfg.discriminator_scales}, init);
        detector_.collect("detector", generator_side_);
        motion_.collect("motion", generator_side_);
        generator_.collect("generator", generator_side_);
        discriminator_.collect("discriminator", discriminator_side_);
    }

    MonkeyNet(const MonkeyNet&) = delete;
    MonkeyNet& operator=(const MonkeyNet&) = delete;
    MonkeyNet(MonkeyNet&&) = delete;
    MonkeyNet& operator=(MonkeyNet&&) = delete;

    KeypointSet keypoints(const Tensor& images, const ForwardContext& ctx) { return detector_(images, ctx); }

    /// Covariances actually used for rendering (the fixed-variance ablation
    /// overrides them).
    KeypointSet rendering_keypoints(const KeypointSet& kps) const {
        return cfg_.ablation.fixed_sigma ? with_fixed_covariance(kps) : kps;
    }

    /// Reconstructs the driving frames from the source images and both keypoint sets.
    GenerationOutput generate(const Tensor& source, const KeypointSet& kp_source, const KeypointSet& kp_driving,
                              const ForwardContext& ctx) {
        const std::int64_t H = source.dim(2), W = source.dim(3);
        GenerationOutput out;
        out.heat_source = keypoints_to_gaussian_maps(rendering_keypoints(kp_source), H, W);
        out.heat_driving = keypoints_to_gaussian_maps(rendering_keypoints(kp_driving), H, W);
        out.heat_diff = heatmap_difference(out.heat_driving, out.heat_source);
        if (!cfg_.ablation.no_flow) {
            auto disp = keypoint_displacements(kp_source, kp_driving);
            std::vector<Tensor> aligned;
            if (!cfg_.ablation.no_appearance) aligned = locally_aligned_inputs(source, disp);
            auto motion = motion_(out.heat_diff, source, aligned, ctx);
            if (cfg_.ablation.no_coarse) {
                out.flow = motion.residual;
            } else {
                out.masks = motion.masks;
                out.flow = compose_flow(motion.masks, disp, cfg_.ablation.no_residual ? Tensor{} : motion.residual);
            }
        }
        out.image = generator_(source, out.flow, out.heat_diff, ctx);
        return out;
    }

    KeypointDetector& detector() { return detector_; }
    MotionNetwork& motion() { return motion_; }
    Generator& generator() { return generator_; }
    Discriminator& discriminator() { return discriminator_; }

    /// Detector, motion network and generator parameters (updated by the G step).
    ParamRegistry& generator_side() { return generator_side_; }
    /// Discriminator parameters (updated by the D step).
    ParamRegistry& discriminator_side() { return discriminator_side_; }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    KeypointDetector detector_;
    MotionNetwork motion_;
    Generator generator_;
    Discriminator discriminator_;
    ParamRegistry generator_side_, discriminator_side_;
};

}  // namespace monkeynet
