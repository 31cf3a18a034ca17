#pragma once

// Patch discriminator conditioned on the driving heatmaps, least-squares GAN
// objectives, the discriminator feature-matching reconstruction loss and the
// weighted total objective.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "monkeynet/layers.hpp"

namespace monkeynet {

inline constexpr double kDefaultLambdaRec = 10.0;

struct DiscriminatorConfig {
    std::int64_t num_keypoints = 10;
    std::int64_t base = 64;
    std::int64_t max_channels = 512;
    int blocks = 4;
    int scales = 1;  // >1 adds copies on 2x average-pooled inputs

    std::int64_t input_channels() const { return 3 + num_keypoints; }
};

struct DiscriminatorOutput {
    std::vector<Tensor> scores;    // one score map per scale
    std::vector<Tensor> features;  // per scale: input, then every block output
};

/// Single-scale patch discriminator: stride-2 conv blocks, then a 1-channel map.
class PatchDiscriminator {
public:
    PatchDiscriminator() = default;
    PatchDiscriminator(const DiscriminatorConfig& cfg, Initializer& init) : in_(cfg.input_channels()) {
        std::int64_t c = in_;
        for (int i = 0; i < cfg.blocks; ++i) {
            const std::int64_t out = std::min(cfg.max_channels, cfg.base << i);
            convs_.emplace_back(c, out, 3, init, 2, 1);
            norms_.emplace_back(out, NormMode::Instance);
            c = out;
        }
        score_ = Conv2d(c, 1, 3, init);
    }

    Tensor operator()(const Tensor& input, std::vector<Tensor>& features) {
        detail::require(input.ndim() == 4 && input.dim(1) == in_, "discriminate: expected ", in_,
                        " input channels, got ", shape_str(input.shape()));
        const ForwardContext ctx{true};
        features.push_back(input);
        Tensor h = input;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            h = convs_[i](h);
            if (i > 0) h = norms_[i](h, ctx);
            h = leaky_relu(h, 0.2);
            features.push_back(h);
        }
        return score_(h);
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect(prefix + ".block" + std::to_string(i) + ".conv", reg);
            if (i > 0) norms_[i].collect(prefix + ".block" + std::to_string(i) + ".norm", reg);
        }
        score_.collect(prefix + ".score", reg);
    }

private:
    std::int64_t in_ = 0;
    std::vector<Conv2d> convs_;
    std::vector<Norm> norms_;
    Conv2d score_;
};

class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const DiscriminatorConfig& cfg, Initializer& init) : cfg_(cfg) {
        for (int s = 0; s < cfg.scales; ++s) scales_.emplace_back(cfg, init);
    }

    /// image [N,3,H,W] concatenated with driving heatmaps [N,K,H,W].
    DiscriminatorOutput operator()(const Tensor& image, const Tensor& heatmaps) {
        detail::require(image.ndim() == 4 && heatmaps.ndim() == 4 && image.dim(0) == heatmaps.dim(0) &&
                            image.dim(2) == heatmaps.dim(2) && image.dim(3) == heatmaps.dim(3),
                        "discriminate: image ", shape_str(image.shape()), " and heatmaps ",
                        shape_str(heatmaps.shape()), " disagree");
        DiscriminatorOutput out;
        Tensor input = concat<double>({image, heatmaps}, 1);
        for (std::size_t s = 0; s < scales_.size(); ++s) {
            if (s > 0) input = avg_pool2d(input, 2);
            out.scores.push_back(scales_[s](input, out.features));
        }
        return out;
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        for (std::size_t s = 0; s < scales_.size(); ++s) scales_[s].collect(prefix + ".scale" + std::to_string(s), reg);
    }

    const DiscriminatorConfig& config() const { return cfg_; }

private:
    DiscriminatorConfig cfg_;
    std::vector<PatchDiscriminator> scales_;
};

/// mean[(real - 1)^2] + mean[fake^2]
inline Tensor loss_discriminator(const Tensor& real_scores, const Tensor& fake_scores) {
    return add(square_mean(real_scores, 1.0), square_mean(fake_scores, 0.0));
}

/// mean[(fake - 1)^2]
inline Tensor loss_generator_gan(const Tensor& fake_scores) { return square_mean(fake_scores, 1.0); }

/// Sum over layers of mean |D_i(fake) - D_i(real)|, layer 0 being the raw input.
inline Tensor loss_feature_matching(const std::vector<Tensor>& real_features, const std::vector<Tensor>& fake_features) {
    detail::require(real_features.size() == fake_features.size() && !real_features.empty(),
                    "loss_feature_matching: feature lists differ in length (", real_features.size(), " vs ",
                    fake_features.size(), ")");
    Tensor total = l1_mean(fake_features[0], real_features[0]);
    for (std::size_t i = 1; i < real_features.size(); ++i)
        total = add(total, l1_mean(fake_features[i], real_features[i]));
    return total;
}

inline Tensor loss_total(const Tensor& rec, const Tensor& gan_g, double lambda_rec = kDefaultLambdaRec) {
    return add(scale(rec, lambda_rec), gan_g);
}

/// Sum of a per-scale loss.
template <typename F>
Tensor sum_over_scales(const std::vector<Tensor>& a, F&& per_scale) {
    Tensor total = per_scale(a[0], 0);
    for (std::size_t s = 1; s < a.size(); ++s) total = add(total, per_scale(a[s], s));
    return total;
}

struct LossReport {
    double loss_D = 0, loss_G_gan = 0, loss_rec = 0, loss_total = 0;
    bool operator==(const LossReport&) const = default;
};

/// Appends one CSV row per step: step, loss_D, loss_G_gan, loss_rec, loss_total.
class LossLog {
public:
    explicit LossLog(std::string path, bool append = false) : path_(std::move(path)) {
        std::ofstream os(path_, append ? std::ios::app : std::ios::trunc);
        if (!os) detail::fail("LossLog: cannot open '", path_, "'");
        if (!append || os.tellp() == 0) os << "step,loss_D,loss_G_gan,loss_rec,loss_total\n";
    }

    void append(std::int64_t step, const LossReport& r) const {
        std::ofstream os(path_, std::ios::app);
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g\n", static_cast<long long>(step), r.loss_D,
                      r.loss_G_gan, r.loss_rec, r.loss_total);
        os << buf;
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
};

}  // namespace monkeynet
