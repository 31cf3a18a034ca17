#pragma once

// Parameterized building blocks shared by every network, plus the Adam
// optimizer and name-based parameter registration for checkpoints.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "monkeynet/nn_ops.hpp"

namespace monkeynet {

/// Named handles into a network's trainable tensors and persistent buffers.
struct ParamRegistry {
    struct ParamRef {
        std::string name;
        Tensor* tensor;
    };
    struct BufferRef {
        std::string name;
        std::vector<double>* values;
    };
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;

    void add(std::string name, Tensor& t) { params.push_back({std::move(name), &t}); }
    void add_buffer(std::string name, std::vector<double>& v) { buffers.push_back({std::move(name), &v}); }

    std::vector<Tensor*> tensors() const {
        std::vector<Tensor*> out;
        for (const auto& p : params) out.push_back(p.tensor);
        return out;
    }
    void zero_grad() {
        for (auto& p : params) p.tensor->zero_grad();
    }
};

/// Deterministic parameter initialization source.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    /// Uniform(-bound, bound), bound = 1/sqrt(fan_in).
    Tensor fan_in_uniform(Shape shape, std::int64_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) x = bound * (2.0 * unit() - 1.0);
        return Tensor(std::move(shape), std::move(v), true);
    }

    double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 rng_;
};

struct ForwardContext {
    bool training = true;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::int64_t in, std::int64_t out, std::int64_t k, Initializer& init, std::int64_t stride = 1,
           std::int64_t pad = -1, bool zero_init = false)
        : in_(in), out_(out), stride_(stride), pad_(pad < 0 ? k / 2 : pad) {
        if (zero_init) {
            weight_ = Tensor::zeros({out, in, k, k}, true);
            bias_ = Tensor::zeros({out}, true);
        } else {
            weight_ = init.fan_in_uniform({out, in, k, k}, in * k * k);
            bias_ = init.fan_in_uniform({out}, in * k * k);
        }
    }

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        reg.add(prefix + ".weight", weight_);
        reg.add(prefix + ".bias", bias_);
    }

    std::int64_t in_channels() const { return in_; }
    std::int64_t out_channels() const { return out_; }
    Tensor& weight() { return weight_; }

private:
    std::int64_t in_ = 0, out_ = 0, stride_ = 1, pad_ = 0;
    Tensor weight_, bias_;
};

/// Normalization with learnable per-channel affine. Batch mode keeps running
/// statistics for evaluation.
class Norm {
public:
    Norm() = default;
    Norm(std::int64_t channels, NormMode mode)
        : mode_(mode),
          gamma_(Tensor::full({channels}, 1.0, true)),
          beta_(Tensor::zeros({channels}, true)),
          running_mean_(channels, 0.0),
          running_var_(channels, 1.0) {}

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        if (mode_ == NormMode::Batch && !ctx.training) {
            const auto C = static_cast<std::size_t>(x.dim(1));
            std::vector<double> a(C), b(C);
            for (std::size_t c = 0; c < C; ++c) {
                a[c] = 1.0 / std::sqrt(running_var_[c] + kEps);
                b[c] = -running_mean_[c] * a[c];
            }
            auto normalized = channel_affine(x, Tensor({x.dim(1)}, a), Tensor({x.dim(1)}, b));
            return channel_affine(normalized, gamma_, beta_);
        }
        // Batch statistics over fewer than kMinBatch samples are too noisy;
        // such batches are normalized per instance and leave running stats alone.
        const NormMode mode = mode_ == NormMode::Batch && x.dim(0) < kMinBatch ? NormMode::Instance : mode_;
        NormStats<double> stats;
        auto y = norm_layer(x, mode, kEps, ctx.training ? &stats : nullptr);
        if (mode == NormMode::Batch && ctx.training) {
            const double m = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
            const double unbias = m > 1 ? m / (m - 1) : 1.0;
            for (std::size_t c = 0; c < running_mean_.size(); ++c) {
                running_mean_[c] = (1 - kMomentum) * running_mean_[c] + kMomentum * stats.mean[c];
                running_var_[c] = (1 - kMomentum) * running_var_[c] + kMomentum * stats.var[c] * unbias;
            }
        }
        return channel_affine(y, gamma_, beta_);
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        reg.add(prefix + ".gamma", gamma_);
        reg.add(prefix + ".beta", beta_);
        if (mode_ == NormMode::Batch) {
            reg.add_buffer(prefix + ".running_mean", running_mean_);
            reg.add_buffer(prefix + ".running_var", running_var_);
        }
    }

private:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;
    static constexpr std::int64_t kMinBatch = 4;
    NormMode mode_ = NormMode::Batch;
    Tensor gamma_, beta_;
    std::vector<double> running_mean_, running_var_;
};

/// conv3x3 -> norm -> relu -> 2x average pooling
class DownBlock {
public:
    DownBlock() = default;
    DownBlock(std::int64_t in, std::int64_t out, NormMode mode, Initializer& init)
        : conv_(in, out, 3, init), norm_(out, mode) {}

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        return avg_pool2d(relu(norm_(conv_(x), ctx)), 2);
    }
    void collect(const std::string& prefix, ParamRegistry& reg) {
        conv_.collect(prefix + ".conv", reg);
        norm_.collect(prefix + ".norm", reg);
    }
    std::int64_t out_channels() const { return conv_.out_channels(); }

private:
    Conv2d conv_;
    Norm norm_;
};

/// conv3x3 -> norm -> relu -> 2x nearest up-sampling
class UpBlock {
public:
    UpBlock() = default;
    UpBlock(std::int64_t in, std::int64_t out, NormMode mode, Initializer& init)
        : conv_(in, out, 3, init), norm_(out, mode) {}

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        return upsample_nearest(relu(norm_(conv_(x), ctx)), 2);
    }
    void collect(const std::string& prefix, ParamRegistry& reg) {
        conv_.collect(prefix + ".conv", reg);
        norm_.collect(prefix + ".norm", reg);
    }

private:
    Conv2d conv_;
    Norm norm_;
};

/// Channel widths shared by every U-Net: the first encoder block has `base`
/// filters, each later block doubles, capped at `max_channels`.
struct UNetWidths {
    std::int64_t base = 32;
    std::int64_t max_channels = 512;
    int blocks = 5;

    std::int64_t encoder(int i) const { return std::min(max_channels, base << i); }
    /// Channels of skip level l; level 0 is the network input.
    std::int64_t skip(int level, std::int64_t in_channels) const {
        return level == 0 ? in_channels : encoder(level - 1);
    }
};

class Encoder {
public:
    Encoder() = default;
    Encoder(std::int64_t in, const UNetWidths& w, NormMode mode, Initializer& init) {
        std::int64_t c = in;
        for (int i = 0; i < w.blocks; ++i) {
            blocks_.emplace_back(c, w.encoder(i), mode, init);
            c = w.encoder(i);
        }
    }

    /// Returns the block outputs, finest first (H/2, H/4, ...).
    std::vector<Tensor> operator()(const Tensor& x, const ForwardContext& ctx) {
        std::vector<Tensor> out;
        Tensor h = x;
        for (auto& b : blocks_) {
            h = b(h, ctx);
            out.push_back(h);
        }
        return out;
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".down" + std::to_string(i), reg);
    }

private:
    std::vector<DownBlock> blocks_;
};

/// U-Net decoder. skips[l] holds the skip tensor at level l (level 0 is full
/// resolution, level `blocks` is the coarsest and seeds the decoder).
/// Output has width(0) + skip_channels[0] channels at full resolution.
class Decoder {
public:
    Decoder() = default;
    Decoder(const std::vector<std::int64_t>& skip_channels, const UNetWidths& w, NormMode mode,
            Initializer& init) {
        detail::require(static_cast<int>(skip_channels.size()) == w.blocks + 1,
                        "Decoder: expected ", w.blocks + 1, " skip levels");
        std::int64_t c = skip_channels.back();
        for (int j = 0; j < w.blocks; ++j) {
            const std::int64_t out = w.encoder(w.blocks - 1 - j);
            blocks_.emplace_back(c, out, mode, init);
            c = out + skip_channels[w.blocks - 1 - j];
        }
        out_channels_ = c;
    }

    Tensor operator()(const std::vector<Tensor>& skips, const ForwardContext& ctx) {
        const int levels = static_cast<int>(blocks_.size());
        detail::require(static_cast<int>(skips.size()) == levels + 1, "Decoder: got ", skips.size(),
                        " skip tensors, expected ", levels + 1);
        Tensor h = skips.back();
        for (int j = 0; j < levels; ++j) {
            h = blocks_[j](h, ctx);
            h = concat<double>({h, skips[levels - 1 - j]}, 1);
        }
        return h;
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".up" + std::to_string(i), reg);
    }

    std::int64_t out_channels() const { return out_channels_; }

private:
    std::vector<UpBlock> blocks_;
    std::int64_t out_channels_ = 0;
};

/// Encoder + decoder with plain skips; the shape shared by the detector and
/// the motion network.
class UNet {
public:
    UNet() = default;
    UNet(std::int64_t in, const UNetWidths& w, NormMode mode, Initializer& init)
        : in_(in), widths_(w), encoder_(in, w, mode, init) {
        std::vector<std::int64_t> skips;
        for (int l = 0; l <= w.blocks; ++l) skips.push_back(w.skip(l, in));
        decoder_ = Decoder(skips, w, mode, init);
    }

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) {
        detail::require(x.dim(1) == in_, "UNet: input has ", x.dim(1), " channels, expected ", in_);
        const std::int64_t f = std::int64_t{1} << widths_.blocks;
        detail::require(x.dim(2) % f == 0 && x.dim(3) % f == 0, "UNet: spatial size ", x.dim(2), "x",
                        x.dim(3), " is not a multiple of ", f);
        auto feats = encoder_(x, ctx);
        std::vector<Tensor> skips{x};
        skips.insert(skips.end(), feats.begin(), feats.end());
        return decoder_(skips, ctx);
    }

    void collect(const std::string& prefix, ParamRegistry& reg) {
        encoder_.collect(prefix + ".enc", reg);
        decoder_.collect(prefix + ".dec", reg);
    }

    std::int64_t in_channels() const { return in_; }
    std::int64_t out_channels() const { return decoder_.out_channels(); }

private:
    std::int64_t in_ = 0;
    UNetWidths widths_;
    Encoder encoder_;
    Decoder decoder_;
};

/// Adam with bias correction.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Tensor*> params, double lr, double beta1 = 0.5, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto* p : params_) {
            m_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        ++steps_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto d = p.data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < d.size(); ++j) {
                m[j] = beta1_ * m[j] + (1 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1 - beta2_) * g[j] * g[j];
                d[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t steps() const { return steps_; }
    void set_steps(std::int64_t s) { steps_ = s; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }

private:
    std::vector<Tensor*> params_;
    double lr_ = 2e-4, beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t steps_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace monkeynet
