#pragma once

// Self-supervised training: frame pairs from the same video, one
// discriminator update followed by one update of detector, motion network and
// generator per batch, a two-phase Adam schedule, and resumable checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "monkeynet/checkpoint_io.hpp"
#include "monkeynet/model.hpp"
#include "monkeynet/random.hpp"
#include "monkeynet/video.hpp"

namespace monkeynet {

struct TrainConfig {
    std::int64_t num_keypoints = 10;
    int epochs = 20;  // T; a further T/2 epochs run at the second learning rate
    double lr = 2e-4;
    double lr_final = 2e-5;
    double lambda_rec = kDefaultLambdaRec;
    std::int64_t batch_size = 4;
    std::uint64_t seed = 7;
    double temperature = 0.1;
    std::int64_t base_width = 8;
    std::int64_t max_channels = 512;
    int blocks = 5;
    NormMode norm = NormMode::Batch;
    int discriminator_scales = 1;
    AblationFlags ablation;
    std::int64_t checkpoint_every = 0;  // steps; 0 = only at epoch ends

    int total_epochs() const { return epochs + epochs / 2; }
    double lr_for_epoch(int epoch) const { return epoch < epochs ? lr : lr_final; }

    ModelConfig model() const {
        ModelConfig m;
        m.num_keypoints = num_keypoints;
        m.temperature = temperature;
        m.base_width = base_width;
        m.max_channels = max_channels;
        m.blocks = blocks;
        m.norm = norm;
        m.discriminator_scales = discriminator_scales;
        m.ablation = ablation;
        return m;
    }

    void validate() const {
        detail::require(num_keypoints >= 1, "config: k must be >= 1 (got ", num_keypoints, ")");
        detail::require(lr > 0 && lr_final > 0, "config: learning rates must be positive");
        detail::require(epochs >= 0, "config: epochs must be >= 0");
        detail::require(batch_size >= 1, "config: batch_size must be >= 1");
        detail::require(base_width >= 1 && blocks >= 1, "config: base_width and blocks must be >= 1");
        detail::require(temperature > 0, "config: temperature must be positive");
        detail::require(discriminator_scales >= 1, "config: discriminator_scales must be >= 1");
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    void set(const std::string& key, const std::string& value) {
        auto as_int = [&] {
            std::size_t pos = 0;
            long long v = std::stoll(value, &pos);
            if (pos != value.size()) detail::fail("config: '", key, "' expects an integer, got '", value, "'");
            return v;
        };
        auto as_double = [&] {
            std::size_t pos = 0;
            double v = std::stod(value, &pos);
            if (pos != value.size()) detail::fail("config: '", key, "' expects a number, got '", value, "'");
            return v;
        };
        auto as_bool = [&] {
            if (value == "1" || value == "true" || value == "yes") return true;
            if (value == "0" || value == "false" || value == "no") return false;
            detail::fail("config: '", key, "' expects a boolean, got '", value, "'");
        };
        try {
            if (key == "k" || key == "num_keypoints") num_keypoints = as_int();
            else if (key == "epochs") epochs = static_cast<int>(as_int());
            else if (key == "lr") lr = as_double();
            else if (key == "lr_final") lr_final = as_double();
            else if (key == "lambda_rec") lambda_rec = as_double();
            else if (key == "batch_size") batch_size = as_int();
            else if (key == "seed") seed = static_cast<std::uint64_t>(as_int());
            else if (key == "temperature") temperature = as_double();
            else if (key == "base_width") base_width = as_int();
            else if (key == "max_channels") max_channels = as_int();
            else if (key == "blocks") blocks = static_cast<int>(as_int());
            else if (key == "discriminator_scales") discriminator_scales = static_cast<int>(as_int());
            else if (key == "checkpoint_every") checkpoint_every = as_int();
            else if (key == "norm") {
                if (value == "batch") norm = NormMode::Batch;
                else if (value == "instance") norm = NormMode::Instance;
                else detail::fail("config: norm must be batch or instance, got '", value, "'");
            } else if (key == "no_flow") ablation.no_flow = as_bool();
            else if (key == "no_coarse") ablation.no_coarse = as_bool();
            else if (key == "no_residual") ablation.no_residual = as_bool();
            else if (key == "fixed_sigma") ablation.fixed_sigma = as_bool();
            else if (key == "no_appearance") ablation.no_appearance = as_bool();
            else if (key == "ablation") set_ablation(value);
            else detail::fail("config: unknown key '", key, "'");
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).rfind("config:", 0) == 0) throw;
            detail::fail("config: bad value '", value, "' for '", key, "'");
        }
    }

    /// Enables one named ablation switch (comma-separated lists accepted).
    void set_ablation(const std::string& names) {
        std::stringstream ss(names);
        std::string name;
        while (std::getline(ss, name, ',')) {
            if (name.empty()) continue;
            if (name == "no_flow") ablation.no_flow = true;
            else if (name == "no_coarse") ablation.no_coarse = true;
            else if (name == "no_residual") ablation.no_residual = true;
            else if (name == "fixed_sigma") ablation.fixed_sigma = true;
            else if (name == "no_appearance") ablation.no_appearance = true;
            else detail::fail("config: unknown ablation '", name, "'");
        }
    }

    /// Canonical key=value form; also the input of hash().
    std::string to_string() const {
        std::ostringstream os;
        os.precision(17);
        os << "k=" << num_keypoints << "\nepochs=" << epochs << "\nlr=" << lr << "\nlr_final=" << lr_final
           << "\nlambda_rec=" << lambda_rec << "\nbatch_size=" << batch_size << "\nseed=" << seed
           << "\ntemperature=" << temperature << "\nbase_width=" << base_width << "\nmax_channels=" << max_channels
           << "\nblocks=" << blocks << "\nnorm=" << (norm == NormMode::Batch ? "batch" : "instance")
           << "\ndiscriminator_scales=" << discriminator_scales << "\nno_flow=" << ablation.no_flow
           << "\nno_coarse=" << ablation.no_coarse << "\nno_residual=" << ablation.no_residual
           << "\nfixed_sigma=" << ablation.fixed_sigma << "\nno_appearance=" << ablation.no_appearance << "\n";
        return os.str();
    }

    /// FNV-1a over the canonical text; stored in checkpoints to refuse
    /// resuming under a different configuration.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : to_string()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }
};

/// Parses flat key=value text. Blank lines and '#' comments are skipped.
inline void parse_config(std::istream& is, TrainConfig& cfg) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string{};
            return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) detail::fail("config line ", lineno, ": expected key=value, got '", line, "'");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

inline TrainConfig load_config_file(const std::string& path, TrainConfig cfg = {}) {
    std::ifstream is(path);
    if (!is) detail::fail("cannot read config '", path, "'");
    parse_config(is, cfg);
    return cfg;
}

struct FramePair {
    std::size_t video = 0;
    std::size_t source = 0, driving = 0;
    bool operator==(const FramePair&) const = default;
};

inline std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
    return derive_seed(seed ^ 0x7061697273ULL, static_cast<std::uint64_t>(epoch));
}

/// One unordered frame pair per video, drawn uniformly, with random order
/// inside the pair and a random video order.
inline std::vector<FramePair> sample_pairs(const std::vector<VideoClip>& videos, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> order(videos.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<FramePair> pairs;
    pairs.reserve(videos.size());
    for (auto v : order) {
        const std::size_t n = videos[v].size();
        detail::require(n >= 2, "sample_pairs: video ", videos[v].id, " has ", n, " frame(s)");
        const std::size_t a = rng.below(n);
        std::size_t b = rng.below(n - 1);
        if (b >= a) ++b;
        pairs.push_back({v, a, b});
    }
    return pairs;
}

/// Detector, motion network and generator outputs for one batch of pairs.
struct BatchForward {
    KeypointSet kp_source, kp_driving;
    GenerationOutput gen;
};

inline BatchForward forward_pairs(MonkeyNet& net, const Tensor& source, const Tensor& driving,
                                  const ForwardContext& ctx) {
    const std::int64_t B = source.dim(0);
    auto both = net.keypoints(concat<double>({source, driving}, 0), ctx);
    BatchForward f;
    f.kp_source = {slice(both.mean, 0, 0, B), slice(both.cov, 0, 0, B)};
    f.kp_driving = {slice(both.mean, 0, B, B), slice(both.cov, 0, B, B)};
    f.gen = net.generate(source, f.kp_source, f.kp_driving, ctx);
    return f;
}

struct GeneratorObjective {
    Tensor rec, gan, total;
};

/// Feature-matching reconstruction loss plus the generator LSGAN term. H' is
/// stop-gradiented before it reaches D and the real features carry no graph.
inline GeneratorObjective generator_objective(Discriminator& disc, const Tensor& image, const Tensor& heat_driving,
                                              const Tensor& driving, double lambda_rec) {
    const Tensor heat = stop_gradient(heat_driving);
    DiscriminatorOutput real;
    {
        NoGradGuard guard;
        real = disc(driving, heat);
    }
    auto fake = disc(image, heat);
    GeneratorObjective o;
    o.rec = loss_feature_matching(real.features, fake.features);
    o.gan = sum_over_scales(fake.scores, [](const Tensor& s, std::size_t) { return loss_generator_gan(s); });
    o.total = loss_total(o.rec, o.gan, lambda_rec);
    return o;
}

/// FNV-1a over the bytes of every parameter and buffer of a registry.
inline std::uint64_t parameter_hash(ParamRegistry& reg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const double* p, std::size_t n) {
        const auto* b = reinterpret_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n * sizeof(double); ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : reg.params) mix(p.tensor->data().data(), static_cast<std::size_t>(p.tensor->numel()));
    for (const auto& b : reg.buffers) mix(b.values->data(), b.values->size());
    return h;
}

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg)
        : cfg_(cfg), net_((cfg.validate(), cfg.model()), cfg.seed) {
        opt_g_ = Adam(net_.generator_side().tensors(), cfg.lr);
        opt_d_ = Adam(net_.discriminator_side().tensors(), cfg.lr);
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    /// One discriminator update then one generator-side update.
    LossReport train_step(const Tensor& source, const Tensor& driving) {
        auto fwd = forward_pairs(net_, source, driving, ForwardContext{true});
        LossReport r;
        r.loss_D = discriminator_step(fwd, driving);
        generator_step(fwd, driving, r);
        ++step_;
        return r;
    }

    /// LSGAN update of D on the real frames and the detached generated frames.
    /// Returns loss_D.
    double discriminator_step(const BatchForward& fwd, const Tensor& driving) {
        // H' conditions the discriminator but never receives its gradient.
        const Tensor heat = stop_gradient(fwd.gen.heat_driving);
        auto& disc = net_.discriminator();
        auto real = disc(driving, heat);
        auto fake = disc(stop_gradient(fwd.gen.image), heat);
        Tensor loss_d = loss_discriminator(real.scores[0], fake.scores[0]);
        for (std::size_t s = 1; s < real.scores.size(); ++s)
            loss_d = add(loss_d, loss_discriminator(real.scores[s], fake.scores[s]));
        const double v = loss_d.item();
        check_finite(v, "loss_D");
        opt_d_.zero_grad();
        loss_d.backward();
        opt_d_.step();
        return v;
    }

    /// Update of detector, motion network and generator on the total loss.
    void generator_step(const BatchForward& fwd, const Tensor& driving, LossReport& r) {
        auto obj = generator_objective(net_.discriminator(), fwd.gen.image, fwd.gen.heat_driving, driving,
                                       cfg_.lambda_rec);
        r.loss_rec = obj.rec.item();
        r.loss_G_gan = obj.gan.item();
        r.loss_total = obj.total.item();
        check_finite(r.loss_total, "loss_total");
        opt_g_.zero_grad();
        obj.total.backward();
        opt_g_.step();
        // The generator loss also reached discriminator parameters; drop it.
        opt_d_.zero_grad();
    }

    /// Runs the schedule from the current step. Each step's pairs depend only
    /// on (seed, epoch), so a resumed run replays exactly the same batches.
    /// `stop_after` (total steps) allows deliberate interruption.
    void run(const std::vector<VideoClip>& train, const std::string& out_dir = "",
             std::optional<std::int64_t> stop_after = std::nullopt,
             const std::function<void(std::int64_t, const LossReport&)>& on_step = {}) {
        detail::require(!train.empty(), "run_training: empty dataset");
        std::optional<LossLog> log;
        if (!out_dir.empty()) {
            std::filesystem::create_directories(out_dir);
            log.emplace((std::filesystem::path(out_dir) / "losses.csv").string(), step_ > 0);
        }
        const auto per_epoch = steps_per_epoch(train.size());
        last_good_ = entries();
        std::int64_t global = 0;
        for (int epoch = 0; epoch < cfg_.total_epochs(); ++epoch) {
            if (global + per_epoch <= step_) {
                global += per_epoch;
                continue;
            }
            opt_g_.set_lr(cfg_.lr_for_epoch(epoch));
            opt_d_.set_lr(cfg_.lr_for_epoch(epoch));
            const auto pairs = sample_pairs(train, epoch_seed(cfg_.seed, epoch));
            for (std::size_t b = 0; b < pairs.size(); b += static_cast<std::size_t>(cfg_.batch_size), ++global) {
                if (global < step_) continue;
                if (stop_after && step_ >= *stop_after) return finish(out_dir);
                const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.batch_size), pairs.size() - b);
                std::vector<const Image*> src, drv;
                for (std::size_t i = b; i < b + n; ++i) {
                    src.push_back(&train[pairs[i].video].frames[pairs[i].source]);
                    drv.push_back(&train[pairs[i].video].frames[pairs[i].driving]);
                }
                LossReport r;
                try {
                    r = train_step(images_to_tensor(src), images_to_tensor(drv));
                } catch (const NonFiniteLoss&) {
                    if (!out_dir.empty()) write_with_retry(std::filesystem::path(out_dir) / "last_good.ckpt", last_good_);
                    throw;
                }
                if (log) log->append(step_, r);
                if (on_step) on_step(step_, r);
                if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 && !out_dir.empty())
                    save((std::filesystem::path(out_dir) / "checkpoint.ckpt").string());
            }
            last_good_ = entries();
            if (!out_dir.empty()) save((std::filesystem::path(out_dir) / "checkpoint.ckpt").string());
        }
        finish(out_dir);
    }

    std::int64_t steps_per_epoch(std::size_t videos) const {
        return static_cast<std::int64_t>((videos + cfg_.batch_size - 1) / cfg_.batch_size);
    }
    std::int64_t total_steps(std::size_t videos) const { return steps_per_epoch(videos) * cfg_.total_epochs(); }

    /// Parameters, buffers, optimizer moments, step counter and config hash.
    std::vector<CheckpointEntry> entries() {
        std::vector<CheckpointEntry> out;
        auto add_registry = [&](const std::string& side, ParamRegistry& reg, Adam& opt) {
            for (const auto& p : reg.params) {
                auto d = p.tensor->data();
                out.push_back({p.name, p.tensor->shape(), {d.begin(), d.end()}});
            }
            for (const auto& b : reg.buffers)
                out.push_back({b.name, {static_cast<std::int64_t>(b.values->size())}, *b.values});
            for (std::size_t i = 0; i < reg.params.size(); ++i) {
                const auto n = static_cast<std::int64_t>(opt.first_moments()[i].size());
                out.push_back({"adam." + side + ".m." + reg.params[i].name, {n}, opt.first_moments()[i]});
                out.push_back({"adam." + side + ".v." + reg.params[i].name, {n}, opt.second_moments()[i]});
            }
            out.push_back({"adam." + side + ".steps", {1}, {static_cast<double>(opt.steps())}});
        };
        add_registry("g", net_.generator_side(), opt_g_);
        add_registry("d", net_.discriminator_side(), opt_d_);
        out.push_back({"meta.step", {1}, {static_cast<double>(step_)}});
        // Split in two 32-bit halves so the hash survives the float64 payload.
        const auto h = cfg_.hash();
        out.push_back({"meta.config_hash", {2}, {static_cast<double>(h >> 32), static_cast<double>(h & 0xffffffffULL)}});
        return out;
    }

    void restore(const std::vector<CheckpointEntry>& entries) {
        std::map<std::string, const CheckpointEntry*> by_name;
        for (const auto& e : entries) by_name[e.name] = &e;
        auto get = [&](const std::string& name, std::size_t numel) -> const std::vector<double>& {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw CheckpointError("checkpoint: missing entry '" + name + "'");
            if (it->second->values.size() != numel)
                throw CheckpointError("checkpoint: entry '" + name + "' has " + std::to_string(it->second->values.size()) +
                                      " values, expected " + std::to_string(numel));
            return it->second->values;
        };
        const auto& hv = get("meta.config_hash", 2);
        const auto h = (static_cast<std::uint64_t>(hv[0]) << 32) | static_cast<std::uint64_t>(hv[1]);
        if (h != cfg_.hash()) throw CheckpointError("checkpoint: written under a different configuration");
        auto load_registry = [&](const std::string& side, ParamRegistry& reg, Adam& opt) {
            for (const auto& p : reg.params) {
                const auto& v = get(p.name, static_cast<std::size_t>(p.tensor->numel()));
                std::copy(v.begin(), v.end(), p.tensor->data().begin());
            }
            for (const auto& b : reg.buffers) *b.values = get(b.name, b.values->size());
            for (std::size_t i = 0; i < reg.params.size(); ++i) {
                opt.first_moments()[i] = get("adam." + side + ".m." + reg.params[i].name, opt.first_moments()[i].size());
                opt.second_moments()[i] = get("adam." + side + ".v." + reg.params[i].name, opt.second_moments()[i].size());
            }
            opt.set_steps(static_cast<std::int64_t>(get("adam." + side + ".steps", 1)[0]));
        };
        load_registry("g", net_.generator_side(), opt_g_);
        load_registry("d", net_.discriminator_side(), opt_d_);
        step_ = static_cast<std::int64_t>(get("meta.step", 1)[0]);
    }

    void save(const std::string& path) { write_with_retry(path, entries()); }
    void load(const std::string& path) { restore(load_checkpoint_file(path)); }

    MonkeyNet& model() { return net_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t step() const { return step_; }

private:
    static void check_finite(double v, const char* what) {
        if (!std::isfinite(v)) throw NonFiniteLoss(std::string("training: ") + what + " is not finite");
    }

    /// One retry, then the error propagates and training aborts.
    static void write_with_retry(const std::filesystem::path& path, const std::vector<CheckpointEntry>& e) {
        try {
            save_checkpoint_file(path.string(), e);
        } catch (const std::exception&) {
            save_checkpoint_file(path.string(), e);
        }
    }

    void finish(const std::string& out_dir) {
        if (!out_dir.empty()) save((std::filesystem::path(out_dir) / "checkpoint.ckpt").string());
    }

    TrainConfig cfg_;
    MonkeyNet net_;
    Adam opt_g_, opt_d_;
    std::int64_t step_ = 0;
    std::vector<CheckpointEntry> last_good_;
};

}  // namespace monkeynet
