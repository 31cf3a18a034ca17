// monkeynet: dataset generation, training, reconstruction, animation,
// evaluation and keypoint visualization from one entry point.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "monkeynet/monkeynet.hpp"

namespace fs = std::filesystem;
using namespace monkeynet;

namespace {

struct ModelFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> k;
    std::optional<int> epochs;
    std::vector<std::string> ablations;

    void attach(CLI::App* cmd, bool with_k = true) {
        cmd->add_option("--config", config, "key=value configuration file");
        cmd->add_option("--seed", seed, "random seed");
        if (with_k) cmd->add_option("--k", k, "number of keypoints");
        cmd->add_option("--epochs", epochs, "epochs T at the first learning rate");
        cmd->add_option("--ablation", ablations, "no_flow|no_coarse|no_residual|fixed_sigma|no_appearance (repeatable)")
            ->take_all();
    }

    /// File values first, flags override them.
    TrainConfig resolve(const std::string& fallback_config = "") const {
        TrainConfig cfg;
        const std::string path = !config.empty() ? config : fallback_config;
        if (!path.empty()) cfg = load_config_file(path);
        if (seed) cfg.seed = *seed;
        if (k) cfg.num_keypoints = *k;
        if (epochs) cfg.epochs = *epochs;
        for (const auto& a : ablations) cfg.set_ablation(a);
        cfg.validate();
        return cfg;
    }
};

/// Trained model restored from a checkpoint. The configuration is read from
/// --config or, failing that, config.txt next to the checkpoint.
std::unique_ptr<Trainer> load_trained(const ModelFlags& flags, const std::string& checkpoint) {
    const auto sibling = fs::path(checkpoint).parent_path() / "config.txt";
    const auto cfg = flags.resolve(flags.config.empty() && fs::exists(sibling) ? sibling.string() : "");
    auto t = std::make_unique<Trainer>(cfg);
    t->load(checkpoint);
    return t;
}

std::vector<VideoClip> load_clips(const std::string& data, const std::string& split) {
    if (fs::exists(fs::path(data) / "manifest.txt")) return load_dataset(data, split);
    return {load_frames(data)};
}

void write_clip(const VideoClip& clip, const std::string& dir) {
    save_frames(clip, dir);
    write_gif((fs::path(dir) / "animation.gif").string(), clip.frames);
}

void write_track_file(const KeypointTrack& track, const fs::path& path) {
    std::ofstream os(path);
    if (!os) detail::fail("cannot write '", path.string(), "'");
    write_tracks(os, track);
}

std::vector<std::int64_t> parse_k_list(const std::string& s) {
    std::vector<std::int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        const long long v = std::stoll(item, &pos);
        if (pos != item.size() || v < 1) detail::fail("--k: bad keypoint count '", item, "'");
        out.push_back(v);
    }
    detail::require(!out.empty(), "--k: empty list");
    return out;
}

int train_one(TrainConfig cfg, const std::string& data, const std::string& out, const std::string& resume,
              std::optional<std::int64_t> max_steps) {
    const auto train = load_dataset(data, "train");
    fs::create_directories(out);
    {
        std::ofstream os(fs::path(out) / "config.txt");
        os << cfg.to_string();
    }
    Trainer t(cfg);
    if (!resume.empty()) t.load(resume);
    const auto total = t.total_steps(train.size());
    std::cerr << "training " << train.size() << " videos, " << total << " steps\n";
    t.run(train, out, max_steps, [total](std::int64_t step, const LossReport& r) {
        if (step % 25 == 0 || step == total)
            std::fprintf(stderr, "step %lld/%lld  loss_D %.4f  loss_G_gan %.4f  loss_rec %.4f\n",
                         static_cast<long long>(step), static_cast<long long>(total), r.loss_D, r.loss_G_gan,
                         r.loss_rec);
    });
    std::cout << (fs::path(out) / "checkpoint.ckpt").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Keypoint-driven image animation"};
    app.require_subcommand(1);

    auto* mk = app.add_subcommand("make-dataset", "write the synthetic moving-shapes dataset");
    SynthSpec spec;
    std::string out;
    mk->add_option("--out", out, "output directory")->required();
    mk->add_option("--seed", spec.seed, "dataset seed");
    mk->add_option("--videos", spec.num_videos, "number of videos");
    mk->add_option("--frames", spec.frames_per_video, "frames per video");

    ModelFlags flags;
    std::string data, checkpoint, mode = "relative", source, driving, k_list = "2,4,8";
    std::optional<std::int64_t> max_steps;

    auto* tr = app.add_subcommand("train", "train on a dataset directory");
    flags.attach(tr);
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--out", out, "run directory")->required();
    tr->add_option("--checkpoint", checkpoint, "resume from this checkpoint");
    tr->add_option("--max-steps", max_steps, "stop after this many total steps");

    auto* rc = app.add_subcommand("reconstruct", "regenerate clips from their first frame and keypoints");
    flags.attach(rc);
    rc->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    rc->add_option("--data", data, "dataset directory (test split) or a frame directory")->required();
    rc->add_option("--out", out, "output directory")->required();

    auto* an = app.add_subcommand("animate", "animate a source image with a driving video");
    flags.attach(an);
    an->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    an->add_option("--source", source, "source PNG")->required();
    an->add_option("--driving,--data", driving, "directory of numbered driving PNG frames")->required();
    an->add_option("--mode", mode, "relative|absolute")->check(CLI::IsMember({"relative", "absolute"}));
    an->add_option("--out", out, "output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "held-out L1 and AKD");
    flags.attach(ev);
    ev->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--out", out, "optional CSV output");

    auto* sk = app.add_subcommand("show-keypoints", "overlay detected keypoints on frames");
    flags.attach(sk);
    sk->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    sk->add_option("--data", data, "frame directory or single PNG")->required();
    sk->add_option("--out", out, "output directory")->required();

    auto* sw = app.add_subcommand("kp-sweep", "train and evaluate for several keypoint counts");
    flags.attach(sw, false);
    sw->add_option("--k", k_list, "comma-separated keypoint counts");
    sw->add_option("--data", data, "dataset directory")->required();
    sw->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*mk) {
            const auto manifest = generate_dataset(spec, out);
            std::size_t frames = 0;
            for (const auto& m : manifest) frames += m.frame_count;
            std::cout << manifest.size() << " videos, " << frames << " frames -> " << out << "\n"
                      << "sha256 " << tree_sha256(out) << "\n";
        } else if (*tr) {
            return train_one(flags.resolve(), data, out, checkpoint, max_steps);
        } else if (*rc) {
            auto t = load_trained(flags, checkpoint);
            for (const auto& clip : load_clips(data, "test")) {
                const auto rec = reconstruct_video(t->model(), clip);
                write_clip(rec, (fs::path(out) / clip.id).string());
                std::printf("%s l1 %.6f\n", clip.id.c_str(), metric_l1(rec, clip));
            }
        } else if (*an) {
            auto t = load_trained(flags, checkpoint);
            const auto src = read_png(source);
            const auto drv = load_frames(driving);
            const auto res = animate(t->model(), src, drv, parse_transfer_mode(mode));
            write_clip(res.video, out);
            write_track_file(res.driving_track, fs::path(out) / "keypoints.txt");
            for (std::size_t i = 0; i < res.video.size(); ++i)
                write_png((fs::path(out) / ("grid_" + frame_filename(i))).string(),
                          hstack({&src, &drv.frames[i], &res.video.frames[i]}));
            if (res.out_of_range > 0)
                std::cerr << "warning: " << res.out_of_range
                          << " transferred keypoint(s) left the image and were clipped for rendering;"
                             " source and driving poses may be misaligned\n";
        } else if (*ev) {
            auto t = load_trained(flags, checkpoint);
            const auto r = evaluate(t->model(), load_clips(data, "test"));
            std::printf("videos %zu\nl1 %.6f\nakd %.4f\n", r.videos, r.l1, r.akd);
            if (!out.empty()) {
                std::ofstream os(out);
                os << "videos,l1,akd\n" << r.videos << ',' << r.l1 << ',' << r.akd << '\n';
            }
        } else if (*sk) {
            auto t = load_trained(flags, checkpoint);
            const auto clip = load_frames(data);
            const auto track = detect_track(t->model(), clip.frames);
            fs::create_directories(out);
            for (std::size_t i = 0; i < clip.size(); ++i)
                write_png((fs::path(out) / frame_filename(i)).string(), overlay_keypoints(clip.frames[i], track[i]));
            write_track_file(track, fs::path(out) / "keypoints.txt");
        } else if (*sw) {
            fs::create_directories(out);
            const auto test = load_dataset(data, "test");
            std::ofstream csv(fs::path(out) / "kp_sweep.csv");
            csv << "K,L1,AKD\n";
            for (auto k : parse_k_list(k_list)) {
                auto cfg = flags.resolve();
                cfg.num_keypoints = k;
                const auto run_dir = (fs::path(out) / ("k" + std::to_string(k))).string();
                train_one(cfg, data, run_dir, "", std::nullopt);
                Trainer t(cfg);
                t.load((fs::path(run_dir) / "checkpoint.ckpt").string());
                const auto r = evaluate(t.model(), test);
                csv << k << ',' << r.l1 << ',' << r.akd << '\n' << std::flush;
                std::printf("K %lld l1 %.6f akd %.4f\n", static_cast<long long>(k), r.l1, r.akd);
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
