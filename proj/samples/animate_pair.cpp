// Animates the first frame of one synthetic video with the motion of another
// using an untrained (or checkpointed) model, writing a comparison strip per
// frame.
//
//   sample_animate_pair out_dir [checkpoint config]

#include <cstdio>
#include <filesystem>

#include "monkeynet/monkeynet.hpp"

using namespace monkeynet;

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: %s out_dir [checkpoint config]\n", argv[0]);
        return 2;
    }
    const std::filesystem::path out = argv[1];
    std::filesystem::create_directories(out);
    SynthSpec spec;
    spec.num_videos = 2;
    const auto source = generate_video(spec, 0);
    const auto driving = generate_video(spec, 1);

    TrainConfig cfg;
    cfg.num_keypoints = 4;
    if (argc > 3) cfg = load_config_file(argv[3]);
    Trainer t(cfg);
    if (argc > 2) t.load(argv[2]);

    for (auto mode : {TransferMode::Relative, TransferMode::Absolute}) {
        const auto res = animate(t.model(), source.frames.front(), driving, mode);
        const char* tag = mode == TransferMode::Relative ? "relative" : "absolute";
        for (std::size_t i = 0; i < res.video.size(); ++i) {
            const auto overlay = overlay_keypoints(res.video.frames[i], res.driving_track[i]);
            write_png((out / (std::string(tag) + "_" + frame_filename(i))).string(),
                      hstack({&source.frames.front(), &driving.frames[i], &overlay}));
        }
        std::printf("%s: %zu frames, %zu clipped keypoints\n", tag, res.video.size(), res.out_of_range);
    }
}
