// Trains a small model on in-memory synthetic videos for a few epochs and
// reports held-out reconstruction quality before and after.
//
//   sample_quickstart [epochs] [keypoints]

#include <cstdio>
#include <cstdlib>

#include "monkeynet/monkeynet.hpp"

using namespace monkeynet;

int main(int argc, char** argv) {
    SynthSpec spec;
    spec.num_videos = 40;
    spec.frames_per_video = 8;
    const auto videos = generate_videos(spec);
    std::vector<VideoClip> train, test;
    for (const auto& v : videos) (v.split == "test" ? test : train).push_back(v);

    TrainConfig cfg;
    cfg.epochs = argc > 1 ? std::atoi(argv[1]) : 2;
    cfg.num_keypoints = argc > 2 ? std::atoi(argv[2]) : 4;
    Trainer trainer(cfg);

    const auto before = evaluate(trainer.model(), test);
    std::printf("initial   l1 %.4f  akd %.2f px\n", before.l1, before.akd);
    trainer.run(train, "", std::nullopt, [](std::int64_t step, const LossReport& r) {
        std::printf("step %3lld  loss_D %.4f  loss_G_gan %.4f  loss_rec %.4f\n", static_cast<long long>(step),
                    r.loss_D, r.loss_G_gan, r.loss_rec);
    });
    const auto after = evaluate(trainer.model(), test);
    std::printf("trained   l1 %.4f  akd %.2f px\n", after.l1, after.akd);
}
