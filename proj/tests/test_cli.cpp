#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "monkeynet/monkeynet.hpp"

using namespace monkeynet;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "monkeynet_cli_test";

/// Runs the CLI with `args`, stdout and stderr to `log`; returns the exit code.
int run(const std::string& args, const fs::path& log = kRoot / "last.log") {
    const std::string cmd = std::string(MONKEYNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string path(const std::string& rel) { return (kRoot / rel).string(); }

class Cli : public ::testing::Test {
protected:
    // One tiny dataset and one tiny trained model shared by every test.
    static void SetUpTestSuite() {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        std::ofstream(kRoot / "c.txt") << "k=3\nepochs=1\nbase_width=2\nmax_channels=8\nbatch_size=4\n";
        ASSERT_EQ(run("make-dataset --out " + path("data") + " --videos 10 --frames 3 --seed 5"), 0);
        ASSERT_EQ(run("train --data " + path("data") + " --out " + path("run") + " --config " + path("c.txt") +
                      " --seed 7"),
                  0)
            << slurp(kRoot / "last.log");
    }
    static void TearDownTestSuite() { fs::remove_all(kRoot); }
};

}  // namespace

TEST_F(Cli, MissingRequiredFlagIsUsageError) {
    EXPECT_EQ(run("train --out " + path("x")), 2);
    EXPECT_NE(slurp(kRoot / "last.log").find("--data"), std::string::npos);
    EXPECT_EQ(run("evaluate --data " + path("data")), 2);
    EXPECT_EQ(run(""), 2);
}

TEST_F(Cli, UnknownFlagOrValueIsUsageError) {
    EXPECT_EQ(run("train --data d --out o --bogus 1"), 2);
    EXPECT_EQ(run("animate --checkpoint c --source s --driving d --out o --mode sideways"), 2);
}

TEST_F(Cli, RuntimeFailureExitsOne) {
    EXPECT_EQ(run("evaluate --checkpoint " + path("missing.ckpt") + " --data " + path("data")), 1);
    EXPECT_NE(slurp(kRoot / "last.log").find("error:"), std::string::npos);
    EXPECT_EQ(run("train --data " + path("nowhere") + " --out " + path("o")), 1);
    EXPECT_EQ(run("train --data " + path("data") + " --out " + path("o") + " --ablation no_such_thing"), 1);
}

TEST_F(Cli, MakeDatasetIsReproducible) {
    const auto log = kRoot / "mk.log";
    ASSERT_EQ(run("make-dataset --out " + path("data2") + " --videos 10 --frames 3 --seed 5", log), 0);
    EXPECT_NE(slurp(log).find("10 videos, 30 frames"), std::string::npos);
    EXPECT_EQ(tree_sha256(path("data")), tree_sha256(path("data2")));
}

TEST_F(Cli, TrainTwiceGivesIdenticalCheckpoints) {
    ASSERT_EQ(run("train --data " + path("data") + " --out " + path("run2") + " --config " + path("c.txt") + " --seed 7"),
              0);
    EXPECT_EQ(slurp(kRoot / "run" / "checkpoint.ckpt"), slurp(kRoot / "run2" / "checkpoint.ckpt"));
    EXPECT_TRUE(fs::exists(kRoot / "run" / "config.txt"));
    EXPECT_TRUE(fs::exists(kRoot / "run" / "losses.csv"));
}

TEST_F(Cli, ReconstructEvaluateAndAnimate) {
    const std::string ck = " --checkpoint " + path("run/checkpoint.ckpt");
    ASSERT_EQ(run("reconstruct" + ck + " --data " + path("data") + " --out " + path("rec")), 0);
    EXPECT_TRUE(fs::exists(kRoot / "rec" / "video_0009" / "frame_002.png"));
    EXPECT_TRUE(fs::exists(kRoot / "rec" / "video_0009" / "animation.gif"));
    ASSERT_EQ(run("evaluate" + ck + " --data " + path("data") + " --out " + path("eval.csv")), 0);
    EXPECT_EQ(slurp(kRoot / "eval.csv").rfind("videos,l1,akd\n1,", 0), 0u);

    const std::string src = path("data/video_0003/frame_000.png"), drv = path("data/video_0009");
    ASSERT_EQ(run("animate" + ck + " --source " + src + " --driving " + drv + " --mode relative --out " + path("rel")), 0);
    ASSERT_EQ(run("animate" + ck + " --source " + src + " --driving " + drv + " --mode absolute --out " + path("abs")), 0);
    for (const char* d : {"rel", "abs"}) {
        EXPECT_TRUE(fs::exists(kRoot / d / "frame_002.png"));
        EXPECT_TRUE(fs::exists(kRoot / d / "grid_frame_000.png"));
        EXPECT_TRUE(fs::exists(kRoot / d / "keypoints.txt"));
    }
    // Absolute mode reports the driving keypoints themselves; relative mode
    // shifts them by the source offset, so the tracks differ.
    EXPECT_NE(slurp(kRoot / "rel" / "keypoints.txt"), slurp(kRoot / "abs" / "keypoints.txt"));
}

TEST_F(Cli, ShowKeypointsDrawsKMarkersWithStableColors) {
    const std::string ck = " --checkpoint " + path("run/checkpoint.ckpt");
    ASSERT_EQ(run("show-keypoints" + ck + " --data " + path("data/video_0001") + " --out " + path("kp")), 0);
    std::ifstream ts(kRoot / "kp" / "keypoints.txt");
    const auto track = read_tracks(ts);
    ASSERT_EQ(track.size(), 3u);
    for (std::size_t t = 0; t < 3; ++t) {
        ASSERT_EQ(track[t].size(), 3u);
        const auto img = read_png((kRoot / "kp" / frame_filename(t)).string());
        // The last keypoint is drawn last, so its cross keeps its own color.
        const auto& k = track[t].back();
        const auto x = std::lround((k.x + 1) * 31.5), y = std::lround((k.y + 1) * 31.5);
        if (x >= 0 && x + 2 < 64 && y >= 0 && y < 64) {
            const auto c = keypoint_color(2);
            for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(img.at(y, x + 2, ch), c[ch], 1.0 / 255);
        }
    }
}

// ---------------------------------------------------------------------------
// overlay helpers, in process

TEST(Overlay, EllipseAxesMatchEigenDecomposition) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const double l1 = rng.uniform(0.01, 0.2), l2 = rng.uniform(0.001, l1), th = rng.uniform(0, std::numbers::pi);
        const double c = std::cos(th), s = std::sin(th);
        const Keypoint kp{0, 0, c * c * l1 + s * s * l2, c * s * (l1 - l2), s * s * l1 + c * c * l2};
        const auto ax = ellipse_axes(kp);
        const double major[2] = {2 * std::sqrt(l1) * c, 2 * std::sqrt(l1) * s};
        const double minor[2] = {-2 * std::sqrt(l2) * s, 2 * std::sqrt(l2) * c};
        // Eigenvectors are defined up to sign.
        const double sa = ax[0][0] * major[0] + ax[0][1] * major[1] >= 0 ? 1 : -1;
        const double sb = ax[1][0] * minor[0] + ax[1][1] * minor[1] >= 0 ? 1 : -1;
        for (int i = 0; i < 2; ++i) {
            EXPECT_NEAR(sa * ax[0][i], major[i], 1e-9);
            EXPECT_NEAR(sb * ax[1][i], minor[i], 1e-9);
        }
    }
}

TEST(Overlay, OneMarkerPerKeypointWithFixedColors) {
    const Image blank(32, 32, 0.5);
    const FrameKeypoints kps{{-0.5, -0.5, 1e-4, 0, 1e-4}, {0.5, 0.0, 1e-4, 0, 1e-4}, {0.0, 0.6, 1e-4, 0, 1e-4}};
    const auto a = overlay_keypoints(blank, kps);
    for (std::size_t k = 0; k < kps.size(); ++k) {
        const auto x = std::lround((kps[k].x + 1) * 15.5), y = std::lround((kps[k].y + 1) * 15.5);
        const auto c = keypoint_color(k);
        for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(a.at(y, x + 2, ch), c[ch]);
    }
    std::size_t colored = 0;
    for (std::size_t i = 0; i < a.pixels.size(); i += 3) colored += a.pixels[i] != 0.5 || a.pixels[i + 1] != 0.5;
    EXPECT_GE(colored, 3u * 9u);  // three crosses of nine pixels
    EXPECT_EQ(keypoint_color(4), keypoint_color(4));
    EXPECT_NE(keypoint_color(0), keypoint_color(1));
}

TEST(Overlay, HstackLayout) {
    const Image a(4, 3, 0.0), b(4, 5, 1.0);
    const auto s = hstack({&a, &b});
    EXPECT_EQ(s.width, 3 + 2 + 5);
    EXPECT_EQ(s.at(1, 0, 0), 0.0);
    EXPECT_EQ(s.at(1, 5, 0), 1.0);
    const Image tall(5, 2);
    EXPECT_THROW(hstack({&a, &tall}), std::invalid_argument);
}
