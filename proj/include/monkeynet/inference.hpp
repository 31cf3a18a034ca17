#pragma once

// Evaluation-time procedures: video reconstruction, image animation with
// relative or absolute keypoint transfer, and the held-out metric suite.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "monkeynet/metrics.hpp"
#include "monkeynet/model.hpp"
#include "monkeynet/video.hpp"

namespace monkeynet {

enum class TransferMode { Relative, Absolute };

inline TransferMode parse_transfer_mode(const std::string& s) {
    if (s == "relative") return TransferMode::Relative;
    if (s == "absolute") return TransferMode::Absolute;
    detail::fail("unknown transfer mode '", s, "' (expected relative or absolute)");
}

/// h' = h_s + (h_t - h_1) per keypoint. When h_s equals h_1 the result is
/// h_t itself, so the collapse case is exact rather than rounded.
inline FrameKeypoints transfer_keypoints_relative(const FrameKeypoints& source, const FrameKeypoints& drive_first,
                                                  const FrameKeypoints& drive_t) {
    detail::require(source.size() == drive_first.size() && source.size() == drive_t.size(),
                    "transfer_keypoints_relative: K differs (", source.size(), ", ", drive_first.size(), ", ",
                    drive_t.size(), ")");
    auto move = [](double s, double a, double b) { return s == a ? b : s + (b - a); };
    FrameKeypoints out(source.size());
    for (std::size_t k = 0; k < source.size(); ++k) {
        out[k] = drive_t[k];
        out[k].x = move(source[k].x, drive_first[k].x, drive_t[k].x);
        out[k].y = move(source[k].y, drive_first[k].y, drive_t[k].y);
    }
    return out;
}

/// Keypoint pair used to render one animated frame.
struct TransferPair {
    FrameKeypoints source_pose;   // rendered as H
    FrameKeypoints driving_pose;  // rendered as H' (unclipped)
};

/// Covariances come from the driving video: the source-pose map uses the
/// first driving frame's covariances, the transferred map those of frame t.
/// Absolute mode keeps the source's own keypoints and uses frame t directly.
inline TransferPair assign_transfer(TransferMode mode, const FrameKeypoints& source, const FrameKeypoints& drive_first,
                                    const FrameKeypoints& drive_t) {
    if (mode == TransferMode::Absolute) return {source, drive_t};
    TransferPair p{source, transfer_keypoints_relative(source, drive_first, drive_t)};
    for (std::size_t k = 0; k < source.size(); ++k) {
        p.source_pose[k].sxx = drive_first[k].sxx;
        p.source_pose[k].sxy = drive_first[k].sxy;
        p.source_pose[k].syy = drive_first[k].syy;
    }
    return p;
}

/// Count of keypoints outside [-1,1]^2 (they are clipped for rendering).
inline std::size_t count_out_of_range(const FrameKeypoints& kps) {
    return static_cast<std::size_t>(std::count_if(kps.begin(), kps.end(), [](const Keypoint& k) {
        return k.x < -1.0 || k.x > 1.0 || k.y < -1.0 || k.y > 1.0;
    }));
}

inline FrameKeypoints clip_to_lattice(FrameKeypoints kps) {
    for (auto& k : kps) {
        k.x = std::clamp(k.x, -1.0, 1.0);
        k.y = std::clamp(k.y, -1.0, 1.0);
    }
    return kps;
}

inline constexpr std::size_t kInferenceChunk = 8;

/// Keypoints of every frame, detected in eval mode.
inline KeypointTrack detect_track(MonkeyNet& net, const std::vector<Image>& frames) {
    NoGradGuard guard;
    KeypointTrack track;
    for (std::size_t b = 0; b < frames.size(); b += kInferenceChunk) {
        std::vector<const Image*> batch;
        for (std::size_t i = b; i < std::min(frames.size(), b + kInferenceChunk); ++i) batch.push_back(&frames[i]);
        auto kps = net.keypoints(images_to_tensor(batch), ForwardContext{false});
        for (std::int64_t n = 0; n < kps.batch(); ++n) track.push_back(keypoints_of_sample(kps, n));
    }
    return track;
}

/// Generates one frame per keypoint pair from a single source image.
inline std::vector<Image> generate_frames(MonkeyNet& net, const Image& source, const std::vector<TransferPair>& pairs) {
    NoGradGuard guard;
    std::vector<Image> out;
    for (std::size_t b = 0; b < pairs.size(); b += kInferenceChunk) {
        const std::size_t n = std::min(pairs.size() - b, kInferenceChunk);
        std::vector<const Image*> src(n, &source);
        std::vector<FrameKeypoints> ks, kd;
        for (std::size_t i = b; i < b + n; ++i) {
            ks.push_back(clip_to_lattice(pairs[i].source_pose));
            kd.push_back(clip_to_lattice(pairs[i].driving_pose));
        }
        auto gen = net.generate(images_to_tensor(src), keypoint_set_from(ks), keypoint_set_from(kd),
                                ForwardContext{false});
        for (std::size_t i = 0; i < n; ++i) out.push_back(tensor_to_image(gen.image, static_cast<std::int64_t>(i)));
    }
    return out;
}

struct AnimationResult {
    VideoClip video;
    KeypointTrack source_track;   // keypoints rendered as H, per frame
    KeypointTrack driving_track;  // transferred keypoints, unclipped
    std::size_t out_of_range = 0; // clipped keypoints over all frames
};

/// Animates `source` with the motion of `driving`. The source keypoints are
/// detected once.
inline AnimationResult animate(MonkeyNet& net, const Image& source, const VideoClip& driving, TransferMode mode) {
    detail::require(!driving.frames.empty(), "animate: driving clip is empty");
    detail::require(source.height == driving.height() && source.width == driving.width(), "animate: source is ",
                    source.height, "x", source.width, " but driving frames are ", driving.height(), "x",
                    driving.width());
    const auto src_kp = detect_track(net, {source}).front();
    const auto drv = detect_track(net, driving.frames);
    AnimationResult res;
    std::vector<TransferPair> pairs;
    for (const auto& d : drv) {
        pairs.push_back(assign_transfer(mode, src_kp, drv.front(), d));
        res.source_track.push_back(pairs.back().source_pose);
        res.driving_track.push_back(pairs.back().driving_pose);
        res.out_of_range += count_out_of_range(pairs.back().driving_pose);
    }
    res.video.id = driving.id + "_animated";
    res.video.frames = generate_frames(net, source, pairs);
    return res;
}

/// Frame 0 is copied; frame t >= 1 is generated from frame 0 and the
/// keypoints of frames 0 and t, which is relative animation with the first
/// frame as source.
inline VideoClip reconstruct_video(MonkeyNet& net, const VideoClip& clip) {
    detail::require(clip.size() >= 2, "reconstruct_video: clip ", clip.id, " has ", clip.size(), " frame(s)");
    auto res = animate(net, clip.frames.front(), clip, TransferMode::Relative);
    res.video.id = clip.id;
    res.video.split = clip.split;
    res.video.frames.front() = clip.frames.front();
    return res.video;
}

struct MetricReport {
    double l1 = 0;
    double akd = 0;
    std::size_t videos = 0;
};

/// Held-out L1 between reconstructions and inputs, and AKD between keypoints
/// detected on the reconstructions and the ground-truth tracks (first-frame
/// matching per video). AKD is skipped for clips without tracks.
inline MetricReport evaluate(MonkeyNet& net, const std::vector<VideoClip>& clips) {
    detail::require(!clips.empty(), "evaluate: no clips");
    MetricReport r;
    double akd_sum = 0;
    std::size_t akd_n = 0;
    for (const auto& clip : clips) {
        const auto rec = reconstruct_video(net, clip);
        r.l1 += metric_l1(rec, clip);
        if (!clip.tracks.empty()) {
            const auto det = detect_track(net, rec.frames);
            akd_sum += metric_akd(det, clip.tracks, clip.width(), clip.height());
            ++akd_n;
        }
    }
    r.videos = clips.size();
    r.l1 /= static_cast<double>(clips.size());
    r.akd = akd_n ? akd_sum / static_cast<double>(akd_n) : 0.0;
    return r;
}

}  // namespace monkeynet
