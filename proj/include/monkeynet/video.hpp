#pragma once

#include <string>
#include <vector>

#include "monkeynet/image_io.hpp"
#include "monkeynet/keypoints.hpp"

namespace monkeynet {

/// Ordered frames of one size, plus ground-truth tracks when known.
struct VideoClip {
    std::string id;
    std::string split;  // "train" / "test"; empty for ad-hoc clips
    std::vector<Image> frames;
    KeypointTrack tracks;

    std::size_t size() const { return frames.size(); }
    std::int64_t height() const { return frames.empty() ? 0 : frames.front().height; }
    std::int64_t width() const { return frames.empty() ? 0 : frames.front().width; }
};

}  // namespace monkeynet
