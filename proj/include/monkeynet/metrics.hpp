#pragma once

// Evaluation metrics: per-pixel L1 between clips and the average keypoint
// distance between two keypoint tracks after a first-frame minimum-cost
// matching (learned keypoints carry no labels).

#include <cmath>
#include <limits>
#include <vector>

#include "monkeynet/video.hpp"

namespace monkeynet {

/// Mean |a - b| over all frames, pixels and channels.
inline double metric_l1(const VideoClip& generated, const VideoClip& reference) {
    detail::require(generated.size() == reference.size() && !generated.frames.empty(),
                    "metric_l1: clips have ", generated.size(), " and ", reference.size(), " frames");
    double total = 0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < generated.size(); ++t) {
        const auto& a = generated.frames[t];
        const auto& b = reference.frames[t];
        detail::require(a.height == b.height && a.width == b.width, "metric_l1: frame ", t, " is ", a.height, "x",
                        a.width, " vs ", b.height, "x", b.width);
        for (std::size_t i = 0; i < a.pixels.size(); ++i) total += std::abs(a.pixels[i] - b.pixels[i]);
        count += a.pixels.size();
    }
    return total / static_cast<double>(count);
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
/// Returns the column chosen for each row. Shortest augmenting path with
/// potentials, O(rows^2 * cols).
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    const int m = static_cast<int>(cost.front().size());
    detail::require(n <= m, "min_cost_assignment: ", n, " rows cannot be matched to ", m, " columns");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(m + 1, 0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

/// For each reference keypoint, the index of the detected keypoint matched to
/// it on the first frame (Euclidean cost). With fewer detected than reference
/// keypoints every detected one is matched and the leftover references get -1.
inline std::vector<int> match_keypoints(const FrameKeypoints& detected, const FrameKeypoints& reference) {
    const bool transpose = detected.size() < reference.size();
    const auto& rows = transpose ? detected : reference;
    const auto& cols = transpose ? reference : detected;
    std::vector<std::vector<double>> cost(rows.size(), std::vector<double>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) cost[r][c] = std::hypot(rows[r].x - cols[c].x, rows[r].y - cols[c].y);
    const auto assigned = min_cost_assignment(cost);
    if (!transpose) return assigned;
    std::vector<int> out(reference.size(), -1);
    for (std::size_t d = 0; d < assigned.size(); ++d) out[static_cast<std::size_t>(assigned[d])] = static_cast<int>(d);
    return out;
}

/// Mean distance, in pixels, between matched keypoints over all frames.
/// `matching[r]` is the detected index paired with reference keypoint r, or
/// -1 to leave r unmatched.
inline double metric_akd(const KeypointTrack& detected, const KeypointTrack& reference, const std::vector<int>& matching,
                         std::int64_t width, std::int64_t height) {
    detail::require(detected.size() == reference.size() && !detected.empty(), "metric_akd: tracks have ",
                    detected.size(), " and ", reference.size(), " frames");
    const double sx = 0.5 * static_cast<double>(width - 1), sy = 0.5 * static_cast<double>(height - 1);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < detected.size(); ++t) {
        detail::require(reference[t].size() == matching.size(), "metric_akd: frame ", t, " has ", reference[t].size(),
                        " reference keypoints but the matching covers ", matching.size());
        for (std::size_t r = 0; r < matching.size(); ++r) {
            const int d = matching[r];
            if (d < 0) continue;
            detail::require(static_cast<std::size_t>(d) < detected[t].size(),
                            "metric_akd: matching index out of range at frame ", t);
            total += std::hypot((detected[t][d].x - reference[t][r].x) * sx, (detected[t][d].y - reference[t][r].y) * sy);
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

/// First-frame matching followed by metric_akd.
inline double metric_akd(const KeypointTrack& detected, const KeypointTrack& reference, std::int64_t width,
                         std::int64_t height) {
    detail::require(!detected.empty() && !reference.empty(), "metric_akd: empty track");
    return metric_akd(detected, reference, match_keypoints(detected.front(), reference.front()), width, height);
}

}  // namespace monkeynet
