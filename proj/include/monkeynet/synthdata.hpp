#pragma once

// Deterministic moving-shapes videos with analytic ground-truth tracks.
//
// Each video holds 1-3 rigid, striped shapes (ellipses or regular polygons)
// that translate and rotate over a static textured background, bouncing off
// the canvas margins so they never leave it. The ground-truth keypoint of a
// shape is its centroid and the covariance of its area, both derived from the
// motion script rather than measured from pixels.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "monkeynet/metrics.hpp"
#include "monkeynet/random.hpp"

namespace monkeynet {

struct SynthSpec {
    std::uint64_t seed = 7;
    int num_videos = 200;
    int frames_per_video = 16;
    int size = 64;
    double test_fraction = 0.1;
};

enum class ShapeKind { Ellipse, Polygon };

struct ShapeScript {
    ShapeKind kind = ShapeKind::Ellipse;
    int sides = 0;             // polygons only
    double a = 6, b = 6;       // ellipse semi-axes, or polygon circumradius in `a`
    double x0 = 32, y0 = 32;   // initial center, pixels
    double vx = 0, vy = 0;     // pixels / frame
    double angle0 = 0, omega = 0;  // radians, radians / frame
    double color[3] = {1, 0, 0};
    double stripe_color[3] = {0, 0, 1};
    double stripe_period = 4;  // pixels

    /// Center at frame t after reflecting off [lo, hi] on each axis.
    std::array<double, 2> center(int t, double lo, double hi) const {
        auto reflect = [lo, hi](double p) {
            const double span = hi - lo;
            double q = std::fmod(p - lo, 2.0 * span);
            if (q < 0) q += 2.0 * span;
            return lo + (q <= span ? q : 2.0 * span - q);
        };
        return {reflect(x0 + vx * t), reflect(y0 + vy * t)};
    }
    double angle(int t) const { return angle0 + omega * t; }
    double extent() const { return kind == ShapeKind::Ellipse ? std::max(a, b) : a; }

    /// Area covariance in the shape's own frame (pixels^2): (var_u, var_v).
    std::array<double, 2> body_variance() const {
        if (kind == ShapeKind::Ellipse) return {a * a / 4.0, b * b / 4.0};
        const double c = std::cos(std::numbers::pi / sides);
        const double v = a * a * (1.0 + 2.0 * c * c) / 12.0;
        return {v, v};
    }

    /// Point-in-shape test in the shape's rotated body frame.
    bool contains(double u, double v) const {
        if (kind == ShapeKind::Ellipse) return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
        const double apothem = a * std::cos(std::numbers::pi / sides);
        for (int s = 0; s < sides; ++s) {
            const double th = (2.0 * s + 1.0) * std::numbers::pi / sides;
            if (u * std::cos(th) + v * std::sin(th) > apothem) return false;
        }
        return true;
    }
};

struct VideoScript {
    std::vector<ShapeScript> shapes;
    double bg_a[3], bg_b[3];
    double bg_freq[3][2];
    double bg_phase[3];
};

namespace detail {

inline void random_color(Rng& rng, double* c) {
    // Saturated hue with a random brightness.
    const double h = rng.uniform(0, 6), v = rng.uniform(0.6, 1.0);
    const int s = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double tbl[6][3] = {{1, f, 0}, {1 - f, 1, 0}, {0, 1, f}, {0, 1 - f, 1}, {f, 0, 1}, {1, 0, 1 - f}};
    for (int i = 0; i < 3; ++i) c[i] = v * tbl[s][i];
}

}  // namespace detail

inline double synth_margin() { return 3.0; }

/// Draws the motion script of video `index` from its own derived seed.
inline VideoScript make_video_script(const SynthSpec& spec, int index) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
    VideoScript vs;
    for (int c = 0; c < 3; ++c) {
        vs.bg_a[c] = rng.uniform(0.25, 0.55);
        vs.bg_b[c] = rng.uniform(0.25, 0.55);
        vs.bg_phase[c] = rng.uniform(0, 2 * std::numbers::pi);
        const double ang = rng.uniform(0, std::numbers::pi), freq = rng.uniform(0.08, 0.35);
        vs.bg_freq[c][0] = freq * std::cos(ang);
        vs.bg_freq[c][1] = freq * std::sin(ang);
    }
    const int count = 1 + static_cast<int>(rng.below(3));
    const double S = spec.size - 1;
    for (int i = 0; i < count; ++i) {
        ShapeScript sh;
        if (rng.below(2) == 0) {
            sh.kind = ShapeKind::Ellipse;
            sh.a = rng.uniform(5.0, 9.0);
            sh.b = rng.uniform(3.5, sh.a);
        } else {
            sh.kind = ShapeKind::Polygon;
            sh.sides = 3 + static_cast<int>(rng.below(4));
            sh.a = rng.uniform(6.0, 9.5);
        }
        const double lo = sh.extent() + synth_margin(), hi = S - sh.extent() - synth_margin();
        sh.x0 = rng.uniform(lo, hi);
        sh.y0 = rng.uniform(lo, hi);
        const double speed = rng.uniform(0.8, 2.0), dir = rng.uniform(0, 2 * std::numbers::pi);
        sh.vx = speed * std::cos(dir);
        sh.vy = speed * std::sin(dir);
        sh.angle0 = rng.uniform(0, 2 * std::numbers::pi);
        sh.omega = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
        detail::random_color(rng, sh.color);
        for (int c = 0; c < 3; ++c) sh.stripe_color[c] = 0.35 * sh.color[c];
        sh.stripe_period = rng.uniform(3.0, 5.0);
        vs.shapes.push_back(sh);
    }
    return vs;
}

/// Ground-truth keypoint (normalized coordinates) of a shape at frame t.
inline Keypoint shape_keypoint(const ShapeScript& sh, int t, int size) {
    const double S = size - 1;
    const auto c = sh.center(t, sh.extent() + synth_margin(), S - sh.extent() - synth_margin());
    const auto bv = sh.body_variance();
    const double th = sh.angle(t), ct = std::cos(th), st = std::sin(th);
    const double sxx = ct * ct * bv[0] + st * st * bv[1];
    const double syy = st * st * bv[0] + ct * ct * bv[1];
    const double sxy = ct * st * (bv[0] - bv[1]);
    const double k = 2.0 / S;
    return {-1.0 + c[0] * k, -1.0 + c[1] * k, sxx * k * k, sxy * k * k, syy * k * k};
}

/// Renders frame t with 4x4 supersampling, quantized to 8 bits.
inline Image render_frame(const VideoScript& vs, int t, int size) {
    Image img(size, size);
    const double S = size - 1;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) {
                const double w = 0.5 + 0.5 * std::sin(vs.bg_freq[c][0] * x + vs.bg_freq[c][1] * y + vs.bg_phase[c]);
                img.at(y, x, c) = vs.bg_a[c] * w + vs.bg_b[c] * (1.0 - w) * 0.6;
            }
    constexpr int kSub = 4;
    for (const auto& sh : vs.shapes) {
        const auto ctr = sh.center(t, sh.extent() + synth_margin(), S - sh.extent() - synth_margin());
        const double th = sh.angle(t), ct = std::cos(th), st = std::sin(th);
        const double r = sh.extent() + 1;
        const int x_lo = std::max(0, static_cast<int>(std::floor(ctr[0] - r)));
        const int x_hi = std::min(size - 1, static_cast<int>(std::ceil(ctr[0] + r)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(ctr[1] - r)));
        const int y_hi = std::min(size - 1, static_cast<int>(std::ceil(ctr[1] + r)));
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x) {
                double acc[3] = {0, 0, 0};
                int hits = 0;
                for (int sy = 0; sy < kSub; ++sy)
                    for (int sx = 0; sx < kSub; ++sx) {
                        const double px = x - 0.5 + (sx + 0.5) / kSub - ctr[0];
                        const double py = y - 0.5 + (sy + 0.5) / kSub - ctr[1];
                        const double u = ct * px + st * py, v = -st * px + ct * py;
                        if (!sh.contains(u, v)) continue;
                        ++hits;
                        const bool stripe = std::fmod(std::floor(u / sh.stripe_period), 2.0) != 0.0;
                        const double* col = stripe ? sh.stripe_color : sh.color;
                        for (int c = 0; c < 3; ++c) acc[c] += col[c];
                    }
                if (hits == 0) continue;
                const double cover = static_cast<double>(hits) / (kSub * kSub);
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = (1.0 - cover) * img.at(y, x, c) + acc[c] / (kSub * kSub);
            }
    }
    quantize_8bit(img);
    return img;
}

inline std::string synth_video_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "video_%04d", index);
    return buf;
}

inline std::string synth_split(const SynthSpec& spec, int index) {
    const int stride = spec.test_fraction > 0 ? static_cast<int>(std::lround(1.0 / spec.test_fraction)) : 0;
    return stride > 0 && index % stride == stride - 1 ? "test" : "train";
}

inline VideoClip generate_video(const SynthSpec& spec, int index) {
    const auto vs = make_video_script(spec, index);
    VideoClip clip;
    clip.id = synth_video_id(index);
    clip.split = synth_split(spec, index);
    for (int t = 0; t < spec.frames_per_video; ++t) {
        clip.frames.push_back(render_frame(vs, t, spec.size));
        FrameKeypoints kps;
        for (const auto& sh : vs.shapes) kps.push_back(shape_keypoint(sh, t, spec.size));
        clip.tracks.push_back(std::move(kps));
    }
    return clip;
}

/// The whole dataset in memory, identical to what generate_dataset writes.
inline std::vector<VideoClip> generate_videos(const SynthSpec& spec) {
    detail::require(spec.frames_per_video >= 2, "synthdata: videos need at least 2 frames");
    detail::require(spec.num_videos >= 1, "synthdata: need at least one video");
    std::vector<VideoClip> out;
    out.reserve(spec.num_videos);
    for (int i = 0; i < spec.num_videos; ++i) out.push_back(generate_video(spec, i));
    return out;
}

inline std::string frame_filename(std::size_t t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03zu.png", t);
    return buf;
}

struct ManifestEntry {
    std::string id, split;
    std::size_t frame_count = 0;
    std::string track_file;
};

/// Writes <out>/<id>/frame_NNN.png, <out>/<id>/tracks.txt and <out>/manifest.txt
/// (one line per video: id split frame_count track_file).
inline std::vector<ManifestEntry> generate_dataset(const SynthSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) detail::fail("generate_dataset: cannot create '", out_dir, "'");
    std::vector<ManifestEntry> manifest;
    for (int i = 0; i < spec.num_videos; ++i) {
        const auto clip = generate_video(spec, i);
        const fs::path dir = fs::path(out_dir) / clip.id;
        fs::create_directories(dir, ec);
        if (ec) detail::fail("generate_dataset: cannot create '", dir.string(), "'");
        for (std::size_t t = 0; t < clip.size(); ++t) write_png((dir / frame_filename(t)).string(), clip.frames[t]);
        const std::string track_rel = clip.id + "/tracks.txt";
        std::ofstream ts(fs::path(out_dir) / track_rel);
        if (!ts) detail::fail("generate_dataset: cannot write tracks for ", clip.id);
        write_tracks(ts, clip.tracks);
        manifest.push_back({clip.id, clip.split, clip.size(), track_rel});
    }
    std::ofstream ms(fs::path(out_dir) / "manifest.txt");
    if (!ms) detail::fail("generate_dataset: cannot write manifest in '", out_dir, "'");
    for (const auto& m : manifest) ms << m.id << ' ' << m.split << ' ' << m.frame_count << ' ' << m.track_file << '\n';
    return manifest;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
    std::ifstream is(std::filesystem::path(dir) / "manifest.txt");
    if (!is) detail::fail("read_manifest: no manifest.txt in '", dir, "'");
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        if (!(ls >> e.id >> e.split >> e.frame_count >> e.track_file)) detail::fail("read_manifest: malformed line '", line, "'");
        out.push_back(e);
    }
    return out;
}

/// Loads a dataset written by generate_dataset. Videos with fewer than two
/// frames are rejected since training samples frame pairs.
inline std::vector<VideoClip> load_dataset(const std::string& dir, const std::string& split = "") {
    namespace fs = std::filesystem;
    std::vector<VideoClip> out;
    for (const auto& m : read_manifest(dir)) {
        if (!split.empty() && m.split != split) continue;
        detail::require(m.frame_count >= 2, "load_dataset: video ", m.id, " has ", m.frame_count,
                        " frame(s); at least 2 are required");
        VideoClip clip;
        clip.id = m.id;
        clip.split = m.split;
        for (std::size_t t = 0; t < m.frame_count; ++t) clip.frames.push_back(read_png((fs::path(dir) / m.id / frame_filename(t)).string()));
        std::ifstream ts(fs::path(dir) / m.track_file);
        if (ts) clip.tracks = read_tracks(ts);
        out.push_back(std::move(clip));
    }
    return out;
}

/// Loads numbered PNG frames from a directory (sorted by name), or a single PNG.
inline VideoClip load_frames(const std::string& path) {
    namespace fs = std::filesystem;
    VideoClip clip;
    clip.id = fs::path(path).stem().string();
    if (fs::is_regular_file(path)) {
        clip.frames.push_back(read_png(path));
        return clip;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) clip.frames.push_back(read_png(f.string()));
    detail::require(!clip.frames.empty(), "load_frames: no PNG frames in '", path, "'");
    return clip;
}

/// SHA-256 over every regular file below `dir`, visited in sorted relative
/// path order; each file contributes its path, a NUL and its bytes.
inline std::string tree_sha256(const std::string& dir) {
    namespace fs = std::filesystem;
    detail::require(fs::is_directory(dir), "tree_sha256: '", dir, "' is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    detail::require(ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) == 1, "tree_sha256: digest init failed");
    std::vector<char> buf;
    for (const auto& f : files) {
        std::ifstream is(fs::path(dir) / f, std::ios::binary);
        buf.assign(std::istreambuf_iterator<char>(is), {});
        EVP_DigestUpdate(ctx.get(), f.c_str(), f.size() + 1);
        EVP_DigestUpdate(ctx.get(), buf.data(), buf.size());
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::string hex;
    char byte[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(byte, sizeof(byte), "%02x", md[i]);
        hex += byte;
    }
    return hex;
}

inline void save_frames(const VideoClip& clip, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < clip.size(); ++t)
        write_png((std::filesystem::path(dir) / frame_filename(t)).string(), clip.frames[t]);
}

}  // namespace monkeynet
