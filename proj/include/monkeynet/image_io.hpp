#pragma once

// RGB images in [0,1], PNG read/write through libpng with a pinned encoder
// configuration, and a small animated-GIF writer.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "monkeynet/tensor.hpp"

namespace monkeynet {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interleaved RGB, row-major, values in [0,1].
struct Image {
    std::int64_t height = 0, width = 0;
    std::vector<double> pixels;  // height * width * 3

    Image() = default;
    Image(std::int64_t h, std::int64_t w, double fill = 0.0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h * w * 3), fill) {}

    double& at(std::int64_t y, std::int64_t x, int c) { return pixels[(y * width + x) * 3 + c]; }
    double at(std::int64_t y, std::int64_t x, int c) const { return pixels[(y * width + x) * 3 + c]; }
    bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds every channel to the nearest 8-bit level, matching what a PNG stores.
inline void quantize_8bit(Image& img) {
    for (auto& v : img.pixels) v = to_byte(v) / 255.0;
}

/// Packs images into an [N,3,H,W] tensor.
inline Tensor images_to_tensor(const std::vector<const Image*>& imgs) {
    detail::require(!imgs.empty(), "images_to_tensor: empty batch");
    const std::int64_t H = imgs.front()->height, W = imgs.front()->width, P = H * W;
    const auto N = static_cast<std::int64_t>(imgs.size());
    std::vector<double> d(static_cast<std::size_t>(N * 3 * P));
    for (std::int64_t n = 0; n < N; ++n) {
        const Image& im = *imgs[n];
        detail::require(im.height == H && im.width == W, "images_to_tensor: size mismatch in batch");
        for (std::int64_t p = 0; p < P; ++p)
            for (int c = 0; c < 3; ++c) d[(n * 3 + c) * P + p] = im.pixels[p * 3 + c];
    }
    return Tensor({N, 3, H, W}, std::move(d));
}

inline Tensor image_to_tensor(const Image& img) { return images_to_tensor({&img}); }

inline Image tensor_to_image(const Tensor& t, std::int64_t n = 0) {
    detail::require(t.ndim() == 4 && t.dim(1) == 3, "tensor_to_image: expected [N,3,H,W], got ",
                    shape_str(t.shape()));
    Image img(t.dim(2), t.dim(3));
    const std::int64_t P = img.height * img.width;
    const auto d = t.data();
    for (std::int64_t p = 0; p < P; ++p)
        for (int c = 0; c < 3; ++c) img.pixels[p * 3 + c] = d[(n * 3 + c) * P + p];
    return img;
}

namespace detail {

struct PngFile {
    FILE* f = nullptr;
    explicit PngFile(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
    ~PngFile() {
        if (f) std::fclose(f);
    }
    PngFile(const PngFile&) = delete;
    PngFile& operator=(const PngFile&) = delete;
};

}  // namespace detail

/// 8-bit RGB PNG, zlib level 9, no row filtering (fixed so output bytes are
/// reproducible).
inline void write_png(const std::string& path, const Image& img) {
    detail::PngFile file(path, "wb");
    if (!file.f) throw ImageIoError("write_png: cannot open '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("write_png: libpng init failed");
    }
    std::vector<png_byte> rows(static_cast<std::size_t>(img.height * img.width * 3));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = to_byte(img.pixels[i]);
    std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(img.height));
    for (std::int64_t y = 0; y < img.height; ++y) row_ptrs[y] = rows.data() + y * img.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("write_png: encoding '" + path + "' failed");
    }
    png_init_io(png, file.f);
    png_set_compression_level(png, 9);
    png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads any 8/16-bit PNG and converts it to RGB in [0,1].
inline Image read_png(const std::string& path) {
    detail::PngFile file(path, "rb");
    if (!file.f) throw ImageIoError("read_png: cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("read_png: libpng init failed");
    }
    Image img;
    std::vector<png_byte> buf;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("read_png: decoding '" + path + "' failed");
    }
    png_init_io(png, file.f);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const auto w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    buf.resize(rowbytes * h);
    row_ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = buf.data() + y * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    img = Image(h, w);
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = buf[y * rowbytes + x * 3 + c] / 255.0;
    return img;
}

namespace detail {

class GifBitWriter {
public:
    void put(std::uint32_t code, int bits) {
        acc_ |= code << nbits_;
        nbits_ += bits;
        while (nbits_ >= 8) {
            bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
            acc_ >>= 8;
            nbits_ -= 8;
        }
    }
    void flush() {
        if (nbits_ > 0) bytes.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
        acc_ = 0;
        nbits_ = 0;
    }
    std::vector<std::uint8_t> bytes;

private:
    std::uint32_t acc_ = 0;
    int nbits_ = 0;
};

inline void put_u16(std::ofstream& os, std::uint16_t v) {
    os.put(static_cast<char>(v & 0xFF));
    os.put(static_cast<char>(v >> 8));
}

}  // namespace detail

/// Animated GIF with a fixed 6x6x6 color-cube palette. Pixel codes are written
/// at a constant 9-bit width with periodic clear codes, so no LZW dictionary
/// is needed.
inline void write_gif(const std::string& path, const std::vector<Image>& frames, int delay_cs = 10) {
    if (frames.empty()) throw ImageIoError("write_gif: no frames");
    const auto W = frames.front().width, H = frames.front().height;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ImageIoError("write_gif: cannot open '" + path + "'");
    os.write("GIF89a", 6);
    detail::put_u16(os, static_cast<std::uint16_t>(W));
    detail::put_u16(os, static_cast<std::uint16_t>(H));
    os.put(static_cast<char>(0xF7));  // global table, 8-bit color, 256 entries
    os.put(0);
    os.put(0);
    for (int i = 0; i < 256; ++i) {
        const int r = i < 216 ? i / 36 : 0, g = i < 216 ? (i / 6) % 6 : 0, b = i < 216 ? i % 6 : 0;
        os.put(static_cast<char>(r * 51));
        os.put(static_cast<char>(g * 51));
        os.put(static_cast<char>(b * 51));
    }
    const unsigned char loop[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
    os.write(reinterpret_cast<const char*>(loop), sizeof(loop));
    for (const auto& f : frames) {
        if (f.width != W || f.height != H) throw ImageIoError("write_gif: frame size mismatch");
        const unsigned char gce[] = {0x21, 0xF9, 0x04, 0x00, static_cast<unsigned char>(delay_cs & 0xFF),
                                     static_cast<unsigned char>(delay_cs >> 8), 0x00, 0x00};
        os.write(reinterpret_cast<const char*>(gce), sizeof(gce));
        os.put(0x2C);
        detail::put_u16(os, 0);
        detail::put_u16(os, 0);
        detail::put_u16(os, static_cast<std::uint16_t>(W));
        detail::put_u16(os, static_cast<std::uint16_t>(H));
        os.put(0);
        os.put(8);  // LZW minimum code size
        constexpr std::uint32_t kClear = 256, kEnd = 257;
        detail::GifBitWriter bw;
        int since_clear = 0;
        bw.put(kClear, 9);
        for (std::int64_t p = 0; p < W * H; ++p) {
            auto q = [&](int c) { return static_cast<std::uint32_t>(std::lround(std::clamp(f.pixels[p * 3 + c], 0.0, 1.0) * 5.0)); };
            bw.put(q(0) * 36 + q(1) * 6 + q(2), 9);
            if (++since_clear == 250) {
                bw.put(kClear, 9);
                since_clear = 0;
            }
        }
        bw.put(kEnd, 9);
        bw.flush();
        for (std::size_t off = 0; off < bw.bytes.size(); off += 255) {
            const auto n = std::min<std::size_t>(255, bw.bytes.size() - off);
            os.put(static_cast<char>(n));
            os.write(reinterpret_cast<const char*>(bw.bytes.data() + off), static_cast<std::streamsize>(n));
        }
        os.put(0);
    }
    os.put(0x3B);
    if (!os) throw ImageIoError("write_gif: write to '" + path + "' failed");
}

}  // namespace monkeynet
