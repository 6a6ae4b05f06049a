#pragma once

#include <png.h>

#include <cstdio>
#include <cmath>
#include <string>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/tensor.hpp"

// 8-bit PNG in/out. Images are [C,H,W] tensors in [0,1]; C is 1 (gray) or 3
// (RGB). Reads normalize any bit depth / palette / alpha down to gray or RGB;
// writes use a fixed compression setup so identical tensors give identical
// files.

namespace tryoff {

namespace detail {

struct PngReadGuard {
    FILE* f = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (f) std::fclose(f);
    }
};

struct PngWriteGuard {
    FILE* f = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteGuard() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (f) std::fclose(f);
    }
};

}  // namespace detail

// want_channels: 1 or 3
template <typename T>
Tensor<T> read_png(const std::string& path, int want_channels) {
    if (want_channels != 1 && want_channels != 3)
        throw ConfigError("read_png: want_channels must be 1 or 3");
    detail::PngReadGuard g;
    g.f = std::fopen(path.c_str(), "rb");
    if (!g.f) throw IoError("cannot open '" + path + "'");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, g.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError("'" + path + "' is not a PNG file");
    std::rewind(g.f);

    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw IoError("libpng init failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw IoError("libpng init failed");
    if (setjmp(png_jmpbuf(g.png))) throw IoError("failed reading '" + path + "'");

    png_init_io(g.png, g.f);
    png_read_png(g.png, g.info,
                 PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND |
                     PNG_TRANSFORM_STRIP_ALPHA,
                 nullptr);

    const int w = static_cast<int>(png_get_image_width(g.png, g.info));
    const int h = static_cast<int>(png_get_image_height(g.png, g.info));
    const int ch = static_cast<int>(png_get_channels(g.png, g.info));
    if (ch != 1 && ch != 3) throw IoError("'" + path + "' decoded to unsupported channel count");
    png_bytepp rows = png_get_rows(g.png, g.info);

    Tensor<T> img({want_channels, h, w});
    const double inv = 1.0 / 255.0;
    for (int y = 0; y < h; ++y) {
        const png_bytep row = rows[y];
        for (int x = 0; x < w; ++x) {
            double rgb[3];
            if (ch == 1) {
                rgb[0] = rgb[1] = rgb[2] = row[x] * inv;
            } else {
                rgb[0] = row[3 * x] * inv;
                rgb[1] = row[3 * x + 1] * inv;
                rgb[2] = row[3 * x + 2] * inv;
            }
            if (want_channels == 3) {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<T>(rgb[c]);
            } else {
                img.at(0, y, x) = static_cast<T>((rgb[0] + rgb[1] + rgb[2]) / 3.0);
            }
        }
    }
    return img;
}

template <typename T>
void write_png(const std::string& path, const Tensor<T>& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw ShapeError("write_png expects [1|3,H,W], got " + img.shape_str());
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);

    std::vector<png_byte> buf(static_cast<size_t>(h) * w * c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) {
                double v = static_cast<double>(img.at(ci, y, x));
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                buf[(static_cast<size_t>(y) * w + x) * c + ci] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = buf.data() + static_cast<size_t>(y) * w * c;

    detail::PngWriteGuard g;
    g.f = std::fopen(path.c_str(), "wb");
    if (!g.f) throw IoError("cannot open '" + path + "' for writing");
    g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw IoError("libpng init failed");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw IoError("libpng init failed");
    if (setjmp(png_jmpbuf(g.png))) throw IoError("failed writing '" + path + "'");

    png_init_io(g.png, g.f);
    png_set_compression_level(g.png, 6);
    png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(g.png, g.info);
    png_write_image(g.png, rows.data());
    png_write_end(g.png, nullptr);
}

// bilinear resize with half-pixel centers
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& img, int oh, int ow) {
    if (img.ndim() != 3) throw ShapeError("bilinear_resize expects [C,H,W], got " + img.shape_str());
    if (oh < 1 || ow < 1) throw ConfigError("bilinear_resize: output dims must be >= 1");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (oh == h && ow == w) return img;
    Tensor<T> out({c, oh, ow});
    const double sy = static_cast<double>(h) / oh;
    const double sx = static_cast<double>(w) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            for (int ci = 0; ci < c; ++ci) {
                const double v = (1 - wy) * ((1 - wx) * img.at(ci, y0, x0) + wx * img.at(ci, y0, x1)) +
                                 wy * ((1 - wx) * img.at(ci, y1, x0) + wx * img.at(ci, y1, x1));
                out.at(ci, y, x) = static_cast<T>(v);
            }
        }
    }
    return out;
}

}  // namespace tryoff
