// SPDX-License-Identifier: Apache-2.0
#include "sisma/data/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "sisma/core/errors.hpp"

namespace sisma::data {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

PngImage read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("read_png: cannot open " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IoError("read_png: " + path + " is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("read_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("read_png: libpng info init failed");
    }

    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: " + path + " is corrupt");
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);

    PngImage out;
    out.h = static_cast<i64>(h);
    out.w = static_cast<i64>(w);

    if (bit_depth == 16) png_set_strip_16(png);

    if (color_type == PNG_COLOR_TYPE_PALETTE || color_type == PNG_COLOR_TYPE_GRAY) {
        // Keep raw values: palette indices and gray levels are class ids.
        if (bit_depth < 8) png_set_packing(png);
        out.channels = 1;
    } else {
        if (color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        out.channels = 3;
    }
    png_read_update_info(png, info);

    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(out.w * out.channels)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: " + path + " has unsupported layout");
    }

    out.pixels.resize(static_cast<std::size_t>(out.h) * rowbytes);
    row_ptrs.resize(h);
    for (png_uint_32 i = 0; i < h; ++i)
        row_ptrs[i] = out.pixels.data() + static_cast<std::size_t>(i) * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

template <typename T>
void write_png_rgb(const std::string& path, const Tensor<T>& image) {
    if (image.ndim() != 3 || image.shape()[0] != 3)
        throw ShapeError("write_png_rgb: want [3,h,w], got " + image.shape_str());
    const i64 h = image.shape()[1], w = image.shape()[2];

    std::vector<u8> rows(static_cast<std::size_t>(h * w * 3));
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j)
            for (i64 c = 0; c < 3; ++c) {
                const double v01 = (static_cast<double>(image(c, i, j)) + 1.0) * 0.5;
                const double clamped = std::min(1.0, std::max(0.0, v01));
                rows[static_cast<std::size_t>((i * w + j) * 3 + c)] =
                    static_cast<u8>(std::lround(clamped * 255.0));
            }

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("write_png_rgb: cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("write_png_rgb: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("write_png_rgb: libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png_rgb: write to " + path + " failed");
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (i64 i = 0; i < h; ++i)
        png_write_row(png, rows.data() + static_cast<std::size_t>(i * w * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_png_gray(const std::string& path, i64 h, i64 w, const std::vector<i64>& values) {
    if (static_cast<i64>(values.size()) != h * w)
        throw ShapeError("write_png_gray: " + std::to_string(values.size()) + " values for " +
                         std::to_string(h) + "x" + std::to_string(w));
    std::vector<u8> rows(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] < 0 || values[i] > 255)
            throw ValidationError("write_png_gray: value " + std::to_string(values[i]) +
                                  " does not fit 8 bits");
        rows[i] = static_cast<u8>(values[i]);
    }

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("write_png_gray: cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("write_png_gray: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("write_png_gray: libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png_gray: write to " + path + " failed");
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (i64 i = 0; i < h; ++i) png_write_row(png, rows.data() + static_cast<std::size_t>(i * w));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

template void write_png_rgb<float>(const std::string&, const Tensor<float>&);
template void write_png_rgb<double>(const std::string&, const Tensor<double>&);

} // namespace sisma::data
