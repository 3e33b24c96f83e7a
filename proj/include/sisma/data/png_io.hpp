// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sisma/core/tensor.hpp"

namespace sisma::data {

// Decoded 8-bit image, row-major, interleaved channels (1 = gray or palette
// indices, 3 = RGB).
struct PngImage {
    i64 h = 0, w = 0, channels = 0;
    std::vector<u8> pixels;  // h * w * channels

    u8 at(i64 i, i64 j, i64 c) const {
        return pixels[static_cast<std::size_t>((i * w + j) * channels + c)];
    }
};

// Reads a PNG. RGB/RGBA/gray-alpha inputs come back as 3-channel RGB with
// 16-bit depth narrowed to 8; grayscale and palette inputs come back as one
// channel of raw values so mask class ids never pass through a palette
// expansion. Throws IoError on unreadable files.
PngImage read_png(const std::string& path);

// Writes 8-bit RGB from a [3,h,w] tensor in [-1,1]; values are clamped.
template <typename T>
void write_png_rgb(const std::string& path, const Tensor<T>& image);

// Writes one 8-bit gray channel from h*w values (class ids).
void write_png_gray(const std::string& path, i64 h, i64 w, const std::vector<i64>& values);

} // namespace sisma::data
