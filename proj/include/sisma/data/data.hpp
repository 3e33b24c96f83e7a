// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"

namespace sisma::data {

// ---------------------------------------------------------------------------
// semantic masks
// ---------------------------------------------------------------------------

struct SemanticMask {
    i64 h = 0, w = 0;
    i64 num_classes = 0;
    std::vector<i64> class_map;  // h*w ids in [0, num_classes)

    i64 at(i64 i, i64 j) const { return class_map[static_cast<std::size_t>(i * w + j)]; }
    i64& at(i64 i, i64 j) { return class_map[static_cast<std::size_t>(i * w + j)]; }

    // Throws ValidationError naming the first out-of-range pixel.
    void validate() const;
};

// Indicator channels: out[k,i,j] = 1 when class_map(i,j) == k.
template <typename T>
Tensor<T> one_hot(const SemanticMask& mask);

// Inverse of one_hot for valid indicator tensors.
template <typename T>
SemanticMask argmax_mask(const Tensor<T>& onehot);

// ---------------------------------------------------------------------------
// synthetic shapes dataset
// ---------------------------------------------------------------------------

// Class ids for the generated set.
enum ShapeClass : i64 { kBackground = 0, kCircle = 1, kSquare = 2, kTriangle = 3 };
inline constexpr i64 kShapeClasses = 4;

template <typename T>
struct ShapesSample {
    Tensor<T> image;  // [3, size, size] in [-1, 1]
    SemanticMask mask;
};

// Flat gray backdrop with 1-2 analytically rasterized shapes: circles carry a
// dominant red channel, squares green, triangles blue, each at least 0.2
// above the other channels so the class is recoverable from color alone. No
// anti-aliasing, so image and mask boundaries agree exactly. Sample i is a
// pure function of (seed, i).
template <typename T>
std::vector<ShapesSample<T>> make_shapes_dataset(i64 n, i64 size, u64 seed);

template <typename T>
ShapesSample<T> make_shapes_sample(i64 size, u64 seed, i64 index);

// ---------------------------------------------------------------------------
// folder loading
// ---------------------------------------------------------------------------

struct LoadIssue {
    std::string file;
    std::string message;
};

template <typename T>
struct LoadResult {
    std::vector<ShapesSample<T>> samples;
    std::vector<LoadIssue> issues;
};

// Reads paired images/<name>.png and masks/<name>.png, center-crops each to a
// square, resizes images bilinearly and masks by nearest neighbor to
// size x size, and rescales pixels to [-1,1]. Per-file problems (orphans,
// unreadable files, class ids >= num_classes) become issues in the result
// rather than exceptions.
template <typename T>
LoadResult<T> load_pair_folder(const std::string& images_dir, const std::string& masks_dir,
                               i64 num_classes, i64 size);

// Writes samples in the same layout load_pair_folder reads.
template <typename T>
void write_pair_folder(const std::string& root, const std::vector<ShapesSample<T>>& samples);

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

// Deterministic shuffled index batches for one epoch; the short final batch
// is dropped. Order depends only on (n, batch_size, seed, epoch).
std::vector<std::vector<i64>> batch_indices(i64 n, i64 batch_size, u64 seed, i64 epoch);

} // namespace sisma::data
