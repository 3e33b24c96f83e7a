// SPDX-License-Identifier: Apache-2.0
#include "sisma/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "sisma/core/errors.hpp"
#include "sisma/data/png_io.hpp"

namespace fs = std::filesystem;

namespace sisma::data {

// ---------------------------------------------------------------------------
// semantic masks
// ---------------------------------------------------------------------------

void SemanticMask::validate() const {
    if (h < 1 || w < 1 || num_classes < 1)
        throw ValidationError("SemanticMask: dims " + std::to_string(h) + "x" + std::to_string(w) +
                              " with " + std::to_string(num_classes) + " classes");
    if (static_cast<i64>(class_map.size()) != h * w)
        throw ValidationError("SemanticMask: " + std::to_string(class_map.size()) +
                              " entries for " + std::to_string(h * w) + " pixels");
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
            const i64 id = at(i, j);
            if (id < 0 || id >= num_classes)
                throw ValidationError("SemanticMask: pixel (" + std::to_string(i) + "," +
                                      std::to_string(j) + ") has class " + std::to_string(id) +
                                      ", valid range [0," + std::to_string(num_classes) + ")");
        }
}

template <typename T>
Tensor<T> one_hot(const SemanticMask& mask) {
    mask.validate();
    Tensor<T> out({mask.num_classes, mask.h, mask.w});
    for (i64 i = 0; i < mask.h; ++i)
        for (i64 j = 0; j < mask.w; ++j) out(mask.at(i, j), i, j) = T(1);
    return out;
}

template <typename T>
SemanticMask argmax_mask(const Tensor<T>& onehot) {
    if (onehot.ndim() != 3) throw ShapeError("argmax_mask: want [K,h,w], got " + onehot.shape_str());
    SemanticMask m;
    m.num_classes = onehot.shape()[0];
    m.h = onehot.shape()[1];
    m.w = onehot.shape()[2];
    m.class_map.resize(static_cast<std::size_t>(m.h * m.w));
    for (i64 i = 0; i < m.h; ++i)
        for (i64 j = 0; j < m.w; ++j) {
            i64 best = 0;
            T best_v = onehot(0, i, j);
            for (i64 k = 1; k < m.num_classes; ++k)
                if (onehot(k, i, j) > best_v) {
                    best_v = onehot(k, i, j);
                    best = k;
                }
            m.at(i, j) = best;
        }
    return m;
}

// ---------------------------------------------------------------------------
// synthetic shapes dataset
// ---------------------------------------------------------------------------

namespace {

// Channel triple with `dom` at least 0.2 above the other two, values in [0,1].
void dominant_color(Rng& rng, i64 dom, double rgb[3]) {
    const double lead = rng.uniform(0.65, 0.95);
    for (i64 c = 0; c < 3; ++c)
        rgb[c] = (c == dom) ? lead : rng.uniform(0.05, lead - 0.25);
}

struct ShapeSpec {
    i64 cls = 0;
    double cy = 0, cx = 0, r = 0;
    double color[3] = {0, 0, 0};

    bool contains(double y, double x) const {
        switch (cls) {
            case kCircle:
                return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
            case kSquare:
                return std::abs(y - cy) <= r && std::abs(x - cx) <= r;
            case kTriangle: {
                // Apex up: vertices (cy-r, cx), (cy+r, cx-r), (cy+r, cx+r).
                if (y < cy - r || y > cy + r) return false;
                const double half_width = (y - (cy - r)) / 2.0;
                return std::abs(x - cx) <= half_width;
            }
            default:
                return false;
        }
    }
};

} // namespace

template <typename T>
ShapesSample<T> make_shapes_sample(i64 size, u64 seed, i64 index) {
    if (size < 16)
        throw ValidationError("make_shapes_sample: size " + std::to_string(size) +
                              " below minimum 16, shapes cannot fit");
    Rng rng = Rng::stream(seed, {static_cast<u64>(index)});

    ShapesSample<T> s;
    s.image = Tensor<T>({3, size, size});
    s.mask.h = size;
    s.mask.w = size;
    s.mask.num_classes = kShapeClasses;
    s.mask.class_map.assign(static_cast<std::size_t>(size * size), kBackground);

    // Gray backdrop: channel spread stays below 0.04 (0.08 in [-1,1]), so
    // even after 8-bit quantization no channel clears the color-dominance
    // margin of 0.1.
    const double base = rng.uniform(0.35, 0.65);
    double bg[3];
    for (i64 c = 0; c < 3; ++c) bg[c] = base + rng.uniform(-0.02, 0.02);

    // 1-2 distinct shape classes, random order.
    i64 classes[3] = {kCircle, kSquare, kTriangle};
    for (i64 i = 2; i > 0; --i) std::swap(classes[i], classes[rng.uniform_int(0, i)]);
    const i64 n_shapes = rng.uniform_int(1, 2);

    std::vector<ShapeSpec> shapes;
    for (i64 k = 0; k < n_shapes; ++k) {
        ShapeSpec sp;
        sp.cls = classes[k];
        sp.r = rng.uniform(0.14, 0.28) * static_cast<double>(size);
        // Keep the whole shape inside the canvas.
        sp.cy = rng.uniform(sp.r + 1.0, static_cast<double>(size) - sp.r - 1.0);
        sp.cx = rng.uniform(sp.r + 1.0, static_cast<double>(size) - sp.r - 1.0);
        dominant_color(rng, sp.cls - 1, sp.color);
        shapes.push_back(sp);
    }

    for (i64 i = 0; i < size; ++i)
        for (i64 j = 0; j < size; ++j) {
            const double y = static_cast<double>(i) + 0.5;
            const double x = static_cast<double>(j) + 0.5;
            const double* rgb = bg;
            i64 cls = kBackground;
            // Later shapes draw over earlier ones.
            for (const ShapeSpec& sp : shapes)
                if (sp.contains(y, x)) {
                    rgb = sp.color;
                    cls = sp.cls;
                }
            s.mask.at(i, j) = cls;
            for (i64 c = 0; c < 3; ++c)
                s.image(c, i, j) = static_cast<T>(2.0 * rgb[c] - 1.0);
        }
    return s;
}

template <typename T>
std::vector<ShapesSample<T>> make_shapes_dataset(i64 n, i64 size, u64 seed) {
    if (n < 1) throw ValidationError("make_shapes_dataset: n=" + std::to_string(n) + " < 1");
    std::vector<ShapesSample<T>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) out.push_back(make_shapes_sample<T>(size, seed, i));
    return out;
}

// ---------------------------------------------------------------------------
// folder loading
// ---------------------------------------------------------------------------

namespace {

// Center square crop box for an h x w image.
struct CropBox {
    i64 top = 0, left = 0, side = 0;
};

CropBox center_crop(i64 h, i64 w) {
    CropBox b;
    b.side = std::min(h, w);
    b.top = (h - b.side) / 2;
    b.left = (w - b.side) / 2;
    return b;
}

// Bilinear sample of channel c at crop-relative coordinates.
double bilinear_at(const PngImage& img, const CropBox& box, i64 c, double y, double x) {
    const auto clamp_idx = [](i64 v, i64 hi) { return std::min(std::max(v, i64{0}), hi); };
    const i64 y0 = clamp_idx(static_cast<i64>(std::floor(y)), box.side - 1);
    const i64 x0 = clamp_idx(static_cast<i64>(std::floor(x)), box.side - 1);
    const i64 y1 = clamp_idx(y0 + 1, box.side - 1);
    const i64 x1 = clamp_idx(x0 + 1, box.side - 1);
    const double fy = std::min(std::max(y - static_cast<double>(y0), 0.0), 1.0);
    const double fx = std::min(std::max(x - static_cast<double>(x0), 0.0), 1.0);

    const double v00 = img.at(box.top + y0, box.left + x0, c);
    const double v01 = img.at(box.top + y0, box.left + x1, c);
    const double v10 = img.at(box.top + y1, box.left + x0, c);
    const double v11 = img.at(box.top + y1, box.left + x1, c);
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy;
}

template <typename T>
Tensor<T> resize_image(const PngImage& img, i64 size) {
    const CropBox box = center_crop(img.h, img.w);
    const double scale = static_cast<double>(box.side) / static_cast<double>(size);
    Tensor<T> out({3, size, size});
    for (i64 i = 0; i < size; ++i)
        for (i64 j = 0; j < size; ++j) {
            const double y = (static_cast<double>(i) + 0.5) * scale - 0.5;
            const double x = (static_cast<double>(j) + 0.5) * scale - 0.5;
            for (i64 c = 0; c < 3; ++c) {
                const i64 src_c = img.channels == 1 ? 0 : c;
                const double v = bilinear_at(img, box, src_c, y, x);
                out(c, i, j) = static_cast<T>(2.0 * (v / 255.0) - 1.0);
            }
        }
    return out;
}

SemanticMask resize_mask(const PngImage& img, i64 size, i64 num_classes) {
    const CropBox box = center_crop(img.h, img.w);
    const double scale = static_cast<double>(box.side) / static_cast<double>(size);
    SemanticMask m;
    m.h = size;
    m.w = size;
    m.num_classes = num_classes;
    m.class_map.resize(static_cast<std::size_t>(size * size));
    for (i64 i = 0; i < size; ++i)
        for (i64 j = 0; j < size; ++j) {
            // Nearest neighbor: ids must come from existing pixels, never a blend.
            i64 sy = static_cast<i64>(std::floor((static_cast<double>(i) + 0.5) * scale));
            i64 sx = static_cast<i64>(std::floor((static_cast<double>(j) + 0.5) * scale));
            sy = std::min(sy, box.side - 1);
            sx = std::min(sx, box.side - 1);
            m.at(i, j) = img.at(box.top + sy, box.left + sx, 0);
        }
    return m;
}

} // namespace

template <typename T>
LoadResult<T> load_pair_folder(const std::string& images_dir, const std::string& masks_dir,
                               i64 num_classes, i64 size) {
    if (num_classes < 1 || size < 1)
        throw ValidationError("load_pair_folder: num_classes=" + std::to_string(num_classes) +
                              " size=" + std::to_string(size));
    if (!fs::is_directory(images_dir))
        throw IoError("load_pair_folder: " + images_dir + " is not a directory");
    if (!fs::is_directory(masks_dir))
        throw IoError("load_pair_folder: " + masks_dir + " is not a directory");

    std::set<std::string> image_names, mask_names;
    for (const auto& e : fs::directory_iterator(images_dir))
        if (e.path().extension() == ".png") image_names.insert(e.path().stem().string());
    for (const auto& e : fs::directory_iterator(masks_dir))
        if (e.path().extension() == ".png") mask_names.insert(e.path().stem().string());

    LoadResult<T> result;
    for (const auto& name : image_names)
        if (!mask_names.count(name))
            result.issues.push_back({images_dir + "/" + name + ".png", "image has no mask"});
    for (const auto& name : mask_names)
        if (!image_names.count(name))
            result.issues.push_back({masks_dir + "/" + name + ".png", "mask has no image"});

    for (const auto& name : image_names) {
        if (!mask_names.count(name)) continue;
        const std::string img_path = images_dir + "/" + name + ".png";
        const std::string mask_path = masks_dir + "/" + name + ".png";

        ShapesSample<T> s;
        try {
            s.image = resize_image<T>(read_png(img_path), size);
        } catch (const Error& e) {
            result.issues.push_back({img_path, e.what()});
            continue;
        }
        try {
            const PngImage mask_img = read_png(mask_path);
            if (mask_img.channels != 1) {
                result.issues.push_back({mask_path, "mask is not a single-channel image"});
                continue;
            }
            s.mask = resize_mask(mask_img, size, num_classes);
        } catch (const Error& e) {
            result.issues.push_back({mask_path, e.what()});
            continue;
        }

        bool ok = true;
        for (i64 p = 0; p < size * size && ok; ++p)
            if (s.mask.class_map[static_cast<std::size_t>(p)] >= num_classes) {
                result.issues.push_back(
                    {mask_path,
                     "class id " + std::to_string(s.mask.class_map[static_cast<std::size_t>(p)]) +
                         " exceeds limit " + std::to_string(num_classes - 1)});
                ok = false;
            }
        if (ok) result.samples.push_back(std::move(s));
    }
    return result;
}

template <typename T>
void write_pair_folder(const std::string& root, const std::vector<ShapesSample<T>>& samples) {
    fs::create_directories(root + "/images");
    fs::create_directories(root + "/masks");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[16];
        std::snprintf(name, sizeof(name), "%06zu", i);
        write_png_rgb(root + "/images/" + name + ".png", samples[i].image);
        write_png_gray(root + "/masks/" + name + ".png", samples[i].mask.h, samples[i].mask.w,
                       samples[i].mask.class_map);
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

std::vector<std::vector<i64>> batch_indices(i64 n, i64 batch_size, u64 seed, i64 epoch) {
    if (n < 1) throw ValidationError("batch_indices: empty dataset");
    if (batch_size < 1)
        throw ValidationError("batch_indices: batch_size=" + std::to_string(batch_size));

    std::vector<i64> order(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = Rng::stream(seed, {0x65706f6368ULL, static_cast<u64>(epoch)});
    for (i64 i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    std::vector<std::vector<i64>> batches;
    for (i64 start = 0; start + batch_size <= n; start += batch_size)
        batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
    return batches;
}

// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_DATA(T)                                                          \
    template Tensor<T> one_hot<T>(const SemanticMask&);                                    \
    template SemanticMask argmax_mask<T>(const Tensor<T>&);                                \
    template ShapesSample<T> make_shapes_sample<T>(i64, u64, i64);                         \
    template std::vector<ShapesSample<T>> make_shapes_dataset<T>(i64, i64, u64);           \
    template LoadResult<T> load_pair_folder<T>(const std::string&, const std::string&, i64, \
                                               i64);                                       \
    template void write_pair_folder<T>(const std::string&, const std::vector<ShapesSample<T>>&);

SISMA_INSTANTIATE_DATA(float)
SISMA_INSTANTIATE_DATA(double)

#undef SISMA_INSTANTIATE_DATA

} // namespace sisma::data
