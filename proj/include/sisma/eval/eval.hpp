// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sisma/core/tensor.hpp"
#include "sisma/data/data.hpp"
#include "sisma/model/model.hpp"

namespace sisma::eval {

// ---------------------------------------------------------------------------
// mask adherence
// ---------------------------------------------------------------------------

// Per-class intersection-over-union against the conditioning mask. Classes
// absent from both segmentations are excluded from the mean; their per_class
// slot holds -1.
struct IouReport {
    std::vector<double> per_class;  // -1 where the class is excluded
    double mean = 0.0;
    std::string to_string() const;
};

// Classifies each pixel of a [3,h,w] image in [-1,1] by color dominance:
// the leading channel claims circle/square/triangle when it exceeds both
// others by at least 0.1; anything weaker, including ties, is background.
template <typename T>
data::SemanticMask segment_by_color(const Tensor<T>& image);

// IoU between two same-shape segmentations over the same class palette.
// Symmetric; equals 1 on every included class iff the maps are identical.
IouReport iou_between(const data::SemanticMask& a, const data::SemanticMask& b);

// segment_by_color + iou_between. Defined only for the shapes palette
// (4 classes); other masks are refused with ValidationError.
template <typename T>
IouReport mask_adherence_iou(const Tensor<T>& generated, const data::SemanticMask& mask);

// ---------------------------------------------------------------------------
// diversity proxy
// ---------------------------------------------------------------------------

// Mean over unordered pairs of the mean absolute pixel difference; range
// [0, 2] for [-1,1] images. Requires k >= 2 same-shape samples.
template <typename T>
double diversity_score(const std::vector<Tensor<T>>& samples);

// ---------------------------------------------------------------------------
// scaling benchmark
// ---------------------------------------------------------------------------

struct BenchReport {
    std::vector<i64> lengths;
    std::vector<double> median_s, min_s, max_s;
    std::vector<i64> reps;  // inner repetitions chosen per length
    double slope = 0.0;     // least-squares log-log fit
    i64 trials = 0;
    std::string environment;
    std::string to_table() const;    // human-readable
    std::string to_records() const;  // one key=value line per length
};

// A workload factory binds a length to a ready-to-run closure; setup cost
// (allocation, fill) happens in the factory, outside the timed region.
using WorkloadFactory = std::function<std::function<void()>(i64 length)>;

// Times the workload at each length (median of `trials`, min/max kept,
// never means), fits log(time) against log(length), and reports the slope.
// Repetitions grow automatically until each measurement clears the timer
// resolution; a lock file (path from SISMA_BENCH_LOCK, default under /tmp)
// forbids concurrent benchmark processes.
BenchReport scan_scaling_bench(const WorkloadFactory& factory, const std::vector<i64>& lengths,
                               i64 trials);

// Calibration and measurement workloads.
WorkloadFactory prefix_sum_workload();                         // O(L)
WorkloadFactory pairwise_workload();                           // O(L^2)
WorkloadFactory chunked_scan_workload(i64 channels, i64 state_dim, i64 chunk_len);

// ---------------------------------------------------------------------------
// gradient checks
// ---------------------------------------------------------------------------

struct GradcheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    i64 coords = 0;
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;
    double worst = 0.0;
    std::string worst_group;
    bool pass = false;
    std::string to_table() const;
    std::string to_records() const;
};

// Compares the analytic gradient of fm_loss(forward_velocity(z,t,mask))
// against central differences (step 1e-5) on >= 32 random coordinates per
// parameter group plus the latent input, at 64-bit on a tiny config
// (token count <= 8, hidden <= 8). Passes iff every group stays below 1e-4.
// A nonempty fault_scale_group multiplies that group's analytic gradient by
// 1.01, which must make the suite fail naming the group.
GradcheckReport gradcheck_suite(const model::ModelConfig& config, u64 seed,
                                const std::string& fault_scale_group = "");

// Quadratic loss on a single linear layer; central differences are exact up
// to roundoff, so every group must come in below 1e-9.
GradcheckReport gradcheck_linear_toy(u64 seed);

} // namespace sisma::eval
