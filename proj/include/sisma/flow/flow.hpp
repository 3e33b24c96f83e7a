// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"

namespace sisma::flow {

// ---------------------------------------------------------------------------
// linear path construction
// ---------------------------------------------------------------------------

// z = t*x + (1-t)*eps. t must lie in [0,1].
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, T t);

// v = x - eps, the constant velocity of the linear path.
template <typename T>
Tensor<T> velocity_target(const Tensor<T>& x, const Tensor<T>& eps);

// Mean over all elements of |v_pred - (x - eps)|^2.
template <typename T>
T fm_loss(const Tensor<T>& v_pred, const Tensor<T>& x, const Tensor<T>& eps);

// d(fm_loss)/d(v_pred) = 2 * (v_pred - (x - eps)) / numel.
template <typename T>
Tensor<T> fm_loss_backward(const Tensor<T>& v_pred, const Tensor<T>& x, const Tensor<T>& eps);

// ---------------------------------------------------------------------------
// training batch
// ---------------------------------------------------------------------------

// One conditioning batch on the linear path: per-sample time broadcast over
// the latent, v_target + eps = x exactly.
template <typename T>
struct FlowBatch {
    std::vector<Tensor<T>> x;         // clean latents
    std::vector<Tensor<T>> eps;       // same-shape standard normal draws
    std::vector<T> t;                 // per-sample time in [0,1]
    std::vector<Tensor<T>> z;         // interpolants
    std::vector<Tensor<T>> v_target;  // x - eps
};

template <typename T>
FlowBatch<T> make_flow_batch(std::vector<Tensor<T>> x, std::vector<Tensor<T>> eps,
                             std::vector<T> t);

// ---------------------------------------------------------------------------
// ODE sampling
// ---------------------------------------------------------------------------

// Forward Euler from t=0 (noise) to t=1 (data) with uniform steps:
// z_0 = eps ~ N(0, I) seeded; z <- z + v(z, t_k, mask_tokens) / n at
// t_k = k / n. Deterministic given (seed, velocity_fn, mask_tokens).
// Throws NumericError naming the step index if the field returns a
// non-finite value.
template <typename T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>& z, T t, const Tensor<T>& mask_tokens)>;

template <typename T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity_fn, const Tensor<T>& mask_tokens,
                       const std::vector<i64>& shape, i64 steps, u64 seed);

} // namespace sisma::flow
