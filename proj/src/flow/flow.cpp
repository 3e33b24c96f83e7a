// SPDX-License-Identifier: Apache-2.0
#include "sisma/flow/flow.hpp"

#include <cmath>
#include <string>

#include "sisma/core/errors.hpp"

namespace sisma::flow {

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* aname,
                      const char* bname) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(aname) + " " + a.shape_str() + " vs " + bname + " " +
                         b.shape_str());
}

// Stream tag separating sampler noise from every training-time draw.
constexpr u64 kSamplerNoiseTag = 0x65756c6572ULL;

} // namespace

// ---------------------------------------------------------------------------
// linear path construction
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, T t) {
    check_same_shape(x, eps, "x", "eps");
    if (!(t >= T(0) && t <= T(1)))
        throw ValidationError("interpolate: t=" + std::to_string(static_cast<double>(t)) +
                              " outside [0,1]");
    Tensor<T> z(x.shape());
    for (i64 i = 0; i < x.numel(); ++i) z[i] = t * x[i] + (T(1) - t) * eps[i];
    return z;
}

template <typename T>
Tensor<T> velocity_target(const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(x, eps, "x", "eps");
    Tensor<T> v(x.shape());
    for (i64 i = 0; i < x.numel(); ++i) v[i] = x[i] - eps[i];
    return v;
}

template <typename T>
T fm_loss(const Tensor<T>& v_pred, const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(v_pred, x, "v_pred", "x");
    check_same_shape(x, eps, "x", "eps");
    double acc = 0.0;
    for (i64 i = 0; i < v_pred.numel(); ++i) {
        const double d = static_cast<double>(v_pred[i]) - (static_cast<double>(x[i]) - static_cast<double>(eps[i]));
        acc += d * d;
    }
    return static_cast<T>(acc / static_cast<double>(v_pred.numel()));
}

template <typename T>
Tensor<T> fm_loss_backward(const Tensor<T>& v_pred, const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(v_pred, x, "v_pred", "x");
    check_same_shape(x, eps, "x", "eps");
    Tensor<T> dv(v_pred.shape());
    const T scale = T(2) / static_cast<T>(v_pred.numel());
    for (i64 i = 0; i < v_pred.numel(); ++i) dv[i] = scale * (v_pred[i] - (x[i] - eps[i]));
    return dv;
}

// ---------------------------------------------------------------------------
// training batch
// ---------------------------------------------------------------------------

template <typename T>
FlowBatch<T> make_flow_batch(std::vector<Tensor<T>> x, std::vector<Tensor<T>> eps,
                             std::vector<T> t) {
    if (x.size() != eps.size() || x.size() != t.size())
        throw ShapeError("make_flow_batch: " + std::to_string(x.size()) + " latents, " +
                         std::to_string(eps.size()) + " noise draws, " + std::to_string(t.size()) +
                         " times");
    FlowBatch<T> batch;
    batch.z.reserve(x.size());
    batch.v_target.reserve(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        batch.z.push_back(interpolate(x[i], eps[i], t[i]));
        batch.v_target.push_back(velocity_target(x[i], eps[i]));
    }
    batch.x = std::move(x);
    batch.eps = std::move(eps);
    batch.t = std::move(t);
    return batch;
}

// ---------------------------------------------------------------------------
// ODE sampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> euler_sample(const VelocityFn<T>& velocity_fn, const Tensor<T>& mask_tokens,
                       const std::vector<i64>& shape, i64 steps, u64 seed) {
    if (steps < 1) throw ValidationError("euler_sample: steps=" + std::to_string(steps) + " < 1");
    if (!velocity_fn) throw ValidationError("euler_sample: empty velocity_fn");

    Tensor<T> z(shape);
    Rng rng = Rng::stream(seed, {kSamplerNoiseTag});
    rng.fill_normal(z, 0.0, 1.0);

    const T dt = T(1) / static_cast<T>(steps);
    for (i64 k = 0; k < steps; ++k) {
        const T t_k = static_cast<T>(k) / static_cast<T>(steps);
        Tensor<T> v = velocity_fn(z, t_k, mask_tokens);
        check_same_shape(z, v, "z", "velocity");
        if (!v.all_finite())
            throw NumericError("euler_sample: non-finite velocity at step " + std::to_string(k) +
                               " of " + std::to_string(steps));
        for (i64 i = 0; i < z.numel(); ++i) z[i] += v[i] * dt;
    }
    return z;
}

// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_FLOW(T)                                                               \
    template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&, T);                   \
    template Tensor<T> velocity_target<T>(const Tensor<T>&, const Tensor<T>&);                  \
    template T fm_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> fm_loss_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template FlowBatch<T> make_flow_batch<T>(std::vector<Tensor<T>>, std::vector<Tensor<T>>,    \
                                             std::vector<T>);                                   \
    template Tensor<T> euler_sample<T>(const VelocityFn<T>&, const Tensor<T>&,                  \
                                       const std::vector<i64>&, i64, u64);

SISMA_INSTANTIATE_FLOW(float)
SISMA_INSTANTIATE_FLOW(double)

#undef SISMA_INSTANTIATE_FLOW

} // namespace sisma::flow
