// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"
#include "sisma/nn/params.hpp"

namespace sisma::nn {

template <typename T>
struct LinearCache {
    Tensor<T> x;  // [rows, in]
};

// Affine map y = x·W + b with W stored [in, out].
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(i64 in, i64 out, bool bias);

    // W ~ N(0, stddev^2), bias zero.
    void init_normal(Rng& rng, double stddev);
    void zero_init();

    Tensor<T> forward(const Tensor<T>& x, LinearCache<T>* cache) const;
    // Accumulates weight gradients, returns dx.
    Tensor<T> backward(const Tensor<T>& dy, const LinearCache<T>& cache);

    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    i64 in_dim = 0, out_dim = 0;
    bool has_bias = true;
    Tensor<T> w, b;
    Tensor<T> gw, gb;
};

} // namespace sisma::nn
