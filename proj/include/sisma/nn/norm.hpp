// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sisma/core/tensor.hpp"

namespace sisma::nn {

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;  // [rows, d] normalized values
    Tensor<T> rstd;  // [rows]
};

// Per-row normalization without learned affine: (x - mean) / sqrt(var + eps).
template <typename T>
Tensor<T> layernorm_forward(const Tensor<T>& x, T eps, LayerNormCache<T>* cache);

template <typename T>
Tensor<T> layernorm_backward(const Tensor<T>& dy, const LayerNormCache<T>& cache);

} // namespace sisma::nn
