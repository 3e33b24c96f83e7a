// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"
#include "sisma/nn/params.hpp"

namespace sisma::nn {

template <typename T>
struct ConvCache {
    Tensor<T> x;  // [L, E]
};

// Depthwise causal 1-D convolution over the sequence axis. Tap j of width W
// reads x[k - (W-1) + j]; positions before the sequence are zero, so output k
// depends only on inputs at or before k.
template <typename T>
class DepthwiseCausalConv {
public:
    DepthwiseCausalConv() = default;
    DepthwiseCausalConv(i64 channels, i64 width);

    void init_normal(Rng& rng, double stddev);

    Tensor<T> forward(const Tensor<T>& x, ConvCache<T>* cache) const;
    Tensor<T> backward(const Tensor<T>& dy, const ConvCache<T>& cache);

    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    i64 channels = 0, width = 0;
    Tensor<T> w;  // [E, W]
    Tensor<T> b;  // [E]
    Tensor<T> gw, gb;
};

} // namespace sisma::nn
