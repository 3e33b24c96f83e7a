// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sisma/core/tensor.hpp"
#include "sisma/kernels/kernels.hpp"

namespace sisma::nn {

// Tensor-shaped wrappers over the elementwise kernels. Backward variants take
// the pre-activation input x and upstream dy and return dx.

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    kernels::silu(x.data(), y.data(), x.numel());
    return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape());
    kernels::silu_backward(x.data(), dy.data(), dx.data(), x.numel());
    return dx;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    kernels::softplus(x.data(), y.data(), x.numel());
    return y;
}

template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape());
    kernels::softplus_backward(x.data(), dy.data(), dx.data(), x.numel());
    return dx;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    kernels::gelu(x.data(), y.data(), x.numel());
    return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    Tensor<T> dx(x.shape());
    kernels::gelu_backward(x.data(), dy.data(), dx.data(), x.numel());
    return dx;
}

} // namespace sisma::nn
