// SPDX-License-Identifier: Apache-2.0
#include "sisma/nn/conv.hpp"

#include <algorithm>

#include "sisma/core/errors.hpp"

namespace sisma::nn {

template <typename T>
DepthwiseCausalConv<T>::DepthwiseCausalConv(i64 channels_, i64 width_)
    : channels(channels_), width(width_) {
    if (channels < 1 || width < 1)
        throw ValidationError("DepthwiseCausalConv: channels and width must be >= 1, got " +
                              std::to_string(channels) + ", " + std::to_string(width));
    w = Tensor<T>({channels, width});
    b = Tensor<T>({channels});
    gw = Tensor<T>({channels, width});
    gb = Tensor<T>({channels});
}

template <typename T>
void DepthwiseCausalConv<T>::init_normal(Rng& rng, double stddev) {
    rng.fill_normal(w, 0.0, stddev);
    b.fill(T(0));
}

template <typename T>
Tensor<T> DepthwiseCausalConv<T>::forward(const Tensor<T>& x, ConvCache<T>* cache) const {
    if (x.ndim() != 2 || x.dim(1) != channels)
        throw ShapeError("DepthwiseCausalConv input: expected [L x " + std::to_string(channels) +
                         "], got " + x.shape_str());
    const i64 l = x.dim(0);
    Tensor<T> y({l, channels});
    for (i64 k = 0; k < l; ++k) {
        for (i64 e = 0; e < channels; ++e) {
            T acc = b[e];
            const i64 j0 = std::max<i64>(0, width - 1 - k);
            for (i64 j = j0; j < width; ++j) acc += w(e, j) * x(k - (width - 1) + j, e);
            y(k, e) = acc;
        }
    }
    if (cache) cache->x = x;
    return y;
}

template <typename T>
Tensor<T> DepthwiseCausalConv<T>::backward(const Tensor<T>& dy, const ConvCache<T>& cache) {
    const i64 l = cache.x.dim(0);
    check_shape(dy, {l, channels}, "DepthwiseCausalConv dy");
    Tensor<T> dx({l, channels});
    for (i64 k = 0; k < l; ++k) {
        for (i64 e = 0; e < channels; ++e) {
            const T g = dy(k, e);
            gb[e] += g;
            const i64 j0 = std::max<i64>(0, width - 1 - k);
            for (i64 j = j0; j < width; ++j) {
                const i64 src = k - (width - 1) + j;
                gw(e, j) += g * cache.x(src, e);
                dx(src, e) += g * w(e, j);
            }
        }
    }
    return dx;
}

template <typename T>
void DepthwiseCausalConv<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".w", &w, &gw);
    reg.add(prefix + ".b", &b, &gb);
}

template class DepthwiseCausalConv<float>;
template class DepthwiseCausalConv<double>;

} // namespace sisma::nn
