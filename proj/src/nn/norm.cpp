// SPDX-License-Identifier: Apache-2.0
#include "sisma/nn/norm.hpp"

#include <cmath>

#include "sisma/core/errors.hpp"

namespace sisma::nn {

template <typename T>
Tensor<T> layernorm_forward(const Tensor<T>& x, T eps, LayerNormCache<T>* cache) {
    if (x.ndim() != 2) throw ShapeError("layernorm input: expected rank 2, got " + x.shape_str());
    const i64 rows = x.dim(0), d = x.dim(1);
    Tensor<T> y({rows, d});
    if (cache) {
        cache->xhat = Tensor<T>({rows, d});
        cache->rstd = Tensor<T>({rows});
    }
    for (i64 r = 0; r < rows; ++r) {
        T mean = 0;
        for (i64 j = 0; j < d; ++j) mean += x(r, j);
        mean /= static_cast<T>(d);
        T var = 0;
        for (i64 j = 0; j < d; ++j) {
            const T c = x(r, j) - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rstd = T(1) / std::sqrt(var + eps);
        for (i64 j = 0; j < d; ++j) {
            const T xh = (x(r, j) - mean) * rstd;
            y(r, j) = xh;
            if (cache) cache->xhat(r, j) = xh;
        }
        if (cache) cache->rstd[r] = rstd;
    }
    return y;
}

template <typename T>
Tensor<T> layernorm_backward(const Tensor<T>& dy, const LayerNormCache<T>& cache) {
    const i64 rows = cache.xhat.dim(0), d = cache.xhat.dim(1);
    check_shape(dy, {rows, d}, "layernorm dy");
    Tensor<T> dx({rows, d});
    for (i64 r = 0; r < rows; ++r) {
        T sum_dy = 0, sum_dy_xh = 0;
        for (i64 j = 0; j < d; ++j) {
            sum_dy += dy(r, j);
            sum_dy_xh += dy(r, j) * cache.xhat(r, j);
        }
        const T inv_d = T(1) / static_cast<T>(d);
        for (i64 j = 0; j < d; ++j)
            dx(r, j) = cache.rstd[r] * (dy(r, j) - inv_d * sum_dy - cache.xhat(r, j) * inv_d * sum_dy_xh);
    }
    return dx;
}

template Tensor<float> layernorm_forward<float>(const Tensor<float>&, float, LayerNormCache<float>*);
template Tensor<double> layernorm_forward<double>(const Tensor<double>&, double, LayerNormCache<double>*);
template Tensor<float> layernorm_backward<float>(const Tensor<float>&, const LayerNormCache<float>&);
template Tensor<double> layernorm_backward<double>(const Tensor<double>&, const LayerNormCache<double>&);

} // namespace sisma::nn
