// SPDX-License-Identifier: Apache-2.0
#include "sisma/nn/linear.hpp"

#include "sisma/core/errors.hpp"
#include "sisma/kernels/kernels.hpp"

namespace sisma::nn {

namespace ks = sisma::kernels;

template <typename T>
Linear<T>::Linear(i64 in, i64 out, bool bias) : in_dim(in), out_dim(out), has_bias(bias) {
    if (in < 1 || out < 1)
        throw ValidationError("Linear: dimensions must be >= 1, got " + std::to_string(in) + "x" +
                              std::to_string(out));
    w = Tensor<T>({in, out});
    gw = Tensor<T>({in, out});
    if (has_bias) {
        b = Tensor<T>({out});
        gb = Tensor<T>({out});
    }
}

template <typename T>
void Linear<T>::init_normal(Rng& rng, double stddev) {
    rng.fill_normal(w, 0.0, stddev);
    if (has_bias) b.fill(T(0));
}

template <typename T>
void Linear<T>::zero_init() {
    w.fill(T(0));
    if (has_bias) b.fill(T(0));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, LinearCache<T>* cache) const {
    if (x.ndim() != 2 || x.dim(1) != in_dim)
        throw ShapeError("Linear input: expected [rows x " + std::to_string(in_dim) + "], got " +
                         x.shape_str());
    const i64 rows = x.dim(0);
    Tensor<T> y({rows, out_dim});
    ks::gemm_nn(x.data(), w.data(), y.data(), rows, out_dim, in_dim, false);
    if (has_bias) ks::add_bias_rows(y.data(), b.data(), rows, out_dim);
    if (cache) cache->x = x;
    return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy, const LinearCache<T>& cache) {
    const i64 rows = cache.x.dim(0);
    check_shape(dy, {rows, out_dim}, "Linear dy");
    Tensor<T> dx({rows, in_dim});
    ks::gemm_nt(dy.data(), w.data(), dx.data(), rows, in_dim, out_dim, false);
    ks::gemm_tn(cache.x.data(), dy.data(), gw.data(), in_dim, out_dim, rows, true);
    if (has_bias)
        for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < out_dim; ++j) gb[j] += dy(r, j);
    return dx;
}

template <typename T>
void Linear<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".w", &w, &gw);
    if (has_bias) reg.add(prefix + ".b", &b, &gb);
}

template class Linear<float>;
template class Linear<double>;

} // namespace sisma::nn
