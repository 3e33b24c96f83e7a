// SPDX-License-Identifier: Apache-2.0
//
// Internal declarations for the per-backend kernel implementations.
// The public API in sisma/kernels/kernels.hpp dispatches to one of these.
#pragma once

#include "sisma/kernels/kernels.hpp"

namespace sisma::kernels::scalar {

template <typename T> void gemm_nn(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void gemm_nt(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void gemm_tn(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void add_bias_rows(T*, const T*, i64, i64);
template <typename T> void vexp(const T*, T*, i64);
template <typename T> void silu(const T*, T*, i64);
template <typename T> void silu_backward(const T*, const T*, T*, i64);
template <typename T> void softplus(const T*, T*, i64);
template <typename T> void softplus_backward(const T*, const T*, T*, i64);
template <typename T> void gelu(const T*, T*, i64);
template <typename T> void gelu_backward(const T*, const T*, T*, i64);
template <typename T>
void scan_forward(i64, i64, i64, const T*, const T*, const T*, const T*, const T*, const T*,
                  const T*, bool, T*, T*, T*, T*);
template <typename T>
void scan_backward(i64, i64, i64, const T*, const T*, const T*, const T*, const T*, const T*,
                   const T*, bool, const T*, const T*, const T*, const T*, T*, T*, T*, T*, T*,
                   T*, T*);

} // namespace sisma::kernels::scalar

namespace sisma::kernels::avx2 {

template <typename T> void gemm_nn(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void gemm_nt(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void gemm_tn(const T*, const T*, T*, i64, i64, i64, bool);
template <typename T> void add_bias_rows(T*, const T*, i64, i64);
template <typename T> void vexp(const T*, T*, i64);
template <typename T> void silu(const T*, T*, i64);
template <typename T> void silu_backward(const T*, const T*, T*, i64);
template <typename T> void softplus(const T*, T*, i64);
template <typename T> void softplus_backward(const T*, const T*, T*, i64);
template <typename T> void gelu(const T*, T*, i64);
template <typename T> void gelu_backward(const T*, const T*, T*, i64);
template <typename T>
void scan_forward(i64, i64, i64, const T*, const T*, const T*, const T*, const T*, const T*,
                  const T*, bool, T*, T*, T*, T*);
template <typename T>
void scan_backward(i64, i64, i64, const T*, const T*, const T*, const T*, const T*, const T*,
                   const T*, bool, const T*, const T*, const T*, const T*, T*, T*, T*, T*, T*,
                   T*, T*);

} // namespace sisma::kernels::avx2
