// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops behind the whole library: matrix products,
// transcendental elementwise maps, and the selective-scan recurrence.
// Every entry point has a scalar reference implementation and an AVX2+FMA
// variant; the active one is picked at runtime (see dispatch.hpp) and the
// two are equivalence-tested against each other in tests/kernels_test.cpp.
//
// Kernels operate on raw row-major buffers and do no shape checking; the
// typed wrappers in the library layers own validation.
#pragma once

#include <cstdint>

namespace sisma::kernels {

using i64 = std::int64_t;

// ---------------------------------------------------------------------------
// Matrix products (row-major). `accumulate` selects C += / C =.
// ---------------------------------------------------------------------------

/// C[M,N] = A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate);

/// C[M,N] = A[M,K] * B[N,K]^T  (rows of A dotted with rows of B)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate);

/// C[M,N] = A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate);

/// Y[r, :] += bias for every row r.
template <typename T>
void add_bias_rows(T* y, const T* bias, i64 rows, i64 cols);

// ---------------------------------------------------------------------------
// Elementwise maps. Backward variants write dx = dy * f'(x) (overwrite).
// ---------------------------------------------------------------------------

template <typename T>
void vexp(const T* x, T* y, i64 n);

template <typename T>
void silu(const T* x, T* y, i64 n);

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, i64 n);

template <typename T>
void softplus(const T* x, T* y, i64 n);

template <typename T>
void softplus_backward(const T* x, const T* dy, T* dx, i64 n);

/// tanh-form GELU.
template <typename T>
void gelu(const T* x, T* y, i64 n);

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, i64 n);

// ---------------------------------------------------------------------------
// Selective scan. Shapes: u, delta: [L,E]; b, c: [L,N]; A, dskip-free h0:
// [E,N]; y: [L,E]. A holds the continuous diagonal (negative reals).
// `exact` picks the exact ZOH input matrix, otherwise the simplified Δ·B.
// Optional caches (pass nullptr to skip) save the post-step hidden states
// and discretized decay factors for the backward pass.
// ---------------------------------------------------------------------------

template <typename T>
void scan_forward(i64 seq, i64 channels, i64 state,
                  const T* u, const T* b, const T* c, const T* delta,
                  const T* a, const T* dskip, const T* h0,
                  bool exact,
                  T* y, T* h_final,
                  T* h_hist, T* abar_hist);

/// Reverse-mode adjoint of scan_forward. All d* outputs are accumulated
/// into (+=) so a caller can fold several passes together; dh_final may be
/// null when no gradient flows into the final state.
template <typename T>
void scan_backward(i64 seq, i64 channels, i64 state,
                   const T* u, const T* b, const T* c, const T* delta,
                   const T* a, const T* dskip, const T* h0,
                   bool exact,
                   const T* h_hist, const T* abar_hist,
                   const T* dy, const T* dh_final,
                   T* du, T* db, T* dc, T* ddelta,
                   T* da, T* ddskip, T* dh0);

} // namespace sisma::kernels
