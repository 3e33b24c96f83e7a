// SPDX-License-Identifier: Apache-2.0
//
// Diagonal selective state-space scan on typed tensors.  The recurrence per
// channel e and state i is
//
//   h_k = a_bar ⊙ h_{k-1} + b_bar · u_k        a_bar = exp(Δ_k · a)
//   y_k = ⟨c_k, h_k⟩ + d_skip · u_k
//
// where a = -exp(a_log) < 0 and (a_bar, b_bar) follow zoh_discretize.  The
// chunked variant composes per-chunk affine state maps h ↦ α·h + β to find
// every chunk's entry state, then replays each chunk from that state, so its
// output is bit-for-bit the sequential one.
#pragma once

#include <utility>

#include "sisma/core/tensor.hpp"

namespace sisma::ssm {

enum class Discretization { Exact, Simplified };

// Diagonal SSM parameters for E channels with N states each.
template <typename T>
struct DiagSSM {
  i64 channels = 0;   // E
  i64 state_dim = 0;  // N
  Tensor<T> a_log;    // [E,N], A = -exp(a_log)
  Tensor<T> d_skip;   // [E]

  // Materializes A = -exp(a_log).
  Tensor<T> a_neg() const;
  void validate() const;
};

template <typename T>
struct ScanInputs {
  Tensor<T> u;          // [L,E]
  Tensor<T> b_seq;      // [L,N]
  Tensor<T> c_seq;      // [L,N]
  Tensor<T> delta_seq;  // [L,E], strictly positive
  Tensor<T> h0;         // [E,N]; empty means zero state
};

template <typename T>
struct ScanOutputs {
  Tensor<T> y;        // [L,E]
  Tensor<T> h_final;  // [E,N]
};

// Saved forward state for the analytic backward pass.
template <typename T>
struct ScanCache {
  Tensor<T> a_neg;      // [E,N]
  Tensor<T> h_hist;     // [L,E,N]
  Tensor<T> abar_hist;  // [L,E,N]
};

template <typename T>
struct ScanGrads {
  Tensor<T> du;          // [L,E]
  Tensor<T> db_seq;      // [L,N]
  Tensor<T> dc_seq;      // [L,N]
  Tensor<T> ddelta_seq;  // [L,E]
  Tensor<T> da_log;      // [E,N]
  Tensor<T> dd_skip;     // [E]
  Tensor<T> dh0;         // [E,N]
};

// ZOH discretization of one step.  exact: b_bar = ((exp(Δa)-1)/a)·b,
// simplified: b_bar = Δ·b.  Both share a_bar = exp(Δa).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& a_diag, const Tensor<T>& b_t,
                                               T delta_t, Discretization mode);

template <typename T>
ScanOutputs<T> selective_scan_sequential(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                         Discretization mode, ScanCache<T>* cache = nullptr);

template <typename T>
ScanOutputs<T> selective_scan_chunked(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                      Discretization mode, i64 chunk_len);

// Accumulating reverse pass; dh_final may be null when no loss term reads the
// final state.  Returned da_log is already chained through A = -exp(a_log).
template <typename T>
ScanGrads<T> selective_scan_backward(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                     Discretization mode, const ScanCache<T>& cache,
                                     const Tensor<T>& dy, const Tensor<T>* dh_final = nullptr);

} // namespace sisma::ssm
