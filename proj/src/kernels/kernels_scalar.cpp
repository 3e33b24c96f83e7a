// SPDX-License-Identifier: Apache-2.0
//
// Portable reference kernels.  Plain loops, no intrinsics, no FMA contraction
// tricks.  The AVX2 backend is tested for agreement against these.

#include <algorithm>
#include <cmath>
#include <vector>

#include "kernels_detail.hpp"

namespace sisma::kernels::scalar {

// ---------------------------------------------------------------------------
// matrix multiply
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < k; ++p) {
      const T aval = a[i * k + p];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += arow[p] * brow[p];
      T* cp = c + i * n + j;
      *cp = accumulate ? *cp + acc : acc;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < k; ++p) {
      const T aval = a[p * m + i];
      const T* brow = b + p * n;
      for (i64 j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

template <typename T>
void add_bias_rows(T* y, const T* bias, i64 rows, i64 cols) {
  for (i64 i = 0; i < rows; ++i) {
    T* yrow = y + i * cols;
    for (i64 j = 0; j < cols; ++j) yrow[j] += bias[j];
  }
}

// ---------------------------------------------------------------------------
// elementwise maps
// ---------------------------------------------------------------------------

template <typename T>
void vexp(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

template <typename T>
void silu(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, i64 n) {
  for (i64 i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    dx[i] = dy[i] * (s * (T(1) + x[i] * (T(1) - s)));
  }
}

template <typename T>
void softplus(const T* x, T* y, i64 n) {
  for (i64 i = 0; i < n; ++i) {
    const T v = x[i];
    // max(x,0) + log1p(exp(-|x|)) avoids overflow on both tails.
    y[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
}

template <typename T>
void softplus_backward(const T* x, const T* dy, T* dx, i64 n) {
  for (i64 i = 0; i < n; ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    dx[i] = dy[i] * s;
  }
}

// Tanh-approximation GELU.
template <typename T>
void gelu(const T* x, T* y, i64 n) {
  const T c = T(0.7978845608028653558798921198687637);  // sqrt(2/pi)
  const T q = T(0.044715);
  for (i64 i = 0; i < n; ++i) {
    const T v = x[i];
    const T g = c * (v + q * v * v * v);
    y[i] = T(0.5) * v * (T(1) + std::tanh(g));
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, i64 n) {
  const T c = T(0.7978845608028653558798921198687637);
  const T q = T(0.044715);
  for (i64 i = 0; i < n; ++i) {
    const T v = x[i];
    const T g = c * (v + q * v * v * v);
    const T th = std::tanh(g);
    const T sech2 = T(1) - th * th;
    const T dg = c * (T(1) + T(3) * q * v * v);
    dx[i] = dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * dg);
  }
}

// ---------------------------------------------------------------------------
// diagonal selective scan
// ---------------------------------------------------------------------------
//
// Recurrence per channel e and state i, stepping k = 0..seq-1:
//   a_bar = exp(delta[k,e] * a[e,i])
//   b_bar = exact ? (a_bar - 1) / a[e,i] * b[k,i]
//                 : delta[k,e] * b[k,i]
//   h     = a_bar * h + b_bar * u[k,e]
//   y[k,e] = sum_i c[k,i] * h + dskip[e] * u[k,e]

template <typename T>
void scan_forward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                  const T* delta, const T* a, const T* dskip, const T* h0, bool exact, T* y,
                  T* h_final, T* h_hist, T* abar_hist) {
  std::vector<T> h(static_cast<size_t>(channels * state));
  if (h0) {
    for (i64 j = 0; j < channels * state; ++j) h[j] = h0[j];
  }
  for (i64 k = 0; k < seq; ++k) {
    const T* bk = b + k * state;
    const T* ck = c + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const T dt = delta[k * channels + e];
      const T x = u[k * channels + e];
      T* he = h.data() + e * state;
      T acc = T(0);
      for (i64 i = 0; i < state; ++i) {
        const T ai = a[e * state + i];
        const T ab = std::exp(dt * ai);
        const T bb = exact ? (ab - T(1)) / ai * bk[i] : dt * bk[i];
        const T hn = ab * he[i] + bb * x;
        he[i] = hn;
        acc += ck[i] * hn;
        if (h_hist) h_hist[(k * channels + e) * state + i] = hn;
        if (abar_hist) abar_hist[(k * channels + e) * state + i] = ab;
      }
      y[k * channels + e] = acc + dskip[e] * x;
    }
  }
  if (h_final) {
    for (i64 j = 0; j < channels * state; ++j) h_final[j] = h[j];
  }
}

template <typename T>
void scan_backward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                   const T* delta, const T* a, const T* dskip, const T* h0, bool exact,
                   const T* h_hist, const T* abar_hist, const T* dy, const T* dh_final, T* du,
                   T* db, T* dc, T* ddelta, T* da, T* ddskip, T* dh0) {
  // gh holds dL/dh_k while walking k backwards.
  std::vector<T> gh(static_cast<size_t>(channels * state), T(0));
  if (dh_final) {
    for (i64 j = 0; j < channels * state; ++j) gh[j] = dh_final[j];
  }
  for (i64 k = seq - 1; k >= 0; --k) {
    const T* bk = b + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const T dt = delta[k * channels + e];
      const T x = u[k * channels + e];
      const T gy = dy[k * channels + e];
      T* ghe = gh.data() + e * state;
      ddskip[e] += gy * x;
      T gu = gy * dskip[e];
      T gdt = T(0);
      for (i64 i = 0; i < state; ++i) {
        const i64 hi = (k * channels + e) * state + i;
        const T hk = h_hist[hi];
        const T ab = abar_hist[hi];
        const T hp = (k > 0) ? h_hist[hi - channels * state] : (h0 ? h0[e * state + i] : T(0));
        dc[k * state + i] += gy * hk;
        T ghi = ghe[i] + gy * c[k * state + i];
        const T ai = a[e * state + i];
        const T g_ab = ghi * hp;
        const T g_bb = ghi * x;
        if (exact) {
          const T w = (ab - T(1)) / ai;
          gu += ghi * (w * bk[i]);
          db[k * state + i] += g_bb * w;
          gdt += g_ab * ab * ai + g_bb * bk[i] * ab;
          da[e * state + i] +=
              g_ab * ab * dt + g_bb * bk[i] * (dt * ab * ai - (ab - T(1))) / (ai * ai);
        } else {
          gu += ghi * (dt * bk[i]);
          db[k * state + i] += g_bb * dt;
          gdt += g_ab * ab * ai + g_bb * bk[i];
          da[e * state + i] += g_ab * ab * dt;
        }
        ghe[i] = ghi * ab;
      }
      du[k * channels + e] += gu;
      ddelta[k * channels + e] += gdt;
    }
  }
  if (dh0) {
    for (i64 j = 0; j < channels * state; ++j) dh0[j] += gh[j];
  }
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_SCALAR(T)                                                        \
  template void gemm_nn<T>(const T*, const T*, T*, i64, i64, i64, bool);                   \
  template void gemm_nt<T>(const T*, const T*, T*, i64, i64, i64, bool);                   \
  template void gemm_tn<T>(const T*, const T*, T*, i64, i64, i64, bool);                   \
  template void add_bias_rows<T>(T*, const T*, i64, i64);                                  \
  template void vexp<T>(const T*, T*, i64);                                                \
  template void silu<T>(const T*, T*, i64);                                                \
  template void silu_backward<T>(const T*, const T*, T*, i64);                             \
  template void softplus<T>(const T*, T*, i64);                                            \
  template void softplus_backward<T>(const T*, const T*, T*, i64);                         \
  template void gelu<T>(const T*, T*, i64);                                                \
  template void gelu_backward<T>(const T*, const T*, T*, i64);                             \
  template void scan_forward<T>(i64, i64, i64, const T*, const T*, const T*, const T*,    \
                                const T*, const T*, const T*, bool, T*, T*, T*, T*);       \
  template void scan_backward<T>(i64, i64, i64, const T*, const T*, const T*, const T*,   \
                                 const T*, const T*, const T*, bool, const T*, const T*,   \
                                 const T*, const T*, T*, T*, T*, T*, T*, T*, T*);

SISMA_INSTANTIATE_SCALAR(float)
SISMA_INSTANTIATE_SCALAR(double)

#undef SISMA_INSTANTIATE_SCALAR

} // namespace sisma::kernels::scalar
