// SPDX-License-Identifier: Apache-2.0
//
// Backend selection and the public kernel entry points.  The backend is
// resolved once: SISMA_KERNEL=scalar|avx2 overrides, otherwise the best
// supported implementation wins.

#include <cstdlib>
#include <string>

#include "sisma/core/errors.hpp"
#include "sisma/kernels/dispatch.hpp"
#include "kernels_detail.hpp"

namespace sisma::kernels {

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Backend resolve_backend() {
  const char* env = std::getenv("SISMA_KERNEL");
  if (env != nullptr && *env != '\0') {
    const std::string s(env);
    if (s == "scalar") return Backend::Scalar;
    if (s == "avx2") {
      if (!avx2_supported()) {
        throw ConfigError("SISMA_KERNEL=avx2 requested but this CPU lacks AVX2+FMA");
      }
      return Backend::Avx2;
    }
    throw ConfigError("unknown SISMA_KERNEL value '" + s + "' (expected 'scalar' or 'avx2')");
  }
  return avx2_supported() ? Backend::Avx2 : Backend::Scalar;
}

Backend& backend_slot() {
  static Backend b = resolve_backend();
  return b;
}

} // namespace

Backend active_backend() { return backend_slot(); }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_supported()) {
    throw ConfigError("cannot select the avx2 backend: this CPU lacks AVX2+FMA");
  }
  backend_slot() = b;
}

const char* backend_name(Backend b) {
  return b == Backend::Avx2 ? "avx2" : "scalar";
}

// ---------------------------------------------------------------------------
// dispatching wrappers
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if (active_backend() == Backend::Avx2) {
    avx2::gemm_nn(a, b, c, m, n, k, accumulate);
  } else {
    scalar::gemm_nn(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if (active_backend() == Backend::Avx2) {
    avx2::gemm_nt(a, b, c, m, n, k, accumulate);
  } else {
    scalar::gemm_nt(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if (active_backend() == Backend::Avx2) {
    avx2::gemm_tn(a, b, c, m, n, k, accumulate);
  } else {
    scalar::gemm_tn(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void add_bias_rows(T* y, const T* bias, i64 rows, i64 cols) {
  if (active_backend() == Backend::Avx2) {
    avx2::add_bias_rows(y, bias, rows, cols);
  } else {
    scalar::add_bias_rows(y, bias, rows, cols);
  }
}

template <typename T>
void vexp(const T* x, T* y, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::vexp(x, y, n);
  } else {
    scalar::vexp(x, y, n);
  }
}

template <typename T>
void silu(const T* x, T* y, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::silu(x, y, n);
  } else {
    scalar::silu(x, y, n);
  }
}

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::silu_backward(x, dy, dx, n);
  } else {
    scalar::silu_backward(x, dy, dx, n);
  }
}

template <typename T>
void softplus(const T* x, T* y, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::softplus(x, y, n);
  } else {
    scalar::softplus(x, y, n);
  }
}

template <typename T>
void softplus_backward(const T* x, const T* dy, T* dx, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::softplus_backward(x, dy, dx, n);
  } else {
    scalar::softplus_backward(x, dy, dx, n);
  }
}

template <typename T>
void gelu(const T* x, T* y, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::gelu(x, y, n);
  } else {
    scalar::gelu(x, y, n);
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, i64 n) {
  if (active_backend() == Backend::Avx2) {
    avx2::gelu_backward(x, dy, dx, n);
  } else {
    scalar::gelu_backward(x, dy, dx, n);
  }
}

template <typename T>
void scan_forward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                  const T* delta, const T* a, const T* dskip, const T* h0, bool exact, T* y,
                  T* h_final, T* h_hist, T* abar_hist) {
  if (active_backend() == Backend::Avx2) {
    avx2::scan_forward(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, y, h_final,
                       h_hist, abar_hist);
  } else {
    scalar::scan_forward(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, y,
                         h_final, h_hist, abar_hist);
  }
}

template <typename T>
void scan_backward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                   const T* delta, const T* a, const T* dskip, const T* h0, bool exact,
                   const T* h_hist, const T* abar_hist, const T* dy, const T* dh_final, T* du,
                   T* db, T* dc, T* ddelta, T* da, T* ddskip, T* dh0) {
  if (active_backend() == Backend::Avx2) {
    avx2::scan_backward(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, h_hist,
                        abar_hist, dy, dh_final, du, db, dc, ddelta, da, ddskip, dh0);
  } else {
    scalar::scan_backward(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, h_hist,
                          abar_hist, dy, dh_final, du, db, dc, ddelta, da, ddskip, dh0);
  }
}

#define SISMA_INSTANTIATE_DISPATCH(T)                                                      \
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

SISMA_INSTANTIATE_DISPATCH(float)
SISMA_INSTANTIATE_DISPATCH(double)

#undef SISMA_INSTANTIATE_DISPATCH

} // namespace sisma::kernels
