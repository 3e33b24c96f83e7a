// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA kernels.  This is the only translation unit compiled with
// -mavx2 -mfma; everything else stays generic so the scalar backend remains a
// true reference.  Remainder rows/columns/lanes fall back to plain loops.
//
// exp is evaluated with the Cephes range-reduction polynomials.  Inputs below
// the reduction range flush to zero instead of producing subnormals, and
// inputs above it saturate at the boundary value.

#ifndef __AVX2__
#error "kernels_avx2.cpp must be compiled with AVX2 and FMA enabled"
#endif

#include <immintrin.h>

#include <cmath>
#include <type_traits>
#include <vector>

#include "kernels_detail.hpp"

namespace sisma::kernels::avx2 {

namespace {

// ---------------------------------------------------------------------------
// vector math helpers
// ---------------------------------------------------------------------------

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  const __m128d sh = _mm_unpackhi_pd(lo, lo);
  lo = _mm_add_sd(lo, sh);
  return _mm_cvtsd_f64(lo);
}

inline __m256 exp_v(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-87.3365478515625f);
  const __m256 xc = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  const __m256 n = _mm256_round_ps(_mm256_mul_ps(xc, _mm256_set1_ps(1.44269504088896341f)),
                                   _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256 r = _mm256_fnmadd_ps(n, _mm256_set1_ps(0.693359375f), xc);
  r = _mm256_fnmadd_ps(n, _mm256_set1_ps(-2.12194440e-4f), r);
  __m256 p = _mm256_set1_ps(1.9875691500e-4f);
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.3981999507e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.3334519073e-3f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.1665795894e-2f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.6666665459e-1f));
  p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(5.0000001201e-1f));
  const __m256 r2 = _mm256_mul_ps(r, r);
  p = _mm256_fmadd_ps(p, r2, _mm256_add_ps(r, _mm256_set1_ps(1.0f)));
  __m256i ni = _mm256_cvtps_epi32(n);
  ni = _mm256_slli_epi32(_mm256_add_epi32(ni, _mm256_set1_epi32(127)), 23);
  const __m256 res = _mm256_mul_ps(p, _mm256_castsi256_ps(ni));
  const __m256 under = _mm256_cmp_ps(x, lo, _CMP_LT_OQ);
  return _mm256_andnot_ps(under, res);
}

inline __m256d exp_v(__m256d x) {
  const __m256d hi = _mm256_set1_pd(709.0);
  const __m256d lo = _mm256_set1_pd(-708.0);
  const __m256d xc = _mm256_min_pd(_mm256_max_pd(x, lo), hi);
  const __m256d n =
      _mm256_round_pd(_mm256_mul_pd(xc, _mm256_set1_pd(1.4426950408889634073599)),
                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(n, _mm256_set1_pd(6.93145751953125e-1), xc);
  r = _mm256_fnmadd_pd(n, _mm256_set1_pd(1.42860682030941723212e-6), r);
  const __m256d r2 = _mm256_mul_pd(r, r);
  __m256d p = _mm256_set1_pd(1.26177193074810590878e-4);
  p = _mm256_fmadd_pd(p, r2, _mm256_set1_pd(3.02994407707441961300e-2));
  p = _mm256_fmadd_pd(p, r2, _mm256_set1_pd(9.99999999999999999910e-1));
  p = _mm256_mul_pd(p, r);
  __m256d q = _mm256_set1_pd(3.00198505138664455042e-6);
  q = _mm256_fmadd_pd(q, r2, _mm256_set1_pd(2.52448340349684104192e-3));
  q = _mm256_fmadd_pd(q, r2, _mm256_set1_pd(2.27265548208155028766e-1));
  q = _mm256_fmadd_pd(q, r2, _mm256_set1_pd(2.00000000000000000005e0));
  const __m256d e = _mm256_div_pd(p, _mm256_sub_pd(q, p));
  __m256d res = _mm256_fmadd_pd(_mm256_set1_pd(2.0), e, _mm256_set1_pd(1.0));
  const __m128i n32 = _mm256_cvtpd_epi32(n);
  __m256i n64 = _mm256_cvtepi32_epi64(n32);
  n64 = _mm256_slli_epi64(_mm256_add_epi64(n64, _mm256_set1_epi64x(1023)), 52);
  res = _mm256_mul_pd(res, _mm256_castsi256_pd(n64));
  const __m256d under = _mm256_cmp_pd(x, lo, _CMP_LT_OQ);
  return _mm256_andnot_pd(under, res);
}

inline __m256 sigmoid_v(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 e = exp_v(_mm256_sub_ps(_mm256_setzero_ps(), x));
  return _mm256_div_ps(one, _mm256_add_ps(one, e));
}

inline __m256d sigmoid_v(__m256d x) {
  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d e = exp_v(_mm256_sub_pd(_mm256_setzero_pd(), x));
  return _mm256_div_pd(one, _mm256_add_pd(one, e));
}

// tanh(x) = 1 - 2 / (exp(2x) + 1); exact at both saturated tails.
inline __m256 tanh_v(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 two = _mm256_set1_ps(2.0f);
  const __m256 e = exp_v(_mm256_mul_ps(two, x));
  return _mm256_sub_ps(one, _mm256_div_ps(two, _mm256_add_ps(e, one)));
}

inline __m256d tanh_v(__m256d x) {
  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d two = _mm256_set1_pd(2.0);
  const __m256d e = exp_v(_mm256_mul_pd(two, x));
  return _mm256_sub_pd(one, _mm256_div_pd(two, _mm256_add_pd(e, one)));
}

// log1p(t) for t in [0, 1], via 2 atanh(w) with w = t/(t+2) <= 1/3.  Forming
// w straight from t keeps full relative precision for tiny t.
inline __m256 log1p_unit_v(__m256 t) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 w = _mm256_div_ps(t, _mm256_add_ps(t, _mm256_set1_ps(2.0f)));
  const __m256 w2 = _mm256_mul_ps(w, w);
  __m256 p = _mm256_set1_ps(1.0f / 13.0f);
  p = _mm256_fmadd_ps(p, w2, _mm256_set1_ps(1.0f / 11.0f));
  p = _mm256_fmadd_ps(p, w2, _mm256_set1_ps(1.0f / 9.0f));
  p = _mm256_fmadd_ps(p, w2, _mm256_set1_ps(1.0f / 7.0f));
  p = _mm256_fmadd_ps(p, w2, _mm256_set1_ps(1.0f / 5.0f));
  p = _mm256_fmadd_ps(p, w2, _mm256_set1_ps(1.0f / 3.0f));
  p = _mm256_fmadd_ps(p, w2, one);
  return _mm256_mul_ps(_mm256_mul_ps(_mm256_set1_ps(2.0f), w), p);
}

inline __m256d log1p_unit_v(__m256d t) {
  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d w = _mm256_div_pd(t, _mm256_add_pd(t, _mm256_set1_pd(2.0)));
  const __m256d w2 = _mm256_mul_pd(w, w);
  __m256d p = _mm256_set1_pd(1.0 / 33.0);
  for (int d = 31; d >= 3; d -= 2) {
    p = _mm256_fmadd_pd(p, w2, _mm256_set1_pd(1.0 / static_cast<double>(d)));
  }
  p = _mm256_fmadd_pd(p, w2, one);
  return _mm256_mul_pd(_mm256_mul_pd(_mm256_set1_pd(2.0), w), p);
}

// ---------------------------------------------------------------------------
// leading-dimension-aware reference loops for remainder regions
// ---------------------------------------------------------------------------

template <typename T>
void nn_ref(const T* a, i64 lda, const T* b, i64 ldb, T* c, i64 ldc, i64 m, i64 n, i64 k,
            bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < k; ++p) {
      const T aval = a[i * lda + p];
      const T* brow = b + p * ldb;
      for (i64 j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

template <typename T>
void nt_ref(const T* a, i64 lda, const T* b, i64 ldb, T* c, i64 ldc, i64 m, i64 n, i64 k,
            bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      T acc = T(0);
      for (i64 p = 0; p < k; ++p) acc += a[i * lda + p] * b[j * ldb + p];
      T* cp = c + i * ldc + j;
      *cp = accumulate ? *cp + acc : acc;
    }
  }
}

template <typename T>
void tn_ref(const T* a, i64 lda, const T* b, i64 ldb, T* c, i64 ldc, i64 m, i64 n, i64 k,
            bool accumulate) {
  for (i64 i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) {
      for (i64 j = 0; j < n; ++j) crow[j] = T(0);
    }
    for (i64 p = 0; p < k; ++p) {
      const T aval = a[p * lda + i];
      const T* brow = b + p * ldb;
      for (i64 j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// gemm microkernels, 4-row tiles
// ---------------------------------------------------------------------------

void gemm_nn_f32(const float* a, const float* b, float* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 m4 = m & ~i64(3);
  const i64 n16 = n & ~i64(15);
  for (i64 i = 0; i < m4; i += 4) {
    for (i64 j = 0; j < n16; j += 16) {
      __m256 c00, c01, c10, c11, c20, c21, c30, c31;
      if (accumulate) {
        c00 = _mm256_loadu_ps(c + (i + 0) * n + j);
        c01 = _mm256_loadu_ps(c + (i + 0) * n + j + 8);
        c10 = _mm256_loadu_ps(c + (i + 1) * n + j);
        c11 = _mm256_loadu_ps(c + (i + 1) * n + j + 8);
        c20 = _mm256_loadu_ps(c + (i + 2) * n + j);
        c21 = _mm256_loadu_ps(c + (i + 2) * n + j + 8);
        c30 = _mm256_loadu_ps(c + (i + 3) * n + j);
        c31 = _mm256_loadu_ps(c + (i + 3) * n + j + 8);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_ps();
      }
      for (i64 p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
        const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
        __m256 av = _mm256_broadcast_ss(a + (i + 0) * k + p);
        c00 = _mm256_fmadd_ps(av, b0, c00);
        c01 = _mm256_fmadd_ps(av, b1, c01);
        av = _mm256_broadcast_ss(a + (i + 1) * k + p);
        c10 = _mm256_fmadd_ps(av, b0, c10);
        c11 = _mm256_fmadd_ps(av, b1, c11);
        av = _mm256_broadcast_ss(a + (i + 2) * k + p);
        c20 = _mm256_fmadd_ps(av, b0, c20);
        c21 = _mm256_fmadd_ps(av, b1, c21);
        av = _mm256_broadcast_ss(a + (i + 3) * k + p);
        c30 = _mm256_fmadd_ps(av, b0, c30);
        c31 = _mm256_fmadd_ps(av, b1, c31);
      }
      _mm256_storeu_ps(c + (i + 0) * n + j, c00);
      _mm256_storeu_ps(c + (i + 0) * n + j + 8, c01);
      _mm256_storeu_ps(c + (i + 1) * n + j, c10);
      _mm256_storeu_ps(c + (i + 1) * n + j + 8, c11);
      _mm256_storeu_ps(c + (i + 2) * n + j, c20);
      _mm256_storeu_ps(c + (i + 2) * n + j + 8, c21);
      _mm256_storeu_ps(c + (i + 3) * n + j, c30);
      _mm256_storeu_ps(c + (i + 3) * n + j + 8, c31);
    }
  }
  if (n16 < n) nn_ref(a, k, b + n16, n, c + n16, n, m4, n - n16, k, accumulate);
  if (m4 < m) nn_ref(a + m4 * k, k, b, n, c + m4 * n, n, m - m4, n, k, accumulate);
}

void gemm_nn_f64(const double* a, const double* b, double* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 m4 = m & ~i64(3);
  const i64 n8 = n & ~i64(7);
  for (i64 i = 0; i < m4; i += 4) {
    for (i64 j = 0; j < n8; j += 8) {
      __m256d c00, c01, c10, c11, c20, c21, c30, c31;
      if (accumulate) {
        c00 = _mm256_loadu_pd(c + (i + 0) * n + j);
        c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
        c10 = _mm256_loadu_pd(c + (i + 1) * n + j);
        c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
        c20 = _mm256_loadu_pd(c + (i + 2) * n + j);
        c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
        c30 = _mm256_loadu_pd(c + (i + 3) * n + j);
        c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
      }
      for (i64 p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
        const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
        __m256d av = _mm256_broadcast_sd(a + (i + 0) * k + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a + (i + 1) * k + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a + (i + 2) * k + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a + (i + 3) * k + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      _mm256_storeu_pd(c + (i + 0) * n + j, c00);
      _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
      _mm256_storeu_pd(c + (i + 1) * n + j, c10);
      _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
      _mm256_storeu_pd(c + (i + 2) * n + j, c20);
      _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
      _mm256_storeu_pd(c + (i + 3) * n + j, c30);
      _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
    }
  }
  if (n8 < n) nn_ref(a, k, b + n8, n, c + n8, n, m4, n - n8, k, accumulate);
  if (m4 < m) nn_ref(a + m4 * k, k, b, n, c + m4 * n, n, m - m4, n, k, accumulate);
}

void gemm_nt_f32(const float* a, const float* b, float* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 n4 = n & ~i64(3);
  const i64 k8 = k & ~i64(7);
  for (i64 i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (i64 j = 0; j < n4; j += 4) {
      __m256 a0 = _mm256_setzero_ps();
      __m256 a1 = _mm256_setzero_ps();
      __m256 a2 = _mm256_setzero_ps();
      __m256 a3 = _mm256_setzero_ps();
      const float* b0 = b + (j + 0) * k;
      const float* b1 = b + (j + 1) * k;
      const float* b2 = b + (j + 2) * k;
      const float* b3 = b + (j + 3) * k;
      for (i64 p = 0; p < k8; p += 8) {
        const __m256 av = _mm256_loadu_ps(arow + p);
        a0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + p), a0);
        a1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + p), a1);
        a2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + p), a2);
        a3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + p), a3);
      }
      float s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2), s3 = hsum(a3);
      for (i64 p = k8; p < k; ++p) {
        const float av = arow[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      float* crow = c + i * n + j;
      if (accumulate) {
        crow[0] += s0;
        crow[1] += s1;
        crow[2] += s2;
        crow[3] += s3;
      } else {
        crow[0] = s0;
        crow[1] = s1;
        crow[2] = s2;
        crow[3] = s3;
      }
    }
    for (i64 j = n4; j < n; ++j) {
      const float* brow = b + j * k;
      __m256 av = _mm256_setzero_ps();
      for (i64 p = 0; p < k8; p += 8) {
        av = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), av);
      }
      float s = hsum(av);
      for (i64 p = k8; p < k; ++p) s += arow[p] * brow[p];
      float* cp = c + i * n + j;
      *cp = accumulate ? *cp + s : s;
    }
  }
}

void gemm_nt_f64(const double* a, const double* b, double* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 n4 = n & ~i64(3);
  const i64 k4 = k & ~i64(3);
  for (i64 i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (i64 j = 0; j < n4; j += 4) {
      __m256d a0 = _mm256_setzero_pd();
      __m256d a1 = _mm256_setzero_pd();
      __m256d a2 = _mm256_setzero_pd();
      __m256d a3 = _mm256_setzero_pd();
      const double* b0 = b + (j + 0) * k;
      const double* b1 = b + (j + 1) * k;
      const double* b2 = b + (j + 2) * k;
      const double* b3 = b + (j + 3) * k;
      for (i64 p = 0; p < k4; p += 4) {
        const __m256d av = _mm256_loadu_pd(arow + p);
        a0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), a0);
        a1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), a1);
        a2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), a2);
        a3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), a3);
      }
      double s0 = hsum(a0), s1 = hsum(a1), s2 = hsum(a2), s3 = hsum(a3);
      for (i64 p = k4; p < k; ++p) {
        const double av = arow[p];
        s0 += av * b0[p];
        s1 += av * b1[p];
        s2 += av * b2[p];
        s3 += av * b3[p];
      }
      double* crow = c + i * n + j;
      if (accumulate) {
        crow[0] += s0;
        crow[1] += s1;
        crow[2] += s2;
        crow[3] += s3;
      } else {
        crow[0] = s0;
        crow[1] = s1;
        crow[2] = s2;
        crow[3] = s3;
      }
    }
    for (i64 j = n4; j < n; ++j) {
      const double* brow = b + j * k;
      __m256d av = _mm256_setzero_pd();
      for (i64 p = 0; p < k4; p += 4) {
        av = _mm256_fmadd_pd(_mm256_loadu_pd(arow + p), _mm256_loadu_pd(brow + p), av);
      }
      double s = hsum(av);
      for (i64 p = k4; p < k; ++p) s += arow[p] * brow[p];
      double* cp = c + i * n + j;
      *cp = accumulate ? *cp + s : s;
    }
  }
}

void gemm_tn_f32(const float* a, const float* b, float* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 m4 = m & ~i64(3);
  const i64 n16 = n & ~i64(15);
  for (i64 i = 0; i < m4; i += 4) {
    for (i64 j = 0; j < n16; j += 16) {
      __m256 c00, c01, c10, c11, c20, c21, c30, c31;
      if (accumulate) {
        c00 = _mm256_loadu_ps(c + (i + 0) * n + j);
        c01 = _mm256_loadu_ps(c + (i + 0) * n + j + 8);
        c10 = _mm256_loadu_ps(c + (i + 1) * n + j);
        c11 = _mm256_loadu_ps(c + (i + 1) * n + j + 8);
        c20 = _mm256_loadu_ps(c + (i + 2) * n + j);
        c21 = _mm256_loadu_ps(c + (i + 2) * n + j + 8);
        c30 = _mm256_loadu_ps(c + (i + 3) * n + j);
        c31 = _mm256_loadu_ps(c + (i + 3) * n + j + 8);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_ps();
      }
      for (i64 p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
        const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
        const float* ap = a + p * m + i;
        __m256 av = _mm256_broadcast_ss(ap + 0);
        c00 = _mm256_fmadd_ps(av, b0, c00);
        c01 = _mm256_fmadd_ps(av, b1, c01);
        av = _mm256_broadcast_ss(ap + 1);
        c10 = _mm256_fmadd_ps(av, b0, c10);
        c11 = _mm256_fmadd_ps(av, b1, c11);
        av = _mm256_broadcast_ss(ap + 2);
        c20 = _mm256_fmadd_ps(av, b0, c20);
        c21 = _mm256_fmadd_ps(av, b1, c21);
        av = _mm256_broadcast_ss(ap + 3);
        c30 = _mm256_fmadd_ps(av, b0, c30);
        c31 = _mm256_fmadd_ps(av, b1, c31);
      }
      _mm256_storeu_ps(c + (i + 0) * n + j, c00);
      _mm256_storeu_ps(c + (i + 0) * n + j + 8, c01);
      _mm256_storeu_ps(c + (i + 1) * n + j, c10);
      _mm256_storeu_ps(c + (i + 1) * n + j + 8, c11);
      _mm256_storeu_ps(c + (i + 2) * n + j, c20);
      _mm256_storeu_ps(c + (i + 2) * n + j + 8, c21);
      _mm256_storeu_ps(c + (i + 3) * n + j, c30);
      _mm256_storeu_ps(c + (i + 3) * n + j + 8, c31);
    }
  }
  if (n16 < n) tn_ref(a, m, b + n16, n, c + n16, n, m4, n - n16, k, accumulate);
  if (m4 < m) tn_ref(a + m4, m, b, n, c + m4 * n, n, m - m4, n, k, accumulate);
}

void gemm_tn_f64(const double* a, const double* b, double* c, i64 m, i64 n, i64 k,
                 bool accumulate) {
  const i64 m4 = m & ~i64(3);
  const i64 n8 = n & ~i64(7);
  for (i64 i = 0; i < m4; i += 4) {
    for (i64 j = 0; j < n8; j += 8) {
      __m256d c00, c01, c10, c11, c20, c21, c30, c31;
      if (accumulate) {
        c00 = _mm256_loadu_pd(c + (i + 0) * n + j);
        c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
        c10 = _mm256_loadu_pd(c + (i + 1) * n + j);
        c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
        c20 = _mm256_loadu_pd(c + (i + 2) * n + j);
        c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
        c30 = _mm256_loadu_pd(c + (i + 3) * n + j);
        c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
      } else {
        c00 = c01 = c10 = c11 = c20 = c21 = c30 = c31 = _mm256_setzero_pd();
      }
      for (i64 p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
        const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
        const double* ap = a + p * m + i;
        __m256d av = _mm256_broadcast_sd(ap + 0);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(ap + 1);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(ap + 2);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(ap + 3);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      _mm256_storeu_pd(c + (i + 0) * n + j, c00);
      _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
      _mm256_storeu_pd(c + (i + 1) * n + j, c10);
      _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
      _mm256_storeu_pd(c + (i + 2) * n + j, c20);
      _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
      _mm256_storeu_pd(c + (i + 3) * n + j, c30);
      _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
    }
  }
  if (n8 < n) tn_ref(a, m, b + n8, n, c + n8, n, m4, n - n8, k, accumulate);
  if (m4 < m) tn_ref(a + m4, m, b, n, c + m4 * n, n, m - m4, n, k, accumulate);
}

} // namespace

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    gemm_nn_f32(a, b, c, m, n, k, accumulate);
  } else {
    gemm_nn_f64(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    gemm_nt_f32(a, b, c, m, n, k, accumulate);
  } else {
    gemm_nt_f64(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 n, i64 k, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    gemm_tn_f32(a, b, c, m, n, k, accumulate);
  } else {
    gemm_tn_f64(a, b, c, m, n, k, accumulate);
  }
}

template <typename T>
void add_bias_rows(T* y, const T* bias, i64 rows, i64 cols) {
  if constexpr (std::is_same_v<T, float>) {
    const i64 c8 = cols & ~i64(7);
    for (i64 i = 0; i < rows; ++i) {
      float* yrow = y + i * cols;
      for (i64 j = 0; j < c8; j += 8) {
        _mm256_storeu_ps(yrow + j,
                         _mm256_add_ps(_mm256_loadu_ps(yrow + j), _mm256_loadu_ps(bias + j)));
      }
      for (i64 j = c8; j < cols; ++j) yrow[j] += bias[j];
    }
  } else {
    const i64 c4 = cols & ~i64(3);
    for (i64 i = 0; i < rows; ++i) {
      double* yrow = y + i * cols;
      for (i64 j = 0; j < c4; j += 4) {
        _mm256_storeu_pd(yrow + j,
                         _mm256_add_pd(_mm256_loadu_pd(yrow + j), _mm256_loadu_pd(bias + j)));
      }
      for (i64 j = c4; j < cols; ++j) yrow[j] += bias[j];
    }
  }
}

template <typename T>
void vexp(const T* x, T* y, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) _mm256_storeu_ps(y + i, exp_v(_mm256_loadu_ps(x + i)));
    for (i64 i = n8; i < n; ++i) y[i] = std::exp(x[i]);
  } else {
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) _mm256_storeu_pd(y + i, exp_v(_mm256_loadu_pd(x + i)));
    for (i64 i = n4; i < n; ++i) y[i] = std::exp(x[i]);
  }
}

template <typename T>
void silu(const T* x, T* y, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      _mm256_storeu_ps(y + i, _mm256_mul_ps(xv, sigmoid_v(xv)));
    }
    for (i64 i = n8; i < n; ++i) {
      const float s = 1.0f / (1.0f + std::exp(-x[i]));
      y[i] = x[i] * s;
    }
  } else {
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d xv = _mm256_loadu_pd(x + i);
      _mm256_storeu_pd(y + i, _mm256_mul_pd(xv, sigmoid_v(xv)));
    }
    for (i64 i = n4; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      y[i] = x[i] * s;
    }
  }
}

template <typename T>
void silu_backward(const T* x, const T* dy, T* dx, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const __m256 one = _mm256_set1_ps(1.0f);
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 s = sigmoid_v(xv);
      const __m256 t = _mm256_fmadd_ps(xv, _mm256_sub_ps(one, s), one);
      _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), _mm256_mul_ps(s, t)));
    }
    for (i64 i = n8; i < n; ++i) {
      const float s = 1.0f / (1.0f + std::exp(-x[i]));
      dx[i] = dy[i] * (s * (1.0f + x[i] * (1.0f - s)));
    }
  } else {
    const __m256d one = _mm256_set1_pd(1.0);
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d xv = _mm256_loadu_pd(x + i);
      const __m256d s = sigmoid_v(xv);
      const __m256d t = _mm256_fmadd_pd(xv, _mm256_sub_pd(one, s), one);
      _mm256_storeu_pd(dx + i, _mm256_mul_pd(_mm256_loadu_pd(dy + i), _mm256_mul_pd(s, t)));
    }
    for (i64 i = n4; i < n; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      dx[i] = dy[i] * (s * (1.0 + x[i] * (1.0 - s)));
    }
  }
}

template <typename T>
void softplus(const T* x, T* y, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const __m256 zero = _mm256_setzero_ps();
    const __m256 sign_mask = _mm256_set1_ps(-0.0f);
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 ax = _mm256_andnot_ps(sign_mask, xv);
      const __m256 t = exp_v(_mm256_sub_ps(zero, ax));
      const __m256 lg = log1p_unit_v(t);
      _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_max_ps(xv, zero), lg));
    }
    for (i64 i = n8; i < n; ++i) {
      y[i] = std::max(x[i], 0.0f) + std::log1p(std::exp(-std::abs(x[i])));
    }
  } else {
    const __m256d zero = _mm256_setzero_pd();
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d xv = _mm256_loadu_pd(x + i);
      const __m256d ax = _mm256_andnot_pd(sign_mask, xv);
      const __m256d t = exp_v(_mm256_sub_pd(zero, ax));
      const __m256d lg = log1p_unit_v(t);
      _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_max_pd(xv, zero), lg));
    }
    for (i64 i = n4; i < n; ++i) {
      y[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::abs(x[i])));
    }
  }
}

template <typename T>
void softplus_backward(const T* x, const T* dy, T* dx, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 s = sigmoid_v(_mm256_loadu_ps(x + i));
      _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), s));
    }
    for (i64 i = n8; i < n; ++i) dx[i] = dy[i] / (1.0f + std::exp(-x[i]));
  } else {
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d s = sigmoid_v(_mm256_loadu_pd(x + i));
      _mm256_storeu_pd(dx + i, _mm256_mul_pd(_mm256_loadu_pd(dy + i), s));
    }
    for (i64 i = n4; i < n; ++i) dx[i] = dy[i] / (1.0 + std::exp(-x[i]));
  }
}

template <typename T>
void gelu(const T* x, T* y, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const __m256 c = _mm256_set1_ps(0.79788456080286536f);
    const __m256 q = _mm256_set1_ps(0.044715f);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 x2 = _mm256_mul_ps(xv, xv);
      const __m256 g = _mm256_mul_ps(c, _mm256_fmadd_ps(_mm256_mul_ps(q, x2), xv, xv));
      const __m256 th = tanh_v(g);
      _mm256_storeu_ps(y + i,
                       _mm256_mul_ps(_mm256_mul_ps(half, xv), _mm256_add_ps(one, th)));
    }
    for (i64 i = n8; i < n; ++i) {
      const float v = x[i];
      const float g = 0.79788456080286536f * (v + 0.044715f * v * v * v);
      y[i] = 0.5f * v * (1.0f + std::tanh(g));
    }
  } else {
    const __m256d c = _mm256_set1_pd(0.7978845608028653558798921198687637);
    const __m256d q = _mm256_set1_pd(0.044715);
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d one = _mm256_set1_pd(1.0);
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d xv = _mm256_loadu_pd(x + i);
      const __m256d x2 = _mm256_mul_pd(xv, xv);
      const __m256d g = _mm256_mul_pd(c, _mm256_fmadd_pd(_mm256_mul_pd(q, x2), xv, xv));
      const __m256d th = tanh_v(g);
      _mm256_storeu_pd(y + i,
                       _mm256_mul_pd(_mm256_mul_pd(half, xv), _mm256_add_pd(one, th)));
    }
    for (i64 i = n4; i < n; ++i) {
      const double v = x[i];
      const double g = 0.7978845608028653558798921198687637 * (v + 0.044715 * v * v * v);
      y[i] = 0.5 * v * (1.0 + std::tanh(g));
    }
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, i64 n) {
  if constexpr (std::is_same_v<T, float>) {
    const __m256 c = _mm256_set1_ps(0.79788456080286536f);
    const __m256 q3 = _mm256_set1_ps(3.0f * 0.044715f);
    const __m256 q = _mm256_set1_ps(0.044715f);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 one = _mm256_set1_ps(1.0f);
    const i64 n8 = n & ~i64(7);
    for (i64 i = 0; i < n8; i += 8) {
      const __m256 xv = _mm256_loadu_ps(x + i);
      const __m256 x2 = _mm256_mul_ps(xv, xv);
      const __m256 g = _mm256_mul_ps(c, _mm256_fmadd_ps(_mm256_mul_ps(q, x2), xv, xv));
      const __m256 th = tanh_v(g);
      const __m256 sech2 = _mm256_fnmadd_ps(th, th, one);
      const __m256 dg = _mm256_mul_ps(c, _mm256_fmadd_ps(q3, x2, one));
      const __m256 term = _mm256_fmadd_ps(_mm256_mul_ps(xv, sech2), dg, _mm256_add_ps(one, th));
      _mm256_storeu_ps(dx + i,
                       _mm256_mul_ps(_mm256_loadu_ps(dy + i), _mm256_mul_ps(half, term)));
    }
    for (i64 i = n8; i < n; ++i) {
      const float v = x[i];
      const float g = 0.79788456080286536f * (v + 0.044715f * v * v * v);
      const float th = std::tanh(g);
      const float sech2 = 1.0f - th * th;
      const float dg = 0.79788456080286536f * (1.0f + 3.0f * 0.044715f * v * v);
      dx[i] = dy[i] * (0.5f * (1.0f + th) + 0.5f * v * sech2 * dg);
    }
  } else {
    const __m256d c = _mm256_set1_pd(0.7978845608028653558798921198687637);
    const __m256d q3 = _mm256_set1_pd(3.0 * 0.044715);
    const __m256d q = _mm256_set1_pd(0.044715);
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d one = _mm256_set1_pd(1.0);
    const i64 n4 = n & ~i64(3);
    for (i64 i = 0; i < n4; i += 4) {
      const __m256d xv = _mm256_loadu_pd(x + i);
      const __m256d x2 = _mm256_mul_pd(xv, xv);
      const __m256d g = _mm256_mul_pd(c, _mm256_fmadd_pd(_mm256_mul_pd(q, x2), xv, xv));
      const __m256d th = tanh_v(g);
      const __m256d sech2 = _mm256_fnmadd_pd(th, th, one);
      const __m256d dg = _mm256_mul_pd(c, _mm256_fmadd_pd(q3, x2, one));
      const __m256d term =
          _mm256_fmadd_pd(_mm256_mul_pd(xv, sech2), dg, _mm256_add_pd(one, th));
      _mm256_storeu_pd(dx + i,
                       _mm256_mul_pd(_mm256_loadu_pd(dy + i), _mm256_mul_pd(half, term)));
    }
    for (i64 i = n4; i < n; ++i) {
      const double v = x[i];
      const double g = 0.7978845608028653558798921198687637 * (v + 0.044715 * v * v * v);
      const double th = std::tanh(g);
      const double sech2 = 1.0 - th * th;
      const double dg = 0.7978845608028653558798921198687637 * (1.0 + 3.0 * 0.044715 * v * v);
      dx[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * dg);
    }
  }
}

// ---------------------------------------------------------------------------
// diagonal selective scan, vectorized over the state dimension
// ---------------------------------------------------------------------------

namespace {

void scan_forward_f32(i64 seq, i64 channels, i64 state, const float* u, const float* b,
                      const float* c, const float* delta, const float* a, const float* dskip,
                      const float* h0, bool exact, float* y, float* h_final, float* h_hist,
                      float* abar_hist) {
  const i64 s8 = state & ~i64(7);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::vector<float> h(static_cast<size_t>(channels * state), 0.0f);
  if (h0) h.assign(h0, h0 + channels * state);
  for (i64 k = 0; k < seq; ++k) {
    const float* bk = b + k * state;
    const float* ck = c + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const float dt = delta[k * channels + e];
      const float x = u[k * channels + e];
      const __m256 dtv = _mm256_set1_ps(dt);
      const __m256 xv = _mm256_set1_ps(x);
      float* he = h.data() + e * state;
      const float* ae = a + e * state;
      float* hist = h_hist ? h_hist + (k * channels + e) * state : nullptr;
      float* ahist = abar_hist ? abar_hist + (k * channels + e) * state : nullptr;
      __m256 accv = _mm256_setzero_ps();
      for (i64 i = 0; i < s8; i += 8) {
        const __m256 av = _mm256_loadu_ps(ae + i);
        const __m256 ab = exp_v(_mm256_mul_ps(dtv, av));
        const __m256 bv = _mm256_loadu_ps(bk + i);
        __m256 bb;
        if (exact) {
          bb = _mm256_mul_ps(_mm256_div_ps(_mm256_sub_ps(ab, one), av), bv);
        } else {
          bb = _mm256_mul_ps(dtv, bv);
        }
        const __m256 hn = _mm256_fmadd_ps(ab, _mm256_loadu_ps(he + i), _mm256_mul_ps(bb, xv));
        _mm256_storeu_ps(he + i, hn);
        if (hist) _mm256_storeu_ps(hist + i, hn);
        if (ahist) _mm256_storeu_ps(ahist + i, ab);
        accv = _mm256_fmadd_ps(_mm256_loadu_ps(ck + i), hn, accv);
      }
      float acc = hsum(accv);
      for (i64 i = s8; i < state; ++i) {
        const float ai = ae[i];
        const float ab = std::exp(dt * ai);
        const float bb = exact ? (ab - 1.0f) / ai * bk[i] : dt * bk[i];
        const float hn = ab * he[i] + bb * x;
        he[i] = hn;
        if (hist) hist[i] = hn;
        if (ahist) ahist[i] = ab;
        acc += ck[i] * hn;
      }
      y[k * channels + e] = acc + dskip[e] * x;
    }
  }
  if (h_final) {
    for (i64 j = 0; j < channels * state; ++j) h_final[j] = h[j];
  }
}

void scan_forward_f64(i64 seq, i64 channels, i64 state, const double* u, const double* b,
                      const double* c, const double* delta, const double* a,
                      const double* dskip, const double* h0, bool exact, double* y,
                      double* h_final, double* h_hist, double* abar_hist) {
  const i64 s4 = state & ~i64(3);
  const __m256d one = _mm256_set1_pd(1.0);
  std::vector<double> h(static_cast<size_t>(channels * state), 0.0);
  if (h0) h.assign(h0, h0 + channels * state);
  for (i64 k = 0; k < seq; ++k) {
    const double* bk = b + k * state;
    const double* ck = c + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const double dt = delta[k * channels + e];
      const double x = u[k * channels + e];
      const __m256d dtv = _mm256_set1_pd(dt);
      const __m256d xv = _mm256_set1_pd(x);
      double* he = h.data() + e * state;
      const double* ae = a + e * state;
      double* hist = h_hist ? h_hist + (k * channels + e) * state : nullptr;
      double* ahist = abar_hist ? abar_hist + (k * channels + e) * state : nullptr;
      __m256d accv = _mm256_setzero_pd();
      for (i64 i = 0; i < s4; i += 4) {
        const __m256d av = _mm256_loadu_pd(ae + i);
        const __m256d ab = exp_v(_mm256_mul_pd(dtv, av));
        const __m256d bv = _mm256_loadu_pd(bk + i);
        __m256d bb;
        if (exact) {
          bb = _mm256_mul_pd(_mm256_div_pd(_mm256_sub_pd(ab, one), av), bv);
        } else {
          bb = _mm256_mul_pd(dtv, bv);
        }
        const __m256d hn = _mm256_fmadd_pd(ab, _mm256_loadu_pd(he + i), _mm256_mul_pd(bb, xv));
        _mm256_storeu_pd(he + i, hn);
        if (hist) _mm256_storeu_pd(hist + i, hn);
        if (ahist) _mm256_storeu_pd(ahist + i, ab);
        accv = _mm256_fmadd_pd(_mm256_loadu_pd(ck + i), hn, accv);
      }
      double acc = hsum(accv);
      for (i64 i = s4; i < state; ++i) {
        const double ai = ae[i];
        const double ab = std::exp(dt * ai);
        const double bb = exact ? (ab - 1.0) / ai * bk[i] : dt * bk[i];
        const double hn = ab * he[i] + bb * x;
        he[i] = hn;
        if (hist) hist[i] = hn;
        if (ahist) ahist[i] = ab;
        acc += ck[i] * hn;
      }
      y[k * channels + e] = acc + dskip[e] * x;
    }
  }
  if (h_final) {
    for (i64 j = 0; j < channels * state; ++j) h_final[j] = h[j];
  }
}

void scan_backward_f32(i64 seq, i64 channels, i64 state, const float* u, const float* b,
                       const float* c, const float* delta, const float* a, const float* dskip,
                       const float* h0, bool exact, const float* h_hist,
                       const float* abar_hist, const float* dy, const float* dh_final,
                       float* du, float* db, float* dc, float* ddelta, float* da,
                       float* ddskip, float* dh0) {
  const i64 s8 = state & ~i64(7);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::vector<float> gh(static_cast<size_t>(channels * state), 0.0f);
  if (dh_final) gh.assign(dh_final, dh_final + channels * state);
  for (i64 k = seq - 1; k >= 0; --k) {
    const float* bk = b + k * state;
    const float* ck = c + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const float dt = delta[k * channels + e];
      const float x = u[k * channels + e];
      const float gy = dy[k * channels + e];
      float* ghe = gh.data() + e * state;
      const float* ae = a + e * state;
      const float* hk = h_hist + (k * channels + e) * state;
      const float* abk = abar_hist + (k * channels + e) * state;
      const float* hp = (k > 0) ? hk - channels * state : nullptr;
      const float* h0e = h0 ? h0 + e * state : nullptr;
      ddskip[e] += gy * x;
      const __m256 gyv = _mm256_set1_ps(gy);
      const __m256 xv = _mm256_set1_ps(x);
      const __m256 dtv = _mm256_set1_ps(dt);
      __m256 guv = _mm256_setzero_ps();
      __m256 gdtv = _mm256_setzero_ps();
      for (i64 i = 0; i < s8; i += 8) {
        const __m256 hkv = _mm256_loadu_ps(hk + i);
        const __m256 abv = _mm256_loadu_ps(abk + i);
        __m256 hpv;
        if (hp) {
          hpv = _mm256_loadu_ps(hp + i);
        } else if (h0e) {
          hpv = _mm256_loadu_ps(h0e + i);
        } else {
          hpv = _mm256_setzero_ps();
        }
        const __m256 bv = _mm256_loadu_ps(bk + i);
        const __m256 cv = _mm256_loadu_ps(ck + i);
        const __m256 av = _mm256_loadu_ps(ae + i);
        _mm256_storeu_ps(dc + k * state + i,
                         _mm256_fmadd_ps(gyv, hkv, _mm256_loadu_ps(dc + k * state + i)));
        const __m256 ghi = _mm256_fmadd_ps(gyv, cv, _mm256_loadu_ps(ghe + i));
        const __m256 g_ab = _mm256_mul_ps(ghi, hpv);
        const __m256 g_bb = _mm256_mul_ps(ghi, xv);
        if (exact) {
          const __m256 w = _mm256_div_ps(_mm256_sub_ps(abv, one), av);
          guv = _mm256_fmadd_ps(ghi, _mm256_mul_ps(w, bv), guv);
          _mm256_storeu_ps(db + k * state + i,
                           _mm256_fmadd_ps(g_bb, w, _mm256_loadu_ps(db + k * state + i)));
          gdtv = _mm256_fmadd_ps(_mm256_mul_ps(g_ab, abv), av, gdtv);
          gdtv = _mm256_fmadd_ps(_mm256_mul_ps(g_bb, bv), abv, gdtv);
          const __m256 num = _mm256_sub_ps(_mm256_mul_ps(_mm256_mul_ps(dtv, abv), av),
                                           _mm256_sub_ps(abv, one));
          const __m256 dav = _mm256_add_ps(
              _mm256_mul_ps(_mm256_mul_ps(g_ab, abv), dtv),
              _mm256_mul_ps(_mm256_mul_ps(g_bb, bv),
                            _mm256_div_ps(num, _mm256_mul_ps(av, av))));
          _mm256_storeu_ps(da + e * state + i,
                           _mm256_add_ps(_mm256_loadu_ps(da + e * state + i), dav));
        } else {
          guv = _mm256_fmadd_ps(ghi, _mm256_mul_ps(dtv, bv), guv);
          _mm256_storeu_ps(db + k * state + i,
                           _mm256_fmadd_ps(g_bb, dtv, _mm256_loadu_ps(db + k * state + i)));
          gdtv = _mm256_fmadd_ps(_mm256_mul_ps(g_ab, abv), av, gdtv);
          gdtv = _mm256_fmadd_ps(g_bb, bv, gdtv);
          _mm256_storeu_ps(da + e * state + i,
                           _mm256_fmadd_ps(_mm256_mul_ps(g_ab, abv), dtv,
                                           _mm256_loadu_ps(da + e * state + i)));
        }
        _mm256_storeu_ps(ghe + i, _mm256_mul_ps(ghi, abv));
      }
      float gu = hsum(guv) + gy * dskip[e];
      float gdt = hsum(gdtv);
      for (i64 i = s8; i < state; ++i) {
        const float hprev = hp ? hp[i] : (h0e ? h0e[i] : 0.0f);
        const float ab = abk[i];
        const float ai = ae[i];
        dc[k * state + i] += gy * hk[i];
        float ghi = ghe[i] + gy * ck[i];
        const float g_ab = ghi * hprev;
        const float g_bb = ghi * x;
        if (exact) {
          const float w = (ab - 1.0f) / ai;
          gu += ghi * (w * bk[i]);
          db[k * state + i] += g_bb * w;
          gdt += g_ab * ab * ai + g_bb * bk[i] * ab;
          da[e * state + i] +=
              g_ab * ab * dt + g_bb * bk[i] * (dt * ab * ai - (ab - 1.0f)) / (ai * ai);
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

void scan_backward_f64(i64 seq, i64 channels, i64 state, const double* u, const double* b,
                       const double* c, const double* delta, const double* a,
                       const double* dskip, const double* h0, bool exact,
                       const double* h_hist, const double* abar_hist, const double* dy,
                       const double* dh_final, double* du, double* db, double* dc,
                       double* ddelta, double* da, double* ddskip, double* dh0) {
  const i64 s4 = state & ~i64(3);
  const __m256d one = _mm256_set1_pd(1.0);
  std::vector<double> gh(static_cast<size_t>(channels * state), 0.0);
  if (dh_final) gh.assign(dh_final, dh_final + channels * state);
  for (i64 k = seq - 1; k >= 0; --k) {
    const double* bk = b + k * state;
    const double* ck = c + k * state;
    for (i64 e = 0; e < channels; ++e) {
      const double dt = delta[k * channels + e];
      const double x = u[k * channels + e];
      const double gy = dy[k * channels + e];
      double* ghe = gh.data() + e * state;
      const double* ae = a + e * state;
      const double* hk = h_hist + (k * channels + e) * state;
      const double* abk = abar_hist + (k * channels + e) * state;
      const double* hp = (k > 0) ? hk - channels * state : nullptr;
      const double* h0e = h0 ? h0 + e * state : nullptr;
      ddskip[e] += gy * x;
      const __m256d gyv = _mm256_set1_pd(gy);
      const __m256d xv = _mm256_set1_pd(x);
      const __m256d dtv = _mm256_set1_pd(dt);
      __m256d guv = _mm256_setzero_pd();
      __m256d gdtv = _mm256_setzero_pd();
      for (i64 i = 0; i < s4; i += 4) {
        const __m256d hkv = _mm256_loadu_pd(hk + i);
        const __m256d abv = _mm256_loadu_pd(abk + i);
        __m256d hpv;
        if (hp) {
          hpv = _mm256_loadu_pd(hp + i);
        } else if (h0e) {
          hpv = _mm256_loadu_pd(h0e + i);
        } else {
          hpv = _mm256_setzero_pd();
        }
        const __m256d bv = _mm256_loadu_pd(bk + i);
        const __m256d cv = _mm256_loadu_pd(ck + i);
        const __m256d av = _mm256_loadu_pd(ae + i);
        _mm256_storeu_pd(dc + k * state + i,
                         _mm256_fmadd_pd(gyv, hkv, _mm256_loadu_pd(dc + k * state + i)));
        const __m256d ghi = _mm256_fmadd_pd(gyv, cv, _mm256_loadu_pd(ghe + i));
        const __m256d g_ab = _mm256_mul_pd(ghi, hpv);
        const __m256d g_bb = _mm256_mul_pd(ghi, xv);
        if (exact) {
          const __m256d w = _mm256_div_pd(_mm256_sub_pd(abv, one), av);
          guv = _mm256_fmadd_pd(ghi, _mm256_mul_pd(w, bv), guv);
          _mm256_storeu_pd(db + k * state + i,
                           _mm256_fmadd_pd(g_bb, w, _mm256_loadu_pd(db + k * state + i)));
          gdtv = _mm256_fmadd_pd(_mm256_mul_pd(g_ab, abv), av, gdtv);
          gdtv = _mm256_fmadd_pd(_mm256_mul_pd(g_bb, bv), abv, gdtv);
          const __m256d num = _mm256_sub_pd(_mm256_mul_pd(_mm256_mul_pd(dtv, abv), av),
                                            _mm256_sub_pd(abv, one));
          const __m256d dav = _mm256_add_pd(
              _mm256_mul_pd(_mm256_mul_pd(g_ab, abv), dtv),
              _mm256_mul_pd(_mm256_mul_pd(g_bb, bv),
                            _mm256_div_pd(num, _mm256_mul_pd(av, av))));
          _mm256_storeu_pd(da + e * state + i,
                           _mm256_add_pd(_mm256_loadu_pd(da + e * state + i), dav));
        } else {
          guv = _mm256_fmadd_pd(ghi, _mm256_mul_pd(dtv, bv), guv);
          _mm256_storeu_pd(db + k * state + i,
                           _mm256_fmadd_pd(g_bb, dtv, _mm256_loadu_pd(db + k * state + i)));
          gdtv = _mm256_fmadd_pd(_mm256_mul_pd(g_ab, abv), av, gdtv);
          gdtv = _mm256_fmadd_pd(g_bb, bv, gdtv);
          _mm256_storeu_pd(da + e * state + i,
                           _mm256_fmadd_pd(_mm256_mul_pd(g_ab, abv), dtv,
                                           _mm256_loadu_pd(da + e * state + i)));
        }
        _mm256_storeu_pd(ghe + i, _mm256_mul_pd(ghi, abv));
      }
      double gu = hsum(guv) + gy * dskip[e];
      double gdt = hsum(gdtv);
      for (i64 i = s4; i < state; ++i) {
        const double hprev = hp ? hp[i] : (h0e ? h0e[i] : 0.0);
        const double ab = abk[i];
        const double ai = ae[i];
        dc[k * state + i] += gy * hk[i];
        double ghi = ghe[i] + gy * ck[i];
        const double g_ab = ghi * hprev;
        const double g_bb = ghi * x;
        if (exact) {
          const double w = (ab - 1.0) / ai;
          gu += ghi * (w * bk[i]);
          db[k * state + i] += g_bb * w;
          gdt += g_ab * ab * ai + g_bb * bk[i] * ab;
          da[e * state + i] +=
              g_ab * ab * dt + g_bb * bk[i] * (dt * ab * ai - (ab - 1.0)) / (ai * ai);
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

} // namespace

template <typename T>
void scan_forward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                  const T* delta, const T* a, const T* dskip, const T* h0, bool exact, T* y,
                  T* h_final, T* h_hist, T* abar_hist) {
  if constexpr (std::is_same_v<T, float>) {
    scan_forward_f32(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, y, h_final,
                     h_hist, abar_hist);
  } else {
    scan_forward_f64(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, y, h_final,
                     h_hist, abar_hist);
  }
}

template <typename T>
void scan_backward(i64 seq, i64 channels, i64 state, const T* u, const T* b, const T* c,
                   const T* delta, const T* a, const T* dskip, const T* h0, bool exact,
                   const T* h_hist, const T* abar_hist, const T* dy, const T* dh_final, T* du,
                   T* db, T* dc, T* ddelta, T* da, T* ddskip, T* dh0) {
  if constexpr (std::is_same_v<T, float>) {
    scan_backward_f32(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, h_hist,
                      abar_hist, dy, dh_final, du, db, dc, ddelta, da, ddskip, dh0);
  } else {
    scan_backward_f64(seq, channels, state, u, b, c, delta, a, dskip, h0, exact, h_hist,
                      abar_hist, dy, dh_final, du, db, dc, ddelta, da, ddskip, dh0);
  }
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_AVX2(T)                                                          \
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

SISMA_INSTANTIATE_AVX2(float)
SISMA_INSTANTIATE_AVX2(double)

#undef SISMA_INSTANTIATE_AVX2

} // namespace sisma::kernels::avx2
