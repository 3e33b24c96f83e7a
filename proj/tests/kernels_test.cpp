// SPDX-License-Identifier: Apache-2.0
//
// Kernel-level tests: the AVX2 backend must agree with the scalar reference,
// the gemm family must agree with a naive oracle, and the scan backward must
// agree with finite differences of the scan forward.

#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "sisma/core/rng.hpp"
#include "sisma/kernels/dispatch.hpp"
#include "kernels/kernels_detail.hpp"

using namespace sisma;
namespace ks = sisma::kernels::scalar;
namespace ka = sisma::kernels::avx2;

namespace {

template <typename T>
void check_close(const std::vector<T>& got, const std::vector<T>& want, double rtol,
                 double atol, const std::string& what = "") {
  REQUIRE(got.size() == want.size());
  for (size_t i = 0; i < got.size(); ++i) {
    const double g = static_cast<double>(got[i]);
    const double w = static_cast<double>(want[i]);
    const double tol = atol + rtol * std::max(std::abs(g), std::abs(w));
    INFO(what, "[", i, "]: got ", g, " want ", w);
    CHECK(std::abs(g - w) <= tol);
  }
}

template <typename T>
std::vector<T> random_vec(Rng& rng, size_t n, T lo, T hi) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return v;
}

// Naive gemm oracle, written without reference to the kernel code paths.
template <typename T>
std::vector<T> gemm_oracle(const std::vector<T>& a, const std::vector<T>& b, i64 m, i64 n,
                           i64 k, char mode) {
  std::vector<T> c(static_cast<size_t>(m * n), T(0));
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      double acc = 0.0;
      for (i64 p = 0; p < k; ++p) {
        double av = 0.0, bv = 0.0;
        if (mode == 'n') {          // A[m,k] * B[k,n]
          av = a[i * k + p];
          bv = b[p * n + j];
        } else if (mode == 't') {   // A[m,k] * B[n,k]^T
          av = a[i * k + p];
          bv = b[j * k + p];
        } else {                    // A[k,m]^T * B[k,n]
          av = a[p * m + i];
          bv = b[p * n + j];
        }
        acc += av * bv;
      }
      c[i * n + j] = static_cast<T>(acc);
    }
  }
  return c;
}

struct GemmShape {
  i64 m, n, k;
};

const GemmShape kShapes[] = {{1, 1, 1},   {3, 5, 7},    {4, 16, 8},  {5, 17, 9},
                             {8, 32, 24}, {13, 31, 17}, {64, 48, 96}};

} // namespace

TEST_CASE("backend reporting") {
  CHECK(std::string(kernels::backend_name(kernels::Backend::Scalar)) == "scalar");
  CHECK(std::string(kernels::backend_name(kernels::Backend::Avx2)) == "avx2");
  const kernels::Backend prev = kernels::active_backend();
  kernels::set_backend(kernels::Backend::Scalar);
  CHECK(kernels::active_backend() == kernels::Backend::Scalar);
  kernels::set_backend(prev);
}

TEST_CASE_TEMPLATE("gemm matches naive oracle", T, float, double) {
  const double rtol = std::is_same_v<T, float> ? 2e-5 : 1e-12;
  const double atol = std::is_same_v<T, float> ? 1e-5 : 1e-14;
  Rng rng(1234);
  for (const auto& s : kShapes) {
    auto a_nn = random_vec<T>(rng, static_cast<size_t>(s.m * s.k), T(-1), T(1));
    auto b_nn = random_vec<T>(rng, static_cast<size_t>(s.k * s.n), T(-1), T(1));
    auto b_nt = random_vec<T>(rng, static_cast<size_t>(s.n * s.k), T(-1), T(1));
    auto a_tn = random_vec<T>(rng, static_cast<size_t>(s.k * s.m), T(-1), T(1));

    std::vector<T> c(static_cast<size_t>(s.m * s.n), T(7));
    ks::gemm_nn(a_nn.data(), b_nn.data(), c.data(), s.m, s.n, s.k, false);
    check_close(c, gemm_oracle(a_nn, b_nn, s.m, s.n, s.k, 'n'), rtol, atol);

    std::fill(c.begin(), c.end(), T(7));
    ks::gemm_nt(a_nn.data(), b_nt.data(), c.data(), s.m, s.n, s.k, false);
    check_close(c, gemm_oracle(a_nn, b_nt, s.m, s.n, s.k, 't'), rtol, atol);

    std::fill(c.begin(), c.end(), T(7));
    ks::gemm_tn(a_tn.data(), b_nn.data(), c.data(), s.m, s.n, s.k, false);
    check_close(c, gemm_oracle(a_tn, b_nn, s.m, s.n, s.k, 'x'), rtol, atol);

    // accumulate=true adds on top of the existing C
    std::vector<T> base = random_vec<T>(rng, static_cast<size_t>(s.m * s.n), T(-1), T(1));
    c = base;
    ks::gemm_nn(a_nn.data(), b_nn.data(), c.data(), s.m, s.n, s.k, true);
    auto want = gemm_oracle(a_nn, b_nn, s.m, s.n, s.k, 'n');
    for (size_t i = 0; i < want.size(); ++i) want[i] += base[i];
    check_close(c, want, rtol, atol);
  }
}

TEST_CASE_TEMPLATE("avx2 gemm matches scalar gemm", T, float, double) {
  if (!kernels::avx2_supported()) return;
  const double rtol = std::is_same_v<T, float> ? 2e-5 : 1e-12;
  const double atol = std::is_same_v<T, float> ? 1e-5 : 1e-14;
  Rng rng(99);
  for (const auto& s : kShapes) {
    auto a_nn = random_vec<T>(rng, static_cast<size_t>(s.m * s.k), T(-1), T(1));
    auto b_nn = random_vec<T>(rng, static_cast<size_t>(s.k * s.n), T(-1), T(1));
    auto b_nt = random_vec<T>(rng, static_cast<size_t>(s.n * s.k), T(-1), T(1));
    auto a_tn = random_vec<T>(rng, static_cast<size_t>(s.k * s.m), T(-1), T(1));
    auto base = random_vec<T>(rng, static_cast<size_t>(s.m * s.n), T(-1), T(1));

    for (const bool acc : {false, true}) {
      std::vector<T> cs = base, cv = base;
      ks::gemm_nn(a_nn.data(), b_nn.data(), cs.data(), s.m, s.n, s.k, acc);
      ka::gemm_nn(a_nn.data(), b_nn.data(), cv.data(), s.m, s.n, s.k, acc);
      check_close(cv, cs, rtol, atol);

      cs = base;
      cv = base;
      ks::gemm_nt(a_nn.data(), b_nt.data(), cs.data(), s.m, s.n, s.k, acc);
      ka::gemm_nt(a_nn.data(), b_nt.data(), cv.data(), s.m, s.n, s.k, acc);
      check_close(cv, cs, rtol, atol);

      cs = base;
      cv = base;
      ks::gemm_tn(a_tn.data(), b_nn.data(), cs.data(), s.m, s.n, s.k, acc);
      ka::gemm_tn(a_tn.data(), b_nn.data(), cv.data(), s.m, s.n, s.k, acc);
      check_close(cv, cs, rtol, atol);
    }
  }
}

TEST_CASE_TEMPLATE("elementwise kernels match scalar reference", T, float, double) {
  if (!kernels::avx2_supported()) return;
  const double rtol = std::is_same_v<T, float> ? 3e-6 : 2e-14;
  const double atol = std::is_same_v<T, float> ? 1e-7 : 1e-16;
  Rng rng(2024);
  const size_t n = 1003;  // odd length exercises the remainder lanes

  SUBCASE("exp") {
    const T span = std::is_same_v<T, float> ? T(85) : T(400);
    auto x = random_vec<T>(rng, n, -span, span);
    x[0] = T(0);
    x[1] = T(-1000);  // flushes to zero in both backends
    std::vector<T> ys(n), yv(n);
    ks::vexp(x.data(), ys.data(), n);
    ka::vexp(x.data(), yv.data(), n);
    check_close(yv, ys, rtol, atol);
    CHECK(ys[0] == T(1));
    CHECK(yv[1] == T(0));
  }

  SUBCASE("silu forward and backward") {
    auto x = random_vec<T>(rng, n, T(-20), T(20));
    auto dy = random_vec<T>(rng, n, T(-2), T(2));
    std::vector<T> ys(n), yv(n);
    ks::silu(x.data(), ys.data(), n);
    ka::silu(x.data(), yv.data(), n);
    check_close(yv, ys, rtol, atol);
    ks::silu_backward(x.data(), dy.data(), ys.data(), n);
    ka::silu_backward(x.data(), dy.data(), yv.data(), n);
    check_close(yv, ys, rtol, atol);
  }

  SUBCASE("softplus forward and backward") {
    auto x = random_vec<T>(rng, n, T(-30), T(30));
    auto dy = random_vec<T>(rng, n, T(-2), T(2));
    std::vector<T> ys(n), yv(n);
    ks::softplus(x.data(), ys.data(), n);
    ka::softplus(x.data(), yv.data(), n);
    check_close(yv, ys, rtol, atol);
    ks::softplus_backward(x.data(), dy.data(), ys.data(), n);
    ka::softplus_backward(x.data(), dy.data(), yv.data(), n);
    check_close(yv, ys, rtol, atol);
  }

  SUBCASE("gelu forward and backward") {
    // the far-negative tail computes 1 + tanh(g) with |tanh(g)| near 1, so
    // both backends carry an absolute rounding floor there
    const double gelu_atol = std::is_same_v<T, float> ? 1e-5 : 5e-14;
    auto x = random_vec<T>(rng, n, T(-10), T(10));
    auto dy = random_vec<T>(rng, n, T(-2), T(2));
    std::vector<T> ys(n), yv(n);
    ks::gelu(x.data(), ys.data(), n);
    ka::gelu(x.data(), yv.data(), n);
    check_close(yv, ys, rtol, gelu_atol);
    ks::gelu_backward(x.data(), dy.data(), ys.data(), n);
    ka::gelu_backward(x.data(), dy.data(), yv.data(), n);
    check_close(yv, ys, rtol, gelu_atol);
  }

  SUBCASE("add_bias_rows") {
    const i64 rows = 7, cols = 19;
    auto y0 = random_vec<T>(rng, static_cast<size_t>(rows * cols), T(-1), T(1));
    auto bias = random_vec<T>(rng, static_cast<size_t>(cols), T(-1), T(1));
    std::vector<T> ys = y0, yv = y0;
    ks::add_bias_rows(ys.data(), bias.data(), rows, cols);
    ka::add_bias_rows(yv.data(), bias.data(), rows, cols);
    check_close(yv, ys, rtol, atol);
  }
}

namespace {

template <typename T>
struct ScanProblem {
  i64 seq, channels, state;
  std::vector<T> u, b, c, delta, a, dskip, h0;

  static ScanProblem make(Rng& rng, i64 seq, i64 channels, i64 state) {
    ScanProblem p;
    p.seq = seq;
    p.channels = channels;
    p.state = state;
    p.u = random_vec<T>(rng, static_cast<size_t>(seq * channels), T(-1), T(1));
    p.b = random_vec<T>(rng, static_cast<size_t>(seq * state), T(-1), T(1));
    p.c = random_vec<T>(rng, static_cast<size_t>(seq * state), T(-1), T(1));
    p.delta = random_vec<T>(rng, static_cast<size_t>(seq * channels), T(0.01), T(1.5));
    p.a = random_vec<T>(rng, static_cast<size_t>(channels * state), T(-3), T(-0.05));
    p.dskip = random_vec<T>(rng, static_cast<size_t>(channels), T(-1), T(1));
    p.h0 = random_vec<T>(rng, static_cast<size_t>(channels * state), T(-0.5), T(0.5));
    return p;
  }
};

} // namespace

TEST_CASE_TEMPLATE("avx2 scan matches scalar scan", T, float, double) {
  if (!kernels::avx2_supported()) return;
  const double rtol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
  const double atol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
  Rng rng(777);
  for (const bool exact : {true, false}) {
    for (const bool with_h0 : {true, false}) {
      auto p = ScanProblem<T>::make(rng, 9, 5, 11);
      const size_t ny = static_cast<size_t>(p.seq * p.channels);
      const size_t nh = static_cast<size_t>(p.channels * p.state);
      const size_t nhist = static_cast<size_t>(p.seq * p.channels * p.state);
      const T* h0 = with_h0 ? p.h0.data() : nullptr;

      std::vector<T> ys(ny), hs(nh), hhs(nhist), abs_(nhist);
      std::vector<T> yv(ny), hv(nh), hhv(nhist), abv(nhist);
      ks::scan_forward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                       p.delta.data(), p.a.data(), p.dskip.data(), h0, exact, ys.data(),
                       hs.data(), hhs.data(), abs_.data());
      ka::scan_forward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                       p.delta.data(), p.a.data(), p.dskip.data(), h0, exact, yv.data(),
                       hv.data(), hhv.data(), abv.data());
      check_close(yv, ys, rtol, atol, "y");
      check_close(hv, hs, rtol, atol, "h_final");
      check_close(hhv, hhs, rtol, atol, "h_hist");
      check_close(abv, abs_, rtol, atol, "abar_hist");

      auto dy = random_vec<T>(rng, ny, T(-1), T(1));
      auto dhf = random_vec<T>(rng, nh, T(-1), T(1));
      std::vector<T> du_s(ny, T(0)), db_s(p.b.size(), T(0)), dc_s(p.c.size(), T(0));
      std::vector<T> ddelta_s(ny, T(0)), da_s(nh, T(0)), ddskip_s(p.dskip.size(), T(0));
      std::vector<T> dh0_s(nh, T(0));
      auto du_v = du_s;
      auto db_v = db_s;
      auto dc_v = dc_s;
      auto ddelta_v = ddelta_s;
      auto da_v = da_s;
      auto ddskip_v = ddskip_s;
      auto dh0_v = dh0_s;
      ks::scan_backward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                        p.delta.data(), p.a.data(), p.dskip.data(), h0, exact, hhs.data(),
                        abs_.data(), dy.data(), dhf.data(), du_s.data(), db_s.data(),
                        dc_s.data(), ddelta_s.data(), da_s.data(), ddskip_s.data(),
                        dh0_s.data());
      ka::scan_backward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                        p.delta.data(), p.a.data(), p.dskip.data(), h0, exact, hhs.data(),
                        abs_.data(), dy.data(), dhf.data(), du_v.data(), db_v.data(),
                        dc_v.data(), ddelta_v.data(), da_v.data(), ddskip_v.data(),
                        dh0_v.data());
      check_close(du_v, du_s, rtol, atol, "du");
      check_close(db_v, db_s, rtol, atol, "db");
      check_close(dc_v, dc_s, rtol, atol, "dc");
      check_close(ddelta_v, ddelta_s, rtol, atol, "ddelta");
      check_close(da_v, da_s, rtol, atol, "da");
      check_close(ddskip_v, ddskip_s, rtol, atol, "ddskip");
      check_close(dh0_v, dh0_s, rtol, atol, "dh0");
    }
  }
}

namespace {

// Scalar-reference scan wrapped as a loss for finite differencing:
// L = sum(wy * y) + sum(wh * h_final).
double scan_loss(const ScanProblem<double>& p, bool exact, const std::vector<double>& wy,
                 const std::vector<double>& wh) {
  std::vector<double> y(wy.size()), hf(wh.size());
  ks::scan_forward<double>(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                           p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), exact,
                           y.data(), hf.data(), nullptr, nullptr);
  double loss = 0.0;
  for (size_t i = 0; i < y.size(); ++i) loss += wy[i] * y[i];
  for (size_t i = 0; i < hf.size(); ++i) loss += wh[i] * hf[i];
  return loss;
}

void fd_check(ScanProblem<double>& p, bool exact, std::vector<double>& field,
              const std::vector<double>& analytic, const std::vector<double>& wy,
              const std::vector<double>& wh, const char* name) {
  const double eps = 1e-6;
  REQUIRE(field.size() == analytic.size());
  for (size_t i = 0; i < field.size(); ++i) {
    const double keep = field[i];
    field[i] = keep + eps;
    const double lp = scan_loss(p, exact, wy, wh);
    field[i] = keep - eps;
    const double lm = scan_loss(p, exact, wy, wh);
    field[i] = keep;
    const double fd = (lp - lm) / (2.0 * eps);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
    INFO(name, "[", i, "]: analytic ", analytic[i], " fd ", fd);
    CHECK(std::abs(fd - analytic[i]) / denom < 1e-6);
  }
}

} // namespace

TEST_CASE("scan backward matches finite differences") {
  Rng rng(31337);
  for (const bool exact : {true, false}) {
    auto p = ScanProblem<double>::make(rng, 4, 2, 3);
    const size_t ny = static_cast<size_t>(p.seq * p.channels);
    const size_t nh = static_cast<size_t>(p.channels * p.state);
    const size_t nhist = static_cast<size_t>(p.seq * p.channels * p.state);
    auto wy = random_vec<double>(rng, ny, -1.0, 1.0);
    auto wh = random_vec<double>(rng, nh, -1.0, 1.0);

    std::vector<double> y(ny), hf(nh), hh(nhist), ab(nhist);
    ks::scan_forward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                     p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), exact, y.data(),
                     hf.data(), hh.data(), ab.data());

    std::vector<double> du(ny, 0.0), db(p.b.size(), 0.0), dc(p.c.size(), 0.0);
    std::vector<double> ddelta(ny, 0.0), da(nh, 0.0), ddskip(p.dskip.size(), 0.0);
    std::vector<double> dh0(nh, 0.0);
    ks::scan_backward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                      p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), exact,
                      hh.data(), ab.data(), wy.data(), wh.data(), du.data(), db.data(),
                      dc.data(), ddelta.data(), da.data(), ddskip.data(), dh0.data());

    fd_check(p, exact, p.u, du, wy, wh, "du");
    fd_check(p, exact, p.b, db, wy, wh, "db");
    fd_check(p, exact, p.c, dc, wy, wh, "dc");
    fd_check(p, exact, p.delta, ddelta, wy, wh, "ddelta");
    fd_check(p, exact, p.a, da, wy, wh, "da");
    fd_check(p, exact, p.dskip, ddskip, wy, wh, "ddskip");
    fd_check(p, exact, p.h0, dh0, wy, wh, "dh0");
  }
}

TEST_CASE("scan backward accumulates into existing gradients") {
  Rng rng(55);
  auto p = ScanProblem<double>::make(rng, 3, 2, 2);
  const size_t ny = static_cast<size_t>(p.seq * p.channels);
  const size_t nh = static_cast<size_t>(p.channels * p.state);
  const size_t nhist = static_cast<size_t>(p.seq * p.channels * p.state);
  std::vector<double> y(ny), hf(nh), hh(nhist), ab(nhist);
  ks::scan_forward(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                   p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), true, y.data(),
                   hf.data(), hh.data(), ab.data());
  auto dy = random_vec<double>(rng, ny, -1.0, 1.0);

  std::vector<double> du0(ny, 0.0), db0(p.b.size(), 0.0), dc0(p.c.size(), 0.0);
  std::vector<double> ddelta0(ny, 0.0), da0(nh, 0.0), ddskip0(p.dskip.size(), 0.0);
  ks::scan_backward<double>(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                            p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), true,
                            hh.data(), ab.data(), dy.data(), nullptr, du0.data(), db0.data(),
                            dc0.data(), ddelta0.data(), da0.data(), ddskip0.data(), nullptr);

  std::vector<double> du1(ny, 0.5), db1(p.b.size(), 0.5), dc1(p.c.size(), 0.5);
  std::vector<double> ddelta1(ny, 0.5), da1(nh, 0.5), ddskip1(p.dskip.size(), 0.5);
  ks::scan_backward<double>(p.seq, p.channels, p.state, p.u.data(), p.b.data(), p.c.data(),
                            p.delta.data(), p.a.data(), p.dskip.data(), p.h0.data(), true,
                            hh.data(), ab.data(), dy.data(), nullptr, du1.data(), db1.data(),
                            dc1.data(), ddelta1.data(), da1.data(), ddskip1.data(), nullptr);
  for (size_t i = 0; i < du0.size(); ++i) CHECK(du1[i] == doctest::Approx(du0[i] + 0.5));
  for (size_t i = 0; i < db0.size(); ++i) CHECK(db1[i] == doctest::Approx(db0[i] + 0.5));
  for (size_t i = 0; i < da0.size(); ++i) CHECK(da1[i] == doctest::Approx(da0[i] + 0.5));
}
