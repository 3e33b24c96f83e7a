// SPDX-License-Identifier: Apache-2.0
//
// Selective scan contract tests: discretization closed forms, hand-unrolled
// recurrence oracles, chunked/sequential equivalence, stability, causality,
// and finite-difference gradient checks.
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "sisma/core/errors.hpp"
#include "sisma/ssm/scan.hpp"
#include "test_util.hpp"

using namespace sisma;
using namespace sisma::ssm;
using sisma::testutil::check_close;
using sisma::testutil::random_tensor;
using sisma::testutil::rel_err;

namespace {

// Truncated Taylor series of exp(x) through x^4; oracle for the ZOH closed
// form with truncation error below |x|^5/120 on x <= 0.
double exp_series4(double x) {
    return 1.0 + x + x * x / 2.0 + x * x * x / 6.0 + x * x * x * x / 24.0;
}

template <typename T>
DiagSSM<T> make_ssm(Rng& rng, i64 e, i64 n) {
    DiagSSM<T> ssm;
    ssm.channels = e;
    ssm.state_dim = n;
    ssm.a_log = random_tensor<T>(rng, {e, n}, T(-3), T(1));
    ssm.d_skip = random_tensor<T>(rng, {e}, T(-1), T(1));
    return ssm;
}

template <typename T>
ScanInputs<T> make_inputs(Rng& rng, i64 l, i64 e, i64 n, bool with_h0) {
    ScanInputs<T> in;
    in.u = random_tensor<T>(rng, {l, e}, T(-1.5), T(1.5));
    in.b_seq = random_tensor<T>(rng, {l, n}, T(-1), T(1));
    in.c_seq = random_tensor<T>(rng, {l, n}, T(-1), T(1));
    in.delta_seq = random_tensor<T>(rng, {l, e}, T(0.01), T(1.2));
    if (with_h0) in.h0 = random_tensor<T>(rng, {e, n}, T(-0.5), T(0.5));
    return in;
}

// Independent brute-force unroll of the recurrence, built on zoh_discretize
// one step at a time.
template <typename T>
ScanOutputs<T> unroll_oracle(const ScanInputs<T>& in, const DiagSSM<T>& ssm, Discretization mode) {
    const i64 l = in.u.dim(0), e = ssm.channels, n = ssm.state_dim;
    const Tensor<T> a = ssm.a_neg();
    Tensor<T> h({e, n});
    if (!in.h0.empty()) h = in.h0;
    ScanOutputs<T> out;
    out.y = Tensor<T>({l, e});
    for (i64 k = 0; k < l; ++k) {
        Tensor<T> b_t({n});
        for (i64 i = 0; i < n; ++i) b_t[i] = in.b_seq(k, i);
        for (i64 ch = 0; ch < e; ++ch) {
            Tensor<T> a_row({n});
            for (i64 i = 0; i < n; ++i) a_row[i] = a(ch, i);
            auto [a_bar, b_bar] = zoh_discretize<T>(a_row, b_t, in.delta_seq(k, ch), mode);
            T y = ssm.d_skip[ch] * in.u(k, ch);
            for (i64 i = 0; i < n; ++i) {
                h(ch, i) = a_bar[i] * h(ch, i) + b_bar[i] * in.u(k, ch);
                y += in.c_seq(k, i) * h(ch, i);
            }
            out.y(k, ch) = y;
        }
    }
    out.h_final = std::move(h);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// zoh_discretize
// ---------------------------------------------------------------------------

TEST_CASE("zoh_discretize: zero-step limit gives (1, 0) in both modes") {
    Tensor<double> a({1}), b({1});
    a[0] = -1.0;
    b[0] = 1.0;
    for (auto mode : {Discretization::Exact, Discretization::Simplified}) {
        auto [abar, bbar] = zoh_discretize<double>(a, b, 1e-12, mode);
        check_close(abar[0], 1.0, 0.0, 1e-9, "a_bar at delta->0");
        check_close(bbar[0], 0.0, 0.0, 1e-9, "b_bar at delta->0");
    }
}

TEST_CASE("zoh_discretize: exact mode closed form at a=-1, b=1, delta=1") {
    Tensor<double> a({1}), b({1});
    a[0] = -1.0;
    b[0] = 1.0;
    auto [abar, bbar] = zoh_discretize<double>(a, b, 1.0, Discretization::Exact);

    // Frozen from high-precision evaluation of exp(-1) and 1-exp(-1).
    check_close(abar[0], 0.3678794411714423, 1e-12, 0.0, "a_bar exact");
    check_close(bbar[0], 0.6321205588285577, 1e-12, 0.0, "b_bar exact");

    // Independent series oracle; truncation bound |x|^5/120 < 0.0084 at x=-1.
    const double series = exp_series4(-1.0);
    CHECK(std::abs(abar[0] - series) <= 0.009);
    CHECK(std::abs(bbar[0] - (series - 1.0) / -1.0) <= 0.009);
}

TEST_CASE("zoh_discretize: simplified mode is delta*b") {
    Tensor<double> a({3}), b({3});
    for (i64 i = 0; i < 3; ++i) {
        a[i] = -1.0 - static_cast<double>(i);
        b[i] = 0.5 * static_cast<double>(i + 1);
    }
    auto [abar, bbar] = zoh_discretize<double>(a, b, 0.5, Discretization::Simplified);
    for (i64 i = 0; i < 3; ++i) {
        check_close(abar[i], std::exp(0.5 * a[i]), 1e-14, 0.0, "a_bar simplified");
        CHECK(bbar[i] == 0.5 * b[i]);
    }
}

TEST_CASE("zoh_discretize: precondition violations") {
    Tensor<double> a({2}), b({2});
    a[0] = -1.0;
    a[1] = -2.0;
    b.fill(1.0);
    CHECK_THROWS_AS((void)zoh_discretize<double>(a, b, 0.0, Discretization::Exact), ValidationError);
    CHECK_THROWS_AS((void)zoh_discretize<double>(a, b, -0.1, Discretization::Simplified), ValidationError);
    a[1] = 0.0;
    CHECK_THROWS_AS((void)zoh_discretize<double>(a, b, 0.5, Discretization::Exact), ValidationError);
    Tensor<double> b_bad({3});
    a[1] = -2.0;
    CHECK_THROWS_AS((void)zoh_discretize<double>(a, b_bad, 0.5, Discretization::Exact), ShapeError);
}

// ---------------------------------------------------------------------------
// sequential scan
// ---------------------------------------------------------------------------

TEST_CASE("selective_scan_sequential: single unrolled step") {
    Rng rng(101);
    const i64 e = 2, n = 3;
    auto ssm = make_ssm<double>(rng, e, n);
    auto in = make_inputs<double>(rng, 1, e, n, false);
    auto out = selective_scan_sequential(in, ssm, Discretization::Exact);

    const Tensor<double> a = ssm.a_neg();
    for (i64 ch = 0; ch < e; ++ch) {
        Tensor<double> a_row({n}), b_t({n});
        for (i64 i = 0; i < n; ++i) {
            a_row[i] = a(ch, i);
            b_t[i] = in.b_seq(0, i);
        }
        auto [abar, bbar] = zoh_discretize<double>(a_row, b_t, in.delta_seq(0, ch), Discretization::Exact);
        double want = ssm.d_skip[ch] * in.u(0, ch);
        for (i64 i = 0; i < n; ++i) want += in.c_seq(0, i) * bbar[i] * in.u(0, ch);
        check_close(out.y(0, ch), want, 1e-14, 1e-15, "single-step y");
    }
}

TEST_CASE("selective_scan_sequential: vanishing delta leaves only the skip path") {
    Rng rng(102);
    const i64 l = 6, e = 3, n = 4;
    auto ssm = make_ssm<double>(rng, e, n);
    auto in = make_inputs<double>(rng, l, e, n, false);
    in.delta_seq.fill(1e-300);
    for (auto mode : {Discretization::Exact, Discretization::Simplified}) {
        auto out = selective_scan_sequential(in, ssm, mode);
        for (i64 k = 0; k < l; ++k)
            for (i64 ch = 0; ch < e; ++ch)
                check_close(out.y(k, ch), ssm.d_skip[ch] * in.u(k, ch), 0.0, 1e-250, "skip-only y");
    }
}

TEST_CASE("selective_scan_sequential: matches hand-unrolled oracle at L=4, N=2, E=1") {
    Rng rng(103);
    auto ssm = make_ssm<double>(rng, 1, 2);
    for (auto mode : {Discretization::Exact, Discretization::Simplified}) {
        for (bool with_h0 : {false, true}) {
            auto in = make_inputs<double>(rng, 4, 1, 2, with_h0);
            auto got = selective_scan_sequential(in, ssm, mode);
            auto want = unroll_oracle(in, ssm, mode);
            CHECK(max_abs_diff(got.y, want.y) <= 1e-14);
            CHECK(max_abs_diff(got.h_final, want.h_final) <= 1e-14);
        }
    }
}

TEST_CASE("selective_scan_sequential: matches oracle on larger random instances") {
    Rng rng(104);
    for (int rep = 0; rep < 8; ++rep) {
        const i64 l = rng.uniform_int(1, 40), e = rng.uniform_int(1, 6), n = rng.uniform_int(1, 6);
        auto ssm = make_ssm<double>(rng, e, n);
        auto in = make_inputs<double>(rng, l, e, n, rep % 2 == 0);
        const auto mode = rep % 3 == 0 ? Discretization::Exact : Discretization::Simplified;
        auto got = selective_scan_sequential(in, ssm, mode);
        auto want = unroll_oracle(in, ssm, mode);
        CHECK(max_abs_diff(got.y, want.y) <= 1e-12);
        CHECK(max_abs_diff(got.h_final, want.h_final) <= 1e-12);
    }
}

TEST_CASE("selective_scan_sequential: shape errors name the offending input") {
    Rng rng(105);
    auto ssm = make_ssm<double>(rng, 2, 3);
    auto in = make_inputs<double>(rng, 5, 2, 3, false);

    auto bad_b = in;
    bad_b.b_seq = Tensor<double>({5, 4});
    CHECK_THROWS_WITH_AS((void)selective_scan_sequential(bad_b, ssm, Discretization::Exact),
                         doctest::Contains("b_seq"), ShapeError);

    auto bad_c = in;
    bad_c.c_seq = Tensor<double>({4, 3});
    CHECK_THROWS_WITH_AS((void)selective_scan_sequential(bad_c, ssm, Discretization::Exact),
                         doctest::Contains("c_seq"), ShapeError);

    auto bad_d = in;
    bad_d.delta_seq = Tensor<double>({5, 3});
    CHECK_THROWS_WITH_AS((void)selective_scan_sequential(bad_d, ssm, Discretization::Exact),
                         doctest::Contains("delta_seq"), ShapeError);

    auto bad_h = in;
    bad_h.h0 = Tensor<double>({3, 3});
    CHECK_THROWS_WITH_AS((void)selective_scan_sequential(bad_h, ssm, Discretization::Exact),
                         doctest::Contains("h0"), ShapeError);

    auto bad_u = in;
    bad_u.u = Tensor<double>({5, 3});
    CHECK_THROWS_WITH_AS((void)selective_scan_sequential(bad_u, ssm, Discretization::Exact),
                         doctest::Contains("u"), ShapeError);

    auto bad_delta = in;
    bad_delta.delta_seq(2, 1) = -0.5;
    CHECK_THROWS_AS((void)selective_scan_sequential(bad_delta, ssm, Discretization::Exact), ValidationError);
}

// ---------------------------------------------------------------------------
// chunked scan
// ---------------------------------------------------------------------------

TEST_CASE("selective_scan_chunked: chunk_len = L reproduces sequential bitwise") {
    Rng rng(106);
    auto ssm = make_ssm<double>(rng, 3, 4);
    auto in = make_inputs<double>(rng, 17, 3, 4, true);
    auto seq = selective_scan_sequential(in, ssm, Discretization::Simplified);
    auto chk = selective_scan_chunked(in, ssm, Discretization::Simplified, 17);
    CHECK(max_abs_diff(seq.y, chk.y) == 0.0);
    CHECK(max_abs_diff(seq.h_final, chk.h_final) == 0.0);
}

TEST_CASE("selective_scan_chunked: chunk_len = 1 matches sequential") {
    Rng rng(107);
    auto ssm = make_ssm<double>(rng, 3, 4);
    auto in = make_inputs<double>(rng, 11, 3, 4, true);
    auto seq = selective_scan_sequential(in, ssm, Discretization::Exact);
    auto chk = selective_scan_chunked(in, ssm, Discretization::Exact, 1);
    CHECK(max_abs_diff(seq.y, chk.y) <= 1e-12);
    CHECK(max_abs_diff(seq.h_final, chk.h_final) <= 1e-12);
}

TEST_CASE("selective_scan_chunked: non-dividing chunk at L=64, chunk_len=7") {
    Rng rng(108);
    auto ssm = make_ssm<double>(rng, 4, 5);
    auto in = make_inputs<double>(rng, 64, 4, 5, false);
    for (auto mode : {Discretization::Exact, Discretization::Simplified}) {
        auto seq = selective_scan_sequential(in, ssm, mode);
        auto chk = selective_scan_chunked(in, ssm, mode, 7);
        CHECK(max_abs_diff(seq.y, chk.y) <= 1e-10);
        CHECK(max_abs_diff(seq.h_final, chk.h_final) <= 1e-10);
    }
}

TEST_CASE("selective_scan_chunked: equivalence property over random instances") {
    Rng rng(109);
    for (int rep = 0; rep < 24; ++rep) {
        const i64 l = rng.uniform_int(1, 256);
        const i64 e = rng.uniform_int(1, 8);
        const i64 n = rng.uniform_int(1, 8);
        const i64 chunk = rng.uniform_int(1, l + 2);
        const auto mode = rep % 2 == 0 ? Discretization::Exact : Discretization::Simplified;
        auto ssm = make_ssm<double>(rng, e, n);
        auto in = make_inputs<double>(rng, l, e, n, rep % 3 == 0);
        auto seq = selective_scan_sequential(in, ssm, mode);
        auto chk = selective_scan_chunked(in, ssm, mode, chunk);
        INFO("L=", l, " E=", e, " N=", n, " chunk=", chunk);
        CHECK(max_abs_diff(seq.y, chk.y) <= 1e-10);
        CHECK(max_abs_diff(seq.h_final, chk.h_final) <= 1e-10);
    }
}

TEST_CASE("selective_scan_chunked: rejects non-positive chunk_len") {
    Rng rng(110);
    auto ssm = make_ssm<double>(rng, 2, 2);
    auto in = make_inputs<double>(rng, 4, 2, 2, false);
    CHECK_THROWS_AS((void)selective_scan_chunked(in, ssm, Discretization::Exact, 0), ValidationError);
}

// ---------------------------------------------------------------------------
// stability and mode consistency
// ---------------------------------------------------------------------------

TEST_CASE("scan stability: 0 < a_bar < 1 and geometric state bound") {
    Rng rng(111);
    const i64 l = 512, e = 4, n = 6;
    auto ssm = make_ssm<double>(rng, e, n);
    auto in = make_inputs<double>(rng, l, e, n, false);
    ScanCache<double> cache;
    auto out = selective_scan_sequential(in, ssm, Discretization::Simplified, &cache);

    double abar_max = 0.0;
    for (i64 i = 0; i < cache.abar_hist.numel(); ++i) {
        CHECK(cache.abar_hist[i] > 0.0);
        CHECK(cache.abar_hist[i] < 1.0);
        abar_max = std::max(abar_max, cache.abar_hist[i]);
    }

    // Induction bound: |h_k| <= max|b_bar*u| / (1 - max a_bar) from zero state.
    double bu_max = 0.0;
    for (i64 k = 0; k < l; ++k)
        for (i64 ch = 0; ch < e; ++ch)
            for (i64 i = 0; i < n; ++i)
                bu_max = std::max(bu_max,
                                  std::abs(in.delta_seq(k, ch) * in.b_seq(k, i) * in.u(k, ch)));
    const double bound = bu_max / (1.0 - abar_max) * (1.0 + 1e-12);
    for (i64 i = 0; i < cache.h_hist.numel(); ++i) CHECK(std::abs(cache.h_hist[i]) <= bound);
    CHECK(out.y.all_finite());
}

TEST_CASE("mode consistency: simplified matches exact to O(delta^2)") {
    Tensor<double> a({1}), b({1});
    a[0] = -1.3;
    b[0] = 0.7;
    std::vector<double> devs;
    for (double delta : {1e-2, 1e-3, 1e-4}) {
        auto [abar_e, bbar_e] = zoh_discretize<double>(a, b, delta, Discretization::Exact);
        auto [abar_s, bbar_s] = zoh_discretize<double>(a, b, delta, Discretization::Simplified);
        CHECK(abar_e[0] == abar_s[0]);
        CHECK(std::abs(bbar_e[0] - bbar_s[0]) <= 0.75 * std::abs(a[0] * b[0]) * delta * delta);
        devs.push_back(std::abs(bbar_e[0] / bbar_s[0] - 1.0));
    }
    // Ratio deviation shrinks linearly in delta: consecutive factors near 10.
    CHECK(devs[0] / devs[1] == doctest::Approx(10.0).epsilon(0.05));
    CHECK(devs[1] / devs[2] == doctest::Approx(10.0).epsilon(0.05));
}

// ---------------------------------------------------------------------------
// causality
// ---------------------------------------------------------------------------

TEST_CASE("scan causality: perturbations only propagate forward") {
    Rng rng(112);
    const i64 l = 12, e = 3, n = 4, k0 = 5;
    auto ssm = make_ssm<double>(rng, e, n);
    auto in = make_inputs<double>(rng, l, e, n, false);
    auto base = selective_scan_sequential(in, ssm, Discretization::Simplified);

    SUBCASE("perturbing u_k") {
        auto in2 = in;
        in2.u(k0, 1) += 0.25;
        auto out = selective_scan_sequential(in2, ssm, Discretization::Simplified);
        for (i64 k = 0; k < k0; ++k)
            for (i64 ch = 0; ch < e; ++ch) CHECK(out.y(k, ch) == base.y(k, ch));
        CHECK(out.y(k0, 1) != base.y(k0, 1));
    }
    SUBCASE("perturbing delta_k") {
        auto in2 = in;
        in2.delta_seq(k0, 0) += 0.1;
        auto out = selective_scan_sequential(in2, ssm, Discretization::Simplified);
        for (i64 k = 0; k < k0; ++k)
            for (i64 ch = 0; ch < e; ++ch) CHECK(out.y(k, ch) == base.y(k, ch));
        CHECK(out.y(k0, 0) != base.y(k0, 0));
    }
    SUBCASE("perturbing the readout c_k touches only step k") {
        auto in2 = in;
        in2.c_seq(k0, 2) += 0.3;
        auto out = selective_scan_sequential(in2, ssm, Discretization::Simplified);
        for (i64 k = 0; k < l; ++k)
            for (i64 ch = 0; ch < e; ++ch)
                if (k != k0)
                    CHECK(out.y(k, ch) == base.y(k, ch));
                else
                    CHECK(out.y(k, ch) != base.y(k, ch));
    }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST_CASE("scan gradients match central finite differences") {
    Rng rng(113);
    const i64 l = 5, e = 3, n = 4;
    const double eps = 1e-6;
    for (auto mode : {Discretization::Exact, Discretization::Simplified}) {
        auto ssm = make_ssm<double>(rng, e, n);
        auto in = make_inputs<double>(rng, l, e, n, true);
        auto wy = random_tensor<double>(rng, {l, e}, -1.0, 1.0);
        auto wh = random_tensor<double>(rng, {e, n}, -1.0, 1.0);

        auto loss = [&]() {
            auto out = selective_scan_sequential(in, ssm, mode);
            double s = 0.0;
            for (i64 i = 0; i < out.y.numel(); ++i) s += wy[i] * out.y[i];
            for (i64 i = 0; i < out.h_final.numel(); ++i) s += wh[i] * out.h_final[i];
            return s;
        };

        ScanCache<double> cache;
        (void)selective_scan_sequential(in, ssm, mode, &cache);
        auto g = selective_scan_backward(in, ssm, mode, cache, wy, &wh);

        auto check_group = [&](Tensor<double>& param, const Tensor<double>& analytic, const char* name) {
            REQUIRE(param.numel() == analytic.numel());
            for (i64 i = 0; i < param.numel(); ++i) {
                const double fd = sisma::testutil::central_diff(param, i, eps, loss);
                INFO("mode=", static_cast<int>(mode), " group=", std::string(name), " i=", i, " fd=", fd,
                     " analytic=", analytic[i]);
                CHECK(rel_err(analytic[i], fd) < 1e-6);
            }
        };
        check_group(in.u, g.du, "u");
        check_group(in.b_seq, g.db_seq, "b_seq");
        check_group(in.c_seq, g.dc_seq, "c_seq");
        check_group(in.delta_seq, g.ddelta_seq, "delta_seq");
        check_group(ssm.a_log, g.da_log, "a_log");
        check_group(ssm.d_skip, g.dd_skip, "d_skip");
        check_group(in.h0, g.dh0, "h0");
    }
}

TEST_CASE("DiagSSM validation rejects malformed parameters") {
    DiagSSM<double> ssm;
    ssm.channels = 0;
    ssm.state_dim = 4;
    CHECK_THROWS_AS(ssm.validate(), ValidationError);
    ssm.channels = 2;
    ssm.a_log = Tensor<double>({2, 3});
    ssm.d_skip = Tensor<double>({2});
    CHECK_THROWS_AS(ssm.validate(), ShapeError);
    ssm.a_log = Tensor<double>({2, 4});
    ssm.a_log[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ssm.validate(), ValidationError);
}
