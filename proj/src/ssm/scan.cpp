// SPDX-License-Identifier: Apache-2.0
#include "sisma/ssm/scan.hpp"

#include <cmath>
#include <string>

#include "sisma/core/errors.hpp"
#include "sisma/kernels/kernels.hpp"

namespace sisma::ssm {

namespace ks = sisma::kernels;

// ---------------------------------------------------------------------------
// parameter validation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> DiagSSM<T>::a_neg() const {
    Tensor<T> a(a_log.shape());
    ks::vexp(a_log.data(), a.data(), a_log.numel());
    for (i64 i = 0; i < a.numel(); ++i) a[i] = -a[i];
    return a;
}

template <typename T>
void DiagSSM<T>::validate() const {
    if (channels < 1) throw ValidationError("DiagSSM: channels must be >= 1, got " + std::to_string(channels));
    if (state_dim < 1) throw ValidationError("DiagSSM: state_dim must be >= 1, got " + std::to_string(state_dim));
    check_shape(a_log, {channels, state_dim}, "DiagSSM a_log");
    check_shape(d_skip, {channels}, "DiagSSM d_skip");
    if (!a_log.all_finite()) throw ValidationError("DiagSSM: a_log has non-finite entries");
    if (!d_skip.all_finite()) throw ValidationError("DiagSSM: d_skip has non-finite entries");
}

// ---------------------------------------------------------------------------
// single-step discretization
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& a_diag, const Tensor<T>& b_t,
                                               T delta_t, Discretization mode) {
    if (a_diag.ndim() != 1) throw ShapeError("zoh_discretize a_diag: expected rank 1, got " + a_diag.shape_str());
    if (!b_t.same_shape(a_diag))
        throw ShapeError("zoh_discretize b_t: expected " + a_diag.shape_str() + ", got " + b_t.shape_str());
    if (!(delta_t > T(0)))
        throw ValidationError("zoh_discretize: delta_t must be > 0, got " + std::to_string(static_cast<double>(delta_t)));
    const i64 n = a_diag.numel();
    for (i64 i = 0; i < n; ++i) {
        if (!(a_diag[i] < T(0)))
            throw ValidationError("zoh_discretize: a_diag[" + std::to_string(i) + "] must be < 0, got " +
                                  std::to_string(static_cast<double>(a_diag[i])));
    }
    Tensor<T> a_bar({n}), b_bar({n});
    for (i64 i = 0; i < n; ++i) {
        const T ab = std::exp(delta_t * a_diag[i]);
        a_bar[i] = ab;
        b_bar[i] = mode == Discretization::Exact ? (ab - T(1)) / a_diag[i] * b_t[i] : delta_t * b_t[i];
    }
    return {std::move(a_bar), std::move(b_bar)};
}

// ---------------------------------------------------------------------------
// scan wrappers
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_scan_shapes(const ScanInputs<T>& in, const DiagSSM<T>& ssm) {
    ssm.validate();
    const i64 e = ssm.channels, n = ssm.state_dim;
    if (in.u.ndim() != 2 || in.u.dim(1) != e)
        throw ShapeError("scan u: expected [Lx" + std::to_string(e) + "], got " + in.u.shape_str());
    const i64 l = in.u.dim(0);
    check_shape(in.b_seq, {l, n}, "scan b_seq");
    check_shape(in.c_seq, {l, n}, "scan c_seq");
    check_shape(in.delta_seq, {l, e}, "scan delta_seq");
    if (!in.h0.empty()) check_shape(in.h0, {e, n}, "scan h0");
    for (i64 i = 0; i < in.delta_seq.numel(); ++i)
        if (!(in.delta_seq[i] > T(0)))
            throw ValidationError("scan delta_seq: entries must be > 0, found " +
                                  std::to_string(static_cast<double>(in.delta_seq[i])) + " at flat index " +
                                  std::to_string(i));
}

} // namespace

template <typename T>
ScanOutputs<T> selective_scan_sequential(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                         Discretization mode, ScanCache<T>* cache) {
    check_scan_shapes(in, ssm);
    const i64 l = in.u.dim(0), e = ssm.channels, n = ssm.state_dim;
    Tensor<T> a = ssm.a_neg();

    ScanOutputs<T> out;
    out.y = Tensor<T>({l, e});
    out.h_final = Tensor<T>({e, n});
    T* h_hist = nullptr;
    T* abar_hist = nullptr;
    if (cache) {
        cache->h_hist = Tensor<T>({l, e, n});
        cache->abar_hist = Tensor<T>({l, e, n});
        h_hist = cache->h_hist.data();
        abar_hist = cache->abar_hist.data();
    }
    ks::scan_forward<T>(l, e, n, in.u.data(), in.b_seq.data(), in.c_seq.data(), in.delta_seq.data(),
                     a.data(), ssm.d_skip.data(), in.h0.empty() ? nullptr : in.h0.data(),
                     mode == Discretization::Exact, out.y.data(), out.h_final.data(), h_hist, abar_hist);
    if (cache) cache->a_neg = std::move(a);
    return out;
}

template <typename T>
ScanOutputs<T> selective_scan_chunked(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                      Discretization mode, i64 chunk_len) {
    check_scan_shapes(in, ssm);
    if (chunk_len < 1) throw ValidationError("scan chunk_len must be >= 1, got " + std::to_string(chunk_len));
    const i64 l = in.u.dim(0), e = ssm.channels, n = ssm.state_dim;
    const bool exact = mode == Discretization::Exact;
    Tensor<T> a = ssm.a_neg();

    ScanOutputs<T> out;
    out.y = Tensor<T>({l, e});
    out.h_final = Tensor<T>({e, n});
    if (l == 0) {
        if (!in.h0.empty()) out.h_final = in.h0;
        return out;
    }

    const i64 nchunks = (l + chunk_len - 1) / chunk_len;

    // Pass 1: from a zero entry state each chunk realizes the affine map
    // h ↦ α·h + β with β its final state and α the product of its a_bar
    // factors.  Composing those maps in order yields every entry state.
    Tensor<T> entry({nchunks, e, n});
    if (!in.h0.empty())
        for (i64 i = 0; i < e * n; ++i) entry[i] = in.h0[i];
    Tensor<T> beta({e, n});
    Tensor<T> y_scratch({chunk_len, e});
    Tensor<T> abar_scratch({chunk_len, e, n});
    for (i64 ci = 0; ci + 1 < nchunks; ++ci) {
        const i64 k0 = ci * chunk_len;
        const i64 len = std::min(chunk_len, l - k0);
        ks::scan_forward<T>(len, e, n, in.u.data() + k0 * e, in.b_seq.data() + k0 * n,
                         in.c_seq.data() + k0 * n, in.delta_seq.data() + k0 * e, a.data(),
                         ssm.d_skip.data(), nullptr, exact, y_scratch.data(), beta.data(), nullptr,
                         abar_scratch.data());
        for (i64 j = 0; j < e * n; ++j) {
            T alpha = T(1);
            for (i64 k = 0; k < len; ++k) alpha *= abar_scratch[k * e * n + j];
            entry[(ci + 1) * e * n + j] = alpha * entry[ci * e * n + j] + beta[j];
        }
    }

    // Pass 2: replay each chunk from its true entry state.
    Tensor<T> h_exit({e, n});
    for (i64 ci = 0; ci < nchunks; ++ci) {
        const i64 k0 = ci * chunk_len;
        const i64 len = std::min(chunk_len, l - k0);
        ks::scan_forward<T>(len, e, n, in.u.data() + k0 * e, in.b_seq.data() + k0 * n,
                         in.c_seq.data() + k0 * n, in.delta_seq.data() + k0 * e, a.data(),
                         ssm.d_skip.data(), entry.data() + ci * e * n, exact, out.y.data() + k0 * e,
                         h_exit.data(), nullptr, nullptr);
    }
    out.h_final = std::move(h_exit);
    return out;
}

template <typename T>
ScanGrads<T> selective_scan_backward(const ScanInputs<T>& in, const DiagSSM<T>& ssm,
                                     Discretization mode, const ScanCache<T>& cache,
                                     const Tensor<T>& dy, const Tensor<T>* dh_final) {
    check_scan_shapes(in, ssm);
    const i64 l = in.u.dim(0), e = ssm.channels, n = ssm.state_dim;
    check_shape(dy, {l, e}, "scan dy");
    check_shape(cache.a_neg, {e, n}, "scan cache a_neg");
    check_shape(cache.h_hist, {l, e, n}, "scan cache h_hist");
    check_shape(cache.abar_hist, {l, e, n}, "scan cache abar_hist");
    if (dh_final) check_shape(*dh_final, {e, n}, "scan dh_final");

    ScanGrads<T> g;
    g.du = Tensor<T>({l, e});
    g.db_seq = Tensor<T>({l, n});
    g.dc_seq = Tensor<T>({l, n});
    g.ddelta_seq = Tensor<T>({l, e});
    g.da_log = Tensor<T>({e, n});
    g.dd_skip = Tensor<T>({e});
    g.dh0 = Tensor<T>({e, n});
    ks::scan_backward<T>(l, e, n, in.u.data(), in.b_seq.data(), in.c_seq.data(), in.delta_seq.data(),
                      cache.a_neg.data(), ssm.d_skip.data(), in.h0.empty() ? nullptr : in.h0.data(),
                      mode == Discretization::Exact, cache.h_hist.data(), cache.abar_hist.data(),
                      dy.data(), dh_final ? dh_final->data() : nullptr, g.du.data(), g.db_seq.data(),
                      g.dc_seq.data(), g.ddelta_seq.data(), g.da_log.data(), g.dd_skip.data(),
                      g.dh0.data());
    // Chain rule through A = -exp(a_log): dL/da_log = dL/dA · A.
    for (i64 i = 0; i < e * n; ++i) g.da_log[i] *= cache.a_neg[i];
    return g;
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_SCAN(T)                                                                     \
    template struct DiagSSM<T>;                                                                       \
    template std::pair<Tensor<T>, Tensor<T>> zoh_discretize<T>(const Tensor<T>&, const Tensor<T>&, T, \
                                                               Discretization);                       \
    template ScanOutputs<T> selective_scan_sequential<T>(const ScanInputs<T>&, const DiagSSM<T>&,     \
                                                         Discretization, ScanCache<T>*);              \
    template ScanOutputs<T> selective_scan_chunked<T>(const ScanInputs<T>&, const DiagSSM<T>&,        \
                                                      Discretization, i64);                           \
    template ScanGrads<T> selective_scan_backward<T>(const ScanInputs<T>&, const DiagSSM<T>&,         \
                                                     Discretization, const ScanCache<T>&,             \
                                                     const Tensor<T>&, const Tensor<T>*);

SISMA_INSTANTIATE_SCAN(float)
SISMA_INSTANTIATE_SCAN(double)

#undef SISMA_INSTANTIATE_SCAN

} // namespace sisma::ssm
