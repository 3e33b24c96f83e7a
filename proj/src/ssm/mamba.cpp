// SPDX-License-Identifier: Apache-2.0
#include "sisma/ssm/mamba.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "sisma/core/errors.hpp"
#include "sisma/nn/act.hpp"

namespace sisma::ssm {

// ---------------------------------------------------------------------------
// construction and initialization
// ---------------------------------------------------------------------------

template <typename T>
MambaBase<T>::MambaBase(std::string layer_name, i64 d_model_, i64 expansion, i64 state_dim,
                        i64 conv_width, i64 selection_dim)
    : d_model(d_model_), e_dim(d_model_ * expansion), n_state(state_dim), name(std::move(layer_name)) {
    if (d_model < 1 || expansion < 1 || state_dim < 1)
        throw ValidationError(name + ": d_model, expansion, state_dim must be >= 1");
    in_proj = nn::Linear<T>(d_model, 2 * e_dim, true);
    conv = nn::DepthwiseCausalConv<T>(e_dim, conv_width);
    b_proj = nn::Linear<T>(selection_dim, n_state, false);
    c_proj = nn::Linear<T>(e_dim, n_state, false);
    dt_proj = nn::Linear<T>(selection_dim, e_dim, true);
    out_proj = nn::Linear<T>(e_dim, d_model, true);
    ssm.channels = e_dim;
    ssm.state_dim = n_state;
    ssm.a_log = Tensor<T>({e_dim, n_state});
    ssm.d_skip = Tensor<T>({e_dim});
    ga_log = Tensor<T>({e_dim, n_state});
    gd_skip = Tensor<T>({e_dim});
}

template <typename T>
void MambaBase<T>::init(Rng& rng) {
    in_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
    conv.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(conv.width)));
    b_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(b_proj.in_dim)));
    c_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(e_dim)));
    dt_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(dt_proj.in_dim)));
    // Bias places the initial step size uniformly in [1e-3, 1e-1] after the
    // softplus: bias = softplus^{-1}(v) = log(expm1(v)).
    for (i64 e = 0; e < e_dim; ++e) {
        const double v = rng.uniform(1e-3, 1e-1);
        dt_proj.b[e] = static_cast<T>(std::log(std::expm1(v)));
    }
    // S4D-real: a_i = -i for i = 1..N, stored as a_log = log(i).
    for (i64 e = 0; e < e_dim; ++e)
        for (i64 i = 0; i < n_state; ++i) ssm.a_log(e, i) = static_cast<T>(std::log(static_cast<double>(i + 1)));
    ssm.d_skip.fill(T(1));
    out_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(e_dim)));
}

template <typename T>
void MambaBase<T>::register_params(nn::ParamRegistry<T>& reg, const std::string& prefix) {
    in_proj.register_params(reg, prefix + ".in_proj");
    conv.register_params(reg, prefix + ".conv");
    b_proj.register_params(reg, prefix + ".b_proj");
    c_proj.register_params(reg, prefix + ".c_proj");
    dt_proj.register_params(reg, prefix + ".dt_proj");
    reg.add(prefix + ".a_log", &ssm.a_log, &ga_log);
    reg.add(prefix + ".d_skip", &ssm.d_skip, &gd_skip);
    out_proj.register_params(reg, prefix + ".out_proj");
}

// ---------------------------------------------------------------------------
// forward pipeline
// ---------------------------------------------------------------------------

template <typename T>
void MambaBase<T>::prepare_streams(const Tensor<T>& x, MambaCache<T>& cache) const {
    if (x.ndim() != 2 || x.dim(1) != d_model)
        throw ShapeError(name + " input: expected [L x " + std::to_string(d_model) + "], got " +
                         x.shape_str());
    const i64 l = x.dim(0);
    Tensor<T> xy = in_proj.forward(x, &cache.in_cache);
    cache.u = Tensor<T>({l, e_dim});
    cache.g = Tensor<T>({l, e_dim});
    for (i64 k = 0; k < l; ++k)
        for (i64 e = 0; e < e_dim; ++e) {
            cache.u(k, e) = xy(k, e);
            cache.g(k, e) = xy(k, e_dim + e);
        }
    cache.conv_out = conv.forward(cache.u, &cache.conv_cache);
    cache.s = nn::silu(cache.conv_out);
}

template <typename T>
Tensor<T> MambaBase<T>::finish_scan(Tensor<T> b_seq, Tensor<T> c_seq, Tensor<T> dt_pre,
                                    MambaCache<T>& cache) const {
    Tensor<T> delta = nn::softplus(dt_pre);
    if (!delta.all_finite()) throw NumericError(name + ": non-finite step size");
    // Softplus underflows to zero for very negative inputs; lift to the
    // smallest normal so the scan's positivity contract holds.
    const T floor = std::numeric_limits<T>::min();
    for (i64 i = 0; i < delta.numel(); ++i)
        if (delta[i] < floor) delta[i] = floor;
    cache.dt_pre = std::move(dt_pre);

    cache.scan_in.u = cache.s;
    cache.scan_in.b_seq = std::move(b_seq);
    cache.scan_in.c_seq = std::move(c_seq);
    cache.scan_in.delta_seq = std::move(delta);
    ScanOutputs<T> scan_out = selective_scan_sequential(cache.scan_in, ssm, mode, &cache.scan_cache);
    cache.y_scan = std::move(scan_out.y);

    cache.gate = nn::silu(cache.g);
    Tensor<T> yg(cache.y_scan.shape());
    for (i64 i = 0; i < yg.numel(); ++i) yg[i] = cache.y_scan[i] * cache.gate[i];
    Tensor<T> out = out_proj.forward(yg, &cache.out_cache);
    if (!out.all_finite()) throw NumericError(name + ": non-finite output");
    return out;
}

// ---------------------------------------------------------------------------
// backward pipeline
// ---------------------------------------------------------------------------

template <typename T>
typename MambaBase<T>::TailGrads MambaBase<T>::backward_tail(const Tensor<T>& dy,
                                                             const MambaCache<T>& cache) {
    Tensor<T> dyg = out_proj.backward(dy, cache.out_cache);
    Tensor<T> dy_scan(dyg.shape());
    Tensor<T> dgate(dyg.shape());
    for (i64 i = 0; i < dyg.numel(); ++i) {
        dy_scan[i] = dyg[i] * cache.gate[i];
        dgate[i] = dyg[i] * cache.y_scan[i];
    }

    ScanGrads<T> sg = selective_scan_backward(cache.scan_in, ssm, mode, cache.scan_cache, dy_scan);
    for (i64 i = 0; i < ga_log.numel(); ++i) ga_log[i] += sg.da_log[i];
    for (i64 i = 0; i < gd_skip.numel(); ++i) gd_skip[i] += sg.dd_skip[i];

    TailGrads tg;
    tg.du_scan = std::move(sg.du);
    tg.db = std::move(sg.db_seq);
    tg.dc = std::move(sg.dc_seq);
    tg.ddt_pre = nn::softplus_backward(cache.dt_pre, sg.ddelta_seq);
    tg.dg = nn::silu_backward(cache.g, dgate);
    return tg;
}

template <typename T>
Tensor<T> MambaBase<T>::backward_head(const Tensor<T>& ds, const Tensor<T>& dg,
                                      const MambaCache<T>& cache) {
    Tensor<T> dconv = nn::silu_backward(cache.conv_out, ds);
    Tensor<T> du = conv.backward(dconv, cache.conv_cache);
    const i64 l = du.dim(0);
    Tensor<T> dxy({l, 2 * e_dim});
    for (i64 k = 0; k < l; ++k)
        for (i64 e = 0; e < e_dim; ++e) {
            dxy(k, e) = du(k, e);
            dxy(k, e_dim + e) = dg(k, e);
        }
    return in_proj.backward(dxy, cache.in_cache);
}

// ---------------------------------------------------------------------------
// SelfMamba
// ---------------------------------------------------------------------------

template <typename T>
SelfMamba<T>::SelfMamba(std::string layer_name, i64 d_model, i64 expansion, i64 state_dim,
                        i64 conv_width)
    : MambaBase<T>(std::move(layer_name), d_model, expansion, state_dim, conv_width,
                   d_model * expansion) {}

template <typename T>
Tensor<T> SelfMamba<T>::forward(const Tensor<T>& x, MambaCache<T>* cache) const {
    MambaCache<T> local;
    MambaCache<T>& c = cache ? *cache : local;
    this->prepare_streams(x, c);
    Tensor<T> b_seq = this->b_proj.forward(c.s, &c.b_cache);
    Tensor<T> c_seq = this->c_proj.forward(c.s, &c.c_cache);
    Tensor<T> dt_pre = this->dt_proj.forward(c.s, &c.dt_cache);
    return this->finish_scan(std::move(b_seq), std::move(c_seq), std::move(dt_pre), c);
}

template <typename T>
Tensor<T> SelfMamba<T>::backward(const Tensor<T>& dy, const MambaCache<T>& cache) {
    auto tg = this->backward_tail(dy, cache);
    Tensor<T> ds = this->b_proj.backward(tg.db, cache.b_cache);
    Tensor<T> ds2 = this->c_proj.backward(tg.dc, cache.c_cache);
    Tensor<T> ds3 = this->dt_proj.backward(tg.ddt_pre, cache.dt_cache);
    for (i64 i = 0; i < ds.numel(); ++i) ds[i] += ds2[i] + ds3[i] + tg.du_scan[i];
    return this->backward_head(ds, tg.dg, cache);
}

// ---------------------------------------------------------------------------
// CrossMamba
// ---------------------------------------------------------------------------

template <typename T>
CrossMamba<T>::CrossMamba(std::string layer_name, i64 d_model, i64 expansion, i64 state_dim,
                          i64 conv_width)
    : MambaBase<T>(std::move(layer_name), d_model, expansion, state_dim, conv_width, d_model) {}

template <typename T>
Tensor<T> CrossMamba<T>::forward(const Tensor<T>& x, const Tensor<T>& s_m,
                                 MambaCache<T>* cache) const {
    if (s_m.ndim() != 2 || s_m.dim(1) != this->d_model)
        throw ShapeError(this->name + " conditioning: expected [L x " + std::to_string(this->d_model) +
                         "], got " + s_m.shape_str());
    if (x.ndim() != 2 || s_m.dim(0) != x.dim(0))
        throw ShapeError(this->name + ": content has " + std::to_string(x.dim(0)) +
                         " tokens but conditioning has " + std::to_string(s_m.dim(0)));
    MambaCache<T> local;
    MambaCache<T>& c = cache ? *cache : local;
    this->prepare_streams(x, c);
    Tensor<T> b_seq = this->b_proj.forward(s_m, &c.b_cache);
    Tensor<T> c_seq = this->c_proj.forward(c.s, &c.c_cache);
    Tensor<T> dt_pre = this->dt_proj.forward(s_m, &c.dt_cache);
    return this->finish_scan(std::move(b_seq), std::move(c_seq), std::move(dt_pre), c);
}

template <typename T>
CrossGrads<T> CrossMamba<T>::backward(const Tensor<T>& dy, const MambaCache<T>& cache) {
    auto tg = this->backward_tail(dy, cache);
    CrossGrads<T> g;
    g.ds_m = this->b_proj.backward(tg.db, cache.b_cache);
    Tensor<T> ds_m2 = this->dt_proj.backward(tg.ddt_pre, cache.dt_cache);
    for (i64 i = 0; i < g.ds_m.numel(); ++i) g.ds_m[i] += ds_m2[i];
    Tensor<T> ds = this->c_proj.backward(tg.dc, cache.c_cache);
    for (i64 i = 0; i < ds.numel(); ++i) ds[i] += tg.du_scan[i];
    g.dx = this->backward_head(ds, tg.dg, cache);
    return g;
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

template class MambaBase<float>;
template class MambaBase<double>;
template class SelfMamba<float>;
template class SelfMamba<double>;
template class CrossMamba<float>;
template class CrossMamba<double>;

} // namespace sisma::ssm
