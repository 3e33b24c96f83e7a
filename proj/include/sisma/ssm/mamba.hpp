// SPDX-License-Identifier: Apache-2.0
//
// Selective-SSM token mixers. SelfMamba derives its selection signals (B, C,
// Δ) from its own convolved content stream; CrossMamba takes Δ and B from a
// token-aligned conditioning sequence instead, so the conditioning decides
// what the state writes and how fast it decays, while C (the readout) stays
// on the content stream.
#pragma once

#include <string>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"
#include "sisma/nn/conv.hpp"
#include "sisma/nn/linear.hpp"
#include "sisma/nn/params.hpp"
#include "sisma/ssm/scan.hpp"

namespace sisma::ssm {

template <typename T>
struct MambaCache {
    nn::LinearCache<T> in_cache;
    Tensor<T> u, g;          // [L,E] streams split from the input projection
    nn::ConvCache<T> conv_cache;
    Tensor<T> conv_out;      // [L,E] pre-activation
    Tensor<T> s;             // [L,E] silu(conv_out): scan input and C tap
    nn::LinearCache<T> b_cache, c_cache, dt_cache;
    Tensor<T> dt_pre;        // [L,E] pre-softplus
    ScanInputs<T> scan_in;
    ScanCache<T> scan_cache;
    Tensor<T> y_scan;        // [L,E]
    Tensor<T> gate;          // [L,E] silu(g)
    nn::LinearCache<T> out_cache;
};

// Shared machinery for both mixers. selection_dim is the input width of the
// B and Δ projections: E for SelfMamba, D for CrossMamba.
template <typename T>
class MambaBase {
public:
    MambaBase() = default;
    MambaBase(std::string layer_name, i64 d_model_, i64 expansion, i64 state_dim, i64 conv_width,
              i64 selection_dim);

    void init(Rng& rng);
    void register_params(nn::ParamRegistry<T>& reg, const std::string& prefix);

    i64 d_model = 0, e_dim = 0, n_state = 0;
    Discretization mode = Discretization::Simplified;
    std::string name;

    nn::Linear<T> in_proj;             // D -> 2E
    nn::DepthwiseCausalConv<T> conv;   // E channels
    nn::Linear<T> b_proj;              // selection_dim -> N, no bias
    nn::Linear<T> c_proj;              // E -> N, no bias
    nn::Linear<T> dt_proj;             // selection_dim -> E, bias sets init step size
    DiagSSM<T> ssm;
    Tensor<T> ga_log, gd_skip;
    nn::Linear<T> out_proj;            // E -> D

protected:
    // Input projection, stream split, causal conv, SiLU. Fills cache.u/g/
    // conv_out/s.
    void prepare_streams(const Tensor<T>& x, MambaCache<T>& cache) const;

    // Softplus on Δ, scan, gating, output projection. Fills the rest of the
    // cache and runs the non-finite checks.
    Tensor<T> finish_scan(Tensor<T> b_seq, Tensor<T> c_seq, Tensor<T> dt_pre,
                          MambaCache<T>& cache) const;

    struct TailGrads {
        Tensor<T> du_scan;  // [L,E] grad into the scan input stream
        Tensor<T> db, dc;   // [L,N]
        Tensor<T> ddt_pre;  // [L,E]
        Tensor<T> dg;       // [L,E] grad into the pre-activation gate stream
    };
    // Output projection, gate, scan, softplus, in reverse. Accumulates the
    // SSM parameter gradients.
    TailGrads backward_tail(const Tensor<T>& dy, const MambaCache<T>& cache);

    // SiLU, conv, stream merge, input projection, in reverse; returns dx.
    Tensor<T> backward_head(const Tensor<T>& ds, const Tensor<T>& dg,
                            const MambaCache<T>& cache);
};

template <typename T>
class SelfMamba : public MambaBase<T> {
public:
    SelfMamba() = default;
    SelfMamba(std::string layer_name, i64 d_model, i64 expansion, i64 state_dim, i64 conv_width);

    Tensor<T> forward(const Tensor<T>& x, MambaCache<T>* cache) const;
    Tensor<T> backward(const Tensor<T>& dy, const MambaCache<T>& cache);
};

template <typename T>
struct CrossGrads {
    Tensor<T> dx;
    Tensor<T> ds_m;
};

template <typename T>
class CrossMamba : public MambaBase<T> {
public:
    CrossMamba() = default;
    CrossMamba(std::string layer_name, i64 d_model, i64 expansion, i64 state_dim, i64 conv_width);

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& s_m, MambaCache<T>* cache) const;
    CrossGrads<T> backward(const Tensor<T>& dy, const MambaCache<T>& cache);
};

} // namespace sisma::ssm
