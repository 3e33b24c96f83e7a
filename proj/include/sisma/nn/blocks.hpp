// SPDX-License-Identifier: Apache-2.0
//
// Token-space plumbing around the SSM mixers: patch flattening and its
// inverse, mask-to-token encoding, timestep embedding, adaptive layernorm
// modulation, the feed-forward sublayer, and the full residual block.
#pragma once

#include <string>
#include <vector>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"
#include "sisma/nn/linear.hpp"
#include "sisma/nn/norm.hpp"
#include "sisma/nn/params.hpp"
#include "sisma/ssm/mamba.hpp"

namespace sisma::nn {

// ---------------------------------------------------------------------------
// patch geometry
// ---------------------------------------------------------------------------

struct PatchGrid {
    i64 c = 0, h = 0, w = 0, p = 0, d = 0;

    i64 tokens_h() const { return h / p; }
    i64 tokens_w() const { return w / p; }
    i64 token_count() const { return tokens_h() * tokens_w(); }
    i64 patch_dim() const { return c * p * p; }
    void validate() const;
};

// latent [c,h,w] -> rows [L, c*p*p]; patches in raster order, each flattened
// channel-first. Token k covers patch (k / (w/p), k mod (w/p)).
template <typename T>
Tensor<T> flatten_patches(const Tensor<T>& latent, const PatchGrid& grid);

// Exact inverse of flatten_patches.
template <typename T>
Tensor<T> unflatten_patches(const Tensor<T>& rows, const PatchGrid& grid);

// flatten_patches followed by the learned projection c*p*p -> D.
template <typename T>
Tensor<T> patchify(const Tensor<T>& latent, const PatchGrid& grid, const Linear<T>& proj,
                   LinearCache<T>* cache);

// tokens [L, c*p*p] -> latent [c,h,w]; no learned weights.
template <typename T>
Tensor<T> depatchify(const Tensor<T>& tokens, const PatchGrid& grid);

// ---------------------------------------------------------------------------
// mask encoding
// ---------------------------------------------------------------------------

template <typename T>
struct MaskEncodeCache {
    std::vector<i64> pixel_class;  // h*w class indices
    LinearCache<T> proj_cache;
};

// One-hot mask -> token sequence: per-pixel class-embedding lookup, then a
// patchify with the encoder's own projection. Token-aligned with content.
template <typename T>
class MaskEncoder {
public:
    MaskEncoder() = default;
    MaskEncoder(std::string enc_name, i64 num_classes, const PatchGrid& grid);

    void init(Rng& rng);
    Tensor<T> forward(const Tensor<T>& mask_onehot, MaskEncodeCache<T>* cache) const;
    // Mask input is data, not a parameter; backward only accumulates grads.
    void backward(const Tensor<T>& dy, const MaskEncodeCache<T>& cache);
    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    std::string name;
    i64 num_classes = 0;
    i64 embed_dim = 0;  // D_m = ceil(D / p^2)
    PatchGrid mask_grid;  // c = embed_dim
    Tensor<T> class_table;  // [K, D_m]
    Tensor<T> gclass_table;
    Linear<T> proj;  // D_m*p^2 -> D
};

// ---------------------------------------------------------------------------
// timestep embedding
// ---------------------------------------------------------------------------

// Sinusoidal features of t in [0,1]: half sine, half cosine, frequencies
// log-spaced over [1, 10000].
template <typename T>
Tensor<T> sinusoid_embed(T t, i64 dim);

template <typename T>
struct TimestepCache {
    Tensor<T> pre;    // [1, dim] sinusoid features
    LinearCache<T> c1, c2;
    Tensor<T> h_pre;  // [1, dim] pre-SiLU hidden
};

template <typename T>
class TimestepEmbed {
public:
    TimestepEmbed() = default;
    explicit TimestepEmbed(i64 dim);

    void init(Rng& rng);
    Tensor<T> forward(T t, TimestepCache<T>* cache) const;  // [dim]
    void backward(const Tensor<T>& dy, const TimestepCache<T>& cache);
    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    i64 dim = 0;
    Linear<T> fc1, fc2;
};

// ---------------------------------------------------------------------------
// adaptive layernorm modulation
// ---------------------------------------------------------------------------

template <typename T>
struct ModulateCache {
    LayerNormCache<T> ln;
    Tensor<T> scale;  // [D]
};

template <typename T>
struct ModulateGrads {
    Tensor<T> dx;      // [L,D]
    Tensor<T> dshift;  // [D]
    Tensor<T> dscale;  // [D]
};

// layernorm(x) ⊙ (1 + scale) + shift with shift/scale broadcast over tokens.
template <typename T>
Tensor<T> adaln_modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale,
                         ModulateCache<T>* cache);

template <typename T>
ModulateGrads<T> adaln_modulate_backward(const Tensor<T>& dy, const ModulateCache<T>& cache);

// ---------------------------------------------------------------------------
// feed-forward sublayer
// ---------------------------------------------------------------------------

template <typename T>
struct FfnCache {
    LinearCache<T> c1, c2;
    Tensor<T> h_pre;  // [L, hidden] pre-GELU
};

template <typename T>
class Ffn {
public:
    Ffn() = default;
    Ffn(i64 d, i64 hidden);

    void init(Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, FfnCache<T>* cache) const;
    Tensor<T> backward(const Tensor<T>& dy, const FfnCache<T>& cache);
    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    Linear<T> fc1, fc2;
};

// ---------------------------------------------------------------------------
// the block
// ---------------------------------------------------------------------------

template <typename T>
struct BlockCache {
    Tensor<T> t_row;   // [1, cond_dim]
    Tensor<T> t_silu;  // [1, cond_dim]
    LinearCache<T> ada_cache;
    Tensor<T> mods;    // [1, 9D]
    ModulateCache<T> mod1, mod2, mod3;
    ssm::MambaCache<T> self_cache, cross_cache;
    FfnCache<T> ffn_cache;
    Tensor<T> self_out, cross_out, ffn_out;  // [L,D] sublayer outputs pre-gate
};

// Three pre-norm residual sublayers, each gated by the timestep conditioning:
// x += g1 ⊙ SelfMamba(mod1(x)); x += g2 ⊙ CrossMamba(mod2(x), s_m);
// x += g3 ⊙ Ffn(mod3(x)). Gates are zero at init so the block starts as the
// identity map.
template <typename T>
class SismaBlock {
public:
    struct Grads {
        Tensor<T> dx;
        Tensor<T> ds_m;
        Tensor<T> dt_emb;
    };

    SismaBlock() = default;
    SismaBlock(std::string block_name, i64 d_model, i64 cond_dim, i64 expansion, i64 state_dim,
               i64 conv_width);

    void init(Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& s_m, const Tensor<T>& t_emb,
                      BlockCache<T>* cache) const;
    Grads backward(const Tensor<T>& dy, const BlockCache<T>& cache);
    void register_params(ParamRegistry<T>& reg, const std::string& prefix);

    std::string name;
    i64 d_model = 0, cond_dim = 0;
    ssm::SelfMamba<T> self_m;
    ssm::CrossMamba<T> cross_m;
    Ffn<T> ffn;
    Linear<T> adaln;  // cond_dim -> 9D, zero-initialized
};

} // namespace sisma::nn
