// SPDX-License-Identifier: Apache-2.0
#include "sisma/nn/blocks.hpp"

#include <cmath>
#include <utility>

#include "sisma/core/errors.hpp"
#include "sisma/nn/act.hpp"

namespace sisma::nn {

// ---------------------------------------------------------------------------
// patch geometry
// ---------------------------------------------------------------------------

void PatchGrid::validate() const {
    if (c < 1 || h < 1 || w < 1 || p < 1 || d < 1)
        throw ValidationError("PatchGrid: all dimensions must be >= 1");
    if (h % p != 0)
        throw ShapeError("PatchGrid: patch size " + std::to_string(p) + " does not divide height " +
                         std::to_string(h));
    if (w % p != 0)
        throw ShapeError("PatchGrid: patch size " + std::to_string(p) + " does not divide width " +
                         std::to_string(w));
}

template <typename T>
Tensor<T> flatten_patches(const Tensor<T>& latent, const PatchGrid& grid) {
    grid.validate();
    check_shape(latent, {grid.c, grid.h, grid.w}, "flatten_patches latent");
    const i64 tw = grid.tokens_w(), l = grid.token_count(), pd = grid.patch_dim(), p = grid.p;
    Tensor<T> rows({l, pd});
    for (i64 k = 0; k < l; ++k) {
        const i64 ti = k / tw, tj = k % tw;
        for (i64 ch = 0; ch < grid.c; ++ch)
            for (i64 pi = 0; pi < p; ++pi)
                for (i64 pj = 0; pj < p; ++pj)
                    rows(k, (ch * p + pi) * p + pj) = latent(ch, ti * p + pi, tj * p + pj);
    }
    return rows;
}

template <typename T>
Tensor<T> unflatten_patches(const Tensor<T>& rows, const PatchGrid& grid) {
    grid.validate();
    check_shape(rows, {grid.token_count(), grid.patch_dim()}, "unflatten_patches rows");
    const i64 tw = grid.tokens_w(), p = grid.p;
    Tensor<T> latent({grid.c, grid.h, grid.w});
    for (i64 k = 0; k < grid.token_count(); ++k) {
        const i64 ti = k / tw, tj = k % tw;
        for (i64 ch = 0; ch < grid.c; ++ch)
            for (i64 pi = 0; pi < p; ++pi)
                for (i64 pj = 0; pj < p; ++pj)
                    latent(ch, ti * p + pi, tj * p + pj) = rows(k, (ch * p + pi) * p + pj);
    }
    return latent;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& latent, const PatchGrid& grid, const Linear<T>& proj,
                   LinearCache<T>* cache) {
    if (proj.in_dim != grid.patch_dim() || proj.out_dim != grid.d)
        throw ShapeError("patchify projection: expected " + std::to_string(grid.patch_dim()) + " -> " +
                         std::to_string(grid.d) + ", got " + std::to_string(proj.in_dim) + " -> " +
                         std::to_string(proj.out_dim));
    return proj.forward(flatten_patches(latent, grid), cache);
}

template <typename T>
Tensor<T> depatchify(const Tensor<T>& tokens, const PatchGrid& grid) {
    return unflatten_patches(tokens, grid);
}

// ---------------------------------------------------------------------------
// mask encoding
// ---------------------------------------------------------------------------

template <typename T>
MaskEncoder<T>::MaskEncoder(std::string enc_name, i64 num_classes_, const PatchGrid& grid)
    : name(std::move(enc_name)), num_classes(num_classes_) {
    grid.validate();
    if (num_classes < 1)
        throw ValidationError(name + ": num_classes must be >= 1, got " + std::to_string(num_classes));
    embed_dim = (grid.d + grid.p * grid.p - 1) / (grid.p * grid.p);
    mask_grid = grid;
    mask_grid.c = embed_dim;
    class_table = Tensor<T>({num_classes, embed_dim});
    gclass_table = Tensor<T>({num_classes, embed_dim});
    proj = Linear<T>(embed_dim * grid.p * grid.p, grid.d, true);
}

template <typename T>
void MaskEncoder<T>::init(Rng& rng) {
    rng.fill_normal(class_table, 0.0, 1.0);
    proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(proj.in_dim)));
}

template <typename T>
Tensor<T> MaskEncoder<T>::forward(const Tensor<T>& mask_onehot, MaskEncodeCache<T>* cache) const {
    check_shape(mask_onehot, {num_classes, mask_grid.h, mask_grid.w}, "encode_mask mask_onehot");
    const i64 h = mask_grid.h, w = mask_grid.w;
    std::vector<i64> pixel_class(static_cast<std::size_t>(h * w));
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
            i64 ones = 0, cls = -1;
            for (i64 k = 0; k < num_classes; ++k) {
                const T v = mask_onehot(k, i, j);
                if (v == T(1)) {
                    ++ones;
                    cls = k;
                } else if (v != T(0)) {
                    throw ValidationError(name + ": pixel (" + std::to_string(i) + "," +
                                          std::to_string(j) + ") has non-one-hot value " +
                                          std::to_string(static_cast<double>(v)));
                }
            }
            if (ones != 1)
                throw ValidationError(name + ": pixel (" + std::to_string(i) + "," + std::to_string(j) +
                                      ") has " + std::to_string(ones) + " active classes");
            pixel_class[static_cast<std::size_t>(i * w + j)] = cls;
        }

    Tensor<T> emb({embed_dim, h, w});
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
            const i64 cls = pixel_class[static_cast<std::size_t>(i * w + j)];
            for (i64 d = 0; d < embed_dim; ++d) emb(d, i, j) = class_table(cls, d);
        }
    Tensor<T> rows = flatten_patches(emb, mask_grid);
    Tensor<T> out = proj.forward(rows, cache ? &cache->proj_cache : nullptr);
    if (cache) cache->pixel_class = std::move(pixel_class);
    return out;
}

template <typename T>
void MaskEncoder<T>::backward(const Tensor<T>& dy, const MaskEncodeCache<T>& cache) {
    Tensor<T> drows = proj.backward(dy, cache.proj_cache);
    Tensor<T> demb = unflatten_patches(drows, mask_grid);
    const i64 h = mask_grid.h, w = mask_grid.w;
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
            const i64 cls = cache.pixel_class[static_cast<std::size_t>(i * w + j)];
            for (i64 d = 0; d < embed_dim; ++d) gclass_table(cls, d) += demb(d, i, j);
        }
}

template <typename T>
void MaskEncoder<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".class_table", &class_table, &gclass_table);
    proj.register_params(reg, prefix + ".proj");
}

// ---------------------------------------------------------------------------
// timestep embedding
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sinusoid_embed(T t, i64 dim) {
    if (!(t >= T(0) && t <= T(1)))
        throw ValidationError("timestep_embed: t must be in [0,1], got " +
                              std::to_string(static_cast<double>(t)));
    if (dim < 2 || dim % 2 != 0)
        throw ValidationError("timestep_embed: dim must be even and >= 2, got " + std::to_string(dim));
    const i64 half = dim / 2;
    Tensor<T> out({dim});
    for (i64 j = 0; j < half; ++j) {
        const double freq =
            half == 1 ? 1.0 : std::pow(10000.0, static_cast<double>(j) / static_cast<double>(half - 1));
        const double arg = freq * static_cast<double>(t);
        out[j] = static_cast<T>(std::sin(arg));
        out[half + j] = static_cast<T>(std::cos(arg));
    }
    return out;
}

template <typename T>
TimestepEmbed<T>::TimestepEmbed(i64 dim_) : dim(dim_) {
    if (dim < 2 || dim % 2 != 0)
        throw ValidationError("TimestepEmbed: dim must be even and >= 2, got " + std::to_string(dim));
    fc1 = Linear<T>(dim, dim, true);
    fc2 = Linear<T>(dim, dim, true);
}

template <typename T>
void TimestepEmbed<T>::init(Rng& rng) {
    fc1.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(dim)));
    fc2.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(dim)));
}

template <typename T>
Tensor<T> TimestepEmbed<T>::forward(T t, TimestepCache<T>* cache) const {
    Tensor<T> sine = sinusoid_embed(t, dim);
    Tensor<T> pre({1, dim});
    for (i64 i = 0; i < dim; ++i) pre(0, i) = sine[i];

    TimestepCache<T> local;
    TimestepCache<T>& c = cache ? *cache : local;
    c.pre = pre;
    c.h_pre = fc1.forward(pre, &c.c1);
    Tensor<T> h = silu(c.h_pre);
    Tensor<T> out_row = fc2.forward(h, &c.c2);
    Tensor<T> out({dim});
    for (i64 i = 0; i < dim; ++i) out[i] = out_row(0, i);
    return out;
}

template <typename T>
void TimestepEmbed<T>::backward(const Tensor<T>& dy, const TimestepCache<T>& cache) {
    check_shape(dy, {dim}, "TimestepEmbed dy");
    Tensor<T> dy_row({1, dim});
    for (i64 i = 0; i < dim; ++i) dy_row(0, i) = dy[i];
    Tensor<T> dh = fc2.backward(dy_row, cache.c2);
    Tensor<T> dh_pre = silu_backward(cache.h_pre, dh);
    (void)fc1.backward(dh_pre, cache.c1);
}

template <typename T>
void TimestepEmbed<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
}

// ---------------------------------------------------------------------------
// adaptive layernorm modulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> adaln_modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale,
                         ModulateCache<T>* cache) {
    if (x.ndim() != 2) throw ShapeError("adaln_modulate x: expected rank 2, got " + x.shape_str());
    const i64 l = x.dim(0), d = x.dim(1);
    check_shape(shift, {d}, "adaln_modulate shift");
    check_shape(scale, {d}, "adaln_modulate scale");

    ModulateCache<T> local;
    ModulateCache<T>& c = cache ? *cache : local;
    Tensor<T> y = layernorm_forward(x, static_cast<T>(1e-6), &c.ln);
    for (i64 r = 0; r < l; ++r)
        for (i64 j = 0; j < d; ++j) y(r, j) = y(r, j) * (T(1) + scale[j]) + shift[j];
    if (cache) cache->scale = scale;
    return y;
}

template <typename T>
ModulateGrads<T> adaln_modulate_backward(const Tensor<T>& dy, const ModulateCache<T>& cache) {
    const i64 l = cache.ln.xhat.dim(0), d = cache.ln.xhat.dim(1);
    check_shape(dy, {l, d}, "adaln_modulate dy");
    ModulateGrads<T> g;
    g.dshift = Tensor<T>({d});
    g.dscale = Tensor<T>({d});
    Tensor<T> dxhat({l, d});
    for (i64 r = 0; r < l; ++r)
        for (i64 j = 0; j < d; ++j) {
            g.dshift[j] += dy(r, j);
            g.dscale[j] += dy(r, j) * cache.ln.xhat(r, j);
            dxhat(r, j) = dy(r, j) * (T(1) + cache.scale[j]);
        }
    g.dx = layernorm_backward(dxhat, cache.ln);
    return g;
}

// ---------------------------------------------------------------------------
// feed-forward sublayer
// ---------------------------------------------------------------------------

template <typename T>
Ffn<T>::Ffn(i64 d, i64 hidden) : fc1(d, hidden, true), fc2(hidden, d, true) {}

template <typename T>
void Ffn<T>::init(Rng& rng) {
    fc1.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(fc1.in_dim)));
    fc2.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(fc2.in_dim)));
}

template <typename T>
Tensor<T> Ffn<T>::forward(const Tensor<T>& x, FfnCache<T>* cache) const {
    FfnCache<T> local;
    FfnCache<T>& c = cache ? *cache : local;
    c.h_pre = fc1.forward(x, &c.c1);
    Tensor<T> h = gelu(c.h_pre);
    return fc2.forward(h, &c.c2);
}

template <typename T>
Tensor<T> Ffn<T>::backward(const Tensor<T>& dy, const FfnCache<T>& cache) {
    Tensor<T> dh = fc2.backward(dy, cache.c2);
    Tensor<T> dh_pre = gelu_backward(cache.h_pre, dh);
    return fc1.backward(dh_pre, cache.c1);
}

template <typename T>
void Ffn<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    fc1.register_params(reg, prefix + ".fc1");
    fc2.register_params(reg, prefix + ".fc2");
}

// ---------------------------------------------------------------------------
// the block
// ---------------------------------------------------------------------------

namespace {

// y += gate ⊙ sub broadcast over tokens.
template <typename T>
void add_gated(Tensor<T>& y, const Tensor<T>& gate_row, i64 offset, const Tensor<T>& sub) {
    const i64 l = sub.dim(0), d = sub.dim(1);
    for (i64 r = 0; r < l; ++r)
        for (i64 j = 0; j < d; ++j) y(r, j) += gate_row(0, offset + j) * sub(r, j);
}

template <typename T>
Tensor<T> slice_row(const Tensor<T>& row, i64 offset, i64 d) {
    Tensor<T> out({d});
    for (i64 j = 0; j < d; ++j) out[j] = row(0, offset + j);
    return out;
}

} // namespace

template <typename T>
SismaBlock<T>::SismaBlock(std::string block_name, i64 d_model_, i64 cond_dim_, i64 expansion,
                          i64 state_dim, i64 conv_width)
    : name(std::move(block_name)),
      d_model(d_model_),
      cond_dim(cond_dim_),
      self_m(name + ".self_mamba", d_model_, expansion, state_dim, conv_width),
      cross_m(name + ".cross_mamba", d_model_, expansion, state_dim, conv_width),
      ffn(d_model_, 4 * d_model_),
      adaln(cond_dim_, 9 * d_model_, true) {}

template <typename T>
void SismaBlock<T>::init(Rng& rng) {
    self_m.init(rng);
    cross_m.init(rng);
    ffn.init(rng);
    adaln.zero_init();
}

template <typename T>
Tensor<T> SismaBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& s_m, const Tensor<T>& t_emb,
                                 BlockCache<T>* cache) const {
    if (x.ndim() != 2 || x.dim(1) != d_model)
        throw ShapeError(name + " x: expected [L x " + std::to_string(d_model) + "], got " +
                         x.shape_str());
    check_shape(t_emb, {cond_dim}, "block t_emb");

    BlockCache<T> local;
    BlockCache<T>& c = cache ? *cache : local;
    c.t_row = Tensor<T>({1, cond_dim});
    for (i64 i = 0; i < cond_dim; ++i) c.t_row(0, i) = t_emb[i];
    c.t_silu = silu(c.t_row);
    c.mods = adaln.forward(c.t_silu, &c.ada_cache);

    const i64 d = d_model;
    Tensor<T> h1 = adaln_modulate(x, slice_row(c.mods, 0 * d, d), slice_row(c.mods, 1 * d, d), &c.mod1);
    c.self_out = self_m.forward(h1, &c.self_cache);
    Tensor<T> x1 = x;
    add_gated(x1, c.mods, 2 * d, c.self_out);

    Tensor<T> h2 =
        adaln_modulate(x1, slice_row(c.mods, 3 * d, d), slice_row(c.mods, 4 * d, d), &c.mod2);
    c.cross_out = cross_m.forward(h2, s_m, &c.cross_cache);
    Tensor<T> x2 = x1;
    add_gated(x2, c.mods, 5 * d, c.cross_out);

    Tensor<T> h3 =
        adaln_modulate(x2, slice_row(c.mods, 6 * d, d), slice_row(c.mods, 7 * d, d), &c.mod3);
    c.ffn_out = ffn.forward(h3, &c.ffn_cache);
    Tensor<T> out = x2;
    add_gated(out, c.mods, 8 * d, c.ffn_out);
    return out;
}

template <typename T>
typename SismaBlock<T>::Grads SismaBlock<T>::backward(const Tensor<T>& dy, const BlockCache<T>& cache) {
    const i64 l = dy.dim(0), d = d_model;
    check_shape(dy, {l, d}, "block dy");
    Tensor<T> dmods({1, 9 * d});

    // One sublayer in reverse: dy_out = d(residual) flows both straight
    // through and into gate ⊙ sub(mod(x)).
    auto backward_sublayer = [&](const Tensor<T>& dout, const Tensor<T>& sub_out, i64 gate_offset,
                                 auto&& sub_backward, const ModulateCache<T>& mc, i64 mod_offset) {
        Tensor<T> dsub({l, d});
        for (i64 r = 0; r < l; ++r)
            for (i64 j = 0; j < d; ++j) {
                dsub(r, j) = dout(r, j) * cache.mods(0, gate_offset + j);
                dmods(0, gate_offset + j) += dout(r, j) * sub_out(r, j);
            }
        Tensor<T> dh = sub_backward(dsub);
        ModulateGrads<T> mg = adaln_modulate_backward(dh, mc);
        for (i64 j = 0; j < d; ++j) {
            dmods(0, mod_offset + j) += mg.dshift[j];
            dmods(0, mod_offset + d + j) += mg.dscale[j];
        }
        Tensor<T> dx = dout;
        for (i64 i = 0; i < dx.numel(); ++i) dx[i] += mg.dx[i];
        return dx;
    };

    Tensor<T> ds_m;
    Tensor<T> dx2 = backward_sublayer(
        dy, cache.ffn_out, 8 * d, [&](const Tensor<T>& g) { return ffn.backward(g, cache.ffn_cache); },
        cache.mod3, 6 * d);
    Tensor<T> dx1 = backward_sublayer(
        dx2, cache.cross_out, 5 * d,
        [&](const Tensor<T>& g) {
            ssm::CrossGrads<T> cg = cross_m.backward(g, cache.cross_cache);
            ds_m = std::move(cg.ds_m);
            return std::move(cg.dx);
        },
        cache.mod2, 3 * d);
    Tensor<T> dx = backward_sublayer(
        dx1, cache.self_out, 2 * d,
        [&](const Tensor<T>& g) { return self_m.backward(g, cache.self_cache); }, cache.mod1, 0);

    Tensor<T> dt_silu = adaln.backward(dmods, cache.ada_cache);
    Tensor<T> dt_row = silu_backward(cache.t_row, dt_silu);
    Grads out;
    out.dx = std::move(dx);
    out.ds_m = std::move(ds_m);
    out.dt_emb = Tensor<T>({cond_dim});
    for (i64 i = 0; i < cond_dim; ++i) out.dt_emb[i] = dt_row(0, i);
    return out;
}

template <typename T>
void SismaBlock<T>::register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    self_m.register_params(reg, prefix + ".self_mamba");
    cross_m.register_params(reg, prefix + ".cross_mamba");
    ffn.register_params(reg, prefix + ".ffn");
    adaln.register_params(reg, prefix + ".adaln");
}

// ---------------------------------------------------------------------------
// instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_BLOCKS(T)                                                                  \
    template Tensor<T> flatten_patches<T>(const Tensor<T>&, const PatchGrid&);                       \
    template Tensor<T> unflatten_patches<T>(const Tensor<T>&, const PatchGrid&);                     \
    template Tensor<T> patchify<T>(const Tensor<T>&, const PatchGrid&, const Linear<T>&,             \
                                   LinearCache<T>*);                                                 \
    template Tensor<T> depatchify<T>(const Tensor<T>&, const PatchGrid&);                            \
    template class MaskEncoder<T>;                                                                   \
    template Tensor<T> sinusoid_embed<T>(T, i64);                                                    \
    template class TimestepEmbed<T>;                                                                 \
    template Tensor<T> adaln_modulate<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                         ModulateCache<T>*);                                         \
    template ModulateGrads<T> adaln_modulate_backward<T>(const Tensor<T>&, const ModulateCache<T>&); \
    template class Ffn<T>;                                                                           \
    template class SismaBlock<T>;

SISMA_INSTANTIATE_BLOCKS(float)
SISMA_INSTANTIATE_BLOCKS(double)

#undef SISMA_INSTANTIATE_BLOCKS

} // namespace sisma::nn
