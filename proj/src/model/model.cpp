// SPDX-License-Identifier: Apache-2.0
#include "sisma/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sisma/core/errors.hpp"
#include "sisma/nn/act.hpp"

namespace sisma::model {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
    ModelConfig c;
    c.image_size = 256;
    c.latent_channels = 4;
    c.scale_factor = 8;
    c.patch_size = 2;
    c.hidden = 1024;
    c.depth = 24;
    c.state_dim = 16;
    c.expansion = 2;
    c.conv_width = 4;
    c.mask_classes = 19;
    c.timestep_embed_dim = 1024;
    return c;
}

void ModelConfig::validate() const {
    std::vector<std::string> bad;
    auto positive = [&](const char* field, i64 v) {
        if (v < 1) bad.push_back(std::string(field) + "=" + std::to_string(v) + " must be >= 1");
    };
    positive("image_size", image_size);
    positive("latent_channels", latent_channels);
    positive("scale_factor", scale_factor);
    positive("patch_size", patch_size);
    positive("hidden", hidden);
    positive("depth", depth);
    positive("state_dim", state_dim);
    positive("expansion", expansion);
    positive("conv_width", conv_width);
    positive("mask_classes", mask_classes);
    positive("timestep_embed_dim", timestep_embed_dim);

    if (scale_factor >= 1 && image_size % scale_factor != 0)
        bad.push_back("image_size=" + std::to_string(image_size) + " not divisible by scale_factor=" +
                      std::to_string(scale_factor));
    if (scale_factor >= 1 && patch_size >= 1 && image_size % scale_factor == 0 &&
        latent_hw() % patch_size != 0)
        bad.push_back("latent side " + std::to_string(latent_hw()) +
                      " not divisible by patch_size=" + std::to_string(patch_size));
    if (timestep_embed_dim >= 1 && timestep_embed_dim % 2 != 0)
        bad.push_back("timestep_embed_dim=" + std::to_string(timestep_embed_dim) + " must be even");

    if (!bad.empty()) {
        std::string msg = "ModelConfig: ";
        for (std::size_t i = 0; i < bad.size(); ++i) {
            if (i) msg += "; ";
            msg += bad[i];
        }
        throw ValidationError(msg);
    }
}

u64 ModelConfig::fingerprint() const {
    std::ostringstream s;
    s << "image_size=" << image_size << ";latent_channels=" << latent_channels
      << ";scale_factor=" << scale_factor << ";patch_size=" << patch_size << ";hidden=" << hidden
      << ";depth=" << depth << ";state_dim=" << state_dim << ";expansion=" << expansion
      << ";conv_width=" << conv_width << ";mask_classes=" << mask_classes
      << ";timestep_embed_dim=" << timestep_embed_dim;
    const std::string str = s.str();
    return fnv1a64(str.data(), str.size());
}

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    grid = nn::PatchGrid{cfg.latent_channels, cfg.latent_hw(), cfg.latent_hw(), cfg.patch_size,
                         cfg.hidden};
    patch_proj = nn::Linear<T>(grid.patch_dim(), cfg.hidden, true);
    mask_enc = nn::MaskEncoder<T>("mask_encoder", cfg.mask_classes, grid);
    t_embed = nn::TimestepEmbed<T>(cfg.timestep_embed_dim);
    blocks.reserve(static_cast<std::size_t>(cfg.depth));
    for (i64 i = 0; i < cfg.depth; ++i)
        blocks.emplace_back("block" + std::to_string(i), cfg.hidden, cfg.timestep_embed_dim,
                            cfg.expansion, cfg.state_dim, cfg.conv_width);
    final_ada = nn::Linear<T>(cfg.timestep_embed_dim, 2 * cfg.hidden, true);
    head = nn::Linear<T>(cfg.hidden, grid.patch_dim(), true);
}

template <typename T>
void Model<T>::init(u64 seed, InitMode mode) {
    Rng rng(seed);
    patch_proj.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(patch_proj.in_dim)));
    mask_enc.init(rng);
    t_embed.init(rng);
    for (auto& b : blocks) b.init(rng);
    final_ada.zero_init();
    head.zero_init();
    if (mode == InitMode::GradcheckRandom) {
        for (auto& b : blocks) {
            b.adaln.init_normal(rng, 0.25);
            rng.fill_normal(b.adaln.b, 0.0, 0.25);
        }
        final_ada.init_normal(rng, 0.25);
        rng.fill_normal(final_ada.b, 0.0, 0.25);
        head.init_normal(rng, 1.0 / std::sqrt(static_cast<double>(head.in_dim)));
        rng.fill_normal(head.b, 0.0, 0.05);
    }
}

template <typename T>
Tensor<T> Model<T>::forward_velocity(const Tensor<T>& z, T t, const Tensor<T>& mask_onehot,
                                     ModelCache<T>* cache) const {
    ModelCache<T> local;
    ModelCache<T>& c = cache ? *cache : local;

    Tensor<T> x = nn::patchify(z, grid, patch_proj, &c.patch_cache);
    c.s_m = mask_enc.forward(mask_onehot, &c.mask_cache);
    c.t_emb = t_embed.forward(t, &c.t_cache);

    c.block_caches.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i)
        x = blocks[i].forward(x, c.s_m, c.t_emb, &c.block_caches[i]);

    c.t_row = Tensor<T>({1, cfg.timestep_embed_dim});
    for (i64 j = 0; j < cfg.timestep_embed_dim; ++j) c.t_row(0, j) = c.t_emb[j];
    c.t_silu = nn::silu(c.t_row);
    Tensor<T> mods = final_ada.forward(c.t_silu, &c.final_ada_cache);
    Tensor<T> shift({cfg.hidden}), scale({cfg.hidden});
    for (i64 j = 0; j < cfg.hidden; ++j) {
        shift[j] = mods(0, j);
        scale[j] = mods(0, cfg.hidden + j);
    }
    Tensor<T> y = nn::adaln_modulate(x, shift, scale, &c.final_mod_cache);
    Tensor<T> out_tokens = head.forward(y, &c.head_cache);
    Tensor<T> vel = nn::depatchify(out_tokens, grid);
    if (!vel.all_finite()) throw NumericError("model head: non-finite velocity output");
    return vel;
}

template <typename T>
Tensor<T> Model<T>::backward(const Tensor<T>& dvel, const ModelCache<T>& cache) {
    Tensor<T> dtokens = nn::flatten_patches(dvel, grid);
    Tensor<T> dy = head.backward(dtokens, cache.head_cache);
    nn::ModulateGrads<T> mg = nn::adaln_modulate_backward(dy, cache.final_mod_cache);

    Tensor<T> dmods({1, 2 * cfg.hidden});
    for (i64 j = 0; j < cfg.hidden; ++j) {
        dmods(0, j) = mg.dshift[j];
        dmods(0, cfg.hidden + j) = mg.dscale[j];
    }
    Tensor<T> dt_silu = final_ada.backward(dmods, cache.final_ada_cache);
    Tensor<T> dt_row = nn::silu_backward(cache.t_row, dt_silu);

    Tensor<T> dt_emb({cfg.timestep_embed_dim});
    for (i64 j = 0; j < cfg.timestep_embed_dim; ++j) dt_emb[j] = dt_row(0, j);

    Tensor<T> dx = mg.dx;
    Tensor<T> ds_m({grid.token_count(), cfg.hidden});
    for (std::size_t i = blocks.size(); i-- > 0;) {
        auto g = blocks[i].backward(dx, cache.block_caches[i]);
        dx = std::move(g.dx);
        for (i64 k = 0; k < ds_m.numel(); ++k) ds_m[k] += g.ds_m[k];
        for (i64 j = 0; j < cfg.timestep_embed_dim; ++j) dt_emb[j] += g.dt_emb[j];
    }

    mask_enc.backward(ds_m, cache.mask_cache);
    t_embed.backward(dt_emb, cache.t_cache);

    Tensor<T> dflat = patch_proj.backward(dx, cache.patch_cache);
    return nn::unflatten_patches(dflat, grid);
}

template <typename T>
void Model<T>::register_params(nn::ParamRegistry<T>& reg) {
    patch_proj.register_params(reg, "patch_proj");
    mask_enc.register_params(reg, "mask_encoder");
    t_embed.register_params(reg, "t_embed");
    for (auto& b : blocks) b.register_params(reg, b.name);
    final_ada.register_params(reg, "final_ada");
    head.register_params(reg, "head");
}

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelConfig& config, u64 seed, InitMode mode) {
    config.validate();
    auto m = std::make_unique<Model<T>>(config);
    m->init(seed, mode);
    return m;
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

std::string ParamReport::to_string() const {
    std::ostringstream s;
    for (const auto& [name, n] : per_module) s << name << " " << n << "\n";
    s << "total " << total << "\n";
    return s.str();
}

template <typename T>
ParamReport count_params(const nn::ParamRegistry<T>& reg) {
    ParamReport rep;
    for (const auto& e : reg.entries()) {
        const std::string root = e.name.substr(0, e.name.find('.'));
        auto it = std::find_if(rep.per_module.begin(), rep.per_module.end(),
                               [&](const auto& p) { return p.first == root; });
        if (it == rep.per_module.end())
            rep.per_module.emplace_back(root, e.value->numel());
        else
            it->second += e.value->numel();
        rep.total += e.value->numel();
    }
    return rep;
}

i64 analytic_param_count(const ModelConfig& cfg) {
    const i64 d = cfg.hidden;
    const i64 e = d * cfg.expansion;
    const i64 n = cfg.state_dim;
    const i64 w = cfg.conv_width;
    const i64 cond = cfg.timestep_embed_dim;
    const i64 pdim = cfg.latent_channels * cfg.patch_size * cfg.patch_size;
    const i64 dm = (d + cfg.patch_size * cfg.patch_size - 1) / (cfg.patch_size * cfg.patch_size);

    const i64 patch_proj = pdim * d + d;
    const i64 mask_enc = cfg.mask_classes * dm + (dm * cfg.patch_size * cfg.patch_size) * d + d;
    const i64 t_embed = 2 * (cond * cond + cond);

    auto mixer = [&](i64 selection_dim) {
        return (d * 2 * e + 2 * e) + (e * w + e) + selection_dim * n + e * n +
               (selection_dim * e + e) + e * n + e + (e * d + d);
    };
    const i64 ffn = d * 4 * d + 4 * d + 4 * d * d + d;
    const i64 adaln = cond * 9 * d + 9 * d;
    const i64 per_block = mixer(e) + mixer(d) + ffn + adaln;

    const i64 final_ada = cond * 2 * d + 2 * d;
    const i64 head = d * pdim + pdim;
    return patch_proj + mask_enc + t_embed + cfg.depth * per_block + final_ada + head;
}

// ---------------------------------------------------------------------------
// exponential moving average
// ---------------------------------------------------------------------------

template <typename T>
EmaState<T> EmaState<T>::from_registry(const nn::ParamRegistry<T>& reg) {
    EmaState<T> ema;
    ema.names.reserve(reg.entries().size());
    ema.values.reserve(reg.entries().size());
    for (const auto& e : reg.entries()) {
        ema.names.push_back(e.name);
        ema.values.push_back(*e.value);
    }
    return ema;
}

template <typename T>
void EmaState<T>::copy_to_registry(const nn::ParamRegistry<T>& reg) const {
    if (reg.entries().size() != names.size())
        throw ValidationError("EmaState: " + std::to_string(names.size()) + " entries vs registry " +
                              std::to_string(reg.entries().size()));
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto& e = reg.entries()[i];
        if (e.name != names[i])
            throw ValidationError("EmaState: entry " + names[i] + " does not match registry " +
                                  e.name);
        if (!e.value->same_shape(values[i]))
            throw ValidationError("EmaState: shape mismatch for " + names[i]);
        *e.value = values[i];
    }
}

template <typename T>
void ema_update(EmaState<T>& ema, const nn::ParamRegistry<T>& reg, double decay) {
    if (!(decay >= 0.0 && decay < 1.0))
        throw ValidationError("ema_update: decay=" + std::to_string(decay) + " outside [0,1)");
    if (reg.entries().size() != ema.names.size())
        throw ValidationError("ema_update: " + std::to_string(ema.names.size()) +
                              " entries vs registry " + std::to_string(reg.entries().size()));
    const T d = static_cast<T>(decay);
    const T one_minus = static_cast<T>(1.0 - decay);
    for (std::size_t i = 0; i < ema.names.size(); ++i) {
        const auto& e = reg.entries()[i];
        if (e.name != ema.names[i])
            throw ValidationError("ema_update: entry " + ema.names[i] + " does not match registry " +
                                  e.name);
        if (!e.value->same_shape(ema.values[i]))
            throw ValidationError("ema_update: shape mismatch for " + ema.names[i]);
        Tensor<T>& shadow = ema.values[i];
        for (i64 k = 0; k < shadow.numel(); ++k)
            shadow[k] = d * shadow[k] + one_minus * (*e.value)[k];
    }
}

// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_MODEL(T)                                                        \
    template class Model<T>;                                                              \
    template std::unique_ptr<Model<T>> build_model<T>(const ModelConfig&, u64, InitMode); \
    template ParamReport count_params<T>(const nn::ParamRegistry<T>&);                    \
    template struct EmaState<T>;                                                          \
    template void ema_update<T>(EmaState<T>&, const nn::ParamRegistry<T>&, double);

SISMA_INSTANTIATE_MODEL(float)
SISMA_INSTANTIATE_MODEL(double)

#undef SISMA_INSTANTIATE_MODEL

} // namespace sisma::model
