// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sisma/core/rng.hpp"
#include "sisma/core/tensor.hpp"
#include "sisma/nn/blocks.hpp"
#include "sisma/nn/linear.hpp"
#include "sisma/nn/params.hpp"

namespace sisma::model {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    i64 image_size = 32;
    i64 latent_channels = 3;
    i64 scale_factor = 1;  // latent = image_size / scale_factor per side
    i64 patch_size = 2;
    i64 hidden = 128;
    i64 depth = 6;
    i64 state_dim = 16;
    i64 expansion = 2;
    i64 conv_width = 4;
    i64 mask_classes = 4;
    i64 timestep_embed_dim = 128;

    // 32x32 pixel-space preset trainable on one desktop core.
    static ModelConfig desk();
    // Published-scale preset (256px faces, 19 classes); built for parameter
    // counting and shape checks, not for training here.
    static ModelConfig full();

    i64 latent_hw() const { return image_size / scale_factor; }
    i64 token_count() const {
        const i64 side = latent_hw() / patch_size;
        return side * side;
    }

    // Throws ValidationError listing every violated constraint at once.
    void validate() const;

    // Stable hash of all fields; stored in checkpoints and rechecked on
    // resume so weights never load into a structurally different net.
    u64 fingerprint() const;
};

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

template <typename T>
struct ModelCache {
    nn::LinearCache<T> patch_cache;
    nn::MaskEncodeCache<T> mask_cache;
    nn::TimestepCache<T> t_cache;
    Tensor<T> t_emb;  // [cond_dim]
    Tensor<T> s_m;    // [L, D] shared mask tokens
    std::vector<nn::BlockCache<T>> block_caches;
    Tensor<T> t_row, t_silu;  // [1, cond_dim] final-layer conditioning
    nn::LinearCache<T> final_ada_cache;
    nn::ModulateCache<T> final_mod_cache;
    nn::LinearCache<T> head_cache;
};

// Zero-init switch: Standard starts the velocity head and all block gates at
// zero (identity flow at init); GradcheckRandom perturbs those zero groups so
// finite-difference probes see nonzero gradients everywhere.
enum class InitMode { Standard, GradcheckRandom };

// Velocity network: patchify -> depth x (self scan, mask-conditioned cross
// scan, feed-forward) -> modulated head -> depatchify. The latent codec is
// the identity at scale_factor 1; a learned codec would sit in front of
// forward_velocity without touching this class.
template <typename T>
class Model {
public:
    Model() = default;
    explicit Model(const ModelConfig& config);

    void init(u64 seed, InitMode mode = InitMode::Standard);

    // z: [c, h, w] latent; t in [0,1]; mask_onehot: [K, h, w].
    // Returns the predicted velocity with the latent's shape.
    Tensor<T> forward_velocity(const Tensor<T>& z, T t, const Tensor<T>& mask_onehot,
                               ModelCache<T>* cache) const;

    // Accumulates parameter gradients from d(loss)/d(velocity); returns
    // d(loss)/d(z).
    Tensor<T> backward(const Tensor<T>& dvel, const ModelCache<T>& cache);

    // Registers every parameter; pointers stay valid for the model's
    // lifetime (the model is fixed-topology and non-movable).
    void register_params(nn::ParamRegistry<T>& reg);

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = delete;
    Model& operator=(Model&&) = delete;

    ModelConfig cfg;
    nn::PatchGrid grid;
    nn::Linear<T> patch_proj;  // c*p^2 -> D
    nn::MaskEncoder<T> mask_enc;
    nn::TimestepEmbed<T> t_embed;
    std::vector<nn::SismaBlock<T>> blocks;
    nn::Linear<T> final_ada;  // cond_dim -> 2D (shift, scale), zero-init
    nn::Linear<T> head;       // D -> c*p^2, zero-init
};

template <typename T>
std::unique_ptr<Model<T>> build_model(const ModelConfig& config, u64 seed,
                                      InitMode mode = InitMode::Standard);

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

struct ParamReport {
    std::vector<std::pair<std::string, i64>> per_module;  // grouped by name root
    i64 total = 0;
    std::string to_string() const;
};

template <typename T>
ParamReport count_params(const nn::ParamRegistry<T>& reg);

// Closed-form total from the layer dimension formulas; lets the full-scale
// preset be reported without allocating its weights.
i64 analytic_param_count(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// exponential moving average
// ---------------------------------------------------------------------------

// Shadow copy of the weights, updated as ema <- decay*ema + (1-decay)*w.
template <typename T>
struct EmaState {
    std::vector<std::string> names;
    std::vector<Tensor<T>> values;

    static EmaState from_registry(const nn::ParamRegistry<T>& reg);
    // Writes the shadow weights back into the registry parameters.
    void copy_to_registry(const nn::ParamRegistry<T>& reg) const;
};

template <typename T>
void ema_update(EmaState<T>& ema, const nn::ParamRegistry<T>& reg, double decay);

} // namespace sisma::model
