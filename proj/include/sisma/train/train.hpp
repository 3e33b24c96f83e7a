// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sisma/core/tensor.hpp"
#include "sisma/data/data.hpp"
#include "sisma/model/checkpoint.hpp"
#include "sisma/model/model.hpp"
#include "sisma/nn/params.hpp"

namespace sisma::train {

// Stream tags for the per-(step, sample) training draws; a resumed run
// rebuilds the same streams, so no draw is ever replayed or skipped.
inline constexpr u64 kTrainNoiseTag = 0x6e6f697365ULL;
inline constexpr u64 kTrainTimeTag = 0x7464726177ULL;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

// Flat key=value config; key names match the field names exactly.
struct TrainConfig {
    std::string preset = "desk";  // model preset; "desk" or "full"
    i64 model_hidden = 0;         // nonzero overrides the preset value
    i64 model_depth = 0;
    i64 model_state_dim = 0;
    i64 model_expansion = 0;

    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global-norm ceiling; <= 0 disables
    i64 batch_size = 32;
    i64 total_iters = 20000;
    double ema_decay = 0.9999;
    i64 checkpoint_every = 1000;
    i64 sample_every = 0;  // 0 = no periodic sample dumps
    u64 seed = 0;
    std::string out_dir = "out";
    std::string resume;  // checkpoint path; empty = fresh start

    std::string data_dir;  // folder layout; empty = synthetic shapes
    i64 data_n = 5000;
    i64 data_size = 32;
    u64 data_seed = 1;

    // Desk-scale recipe: the defaults above.
    static TrainConfig desk();
    // Published recipe: lr 0.004, no weight decay, batch 8, 150k iterations.
    static TrainConfig full();

    // Parses key = value lines ('#' starts a comment). Unknown keys and
    // malformed values raise ConfigError naming the offender.
    static TrainConfig parse_file(const std::string& path);
    static TrainConfig parse_string(const std::string& text);

    // Applies one key = value assignment; ConfigError on unknown key.
    void apply_key(const std::string& key, const std::string& value);

    void validate() const;
    model::ModelConfig model_config() const;
    // Resolved key = value echo, one field per line, parse round-trippable.
    std::string to_string() const;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// Decoupled weight decay Adam. Moments are always f64 so training curves
// reproduce bitwise across checkpoint round trips.
template <typename T>
class AdamW {
public:
    AdamW() = default;
    AdamW(double lr, double beta1, double beta2, double eps, double weight_decay);

    void init(const nn::ParamRegistry<T>& reg);
    // One update from the accumulated gradients.
    void step(const nn::ParamRegistry<T>& reg);

    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
    i64 t = 0;
    std::vector<Tensor<double>> m, v;  // first/second moments, registry order
};

// Scales all gradients to global norm `max_norm` when they exceed it.
// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const nn::ParamRegistry<T>& reg, double max_norm);

// ---------------------------------------------------------------------------
// the loop
// ---------------------------------------------------------------------------

template <typename T>
struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
    bool clipped = false;
    std::vector<std::string> zero_grad_groups;  // filled only when requested
};

// One optimization step on one batch: per-sample noise and time draws are
// keyed by (seed, step, sample) so a resumed run replays them exactly.
// Throws NumericError with a diagnostic dump on non-finite loss.
template <typename T>
StepStats<T> train_step(model::Model<T>& net, nn::ParamRegistry<T>& reg, AdamW<T>& opt,
                        model::EmaState<T>& ema, double ema_decay,
                        const std::vector<const data::ShapesSample<T>*>& batch, double grad_clip,
                        u64 seed, i64 step, bool report_zero_grads = false);

// Full run: dataset, model, optimizer, EMA, periodic checkpoints, per-step
// key=value log lines. Returns the final checkpoint path.
template <typename T>
std::string run_training(const TrainConfig& cfg, std::ostream& log);

// Samples one latent from the EMA weights (the trained weights stay
// untouched); used for sample dumps and the sampling CLI.
template <typename T>
Tensor<T> sample_with_ema(const model::ModelConfig& mcfg, const model::EmaState<T>& ema,
                          const Tensor<T>& mask_onehot, i64 steps, u64 seed);

// Composes the full training state into a checkpoint.
template <typename T>
model::Checkpoint make_train_checkpoint(const model::ModelConfig& mcfg,
                                        const nn::ParamRegistry<T>& reg,
                                        const model::EmaState<T>& ema, const AdamW<T>& opt,
                                        i64 step);

// Restores weights, EMA, and moments in place. Fingerprint mismatch raises
// ConfigError; missing entries raise IntegrityError.
template <typename T>
i64 load_train_checkpoint(const model::Checkpoint& ckpt, const model::ModelConfig& mcfg,
                          const nn::ParamRegistry<T>& reg, model::EmaState<T>& ema, AdamW<T>& opt);

// Rebuilds the model configuration from the model_config entry that
// make_train_checkpoint stores, so a checkpoint file is enough to sample
// from. Missing entry or fingerprint disagreement raises IntegrityError.
model::ModelConfig config_from_checkpoint(const model::Checkpoint& ckpt);

} // namespace sisma::train
