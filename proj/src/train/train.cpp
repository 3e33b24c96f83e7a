// SPDX-License-Identifier: Apache-2.0
#include "sisma/train/train.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "sisma/core/errors.hpp"
#include "sisma/core/rng.hpp"
#include "sisma/data/png_io.hpp"
#include "sisma/flow/flow.hpp"
#include "sisma/model/checkpoint.hpp"

namespace sisma::train {

namespace {

// Shortest decimal form that parses back to the same double.
std::string fmt_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

i64 parse_i64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const i64 v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": cannot parse '" + value + "' as an integer");
    }
}

u64 parse_u64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const u64 v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": cannot parse '" + value +
                          "' as a nonnegative integer");
    }
}

double parse_f64_value(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": cannot parse '" + value + "' as a number");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::full() {
    TrainConfig c;
    c.preset = "full";
    c.lr = 0.004;
    c.weight_decay = 0.0;
    c.batch_size = 8;
    c.total_iters = 150000;
    c.ema_decay = 0.9999;
    c.data_size = 256;
    return c;
}

void TrainConfig::apply_key(const std::string& key, const std::string& value) {
    if (key == "preset") preset = value;
    else if (key == "model_hidden") model_hidden = parse_i64_value(key, value);
    else if (key == "model_depth") model_depth = parse_i64_value(key, value);
    else if (key == "model_state_dim") model_state_dim = parse_i64_value(key, value);
    else if (key == "model_expansion") model_expansion = parse_i64_value(key, value);
    else if (key == "lr") lr = parse_f64_value(key, value);
    else if (key == "weight_decay") weight_decay = parse_f64_value(key, value);
    else if (key == "beta1") beta1 = parse_f64_value(key, value);
    else if (key == "beta2") beta2 = parse_f64_value(key, value);
    else if (key == "adam_eps") adam_eps = parse_f64_value(key, value);
    else if (key == "grad_clip") grad_clip = parse_f64_value(key, value);
    else if (key == "batch_size") batch_size = parse_i64_value(key, value);
    else if (key == "total_iters") total_iters = parse_i64_value(key, value);
    else if (key == "ema_decay") ema_decay = parse_f64_value(key, value);
    else if (key == "checkpoint_every") checkpoint_every = parse_i64_value(key, value);
    else if (key == "sample_every") sample_every = parse_i64_value(key, value);
    else if (key == "seed") seed = parse_u64_value(key, value);
    else if (key == "out_dir") out_dir = value;
    else if (key == "resume") resume = value;
    else if (key == "data_dir") data_dir = value;
    else if (key == "data_n") data_n = parse_i64_value(key, value);
    else if (key == "data_size") data_size = parse_i64_value(key, value);
    else if (key == "data_seed") data_seed = parse_u64_value(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::parse_string(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    i64 lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        try {
            cfg.apply_key(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
}

void TrainConfig::validate() const {
    std::vector<std::string> bad;
    if (preset != "desk" && preset != "full")
        bad.push_back("preset='" + preset + "' must be 'desk' or 'full'");
    if (!(lr > 0)) bad.push_back("lr=" + fmt_double(lr) + " must be > 0");
    if (!(weight_decay >= 0))
        bad.push_back("weight_decay=" + fmt_double(weight_decay) + " must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1))
        bad.push_back("beta1=" + fmt_double(beta1) + " must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1))
        bad.push_back("beta2=" + fmt_double(beta2) + " must be in [0, 1)");
    if (!(adam_eps > 0)) bad.push_back("adam_eps=" + fmt_double(adam_eps) + " must be > 0");
    if (batch_size < 1) bad.push_back("batch_size=" + std::to_string(batch_size) + " must be >= 1");
    if (total_iters < 1)
        bad.push_back("total_iters=" + std::to_string(total_iters) + " must be >= 1");
    if (!(ema_decay >= 0 && ema_decay < 1))
        bad.push_back("ema_decay=" + fmt_double(ema_decay) + " must be in [0, 1)");
    if (checkpoint_every < 0)
        bad.push_back("checkpoint_every=" + std::to_string(checkpoint_every) + " must be >= 0");
    if (sample_every < 0)
        bad.push_back("sample_every=" + std::to_string(sample_every) + " must be >= 0");
    if (out_dir.empty()) bad.push_back("out_dir must not be empty");
    if (data_dir.empty() && data_n < 1)
        bad.push_back("data_n=" + std::to_string(data_n) + " must be >= 1");
    if (data_size < 16) bad.push_back("data_size=" + std::to_string(data_size) + " must be >= 16");
    for (const auto& [k, v] : {std::pair<const char*, i64>{"model_hidden", model_hidden},
                               {"model_depth", model_depth},
                               {"model_state_dim", model_state_dim},
                               {"model_expansion", model_expansion}})
        if (v < 0) bad.push_back(std::string(k) + "=" + std::to_string(v) + " must be >= 0");
    if (!bad.empty()) {
        std::string msg = "invalid training config: ";
        for (std::size_t i = 0; i < bad.size(); ++i) {
            if (i) msg += "; ";
            msg += bad[i];
        }
        throw ConfigError(msg);
    }
}

model::ModelConfig TrainConfig::model_config() const {
    model::ModelConfig mc = preset == "full" ? model::ModelConfig::full() : model::ModelConfig::desk();
    mc.image_size = data_size;
    if (model_hidden > 0) mc.hidden = model_hidden;
    if (model_depth > 0) mc.depth = model_depth;
    if (model_state_dim > 0) mc.state_dim = model_state_dim;
    if (model_expansion > 0) mc.expansion = model_expansion;
    mc.validate();
    return mc;
}

std::string TrainConfig::to_string() const {
    std::ostringstream out;
    out << "preset = " << preset << "\n";
    out << "model_hidden = " << model_hidden << "\n";
    out << "model_depth = " << model_depth << "\n";
    out << "model_state_dim = " << model_state_dim << "\n";
    out << "model_expansion = " << model_expansion << "\n";
    out << "lr = " << fmt_double(lr) << "\n";
    out << "weight_decay = " << fmt_double(weight_decay) << "\n";
    out << "beta1 = " << fmt_double(beta1) << "\n";
    out << "beta2 = " << fmt_double(beta2) << "\n";
    out << "adam_eps = " << fmt_double(adam_eps) << "\n";
    out << "grad_clip = " << fmt_double(grad_clip) << "\n";
    out << "batch_size = " << batch_size << "\n";
    out << "total_iters = " << total_iters << "\n";
    out << "ema_decay = " << fmt_double(ema_decay) << "\n";
    out << "checkpoint_every = " << checkpoint_every << "\n";
    out << "sample_every = " << sample_every << "\n";
    out << "seed = " << seed << "\n";
    out << "out_dir = " << out_dir << "\n";
    out << "resume = " << resume << "\n";
    out << "data_dir = " << data_dir << "\n";
    out << "data_n = " << data_n << "\n";
    out << "data_size = " << data_size << "\n";
    out << "data_seed = " << data_seed << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(double lr_, double beta1_, double beta2_, double eps_, double weight_decay_)
    : lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_), weight_decay(weight_decay_) {}

template <typename T>
void AdamW<T>::init(const nn::ParamRegistry<T>& reg) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& e : reg.entries()) {
        m.emplace_back(e.value->shape());
        v.emplace_back(e.value->shape());
    }
}

template <typename T>
void AdamW<T>::step(const nn::ParamRegistry<T>& reg) {
    const auto& entries = reg.entries();
    if (entries.size() != m.size())
        throw ValidationError("AdamW::step: optimizer holds " + std::to_string(m.size()) +
                              " moment tensors but the registry has " +
                              std::to_string(entries.size()) + " parameters; call init first");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor<T>& p = *entries[i].value;
        const Tensor<T>& g = *entries[i].grad;
        Tensor<double>& mi = m[i];
        Tensor<double>& vi = v[i];
        for (i64 j = 0; j < p.numel(); ++j) {
            const double gj = static_cast<double>(g[j]);
            mi[j] = beta1 * mi[j] + (1.0 - beta1) * gj;
            vi[j] = beta2 * vi[j] + (1.0 - beta2) * gj * gj;
            const double mhat = mi[j] / c1;
            const double vhat = vi[j] / c2;
            const double pj = static_cast<double>(p[j]);
            p[j] = static_cast<T>(pj - lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pj));
        }
    }
}

template <typename T>
double clip_grad_norm(const nn::ParamRegistry<T>& reg, double max_norm) {
    double sq = 0.0;
    for (const auto& e : reg.entries())
        for (i64 j = 0; j < e.grad->numel(); ++j) {
            const double g = static_cast<double>((*e.grad)[j]);
            sq += g * g;
        }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm && norm > 0) {
        const T scale = static_cast<T>(max_norm / norm);
        for (const auto& e : reg.entries())
            for (i64 j = 0; j < e.grad->numel(); ++j) (*e.grad)[j] *= scale;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// one step
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::string grad_norm_dump(const nn::ParamRegistry<T>& reg) {
    std::ostringstream out;
    bool first = true;
    for (const auto& e : reg.entries()) {
        double sq = 0.0;
        for (i64 j = 0; j < e.grad->numel(); ++j) {
            const double g = static_cast<double>((*e.grad)[j]);
            sq += g * g;
        }
        if (!first) out << " ";
        first = false;
        out << e.name << "=" << fmt_double(std::sqrt(sq));
    }
    return out.str();
}

std::string time_dump(const std::vector<double>& ts) {
    std::ostringstream out;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (i) out << ",";
        out << fmt_double(ts[i]);
    }
    return out.str();
}

} // namespace

template <typename T>
StepStats<T> train_step(model::Model<T>& net, nn::ParamRegistry<T>& reg, AdamW<T>& opt,
                        model::EmaState<T>& ema, double ema_decay,
                        const std::vector<const data::ShapesSample<T>*>& batch, double grad_clip,
                        u64 seed, i64 step, bool report_zero_grads) {
    if (batch.empty()) throw ValidationError("train_step: empty batch");
    const i64 bsz = static_cast<i64>(batch.size());
    reg.zero_grads();

    StepStats<T> stats;
    double loss_sum = 0.0;
    std::vector<double> ts;
    ts.reserve(batch.size());
    model::ModelCache<T> cache;
    for (i64 i = 0; i < bsz; ++i) {
        const data::ShapesSample<T>& sample = *batch[static_cast<std::size_t>(i)];
        Rng rt = Rng::stream(seed, {kTrainTimeTag, static_cast<u64>(step), static_cast<u64>(i)});
        const T t = static_cast<T>(rt.uniform());
        ts.push_back(static_cast<double>(t));
        Rng re = Rng::stream(seed, {kTrainNoiseTag, static_cast<u64>(step), static_cast<u64>(i)});
        Tensor<T> eps(sample.image.shape());
        re.fill_normal(eps, 0.0, 1.0);

        const Tensor<T> z = flow::interpolate(sample.image, eps, t);
        const Tensor<T> onehot = data::one_hot<T>(sample.mask);
        try {
            const Tensor<T> vel = net.forward_velocity(z, t, onehot, &cache);
            loss_sum += static_cast<double>(flow::fm_loss(vel, sample.image, eps));
            Tensor<T> dvel = flow::fm_loss_backward(vel, sample.image, eps);
            const T inv_b = static_cast<T>(1.0 / static_cast<double>(bsz));
            for (i64 j = 0; j < dvel.numel(); ++j) dvel[j] *= inv_b;
            net.backward(dvel, cache);
        } catch (const NumericError& e) {
            throw NumericError("train_step aborted: " + std::string(e.what()) + "; step=" +
                               std::to_string(step) + " sample=" + std::to_string(i) +
                               " t_values=[" + time_dump(ts) + "] grad_norms{" +
                               grad_norm_dump(reg) + "}");
        }
    }
    stats.loss = loss_sum / static_cast<double>(bsz);
    if (!std::isfinite(stats.loss))
        throw NumericError("train_step aborted: non-finite loss " + fmt_double(stats.loss) +
                           "; step=" + std::to_string(step) + " t_values=[" + time_dump(ts) +
                           "] grad_norms{" + grad_norm_dump(reg) + "}");

    stats.grad_norm = clip_grad_norm(reg, grad_clip);
    stats.clipped = grad_clip > 0 && stats.grad_norm > grad_clip;
    if (!std::isfinite(stats.grad_norm))
        throw NumericError("train_step aborted: non-finite gradient norm; step=" +
                           std::to_string(step) + " t_values=[" + time_dump(ts) + "] grad_norms{" +
                           grad_norm_dump(reg) + "}");

    if (report_zero_grads) {
        for (const auto& e : reg.entries()) {
            bool all_zero = true;
            for (i64 j = 0; j < e.grad->numel() && all_zero; ++j)
                if ((*e.grad)[j] != T(0)) all_zero = false;
            if (all_zero) stats.zero_grad_groups.push_back(e.name);
        }
    }

    opt.step(reg);
    model::ema_update(ema, reg, ema_decay);
    return stats;
}

// ---------------------------------------------------------------------------
// checkpoint composition
// ---------------------------------------------------------------------------

namespace {

template <typename T>
constexpr model::EntryDtype dtype_of() {
    return std::is_same_v<T, float> ? model::EntryDtype::F32 : model::EntryDtype::F64;
}

template <typename T>
model::CkptEntry tensor_entry(const std::string& name, const Tensor<T>& t) {
    model::CkptEntry e;
    e.name = name;
    e.dtype = dtype_of<T>();
    e.shape = t.shape();
    e.data.resize(static_cast<std::size_t>(t.numel()));
    for (i64 j = 0; j < t.numel(); ++j) e.data[static_cast<std::size_t>(j)] =
        static_cast<double>(t[j]);
    return e;
}

template <typename T>
void entry_into_tensor(const model::CkptEntry& e, Tensor<T>& t) {
    for (i64 j = 0; j < t.numel(); ++j) t[j] = static_cast<T>(e.data[static_cast<std::size_t>(j)]);
}

// Field list shared by the writer and the reader so their order cannot drift.
std::array<i64*, 11> config_fields(model::ModelConfig& mc) {
    return {&mc.image_size, &mc.latent_channels, &mc.scale_factor,  &mc.patch_size,
            &mc.hidden,     &mc.depth,           &mc.state_dim,     &mc.expansion,
            &mc.conv_width, &mc.mask_classes,    &mc.timestep_embed_dim};
}

} // namespace

template <typename T>
model::Checkpoint make_train_checkpoint(const model::ModelConfig& mcfg,
                                        const nn::ParamRegistry<T>& reg,
                                        const model::EmaState<T>& ema, const AdamW<T>& opt,
                                        i64 step) {
    model::Checkpoint ck;
    ck.config_fingerprint = mcfg.fingerprint();
    ck.step = step;
    model::append_registry_entries(ck, reg, "weights/");
    for (std::size_t i = 0; i < ema.names.size(); ++i)
        ck.entries.push_back(tensor_entry("ema/" + ema.names[i], ema.values[i]));
    const auto& entries = reg.entries();
    if (opt.m.size() != entries.size())
        throw ValidationError("make_train_checkpoint: optimizer moment count " +
                              std::to_string(opt.m.size()) + " does not match registry size " +
                              std::to_string(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        ck.entries.push_back(tensor_entry("adam_m/" + entries[i].name, opt.m[i]));
        ck.entries.push_back(tensor_entry("adam_v/" + entries[i].name, opt.v[i]));
    }
    model::CkptEntry tc;
    tc.name = "adam_t";
    tc.dtype = model::EntryDtype::F64;
    tc.shape = {1};
    tc.data = {static_cast<double>(opt.t)};
    ck.entries.push_back(tc);
    model::ModelConfig copy = mcfg;
    const auto fields = config_fields(copy);
    model::CkptEntry mce;
    mce.name = "model_config";
    mce.dtype = model::EntryDtype::F64;
    mce.shape = {static_cast<i64>(fields.size())};
    for (const i64* f : fields) mce.data.push_back(static_cast<double>(*f));
    ck.entries.push_back(mce);
    return ck;
}

model::ModelConfig config_from_checkpoint(const model::Checkpoint& ckpt) {
    const model::CkptEntry* e = ckpt.find("model_config");
    if (!e) throw IntegrityError("checkpoint has no entry model_config");
    model::ModelConfig mc;
    const auto fields = config_fields(mc);
    if (e->data.size() != fields.size())
        throw IntegrityError("checkpoint entry model_config has mismatched shape");
    for (std::size_t i = 0; i < fields.size(); ++i)
        *fields[i] = static_cast<i64>(e->data[i]);
    mc.validate();
    if (mc.fingerprint() != ckpt.config_fingerprint)
        throw IntegrityError("checkpoint entry model_config disagrees with the stored "
                             "configuration fingerprint");
    return mc;
}

template <typename T>
i64 load_train_checkpoint(const model::Checkpoint& ckpt, const model::ModelConfig& mcfg,
                          const nn::ParamRegistry<T>& reg, model::EmaState<T>& ema,
                          AdamW<T>& opt) {
    const u64 want = mcfg.fingerprint();
    if (ckpt.config_fingerprint != want)
        throw ConfigError("checkpoint was saved from a different model configuration "
                          "(fingerprint " +
                          std::to_string(ckpt.config_fingerprint) + ", this config is " +
                          std::to_string(want) + ")");
    model::load_registry_entries(ckpt, reg, "weights/");
    for (std::size_t i = 0; i < ema.names.size(); ++i) {
        const model::CkptEntry* e = ckpt.find("ema/" + ema.names[i]);
        if (!e) throw IntegrityError("checkpoint has no entry ema/" + ema.names[i]);
        if (e->shape != ema.values[i].shape())
            throw IntegrityError("checkpoint entry ema/" + ema.names[i] + " has mismatched shape");
        entry_into_tensor(*e, ema.values[i]);
    }
    opt.init(reg);
    const auto& entries = reg.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        for (const char* kind : {"adam_m/", "adam_v/"}) {
            const model::CkptEntry* e = ckpt.find(kind + entries[i].name);
            if (!e) throw IntegrityError("checkpoint has no entry " + std::string(kind) +
                                         entries[i].name);
            if (e->shape != entries[i].value->shape())
                throw IntegrityError("checkpoint entry " + std::string(kind) + entries[i].name +
                                     " has mismatched shape");
            entry_into_tensor(*e, kind[5] == 'm' ? opt.m[i] : opt.v[i]);
        }
    }
    const model::CkptEntry* tc = ckpt.find("adam_t");
    if (!tc) throw IntegrityError("checkpoint has no entry adam_t");
    opt.t = static_cast<i64>(tc->data.at(0));
    return ckpt.step;
}

// ---------------------------------------------------------------------------
// sampling from the shadow weights
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sample_with_ema(const model::ModelConfig& mcfg, const model::EmaState<T>& ema,
                          const Tensor<T>& mask_onehot, i64 steps, u64 seed) {
    model::Model<T> net(mcfg);
    nn::ParamRegistry<T> reg;
    net.register_params(reg);
    ema.copy_to_registry(reg);
    flow::VelocityFn<T> fn = [&net](const Tensor<T>& z, T t, const Tensor<T>& mask) {
        return net.forward_velocity(z, t, mask, nullptr);
    };
    const i64 hw = mcfg.latent_hw();
    return flow::euler_sample(fn, mask_onehot, {mcfg.latent_channels, hw, hw}, steps, seed);
}

// ---------------------------------------------------------------------------
// the loop
// ---------------------------------------------------------------------------

template <typename T>
std::string run_training(const TrainConfig& cfg, std::ostream& log) {
    cfg.validate();
    const model::ModelConfig mcfg = cfg.model_config();

    std::vector<data::ShapesSample<T>> dataset;
    if (cfg.data_dir.empty()) {
        dataset = data::make_shapes_dataset<T>(cfg.data_n, cfg.data_size, cfg.data_seed);
    } else {
        auto loaded = data::load_pair_folder<T>(cfg.data_dir + "/images", cfg.data_dir + "/masks",
                                                mcfg.mask_classes, cfg.data_size);
        for (const auto& issue : loaded.issues)
            log << "data_issue file=" << issue.file << " message=\"" << issue.message << "\"\n";
        dataset = std::move(loaded.samples);
    }
    const i64 n = static_cast<i64>(dataset.size());
    if (n < cfg.batch_size)
        throw ValidationError("dataset holds " + std::to_string(n) +
                              " samples, fewer than batch_size " + std::to_string(cfg.batch_size));

    auto net = model::build_model<T>(mcfg, cfg.seed);
    nn::ParamRegistry<T> reg;
    net->register_params(reg);
    AdamW<T> opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    opt.init(reg);
    auto ema = model::EmaState<T>::from_registry(reg);

    i64 start_step = 0;
    if (!cfg.resume.empty()) {
        const model::Checkpoint ck = model::load_checkpoint(cfg.resume);
        start_step = load_train_checkpoint(ck, mcfg, reg, ema, opt);
        log << "resumed from " << cfg.resume << " at step " << start_step << "\n";
    }

    std::filesystem::create_directories(cfg.out_dir);

    const i64 bpe = n / cfg.batch_size;
    std::vector<std::vector<i64>> epoch_batches;
    i64 cur_epoch = -1;
    const auto t0 = std::chrono::steady_clock::now();
    for (i64 it = start_step; it < cfg.total_iters; ++it) {
        const i64 epoch = it / bpe;
        if (epoch != cur_epoch) {
            epoch_batches = data::batch_indices(n, cfg.batch_size, cfg.seed, epoch);
            cur_epoch = epoch;
        }
        std::vector<const data::ShapesSample<T>*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (i64 idx : epoch_batches[static_cast<std::size_t>(it % bpe)])
            batch.push_back(&dataset[static_cast<std::size_t>(idx)]);

        const bool report_zero = it == 0;
        const StepStats<T> stats = train_step(*net, reg, opt, ema, cfg.ema_decay, batch,
                                              cfg.grad_clip, cfg.seed, it, report_zero);
        const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        log << "step=" << it << " loss=" << fmt_double(stats.loss)
            << " grad_norm=" << fmt_double(stats.grad_norm) << " clipped=" << (stats.clipped ? 1 : 0)
            << " wallclock_ms=" << wall << "\n";
        if (report_zero && !stats.zero_grad_groups.empty()) {
            log << "zero_grad_groups=";
            for (std::size_t i = 0; i < stats.zero_grad_groups.size(); ++i) {
                if (i) log << ",";
                log << stats.zero_grad_groups[i];
            }
            log << "\n";
        }

        const i64 done = it + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 &&
            done != cfg.total_iters) {
            const std::string path =
                cfg.out_dir + "/ckpt_step" + std::to_string(done) + ".ckpt";
            model::save_checkpoint(path, make_train_checkpoint(mcfg, reg, ema, opt, done));
            log << "checkpoint path=" << path << " step=" << done << "\n";
        }
        if (cfg.sample_every > 0 && done % cfg.sample_every == 0) {
            const i64 k = std::min<i64>(4, n);
            for (i64 i = 0; i < k; ++i) {
                const Tensor<T> onehot = data::one_hot<T>(dataset[static_cast<std::size_t>(i)].mask);
                const Tensor<T> img = sample_with_ema(mcfg, ema, onehot, 200, cfg.seed + static_cast<u64>(i));
                char name[64];
                std::snprintf(name, sizeof name, "/sample_step%06lld_%02lld.png",
                              static_cast<long long>(done), static_cast<long long>(i));
                data::write_png_rgb(cfg.out_dir + name, img);
            }
            log << "samples step=" << done << " count=" << std::min<i64>(4, n) << "\n";
        }
    }

    const std::string final_path = cfg.out_dir + "/ckpt_final.ckpt";
    model::save_checkpoint(final_path, make_train_checkpoint(mcfg, reg, ema, opt, cfg.total_iters));
    log << "checkpoint path=" << final_path << " step=" << cfg.total_iters << "\n";
    return final_path;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_TRAIN(T)                                                               \
    template class AdamW<T>;                                                                     \
    template double clip_grad_norm<T>(const nn::ParamRegistry<T>&, double);                      \
    template StepStats<T> train_step<T>(model::Model<T>&, nn::ParamRegistry<T>&, AdamW<T>&,      \
                                        model::EmaState<T>&, double,                             \
                                        const std::vector<const data::ShapesSample<T>*>&,       \
                                        double, u64, i64, bool);                                 \
    template model::Checkpoint make_train_checkpoint<T>(const model::ModelConfig&,               \
                                                        const nn::ParamRegistry<T>&,             \
                                                        const model::EmaState<T>&,               \
                                                        const AdamW<T>&, i64);                   \
    template i64 load_train_checkpoint<T>(const model::Checkpoint&, const model::ModelConfig&,   \
                                          const nn::ParamRegistry<T>&, model::EmaState<T>&,      \
                                          AdamW<T>&);                                            \
    template Tensor<T> sample_with_ema<T>(const model::ModelConfig&, const model::EmaState<T>&,  \
                                          const Tensor<T>&, i64, u64);                           \
    template std::string run_training<T>(const TrainConfig&, std::ostream&);

SISMA_INSTANTIATE_TRAIN(float)
SISMA_INSTANTIATE_TRAIN(double)

} // namespace sisma::train
