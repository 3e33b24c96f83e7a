// SPDX-License-Identifier: Apache-2.0
#include "sisma/eval/eval.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <unistd.h>

#include "sisma/core/errors.hpp"
#include "sisma/core/rng.hpp"
#include "sisma/flow/flow.hpp"
#include "sisma/kernels/dispatch.hpp"
#include "sisma/nn/linear.hpp"
#include "sisma/ssm/scan.hpp"

namespace sisma::eval {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

} // namespace

// ---------------------------------------------------------------------------
// mask adherence
// ---------------------------------------------------------------------------

template <typename T>
data::SemanticMask segment_by_color(const Tensor<T>& image) {
    if (image.ndim() != 3 || image.shape()[0] != 3)
        throw ShapeError("segment_by_color wants a [3,h,w] image, got " + image.shape_str());
    const i64 h = image.shape()[1], w = image.shape()[2];
    data::SemanticMask out;
    out.h = h;
    out.w = w;
    out.num_classes = data::kShapeClasses;
    out.class_map.resize(static_cast<std::size_t>(h * w), 0);
    for (i64 i = 0; i < h; ++i) {
        for (i64 j = 0; j < w; ++j) {
            const double c[3] = {static_cast<double>(image(0, i, j)),
                                 static_cast<double>(image(1, i, j)),
                                 static_cast<double>(image(2, i, j))};
            int lead = 0;
            if (c[1] > c[lead]) lead = 1;
            if (c[2] > c[lead]) lead = 2;
            const double margin = c[lead] - std::max(c[(lead + 1) % 3], c[(lead + 2) % 3]);
            out.at(i, j) = margin >= 0.1 ? lead + 1 : data::kBackground;
        }
    }
    return out;
}

IouReport iou_between(const data::SemanticMask& a, const data::SemanticMask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ShapeError("iou_between wants same-size masks, got " + std::to_string(a.h) + "x" +
                         std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                         std::to_string(b.w));
    if (a.num_classes != b.num_classes)
        throw ValidationError("iou_between wants matching palettes, got " +
                              std::to_string(a.num_classes) + " vs " +
                              std::to_string(b.num_classes) + " classes");
    const i64 k = a.num_classes;
    std::vector<i64> inter(static_cast<std::size_t>(k), 0), uni(static_cast<std::size_t>(k), 0);
    for (i64 p = 0; p < a.h * a.w; ++p) {
        const i64 ca = a.class_map[static_cast<std::size_t>(p)];
        const i64 cb = b.class_map[static_cast<std::size_t>(p)];
        if (ca == cb) {
            ++inter[static_cast<std::size_t>(ca)];
            ++uni[static_cast<std::size_t>(ca)];
        } else {
            ++uni[static_cast<std::size_t>(ca)];
            ++uni[static_cast<std::size_t>(cb)];
        }
    }
    IouReport rep;
    rep.per_class.assign(static_cast<std::size_t>(k), -1.0);
    double sum = 0.0;
    i64 counted = 0;
    for (i64 c = 0; c < k; ++c) {
        if (uni[static_cast<std::size_t>(c)] == 0) continue;
        const double v = static_cast<double>(inter[static_cast<std::size_t>(c)]) /
                         static_cast<double>(uni[static_cast<std::size_t>(c)]);
        rep.per_class[static_cast<std::size_t>(c)] = v;
        sum += v;
        ++counted;
    }
    rep.mean = counted ? sum / static_cast<double>(counted) : 0.0;
    return rep;
}

template <typename T>
IouReport mask_adherence_iou(const Tensor<T>& generated, const data::SemanticMask& mask) {
    if (mask.num_classes != data::kShapeClasses)
        throw ValidationError("mask adherence is defined for the shapes palette (" +
                              std::to_string(data::kShapeClasses) + " classes), got " +
                              std::to_string(mask.num_classes));
    mask.validate();
    const data::SemanticMask pred = segment_by_color(generated);
    if (pred.h != mask.h || pred.w != mask.w)
        throw ShapeError("generated image is " + std::to_string(pred.h) + "x" +
                         std::to_string(pred.w) + " but the mask is " + std::to_string(mask.h) +
                         "x" + std::to_string(mask.w));
    return iou_between(pred, mask);
}

std::string IouReport::to_string() const {
    std::ostringstream out;
    out << "class iou\n";
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        out << c << " ";
        if (per_class[c] < 0)
            out << "excluded";
        else
            out << fmt_double(per_class[c]);
        out << "\n";
    }
    out << "mean " << fmt_double(mean) << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// diversity proxy
// ---------------------------------------------------------------------------

template <typename T>
double diversity_score(const std::vector<Tensor<T>>& samples) {
    if (samples.size() < 2)
        throw ValidationError("diversity_score wants k >= 2 samples, got " +
                              std::to_string(samples.size()));
    for (std::size_t i = 1; i < samples.size(); ++i)
        if (!samples[i].same_shape(samples[0]))
            throw ShapeError("diversity_score sample " + std::to_string(i) + " is " +
                             samples[i].shape_str() + " but sample 0 is " +
                             samples[0].shape_str());
    const i64 numel = samples[0].numel();
    double total = 0.0;
    i64 pairs = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            double acc = 0.0;
            for (i64 p = 0; p < numel; ++p)
                acc += std::abs(static_cast<double>(samples[i][p]) -
                                static_cast<double>(samples[j][p]));
            total += acc / static_cast<double>(numel);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// scaling benchmark
// ---------------------------------------------------------------------------

namespace {

volatile double g_bench_sink = 0.0;

// Exclusive-create lock file; holding it marks a benchmark in flight.
class BenchLock {
public:
    BenchLock() {
        const char* env = std::getenv("SISMA_BENCH_LOCK");
        path_ = env && *env ? env : "/tmp/sisma_bench.lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            if (errno == EEXIST)
                throw IoError("benchmark lock " + path_ +
                              " is held by another process (remove the file if stale)");
            throw IoError("cannot create benchmark lock " + path_ + ": " +
                          std::strerror(errno));
        }
    }
    ~BenchLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    BenchLock(const BenchLock&) = delete;
    BenchLock& operator=(const BenchLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

double time_once(const std::function<void()>& fn, i64 reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (i64 r = 0; r < reps; ++r) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

std::string environment_string() {
    std::ostringstream out;
    out << "backend=" << kernels::backend_name(kernels::active_backend())
        << " compiler=" << __VERSION__ << " hw_threads=" << std::thread::hardware_concurrency();
    return out.str();
}

} // namespace

BenchReport scan_scaling_bench(const WorkloadFactory& factory, const std::vector<i64>& lengths,
                               i64 trials) {
    if (!factory) throw ValidationError("scan_scaling_bench: empty workload factory");
    if (lengths.size() < 2)
        throw ValidationError("scan_scaling_bench wants at least 2 lengths, got " +
                              std::to_string(lengths.size()));
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 1)
            throw ValidationError("scan_scaling_bench: length " + std::to_string(lengths[i]) +
                                  " must be >= 1");
        if (i > 0 && lengths[i] <= lengths[i - 1])
            throw ValidationError("scan_scaling_bench: lengths must be strictly increasing");
    }
    if (lengths.back() < 8 * lengths.front())
        throw ValidationError("scan_scaling_bench: lengths must span at least 8x, got " +
                              std::to_string(lengths.front()) + ".." +
                              std::to_string(lengths.back()));
    if (trials < 5)
        throw ValidationError("scan_scaling_bench wants >= 5 trials for a stable median, got " +
                              std::to_string(trials));

    BenchLock lock;
    BenchReport rep;
    rep.lengths = lengths;
    rep.trials = trials;
    rep.environment = environment_string();

    constexpr double kMinMeasurable = 1e-3;  // seconds per measurement
    for (const i64 len : lengths) {
        const std::function<void()> fn = factory(len);
        if (!fn) throw ValidationError("scan_scaling_bench: factory returned an empty workload");
        i64 reps = 1;
        double warm = time_once(fn, reps);
        while (warm < kMinMeasurable) {
            if (reps > (i64(1) << 30))
                throw ValidationError(
                    "scan_scaling_bench: timer resolution inadequate even at " +
                    std::to_string(reps) + " repetitions for length " + std::to_string(len));
            reps *= 2;
            warm = time_once(fn, reps);
        }
        std::vector<double> times;
        times.reserve(static_cast<std::size_t>(trials));
        for (i64 t = 0; t < trials; ++t)
            times.push_back(time_once(fn, reps) / static_cast<double>(reps));
        std::sort(times.begin(), times.end());
        const std::size_t n = times.size();
        const double median =
            n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
        rep.median_s.push_back(median);
        rep.min_s.push_back(times.front());
        rep.max_s.push_back(times.back());
        rep.reps.push_back(reps);
    }

    double sx = 0, sy = 0;
    const auto n = static_cast<double>(lengths.size());
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        xs.push_back(std::log(static_cast<double>(lengths[i])));
        ys.push_back(std::log(rep.median_s[i]));
        sx += xs.back();
        sy += ys.back();
    }
    const double mx = sx / n, my = sy / n;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        num += (xs[i] - mx) * (ys[i] - my);
        den += (xs[i] - mx) * (xs[i] - mx);
    }
    rep.slope = num / den;
    return rep;
}

std::string BenchReport::to_table() const {
    std::ostringstream out;
    out << "length median_s min_s max_s reps\n";
    for (std::size_t i = 0; i < lengths.size(); ++i)
        out << lengths[i] << " " << fmt_double(median_s[i]) << " " << fmt_double(min_s[i]) << " "
            << fmt_double(max_s[i]) << " " << reps[i] << "\n";
    out << "slope " << fmt_double(slope) << " (trials " << trials << ")\n";
    out << "environment " << environment << "\n";
    return out.str();
}

std::string BenchReport::to_records() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < lengths.size(); ++i)
        out << "length=" << lengths[i] << " median_s=" << fmt_double(median_s[i])
            << " min_s=" << fmt_double(min_s[i]) << " max_s=" << fmt_double(max_s[i])
            << " reps=" << reps[i] << "\n";
    out << "slope=" << fmt_double(slope) << " trials=" << trials << "\n";
    return out.str();
}

WorkloadFactory prefix_sum_workload() {
    return [](i64 len) {
        auto v = std::make_shared<std::vector<double>>(static_cast<std::size_t>(len));
        Rng rng = Rng::stream(101, {static_cast<u64>(len)});
        for (auto& x : *v) x = rng.uniform(-1.0, 1.0);
        return [v]() {
            double run = 0.0, acc = 0.0;
            for (const double x : *v) {
                run += x;
                acc += run;
            }
            g_bench_sink = g_bench_sink + acc;
        };
    };
}

WorkloadFactory pairwise_workload() {
    return [](i64 len) {
        auto v = std::make_shared<std::vector<double>>(static_cast<std::size_t>(len));
        Rng rng = Rng::stream(102, {static_cast<u64>(len)});
        for (auto& x : *v) x = rng.uniform(-1.0, 1.0);
        return [v]() {
            double acc = 0.0;
            const std::size_t n = v->size();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) acc += (*v)[i] * (*v)[j];
            g_bench_sink = g_bench_sink + acc;
        };
    };
}

WorkloadFactory chunked_scan_workload(i64 channels, i64 state_dim, i64 chunk_len) {
    return [channels, state_dim, chunk_len](i64 len) {
        auto in = std::make_shared<ssm::ScanInputs<float>>();
        auto ssm_params = std::make_shared<ssm::DiagSSM<float>>();
        Rng rng = Rng::stream(103, {static_cast<u64>(len)});
        in->u = Tensor<float>({len, channels});
        in->b_seq = Tensor<float>({len, state_dim});
        in->c_seq = Tensor<float>({len, state_dim});
        in->delta_seq = Tensor<float>({len, channels});
        rng.fill_uniform(in->u, -1.0, 1.0);
        rng.fill_uniform(in->b_seq, -1.0, 1.0);
        rng.fill_uniform(in->c_seq, -1.0, 1.0);
        rng.fill_uniform(in->delta_seq, 0.5, 1.5);
        ssm_params->channels = channels;
        ssm_params->state_dim = state_dim;
        ssm_params->a_log = Tensor<float>({channels, state_dim});
        ssm_params->d_skip = Tensor<float>({channels});
        rng.fill_uniform(ssm_params->a_log, -1.0, 0.5);
        rng.fill_uniform(ssm_params->d_skip, -1.0, 1.0);
        return [in, ssm_params, chunk_len]() {
            const auto out = ssm::selective_scan_chunked(*in, *ssm_params,
                                                         ssm::Discretization::Simplified, chunk_len);
            g_bench_sink = g_bench_sink + static_cast<double>(out.y(0, 0));
        };
    };
}

// ---------------------------------------------------------------------------
// gradient checks
// ---------------------------------------------------------------------------

namespace {

// Relative agreement with a loss-scaled floor. A central difference at step
// h on a loss evaluated to relative roundoff eta carries absolute noise of
// about eta*|loss|/(2h); gradient coordinates below ~1e-5*|loss| sit inside
// that noise, so dividing by them would measure the probe, not the gradient.
double grad_rel_err(double analytic, double fd, double loss_scale) {
    const double floor = 1e-5 * std::max(1.0, std::abs(loss_scale));
    const double denom = std::max({std::abs(analytic), std::abs(fd), floor});
    return std::abs(analytic - fd) / denom;
}

// Deterministic choice of up to `want` distinct coordinates.
std::vector<i64> pick_coords(i64 numel, i64 want, Rng& rng) {
    if (numel <= want) {
        std::vector<i64> all(static_cast<std::size_t>(numel));
        for (i64 i = 0; i < numel; ++i) all[static_cast<std::size_t>(i)] = i;
        return all;
    }
    std::vector<i64> idx(static_cast<std::size_t>(numel));
    for (i64 i = 0; i < numel; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (i64 i = 0; i < want; ++i) {
        const i64 j = rng.uniform_int(i, numel - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(want));
    return idx;
}

void finish_report(GradcheckReport& rep) {
    rep.worst = 0.0;
    rep.worst_group.clear();
    for (const auto& g : rep.groups) {
        if (g.max_rel_err >= rep.worst) {
            rep.worst = g.max_rel_err;
            rep.worst_group = g.name;
        }
    }
    rep.pass = rep.worst < 1e-4;
}

} // namespace

GradcheckReport gradcheck_suite(const model::ModelConfig& config, u64 seed,
                                const std::string& fault_scale_group) {
    config.validate();
    if (config.token_count() > 8 || config.hidden > 8)
        throw ValidationError("gradcheck_suite wants a tiny config (token count <= 8, hidden <= "
                              "8), got tokens " +
                              std::to_string(config.token_count()) + " hidden " +
                              std::to_string(config.hidden));
    constexpr double kStep = 1e-5;
    constexpr i64 kCoords = 32;

    auto net = model::build_model<double>(config, seed, model::InitMode::GradcheckRandom);
    nn::ParamRegistry<double> reg;
    net->register_params(reg);

    const i64 hw = config.latent_hw();
    Rng rng = Rng::stream(seed, {0x67726164ULL});
    Tensor<double> x({config.latent_channels, hw, hw});
    Tensor<double> eps(x.shape());
    rng.fill_uniform(x, -1.0, 1.0);
    rng.fill_normal(eps, 0.0, 1.0);
    const double t = rng.uniform();
    data::SemanticMask mask;
    mask.h = hw;
    mask.w = hw;
    mask.num_classes = config.mask_classes;
    mask.class_map.resize(static_cast<std::size_t>(hw * hw));
    for (auto& c : mask.class_map) c = rng.uniform_int(0, config.mask_classes - 1);
    const Tensor<double> onehot = data::one_hot<double>(mask);
    Tensor<double> z = flow::interpolate(x, eps, t);

    const auto loss_at = [&]() {
        const Tensor<double> v = net->forward_velocity(z, t, onehot, nullptr);
        return static_cast<double>(flow::fm_loss(v, x, eps));
    };

    reg.zero_grads();
    model::ModelCache<double> cache;
    const Tensor<double> vel = net->forward_velocity(z, t, onehot, &cache);
    const double loss0 = static_cast<double>(flow::fm_loss(vel, x, eps));
    const Tensor<double> dvel = flow::fm_loss_backward(vel, x, eps);
    const Tensor<double> dz = net->backward(dvel, cache);

    GradcheckReport rep;
    bool fault_seen = fault_scale_group.empty();
    u64 group_index = 0;
    const auto check_group = [&](const std::string& name, Tensor<double>& values,
                                 const Tensor<double>& analytic) {
        const bool faulted = name == fault_scale_group;
        if (faulted) fault_seen = true;
        Rng pick = Rng::stream(seed, {0x636f6f7264ULL, group_index++});
        const std::vector<i64> coords = pick_coords(values.numel(), kCoords, pick);
        GradcheckGroup g;
        g.name = name;
        g.coords = static_cast<i64>(coords.size());
        for (const i64 idx : coords) {
            const double keep = values[idx];
            values[idx] = keep + kStep;
            const double lp = loss_at();
            values[idx] = keep - kStep;
            const double lm = loss_at();
            values[idx] = keep;
            const double fd = (lp - lm) / (2.0 * kStep);
            const double a = analytic[idx] * (faulted ? 1.01 : 1.0);
            g.max_rel_err = std::max(g.max_rel_err, grad_rel_err(a, fd, loss0));
        }
        rep.groups.push_back(g);
    };

    for (const auto& e : reg.entries()) check_group(e.name, *e.value, *e.grad);
    check_group("input.z", z, dz);

    if (!fault_seen)
        throw ValidationError("gradcheck_suite: fault group '" + fault_scale_group +
                              "' names no parameter group");
    finish_report(rep);
    return rep;
}

GradcheckReport gradcheck_linear_toy(u64 seed) {
    constexpr double kStep = 1e-5;
    nn::Linear<double> lin(6, 4, true);
    Rng rng = Rng::stream(seed, {0x746f79ULL});
    lin.init_normal(rng, 0.5);
    rng.fill_normal(lin.b, 0.0, 0.5);
    Tensor<double> x({3, 6});
    Tensor<double> target({3, 4});
    rng.fill_uniform(x, -1.0, 1.0);
    rng.fill_uniform(target, -1.0, 1.0);

    const auto loss_at = [&]() {
        const Tensor<double> y = lin.forward(x, nullptr);
        double acc = 0.0;
        for (i64 j = 0; j < y.numel(); ++j) {
            const double d = y[j] - target[j];
            acc += d * d;
        }
        return acc / static_cast<double>(y.numel());
    };

    nn::LinearCache<double> cache;
    const Tensor<double> y = lin.forward(x, &cache);
    const double loss0 = loss_at();
    Tensor<double> dy(y.shape());
    for (i64 j = 0; j < y.numel(); ++j)
        dy[j] = 2.0 * (y[j] - target[j]) / static_cast<double>(y.numel());
    lin.gw.fill(0.0);
    lin.gb.fill(0.0);
    const Tensor<double> dx = lin.backward(dy, cache);

    GradcheckReport rep;
    const auto check_group = [&](const std::string& name, Tensor<double>& values,
                                 const Tensor<double>& analytic) {
        GradcheckGroup g;
        g.name = name;
        g.coords = values.numel();
        for (i64 idx = 0; idx < values.numel(); ++idx) {
            const double keep = values[idx];
            values[idx] = keep + kStep;
            const double lp = loss_at();
            values[idx] = keep - kStep;
            const double lm = loss_at();
            values[idx] = keep;
            const double fd = (lp - lm) / (2.0 * kStep);
            g.max_rel_err = std::max(g.max_rel_err, grad_rel_err(analytic[idx], fd, loss0));
        }
        rep.groups.push_back(g);
    };
    check_group("linear.w", lin.w, lin.gw);
    check_group("linear.b", lin.b, lin.gb);
    check_group("input.x", x, dx);
    finish_report(rep);
    return rep;
}

std::string GradcheckReport::to_table() const {
    std::ostringstream out;
    out << "group coords max_rel_err\n";
    for (const auto& g : groups)
        out << g.name << " " << g.coords << " " << fmt_double(g.max_rel_err) << "\n";
    out << (pass ? "PASS" : "FAIL") << " worst " << fmt_double(worst) << " in " << worst_group
        << "\n";
    return out.str();
}

std::string GradcheckReport::to_records() const {
    std::ostringstream out;
    for (const auto& g : groups)
        out << "group=" << g.name << " coords=" << g.coords
            << " max_rel_err=" << fmt_double(g.max_rel_err) << "\n";
    out << "pass=" << (pass ? 1 : 0) << " worst=" << fmt_double(worst)
        << " worst_group=" << worst_group << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define SISMA_INSTANTIATE_EVAL(T)                                                         \
    template data::SemanticMask segment_by_color<T>(const Tensor<T>&);                    \
    template IouReport mask_adherence_iou<T>(const Tensor<T>&, const data::SemanticMask&); \
    template double diversity_score<T>(const std::vector<Tensor<T>>&);

SISMA_INSTANTIATE_EVAL(float)
SISMA_INSTANTIATE_EVAL(double)

} // namespace sisma::eval
