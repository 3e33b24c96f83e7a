// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "sisma/core/errors.hpp"
#include "sisma/data/data.hpp"
#include "sisma/data/png_io.hpp"
#include "sisma/eval/eval.hpp"
#include "sisma/model/checkpoint.hpp"
#include "sisma/model/model.hpp"
#include "sisma/train/train.hpp"

namespace {

using namespace sisma;

// ---------------------------------------------------------------------------
// exit code contract
// ---------------------------------------------------------------------------

// 0 success, 1 check failure, 2 usage or config, 3 I/O, 4 numeric abort.
constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kNumeric = 4;

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNumeric;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const IntegrityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const MigrationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
}

std::string join_lengths(const std::vector<i64>& lengths) {
    std::string out;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(lengths[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

int cmd_make_data(const std::string& out, i64 n, i64 size, u64 seed) {
    std::cout << "command=make-data\nout=" << out << "\nn=" << n << "\nsize=" << size
              << "\nseed=" << seed << "\n";
    const auto samples = data::make_shapes_dataset<float>(n, size, seed);
    data::write_pair_folder(out, samples);
    std::cout << "samples=" << samples.size() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& resume) {
    train::TrainConfig cfg = train::TrainConfig::parse_file(config_path);
    if (!resume.empty()) cfg.resume = resume;
    std::cout << "command=train\nconfig=" << config_path << "\n" << cfg.to_string();
    try {
        const std::string final_path = train::run_training<float>(cfg, std::cout);
        std::cout << "final_checkpoint=" << final_path << "\n";
    } catch (const NumericError& e) {
        std::error_code ec;
        std::filesystem::create_directories(cfg.out_dir, ec);
        const std::string diag_path = cfg.out_dir + "/numeric_abort.txt";
        std::ofstream diag(diag_path);
        diag << e.what() << "\n";
        std::cerr << "error: training aborted on a non-finite value; diagnostics at " << diag_path
                  << "\n";
        return kNumeric;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

data::SemanticMask read_mask_png(const std::string& path, const model::ModelConfig& mcfg) {
    const data::PngImage png = data::read_png(path);
    if (png.channels != 1)
        throw ValidationError("mask " + path + " must be a single-channel class-id image");
    const i64 side = mcfg.latent_hw();
    if (png.h != side || png.w != side)
        throw ValidationError("mask " + path + " is " + std::to_string(png.h) + "x" +
                              std::to_string(png.w) + ", the model expects " +
                              std::to_string(side) + "x" + std::to_string(side));
    data::SemanticMask mask;
    mask.h = png.h;
    mask.w = png.w;
    mask.num_classes = mcfg.mask_classes;
    mask.class_map.resize(static_cast<std::size_t>(png.h * png.w));
    for (i64 i = 0; i < png.h; ++i)
        for (i64 j = 0; j < png.w; ++j) mask.at(i, j) = png.at(i, j, 0);
    mask.validate();
    return mask;
}

int cmd_sample(const std::string& ckpt_path, const std::string& mask_file,
               const std::string& mask_dir, i64 steps, u64 seed, const std::string& out,
               i64 grid) {
    std::cout << "command=sample\nckpt=" << ckpt_path << "\n";
    if (!mask_file.empty())
        std::cout << "mask=" << mask_file << "\n";
    else
        std::cout << "mask_dir=" << mask_dir << "\n";
    std::cout << "steps=" << steps << "\nseed=" << seed << "\nout=" << out << "\ngrid=" << grid
              << "\n";

    const model::Checkpoint ck = model::load_checkpoint(ckpt_path);
    const model::ModelConfig mcfg = train::config_from_checkpoint(ck);

    // Sampling runs on the shadow weights; the raw weights stay untouched.
    auto net = std::make_unique<model::Model<float>>(mcfg);
    nn::ParamRegistry<float> reg;
    net->register_params(reg);
    model::load_registry_entries(ck, reg, "ema/");
    const auto ema = model::EmaState<float>::from_registry(reg);

    std::vector<std::pair<std::string, std::string>> masks;  // stem, path
    if (!mask_file.empty()) {
        masks.emplace_back(std::filesystem::path(mask_file).stem().string(), mask_file);
    } else {
        for (const auto& entry : std::filesystem::directory_iterator(mask_dir))
            if (entry.path().extension() == ".png")
                masks.emplace_back(entry.path().stem().string(), entry.path().string());
        std::sort(masks.begin(), masks.end());
        if (masks.empty()) throw IoError("sample: no .png masks in " + mask_dir);
    }

    std::filesystem::create_directories(out);
    for (const auto& [stem, path] : masks) {
        const data::SemanticMask mask = read_mask_png(path, mcfg);
        const Tensor<float> onehot = data::one_hot<float>(mask);
        for (i64 g = 0; g < grid; ++g) {
            const u64 s = seed + static_cast<u64>(g);
            const Tensor<float> img = train::sample_with_ema(mcfg, ema, onehot, steps, s);
            const std::string out_path = out + "/" + stem + "_s" + std::to_string(s) + ".png";
            data::write_png_rgb(out_path, img);
            std::cout << "sample mask=" << stem << " seed=" << s << " path=" << out_path << "\n";
        }
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const std::string& workload, const std::vector<i64>& lengths, i64 trials,
              i64 channels, i64 state_dim, i64 chunk, double max_slope) {
    std::cout << "command=bench\nworkload=" << workload << "\nlengths=" << join_lengths(lengths)
              << "\ntrials=" << trials << "\nchannels=" << channels << "\nstate_dim=" << state_dim
              << "\nchunk=" << chunk << "\nmax_slope=" << max_slope << "\n";
    eval::WorkloadFactory factory;
    if (workload == "prefix")
        factory = eval::prefix_sum_workload();
    else if (workload == "pairwise")
        factory = eval::pairwise_workload();
    else
        factory = eval::chunked_scan_workload(channels, state_dim, chunk);
    const eval::BenchReport rep = eval::scan_scaling_bench(factory, lengths, trials);
    std::cout << rep.to_records() << rep.to_table();
    if (max_slope > 0.0 && rep.slope > max_slope) {
        std::cerr << "check failed: fitted slope " << rep.slope << " exceeds ceiling " << max_slope
                  << "\n";
        return kCheckFailed;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// The finite-difference suite runs on a shrunken variant of the preset: the
// class palette and latent channels survive, the dims drop to the largest
// instance whose probes stay above roundoff.
model::ModelConfig tiny_gradcheck_config(const std::string& preset) {
    model::ModelConfig mc =
        preset == "full" ? model::ModelConfig::full() : model::ModelConfig::desk();
    mc.image_size = 4;
    mc.scale_factor = 1;
    mc.patch_size = 2;
    mc.hidden = 8;
    mc.depth = 2;
    mc.state_dim = 2;
    mc.expansion = 2;
    mc.conv_width = 4;
    mc.timestep_embed_dim = 8;
    mc.validate();
    return mc;
}

int cmd_gradcheck(const std::string& preset, u64 seed, const std::string& fault) {
    const model::ModelConfig mc = tiny_gradcheck_config(preset);
    std::cout << "command=gradcheck\npreset=" << preset << "\nseed=" << seed << "\nfault=" << fault
              << "\nmodel latent_channels=" << mc.latent_channels
              << " mask_classes=" << mc.mask_classes << " hidden=" << mc.hidden
              << " depth=" << mc.depth << " tokens=" << mc.token_count() << "\n";
    const eval::GradcheckReport rep = eval::gradcheck_suite(mc, seed, fault);
    std::cout << rep.to_records() << rep.to_table();
    return rep.pass ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// inspect-ckpt
// ---------------------------------------------------------------------------

int cmd_inspect(const std::string& path) {
    std::cout << "command=inspect-ckpt\nckpt=" << path << "\n";
    const model::Checkpoint ck = model::load_checkpoint(path);
    std::cout << "version=" << ck.version << "\nstep=" << ck.step
              << "\nfingerprint=" << ck.config_fingerprint << "\nentries=" << ck.entries.size()
              << "\n";
    i64 weight_params = 0;
    for (const auto& e : ck.entries) {
        std::cout << "entry name=" << e.name
                  << " dtype=" << (e.dtype == model::EntryDtype::F32 ? "f32" : "f64") << " shape=[";
        i64 numel = 1;
        for (std::size_t i = 0; i < e.shape.size(); ++i) {
            if (i) std::cout << ",";
            std::cout << e.shape[i];
            numel *= e.shape[i];
        }
        std::cout << "]\n";
        if (e.name.rfind("weights/", 0) == 0) weight_params += numel;
    }
    std::cout << "params_total=" << weight_params << "\n";
    return kOk;
}

} // namespace

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
    CLI::App app{"SISMA: mask-conditioned flow matching with selective state-space blocks"};
    app.require_subcommand(1);

    std::string md_out;
    i64 md_n = 5000, md_size = 32;
    u64 md_seed = 1;
    auto* md = app.add_subcommand("make-data", "Generate the synthetic shapes dataset");
    md->add_option("--out", md_out, "Output folder (images/ and masks/ inside)")->required();
    md->add_option("--n", md_n, "Sample count")->check(CLI::PositiveNumber)->capture_default_str();
    md->add_option("--size", md_size, "Square image side in pixels")->capture_default_str();
    md->add_option("--seed", md_seed, "Generator seed")->capture_default_str();

    std::string tr_config, tr_resume;
    auto* tr = app.add_subcommand("train", "Run the training loop from a config file");
    tr->add_option("--config", tr_config, "key = value config file")->required();
    tr->add_option("--resume", tr_resume, "Checkpoint to resume from");

    std::string sp_ckpt, sp_mask, sp_mask_dir, sp_out;
    i64 sp_steps = 200, sp_grid = 1;
    u64 sp_seed = 0;
    auto* sp = app.add_subcommand("sample", "Sample images for masks from a trained checkpoint");
    sp->add_option("--ckpt", sp_ckpt, "Training checkpoint")->required();
    auto* src = sp->add_option_group("mask source");
    src->add_option("--mask", sp_mask, "One class-id mask PNG");
    src->add_option("--mask-dir", sp_mask_dir, "Folder of class-id mask PNGs");
    src->require_option(1);
    sp->add_option("--steps", sp_steps, "Euler steps")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    sp->add_option("--seed", sp_seed, "Noise seed")->capture_default_str();
    sp->add_option("--out", sp_out, "Output folder")->required();
    sp->add_option("--grid", sp_grid, "Samples per mask, seeds seed..seed+grid-1")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    std::string bn_workload = "scan";
    std::vector<i64> bn_lengths = {512, 1024, 2048, 4096, 8192};
    i64 bn_trials = 5, bn_channels = 64, bn_state = 16, bn_chunk = 64;
    double bn_max_slope = 1.3;
    auto* bn = app.add_subcommand("bench", "Time a workload across sequence lengths");
    bn->add_option("--workload", bn_workload, "scan, prefix, or pairwise")
        ->check(CLI::IsMember({"scan", "prefix", "pairwise"}))
        ->capture_default_str();
    bn->add_option("--lengths", bn_lengths, "Comma-separated sequence lengths")
        ->delimiter(',')
        ->capture_default_str();
    bn->add_option("--trials", bn_trials, "Timing trials per length")->capture_default_str();
    bn->add_option("--channels", bn_channels, "Scan channels")->capture_default_str();
    bn->add_option("--state-dim", bn_state, "Scan state dimension")->capture_default_str();
    bn->add_option("--chunk", bn_chunk, "Scan chunk length")->capture_default_str();
    bn->add_option("--max-slope", bn_max_slope, "Fail when the fitted slope exceeds this; 0 = off")
        ->capture_default_str();

    std::string gc_preset = "desk", gc_fault;
    u64 gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
    gc->add_option("--preset", gc_preset, "Architecture family to shrink and probe")
        ->check(CLI::IsMember({"desk", "full"}))
        ->capture_default_str();
    gc->add_option("--seed", gc_seed, "Probe seed")->capture_default_str();
    gc->add_option("--fault", gc_fault, "Scale this group's analytic gradient by 1.01");

    std::string ic_ckpt;
    auto* ic = app.add_subcommand("inspect-ckpt", "Print a checkpoint's header and entry table");
    ic->add_option("ckpt", ic_ckpt, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    if (app.got_subcommand(md))
        return guarded([&] { return cmd_make_data(md_out, md_n, md_size, md_seed); });
    if (app.got_subcommand(tr)) return guarded([&] { return cmd_train(tr_config, tr_resume); });
    if (app.got_subcommand(sp))
        return guarded(
            [&] { return cmd_sample(sp_ckpt, sp_mask, sp_mask_dir, sp_steps, sp_seed, sp_out,
                                    sp_grid); });
    if (app.got_subcommand(bn))
        return guarded([&] {
            return cmd_bench(bn_workload, bn_lengths, bn_trials, bn_channels, bn_state, bn_chunk,
                             bn_max_slope);
        });
    if (app.got_subcommand(gc))
        return guarded([&] { return cmd_gradcheck(gc_preset, gc_seed, gc_fault); });
    if (app.got_subcommand(ic)) return guarded([&] { return cmd_inspect(ic_ckpt); });
    return kUsage;
}
