// SPDX-License-Identifier: Apache-2.0
//
// Full-network tests: config validation, zero-velocity initialization, shape
// contracts, seeded determinism, whole-pipeline gradients, EMA recursion, the
// parameter tally, and checkpoint round trips with corruption handling.
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sisma/core/errors.hpp"
#include "sisma/flow/flow.hpp"
#include "sisma/model/checkpoint.hpp"
#include "sisma/model/model.hpp"
#include "test_util.hpp"

using namespace sisma;
using namespace sisma::model;
using sisma::nn::ParamRegistry;
using sisma::testutil::random_tensor;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 8;
    c.latent_channels = 2;
    c.scale_factor = 1;
    c.patch_size = 2;
    c.hidden = 8;
    c.depth = 2;
    c.state_dim = 2;
    c.expansion = 2;
    c.conv_width = 4;
    c.mask_classes = 3;
    c.timestep_embed_dim = 8;
    return c;
}

// Random valid one-hot mask at latent resolution.
Tensor<double> random_mask(Rng& rng, i64 k, i64 h, i64 w) {
    Tensor<double> m({k, h, w});
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) m(rng.uniform_int(0, k - 1), i, j) = 1.0;
    return m;
}

std::string temp_path(const char* name) { return std::string("/tmp/sisma_model_test_") + name; }

} // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

TEST_CASE("model config: presets satisfy their own invariants") {
    ModelConfig desk = ModelConfig::desk();
    desk.validate();
    CHECK(desk.image_size == 32);
    CHECK(desk.latent_channels == 3);
    CHECK(desk.scale_factor == 1);
    CHECK(desk.patch_size == 2);
    CHECK(desk.hidden == 128);
    CHECK(desk.depth == 6);
    CHECK(desk.mask_classes == 4);

    ModelConfig full = ModelConfig::full();
    full.validate();
    CHECK(full.depth == 24);
    CHECK(full.hidden == 1024);
    CHECK(full.mask_classes == 19);
    CHECK(full.image_size == 256);
    CHECK(full.latent_hw() == 32);
}

TEST_CASE("model config: validation lists every violation at once") {
    ModelConfig c = tiny_config();
    c.hidden = 0;
    c.patch_size = 3;
    c.timestep_embed_dim = 7;
    try {
        c.validate();
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("hidden=0") != std::string::npos);
        CHECK(msg.find("patch_size=3") != std::string::npos);
        CHECK(msg.find("timestep_embed_dim=7") != std::string::npos);
    }
}

TEST_CASE("model config: fingerprint separates configs and is stable") {
    ModelConfig a = tiny_config();
    ModelConfig b = tiny_config();
    CHECK(a.fingerprint() == b.fingerprint());
    b.hidden = 16;
    CHECK(a.fingerprint() != b.fingerprint());
}

// ---------------------------------------------------------------------------
// build + forward
// ---------------------------------------------------------------------------

TEST_CASE("model: fresh network predicts exactly zero velocity") {
    auto m = build_model<double>(tiny_config(), 42);
    Rng rng(501);
    auto z = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto mask = random_mask(rng, 3, 8, 8);
    Tensor<double> v = m->forward_velocity(z, 0.37, mask, nullptr);
    CHECK(v.shape() == z.shape());
    for (i64 i = 0; i < v.numel(); ++i) CHECK(v[i] == 0.0);
}

TEST_CASE("model: initial flow loss equals the batch mean squared pair distance") {
    auto m = build_model<double>(tiny_config(), 43);
    Rng rng(502);
    auto x = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto eps = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto mask = random_mask(rng, 3, 8, 8);
    Tensor<double> z = flow::interpolate(x, eps, 0.25);
    Tensor<double> v = m->forward_velocity(z, 0.25, mask, nullptr);

    double want = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) want += (x[i] - eps[i]) * (x[i] - eps[i]);
    want /= static_cast<double>(x.numel());
    CHECK(std::abs(flow::fm_loss(v, x, eps) - want) <= 1e-10);
}

TEST_CASE("model: desk preset output shape matches the latent") {
    auto m = build_model<double>(ModelConfig::desk(), 44);
    Rng rng(503);
    auto z = random_tensor<double>(rng, {3, 32, 32}, -1.0, 1.0);
    auto mask = random_mask(rng, 4, 32, 32);
    Tensor<double> v = m->forward_velocity(z, 0.5, mask, nullptr);
    CHECK(v.shape() == std::vector<i64>{3, 32, 32});
}

TEST_CASE("model: identical seeds give bitwise-identical weights, distinct seeds differ") {
    auto a = build_model<double>(tiny_config(), 7);
    auto b = build_model<double>(tiny_config(), 7);
    auto c = build_model<double>(tiny_config(), 8);
    ParamRegistry<double> ra, rb, rc;
    a->register_params(ra);
    b->register_params(rb);
    c->register_params(rc);
    REQUIRE(ra.entries().size() == rb.entries().size());
    double diff_c = 0.0;
    for (std::size_t i = 0; i < ra.entries().size(); ++i) {
        CHECK(max_abs_diff(*ra.entries()[i].value, *rb.entries()[i].value) == 0.0);
        diff_c = std::max(diff_c,
                          static_cast<double>(max_abs_diff(*ra.entries()[i].value,
                                                           *rc.entries()[i].value)));
    }
    CHECK(diff_c > 0.0);
}

TEST_CASE("model: wrong mask channel count is rejected") {
    auto m = build_model<double>(tiny_config(), 45);
    Rng rng(504);
    auto z = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto mask = random_mask(rng, 4, 8, 8);
    CHECK_THROWS_AS((void)m->forward_velocity(z, 0.5, mask, nullptr), ShapeError);
}

// ---------------------------------------------------------------------------
// gradients through the whole pipeline
// ---------------------------------------------------------------------------

TEST_CASE("model: flow-loss gradients match finite differences for every group") {
    auto m = build_model<double>(tiny_config(), 46, InitMode::GradcheckRandom);
    Rng rng(505);
    auto x = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto eps = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto mask = random_mask(rng, 3, 8, 8);
    const double t = 0.6;
    Tensor<double> z = flow::interpolate(x, eps, t);

    auto loss = [&]() {
        return flow::fm_loss(m->forward_velocity(z, t, mask, nullptr), x, eps);
    };

    ParamRegistry<double> reg;
    m->register_params(reg);
    reg.sort_by_name();
    reg.zero_grads();

    ModelCache<double> cache;
    Tensor<double> v = m->forward_velocity(z, t, mask, &cache);
    Tensor<double> dv = flow::fm_loss_backward(v, x, eps);
    (void)m->backward(dv, cache);

    i64 groups_checked = 0;
    for (const auto& e : reg.entries()) {
        Rng coord_rng = Rng::stream(505, {static_cast<u64>(groups_checked)});
        const i64 n_coords = std::min<i64>(e.value->numel(), 6);
        for (i64 s = 0; s < n_coords; ++s) {
            const i64 idx = coord_rng.uniform_int(0, e.value->numel() - 1);
            const double fd = testutil::central_diff(*e.value, idx, 1e-5, loss);
            const double an = (*e.grad)[idx];
            INFO("group=", e.name, " idx=", idx, " fd=", fd, " analytic=", an);
            const bool ok = testutil::rel_err(an, fd) < 1e-4 || std::abs(an - fd) < 2e-11;
            CHECK(ok);
        }
        ++groups_checked;
    }
    CHECK(groups_checked == static_cast<i64>(reg.entries().size()));
}

TEST_CASE("model: input gradient matches finite differences") {
    auto m = build_model<double>(tiny_config(), 47, InitMode::GradcheckRandom);
    Rng rng(506);
    auto x = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto eps = random_tensor<double>(rng, {2, 8, 8}, -1.0, 1.0);
    auto mask = random_mask(rng, 3, 8, 8);
    const double t = 0.3;
    Tensor<double> z = flow::interpolate(x, eps, t);

    auto loss = [&]() {
        return flow::fm_loss(m->forward_velocity(z, t, mask, nullptr), x, eps);
    };

    ModelCache<double> cache;
    Tensor<double> v = m->forward_velocity(z, t, mask, &cache);
    Tensor<double> dv = flow::fm_loss_backward(v, x, eps);
    Tensor<double> dz = m->backward(dv, cache);

    Rng coord_rng(5060);
    for (int s = 0; s < 24; ++s) {
        const i64 idx = coord_rng.uniform_int(0, z.numel() - 1);
        const double fd = testutil::central_diff(z, idx, 1e-5, loss);
        INFO("idx=", idx, " fd=", fd, " analytic=", dz[idx]);
        const bool ok = testutil::rel_err(dz[idx], fd) < 1e-4 || std::abs(dz[idx] - fd) < 2e-11;
        CHECK(ok);
    }
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

TEST_CASE("count_params: tiny config matches the hand-computed layer tally") {
    ModelConfig c = tiny_config();
    auto m = build_model<double>(c, 48);
    ParamRegistry<double> reg;
    m->register_params(reg);
    ParamReport rep = count_params(reg);

    // Hand tally: D=8, E=16, N=2, W=4, cond=8, pdim=2*2*2=8, D_m=ceil(8/4)=2.
    const i64 patch_proj = 8 * 8 + 8;
    const i64 mask_enc = 3 * 2 + (2 * 4) * 8 + 8;
    const i64 t_embed = 2 * (8 * 8 + 8);
    const i64 self_mixer = (8 * 32 + 32) + (16 * 4 + 16) + 16 * 2 + 16 * 2 + (16 * 16 + 16) +
                           16 * 2 + 16 + (16 * 8 + 8);
    const i64 cross_mixer = (8 * 32 + 32) + (16 * 4 + 16) + 8 * 2 + 16 * 2 + (8 * 16 + 16) +
                            16 * 2 + 16 + (16 * 8 + 8);
    const i64 ffn = 8 * 32 + 32 + 32 * 8 + 8;
    const i64 adaln = 8 * 72 + 72;
    const i64 per_block = self_mixer + cross_mixer + ffn + adaln;
    const i64 final_ada = 8 * 16 + 16;
    const i64 head = 8 * 8 + 8;
    const i64 want = patch_proj + mask_enc + t_embed + 2 * per_block + final_ada + head;

    CHECK(rep.total == want);
    CHECK(analytic_param_count(c) == want);

    i64 from_modules = 0;
    for (const auto& [name, n] : rep.per_module) from_modules += n;
    CHECK(from_modules == rep.total);
}

TEST_CASE("count_params: invariant to seed, and the full preset is reported") {
    ModelConfig c = tiny_config();
    auto a = build_model<double>(c, 1);
    auto b = build_model<double>(c, 2);
    ParamRegistry<double> ra, rb;
    a->register_params(ra);
    b->register_params(rb);
    CHECK(count_params(ra).total == count_params(rb).total);

    const i64 full_total = analytic_param_count(ModelConfig::full());
    MESSAGE("full preset parameter count: ", full_total);
    CHECK(full_total > 100000000);
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

TEST_CASE("ema_update: geometric recursion matches the closed form") {
    auto m = build_model<double>(tiny_config(), 49);
    ParamRegistry<double> reg;
    m->register_params(reg);
    EmaState<double> ema = EmaState<double>::from_registry(reg);

    // Shift the live weights once, then hold them constant for k updates.
    std::vector<Tensor<double>> ema0;
    for (const auto& v : ema.values) ema0.push_back(v);
    for (const auto& e : reg.entries())
        for (i64 i = 0; i < e.value->numel(); ++i) (*e.value)[i] += 0.5;

    const double decay = 0.9;
    const int k = 12;
    for (int s = 0; s < k; ++s) ema_update(ema, reg, decay);

    const double dk = std::pow(decay, k);
    for (std::size_t j = 0; j < ema.values.size(); ++j) {
        const Tensor<double>& w = *reg.entries()[j].value;
        for (i64 i = 0; i < w.numel(); ++i) {
            const double want = w[i] + (ema0[j][i] - w[i]) * dk;
            CHECK(std::abs(ema.values[j][i] - want) <= 1e-12);
        }
    }
}

TEST_CASE("ema_update: decay zero copies the weights, gap shrinks monotonically") {
    auto m = build_model<double>(tiny_config(), 50);
    ParamRegistry<double> reg;
    m->register_params(reg);
    EmaState<double> ema = EmaState<double>::from_registry(reg);
    for (const auto& e : reg.entries())
        for (i64 i = 0; i < e.value->numel(); ++i) (*e.value)[i] += 1.0;

    auto gap = [&]() {
        double g = 0.0;
        for (std::size_t j = 0; j < ema.values.size(); ++j)
            g = std::max(g, static_cast<double>(
                                max_abs_diff(ema.values[j], *reg.entries()[j].value)));
        return g;
    };

    double prev = gap();
    for (int s = 0; s < 5; ++s) {
        ema_update(ema, reg, 0.9999);
        const double cur = gap();
        CHECK(cur < prev);
        prev = cur;
    }

    ema_update(ema, reg, 0.0);
    CHECK(gap() == 0.0);

    CHECK_THROWS_AS(ema_update(ema, reg, 1.0), ValidationError);
    CHECK_THROWS_AS(ema_update(ema, reg, -0.1), ValidationError);
}

TEST_CASE("ema_update: structural mismatch names the entry") {
    auto m = build_model<double>(tiny_config(), 51);
    ParamRegistry<double> reg;
    m->register_params(reg);
    EmaState<double> ema = EmaState<double>::from_registry(reg);
    ema.names[3] = "not_a_real_entry";
    CHECK_THROWS_WITH_AS(ema_update(ema, reg, 0.5), doctest::Contains("not_a_real_entry"),
                         ValidationError);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

Checkpoint sample_checkpoint() {
    Checkpoint ck;
    ck.config_fingerprint = 0xabcdef1234567890ULL;
    ck.step = 1234;
    CkptEntry e1;
    e1.name = "w/zeta";
    e1.dtype = EntryDtype::F64;
    e1.shape = {2, 3};
    e1.data = {1.0, -2.5, 3.25, 0.0, 1e-300, -7.125};
    CkptEntry e2;
    e2.name = "w/alpha";
    e2.dtype = EntryDtype::F32;
    e2.shape = {4};
    e2.data = {0.5, -0.25, 1.0f / 3.0f, 99.0};
    CkptEntry e3;
    e3.name = "opt/m";
    e3.dtype = EntryDtype::F64;
    e3.shape = {2};
    e3.data = {3.14159, -2.71828};
    ck.entries = {e1, e2, e3};
    return ck;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("checkpoint: save then load preserves all fields and values exactly") {
    const std::string path = temp_path("roundtrip.ckpt");
    Checkpoint ck = sample_checkpoint();
    save_checkpoint(path, ck);
    Checkpoint got = load_checkpoint(path);

    CHECK(got.version == Checkpoint::kCkptVersion);
    CHECK(got.config_fingerprint == ck.config_fingerprint);
    CHECK(got.step == ck.step);
    REQUIRE(got.entries.size() == 3);
    // Entries come back name-sorted.
    CHECK(got.entries[0].name == "opt/m");
    CHECK(got.entries[1].name == "w/alpha");
    CHECK(got.entries[2].name == "w/zeta");

    const CkptEntry* zeta = got.find("w/zeta");
    REQUIRE(zeta != nullptr);
    CHECK(zeta->shape == std::vector<i64>{2, 3});
    for (std::size_t i = 0; i < 6; ++i) CHECK(zeta->data[i] == ck.entries[0].data[i]);

    const CkptEntry* alpha = got.find("w/alpha");
    REQUIRE(alpha != nullptr);
    CHECK(alpha->dtype == EntryDtype::F32);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(alpha->data[i] == static_cast<double>(static_cast<float>(ck.entries[1].data[i])));

    // Canonical bytes: a second save of the loaded content is identical.
    const std::string path2 = temp_path("roundtrip2.ckpt");
    save_checkpoint(path2, got);
    CHECK(read_file(path) == read_file(path2));
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("checkpoint: truncation, bad magic, corruption, and version mismatch") {
    const std::string path = temp_path("damage.ckpt");
    save_checkpoint(path, sample_checkpoint());
    const std::string bytes = read_file(path);

    // Truncations at several prefixes, all structured failures.
    for (std::size_t cut : {5ul, 11ul, 30ul, bytes.size() - 3}) {
        write_file(path, bytes.substr(0, cut));
        CHECK_THROWS_AS((void)load_checkpoint(path), IntegrityError);
    }

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_file(path, bad_magic);
    CHECK_THROWS_AS((void)load_checkpoint(path), IntegrityError);

    // Flip one payload byte: checksum must catch it.
    std::string corrupt = bytes;
    corrupt[bytes.size() - 12] ^= 0x40;
    write_file(path, corrupt);
    CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("checksum"),
                         IntegrityError);

    // Unknown version names found and supported versions.
    std::string newver = bytes;
    newver[10] = 9;
    write_file(path, newver);
    CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("version 9"),
                         MigrationError);

    CHECK_THROWS_AS((void)load_checkpoint(temp_path("missing.ckpt")), IoError);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: registry entries round-trip through a file bitwise") {
    auto m = build_model<double>(tiny_config(), 52);
    ParamRegistry<double> reg;
    m->register_params(reg);
    reg.sort_by_name();

    Checkpoint ck;
    ck.config_fingerprint = tiny_config().fingerprint();
    ck.step = 77;
    append_registry_entries(ck, reg, "w/");
    const std::string path = temp_path("weights.ckpt");
    save_checkpoint(path, ck);

    auto m2 = build_model<double>(tiny_config(), 999);
    ParamRegistry<double> reg2;
    m2->register_params(reg2);
    reg2.sort_by_name();
    Checkpoint got = load_checkpoint(path);
    load_registry_entries(got, reg2, "w/");

    for (std::size_t i = 0; i < reg.entries().size(); ++i)
        CHECK(max_abs_diff(*reg.entries()[i].value, *reg2.entries()[i].value) == 0.0);

    // Missing prefix names the first absent entry.
    CHECK_THROWS_AS(load_registry_entries(got, reg2, "ema/"), IntegrityError);
    std::remove(path.c_str());
}
