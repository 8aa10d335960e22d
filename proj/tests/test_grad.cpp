#include "doctest.h"

#include <cmath>
#include <map>
#include <string>

#include "lsiq/model.hpp"
#include "lsiq/rng.hpp"
#include "lsiq/trainer.hpp"
#include "oracles.hpp"

using namespace lsiq;

namespace {

std::vector<double> random_vec(RandomStream& rng, int n, double scale) {
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.normal() * scale;
    return v;
}

// a quantized linear layer with every trainable feature switched on and
// parameters nudged off their init so no gradient path degenerates
LinearUnit make_unit(uint64_t seed, Granularity gran, int group_size, int square_n,
                     bool smooth) {
    RandomStream rng(seed);
    const int in = 8, out = 12;
    LinearUnit u;
    u.w.w = rng.gaussian_matrix(in, out);
    u.w.bias = random_vec(rng, out, 0.5);
    u.w.state = WeightState::Lsi;
    u.w.lsi = capture(u.w.w, square_n);
    u.w.quant_enabled = true;
    u.w.cfg.bits = 3;
    u.w.cfg.granularity = gran;
    u.w.cfg.group_size = group_size;
    size_t ng = static_cast<size_t>(u.w.cfg.num_groups(in, out));
    u.w.cfg.clip_gamma.assign(ng, 2.0); // sigmoid ~ 0.88 keeps clip grads alive
    u.w.cfg.clip_beta.assign(ng, 2.0);
    for (double& d : u.w.lsi.increment) d = rng.normal() * 0.05;
    for (double& d : u.w.lsi.k_block.data) d = rng.normal() * 0.02;
    if (smooth) {
        u.sm.enabled = true;
        u.sm.log_sc = random_vec(rng, in, 0.2);
        u.sm.delta = random_vec(rng, in, 0.1);
    }
    return u;
}

// runs fd_check over every registered entry against the analytic gradients
// captured in one frozen backward pass; returns per-entry stats
template <typename LossAndGrads, typename LossOnly>
std::map<std::string, oracle::FdStats> check_group(ParamGroup& g, LossAndGrads&& lg,
                                                   LossOnly&& lo, double h, double tol,
                                                   size_t stride) {
    FrozenRounds fr;
    g.zero_grads();
    double base = lg(&fr);
    REQUIRE(std::isfinite(base));
    auto loss = [&]() {
        fr.rewind();
        return lo(&fr);
    };
    // replay at the unperturbed point must reproduce the captured loss
    CHECK(loss() == base);
    std::map<std::string, oracle::FdStats> stats;
    for (ParamEntry& e : g.entries)
        oracle::fd_check(e.data, e.size, e.grad, loss, h, tol, stats[e.name], stride);
    return stats;
}

} // namespace

TEST_CASE("pass-through gradient masks exactly the out-of-range entries") {
    Matrix grad(2, 3);
    for (size_t i = 0; i < grad.size(); ++i) grad.data[i] = static_cast<double>(i) + 1.0;
    FqCache cache;
    cache.in_range = {1, 1, 1, 1, 1, 1};
    Matrix same = ste_backward(grad, cache, true);
    CHECK(bit_equal(same, grad));
    cache.in_range = {1, 0, 1, 0, 0, 1};
    Matrix masked = ste_backward(grad, cache, true);
    for (size_t i = 0; i < grad.size(); ++i)
        CHECK(masked.data[i] == (cache.in_range[i] ? grad.data[i] : 0.0));
    Matrix unmasked = ste_backward(grad, cache, false);
    CHECK(bit_equal(unmasked, grad));
    cache.in_range = {1, 0};
    CHECK_THROWS_AS(ste_backward(grad, cache, true), ShapeError);
}

TEST_CASE("quantizer backward is the identity when quantization was skipped") {
    Matrix grad(2, 2);
    grad(0, 0) = 3.5;
    FqCache empty;
    Matrix out = fq_backward(grad, grad, empty, 15, nullptr, nullptr, true, nullptr, nullptr);
    CHECK(bit_equal(out, grad));
}

TEST_CASE("frozen rounding replays the capture bit-exactly and moves smoothly") {
    RandomStream rng(101);
    Matrix w = rng.gaussian_matrix(6, 8);
    QuantConfig cfg;
    cfg.bits = 3;
    FrozenRounds fr;
    Matrix base = fake_quantize_cached(w, cfg, nullptr, &fr);
    CHECK(bit_equal(base, fake_quantize(w, cfg)));
    fr.rewind();
    Matrix replay = fake_quantize_cached(w, cfg, nullptr, &fr);
    CHECK(bit_equal(replay, base));
    // small input motion now produces proportionally small output motion
    const double h = 1e-6;
    Matrix wp = w;
    for (double& v : wp.data) v += h;
    fr.rewind();
    Matrix moved = fake_quantize_cached(wp, cfg, nullptr, &fr);
    CHECK(max_abs_diff(moved, base) < 100.0 * h);
    CHECK(max_abs_diff(moved, base) > 0.0);
}

TEST_CASE("exhausting the frozen residual stream is an error") {
    FrozenRounds fr;
    fr.round(1.3);
    fr.rewind();
    fr.round(1.3);
    CHECK_THROWS_AS(fr.round(2.2), Error);
}

TEST_CASE("per-channel linear unit gradients match finite differences") {
    LinearUnit u = make_unit(7, Granularity::PerChannel, 0, 0, true);
    RandomStream rng(8);
    Matrix x = rng.gaussian_matrix(10, 8);
    Matrix target = linear_unit_forward_fp(u, x);
    TrainConfig cfg;
    cfg.act_bits = 4;
    ParamGroup g;
    register_linear_params(u, g, g, 0);
    auto stats = check_group(
        g,
        [&](FrozenRounds* fr) { return linear_loss_and_grads(u, x, target, cfg, g, fr); },
        [&](FrozenRounds* fr) { return linear_loss_only(u, x, target, cfg, fr); }, 1e-4, 1e-3,
        1);
    for (const char* name : {"w.inc", "w.ga", "w.be", "sm.ls", "sm.de"}) {
        INFO("entry " << name);
        REQUIRE(stats.count(name) == 1);
        CHECK(stats[name].checked > 0);
        CHECK(stats[name].failed == 0);
    }
}

TEST_CASE("grouped linear unit with a square block matches finite differences") {
    LinearUnit u = make_unit(9, Granularity::Group, 4, 3, true);
    RandomStream rng(10);
    Matrix x = rng.gaussian_matrix(12, 8);
    Matrix target = linear_unit_forward_fp(u, x);
    TrainConfig cfg;
    cfg.act_bits = 16; // unquantized activations exercise the passthrough path
    ParamGroup g;
    register_linear_params(u, g, g, 0);
    auto stats = check_group(
        g,
        [&](FrozenRounds* fr) { return linear_loss_and_grads(u, x, target, cfg, g, fr); },
        [&](FrozenRounds* fr) { return linear_loss_only(u, x, target, cfg, fr); }, 1e-4, 1e-3,
        1);
    for (const char* name : {"w.inc", "w.kb", "w.ga", "w.be", "sm.ls", "sm.de"}) {
        INFO("entry " << name);
        REQUIRE(stats.count(name) == 1);
        CHECK(stats[name].checked > 0);
        CHECK(stats[name].failed == 0);
    }
}

TEST_CASE("restricting trained increment dims registers only the leading ones") {
    LinearUnit u = make_unit(11, Granularity::PerChannel, 0, 0, false);
    ParamGroup g;
    register_linear_params(u, g, g, 2);
    ParamEntry* e = g.find("w.inc");
    REQUIRE(e != nullptr);
    CHECK(e->size == 2);
    CHECK(e->data == u.w.lsi.increment.data());
}

TEST_CASE("full transformer block gradients match finite differences") {
    ModelSpec spec;
    spec.layers = 1;
    spec.width = 16;
    spec.heads = 2;
    spec.vocab = 24;
    spec.mlp_mult = 2;
    spec.max_seq = 8;
    LayerGraph m = make_synthetic_model(spec, 21);
    PrepOptions prep;
    prep.weight_bits = 3;
    prep.granularity = Granularity::Group;
    prep.group_size = 4;
    prep.square_n = 3;
    prepare_for_quantization(m, prep);
    Block& b = m.blocks[0];

    RandomStream rng(22);
    for (QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down}) {
        for (double& d : qw->lsi.increment) d = rng.normal() * 0.05;
        for (double& d : qw->lsi.k_block.data) d = rng.normal() * 0.02;
        for (double& d : qw->cfg.clip_gamma) d = 2.0;
        for (double& d : qw->cfg.clip_beta) d = 2.0;
    }
    for (LinearSmooth* sm : {&b.sm_qkv, &b.sm_out, &b.sm_up}) {
        for (double& d : sm->log_sc) d = rng.normal() * 0.2;
        for (double& d : sm->delta) d = rng.normal() * 0.1;
    }
    for (double& d : b.log_sa) d = rng.normal() * 0.2;

    auto seqs = make_synthetic_data(spec, 23, 2, 6);
    Activations x;
    x.x = embed_tokens(m, seqs);
    x.seq_len = 6;
    Matrix target = block_forward_fp(b, x);
    TrainConfig cfg;
    cfg.act_bits = 4;
    ParamGroup g;
    register_block_params(b, g, g, 0);

    auto stats = check_group(
        g,
        [&](FrozenRounds* fr) { return block_loss_and_grads(b, x, target, cfg, g, fr); },
        [&](FrozenRounds* fr) { return block_loss_only(b, x, target, cfg, fr); }, 1e-4, 1e-3,
        5);
    // collapse per-weight entries into the seven trainable classes
    std::map<std::string, oracle::FdStats> cls;
    for (const auto& [name, st] : stats) {
        std::string key = name.substr(name.rfind('.') + 1);
        if (name == "sa") key = "sa";
        cls[key].checked += st.checked;
        cls[key].failed += st.failed;
        cls[key].worst_rel = std::max(cls[key].worst_rel, st.worst_rel);
    }
    for (const char* key : {"inc", "kb", "ga", "be", "ls", "de", "sa"}) {
        INFO("class " << key << " worst rel " << cls[key].worst_rel);
        REQUIRE(cls.count(key) == 1);
        CHECK(cls[key].checked > 0);
        CHECK(cls[key].failed == 0);
    }
}

TEST_CASE("block forward without a frozen stream matches the plain quant path") {
    ModelSpec spec;
    spec.layers = 1;
    spec.width = 16;
    spec.heads = 2;
    spec.vocab = 24;
    spec.mlp_mult = 2;
    spec.max_seq = 8;
    LayerGraph m = make_synthetic_model(spec, 31);
    PrepOptions prep;
    prep.weight_bits = 4;
    prepare_for_quantization(m, prep);
    auto seqs = make_synthetic_data(spec, 32, 2, 6);
    Activations x;
    x.x = embed_tokens(m, seqs);
    x.seq_len = 6;
    QuantPathOpts opt;
    opt.act_bits = 4;
    Matrix direct = block_forward_quant(m.blocks[0], x, opt, nullptr);
    FrozenRounds fr;
    QuantPathOpts fopt;
    fopt.act_bits = 4;
    fopt.frozen = &fr;
    Matrix captured = block_forward_quant(m.blocks[0], x, fopt, nullptr);
    CHECK(bit_equal(captured, direct));
}
