#include <cctype>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lsiq/io.hpp"
#include "lsiq/model.hpp"
#include "lsiq/trainer.hpp"

using nlohmann::json;
using namespace lsiq;

namespace {

struct QuantFlags {
    std::string setting;
    int bits = 4;
    int act_bits = 16;
    int group_size = 0;
    int square_n = -1; // -1 auto, 0 off
    bool no_lsi = false;
    bool no_smooth = false;
    bool no_lwc = false;
};

struct TrainFlags {
    double lr = 2e-4;
    double weight_decay = 0.0;
    int epochs = 20;
    int batch_size = 0;
    std::uint64_t seed = 0;
    bool two_phase = false;
    bool quiet = false;
};

// compact notation w<bits>a<bits>[g<size>], e.g. w4a16g128
void parse_setting(const std::string& s, int& bits, int& act_bits, int& group_size) {
    size_t i = 0;
    auto read_int = [&](char prefix) {
        if (i >= s.size() || s[i] != prefix)
            throw ConfigError("bad --setting '" + s + "', expected w<k>a<k>[g<size>]");
        ++i;
        size_t start = i;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i == start)
            throw ConfigError("bad --setting '" + s + "', expected w<k>a<k>[g<size>]");
        return static_cast<int>(std::stol(s.substr(start, i - start)));
    };
    bits = read_int('w');
    act_bits = read_int('a');
    if (i < s.size()) group_size = read_int('g');
    if (i != s.size())
        throw ConfigError("bad --setting '" + s + "', trailing characters");
}

// explicit flags win over --setting
void resolve_quant(QuantFlags& qf, const CLI::Option* bits_opt, const CLI::Option* act_opt,
                   const CLI::Option* group_opt) {
    if (!qf.setting.empty()) {
        int b = qf.bits, a = qf.act_bits, g = qf.group_size;
        parse_setting(qf.setting, b, a, g);
        if (!bits_opt->count()) qf.bits = b;
        if (!act_opt->count()) qf.act_bits = a;
        if (!group_opt->count()) qf.group_size = g;
    }
    if (qf.bits < 2 || qf.bits > 8 || qf.bits == 5 || qf.bits == 7)
        throw ConfigError("--bits must be one of 2,3,4,6,8 (storable code widths)");
    if (qf.act_bits < 2 || qf.act_bits > 16)
        throw ConfigError("--act-bits must lie in [2,16]; values above 8 disable activation quantization");
    if (qf.group_size < 0) throw ConfigError("--group-size must be >= 0");
    if (qf.square_n > 0 && qf.group_size <= 0)
        throw ConfigError("--square-n > 0 requires --group-size > 0");
}

PrepOptions to_prep(const QuantFlags& qf) {
    PrepOptions p;
    p.weight_bits = qf.bits;
    p.granularity = qf.group_size > 0 ? Granularity::Group : Granularity::PerChannel;
    p.group_size = qf.group_size;
    p.use_lsi = !qf.no_lsi;
    p.use_smooth = !qf.no_smooth;
    p.use_lwc = !qf.no_lwc;
    p.square_n = qf.square_n;
    return p;
}

TrainConfig to_train(const TrainFlags& tf, const QuantFlags& qf) {
    if (tf.lr <= 0) throw ConfigError("--lr must be positive");
    if (tf.epochs < 1) throw ConfigError("--epochs must be >= 1");
    if (tf.batch_size < 0) throw ConfigError("--batch-size must be >= 0");
    TrainConfig tc;
    tc.learning_rate = tf.lr;
    tc.weight_decay = tf.weight_decay;
    tc.epochs = tf.epochs;
    tc.batch_size = tf.batch_size;
    tc.seed = tf.seed;
    tc.act_bits = qf.act_bits;
    tc.two_phase = tf.two_phase;
    if (!tf.quiet) tc.trace = &std::cerr;
    return tc;
}

bool is_plain_float(const LayerGraph& m) {
    for (const auto& b : m.blocks)
        for (const QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            if (qw->state != WeightState::Float || qw->quant_enabled) return false;
    return true;
}

bool k_block_enabled(const LayerGraph& m) {
    for (const auto& b : m.blocks)
        for (const QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            if (qw->state == WeightState::Lsi && !qw->lsi.k_block.empty()) return true;
    return false;
}

json layer_rows(const ModelCalibResult& r, int first_layer) {
    json rows = json::array();
    for (size_t i = 0; i < r.layers.size(); ++i) {
        const LayerResult& L = r.layers[i];
        double red = L.initial_loss > 0 ? (1.0 - L.final_loss / L.initial_loss) * 100.0 : 0.0;
        rows.push_back({{"layer", first_layer + static_cast<int>(i)},
                        {"rtn_loss", L.initial_loss},
                        {"final_loss", L.final_loss},
                        {"reduction_pct", red},
                        {"epochs_run", L.epochs_run}});
    }
    return rows;
}

void mean_losses(const ModelCalibResult& r, double& mean_rtn, double& mean_final) {
    mean_rtn = mean_final = 0.0;
    if (r.layers.empty()) return;
    for (const LayerResult& L : r.layers) {
        mean_rtn += L.initial_loss;
        mean_final += L.final_loss;
    }
    mean_rtn /= static_cast<double>(r.layers.size());
    mean_final /= static_cast<double>(r.layers.size());
}

json summary_json(const ModelCalibResult& r) {
    double mean_rtn = 0.0, mean_final = 0.0;
    mean_losses(r, mean_rtn, mean_final);
    double red = mean_rtn > 0 ? (1.0 - mean_final / mean_rtn) * 100.0 : 0.0;
    return {{"mean_rtn_loss", mean_rtn},
            {"mean_final_loss", mean_final},
            {"mean_reduction_pct", red}};
}

// two-stream per-block output MSE: quantized trajectory vs full-precision trajectory
std::vector<double> per_layer_mse(const LayerGraph& m, const LayerGraph& ref,
                                  const std::vector<std::vector<int32_t>>& seqs,
                                  const QuantPathOpts& opt) {
    int seq_len = static_cast<int>(seqs.front().size());
    Matrix fp = embed_tokens(ref, seqs);
    Matrix qx = embed_tokens(m, seqs);
    std::vector<double> losses;
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        Matrix fp_next = block_forward_fp(ref.blocks[i], {fp, seq_len});
        Matrix q_next = block_forward_quant(m.blocks[i], {qx, seq_len}, opt, nullptr);
        losses.push_back(frobenius_mse(q_next, fp_next));
        fp = std::move(fp_next);
        qx = std::move(q_next);
    }
    return losses;
}

void check_same_shape(const LayerGraph& m, const LayerGraph& ref) {
    if (m.spec.layers != ref.spec.layers || m.spec.width != ref.spec.width ||
        m.spec.vocab != ref.spec.vocab || m.spec.heads != ref.spec.heads ||
        m.spec.mlp_mult != ref.spec.mlp_mult)
        throw ConfigError("--ref model shape does not match --model");
}

json quant_echo(const QuantFlags& qf, bool k_enabled) {
    return {{"bits", qf.bits},
            {"act_bits", qf.act_bits},
            {"group_size", qf.group_size},
            {"square_n", qf.square_n},
            {"k_enabled", k_enabled},
            {"lsi", !qf.no_lsi},
            {"smooth", !qf.no_smooth},
            {"lwc", !qf.no_lwc}};
}

// ---- subcommands ----

struct GenFlags {
    std::string out_model, out_calib, out_eval;
    std::uint64_t seed = 0;
    int layers = 4, width = 64, heads = 4, vocab = 256, mlp_mult = 4, max_seq = 64;
    double outlier_fraction = 0.0;
    int calib_samples = 32, eval_samples = 8, seq_len = 32;
};

int run_gen(const GenFlags& g) {
    ModelSpec spec;
    spec.layers = g.layers;
    spec.width = g.width;
    spec.heads = g.heads;
    spec.vocab = g.vocab;
    spec.mlp_mult = g.mlp_mult;
    spec.max_seq = g.max_seq;
    spec.outlier_fraction = g.outlier_fraction;
    if (g.seq_len < 2 || g.seq_len > spec.max_seq)
        throw ConfigError("--seq-len must lie in [2, --max-seq]");
    if (g.calib_samples < 1 || g.eval_samples < 1)
        throw ConfigError("sample counts must be >= 1");

    LayerGraph m = make_synthetic_model(spec, g.seed);
    write_model(g.out_model, m);
    json out = {{"command", "gen"},
                {"model", g.out_model},
                {"seed", g.seed},
                {"outlier_ratio", channel_outlier_ratio(m)},
                {"spec",
                 {{"layers", spec.layers},
                  {"width", spec.width},
                  {"heads", spec.heads},
                  {"vocab", spec.vocab},
                  {"mlp_mult", spec.mlp_mult},
                  {"max_seq", spec.max_seq},
                  {"outlier_fraction", spec.outlier_fraction}}}};
    if (!g.out_calib.empty()) {
        write_tokens(g.out_calib, make_synthetic_data(spec, g.seed + 1, g.calib_samples, g.seq_len));
        out["calib"] = g.out_calib;
    }
    if (!g.out_eval.empty()) {
        write_tokens(g.out_eval, make_synthetic_data(spec, g.seed + 2, g.eval_samples, g.seq_len));
        out["eval"] = g.out_eval;
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_quantize(const std::string& model_path, const std::string& calib_path,
                 const std::string& out_path, const QuantFlags& qf, const TrainFlags& tf) {
    TrainConfig tc = to_train(tf, qf);
    LayerGraph m = read_model(model_path);
    if (!is_plain_float(m)) throw ConfigError("input model is already quantized");
    auto calib = load_tokens(calib_path, m.spec.vocab);

    prepare_for_quantization(m, to_prep(qf));
    bool k_enabled = k_block_enabled(m);
    ModelCalibResult r = calibrate_model(m, calib, tc);
    write_model(out_path, m);

    json out = {{"command", "quantize"},
                {"config", quant_echo(qf, k_enabled)},
                {"epochs", tf.epochs},
                {"lr", tf.lr},
                {"seed", tf.seed},
                {"layers", layer_rows(r, 0)},
                {"summary", summary_json(r)},
                {"out", out_path}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_eval(const std::string& model_path, const std::string& data_path,
             const std::string& ref_path, int act_bits) {
    if (act_bits < 2 || act_bits > 16) throw ConfigError("--act-bits must lie in [2,16]");
    LayerGraph m = read_model(model_path);
    auto seqs = load_tokens(data_path, m.spec.vocab);
    QuantPathOpts opt;
    opt.act_bits = act_bits;
    bool fp = is_plain_float(m);
    double ppl = perplexity(m, seqs, fp ? EvalMode::Fp : EvalMode::Quant, opt);

    json out = {{"command", "eval"},
                {"mode", fp ? "fp" : "quant"},
                {"act_bits", act_bits},
                {"perplexity", ppl}};
    if (!ref_path.empty()) {
        LayerGraph ref = read_model(ref_path);
        if (!is_plain_float(ref)) throw ConfigError("--ref must be a full-precision model");
        check_same_shape(m, ref);
        out["logit_mse"] = logit_mse(m, ref, seqs, opt);
        out["per_layer_mse"] = per_layer_mse(m, ref, seqs, opt);
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_finetune(const std::string& model_path, const std::string& calib_path,
                 const std::string& holdout_path, const std::string& out_path,
                 const QuantFlags& qf, const TrainFlags& tf, int last_layers) {
    TrainConfig tc = to_train(tf, qf);
    if (last_layers < 1) throw ConfigError("--finetune-last must be >= 1");
    LayerGraph fpm = read_model(model_path);
    if (!is_plain_float(fpm)) throw ConfigError("input model is already quantized");
    if (last_layers > static_cast<int>(fpm.blocks.size()))
        throw ConfigError("--finetune-last exceeds layer count");
    auto calib = load_tokens(calib_path, fpm.spec.vocab);
    std::vector<std::vector<int32_t>> holdout;
    if (!holdout_path.empty()) holdout = load_tokens(holdout_path, fpm.spec.vocab);

    LayerGraph work = fpm;
    prepare_for_quantization(work, to_prep(qf));
    bool k_enabled = k_block_enabled(work);

    QuantPathOpts opt;
    opt.act_bits = qf.act_bits;
    LayerGraph baseline = work;
    fold_model(baseline);
    double before = logit_mse(baseline, fpm, calib, opt);
    double holdout_before = holdout.empty() ? 0.0 : logit_mse(baseline, fpm, holdout, opt);

    ModelCalibResult r = finetune_last_layers(work, calib, tc, last_layers);
    double after = logit_mse(work, fpm, calib, opt);
    write_model(out_path, work);

    int first = static_cast<int>(work.blocks.size()) - last_layers;
    json out = {{"command", "finetune"},
                {"config", quant_echo(qf, k_enabled)},
                {"finetune_last", last_layers},
                {"target_mse_before", before},
                {"target_mse_after", after},
                {"layers", layer_rows(r, first)},
                {"out", out_path}};
    if (!holdout.empty()) {
        double holdout_after = logit_mse(work, fpm, holdout, opt);
        out["holdout_mse_before"] = holdout_before;
        out["holdout_mse_after"] = holdout_after;
        std::cerr << "holdout mse " << holdout_before << " -> " << holdout_after
                  << " (delta " << holdout_after - holdout_before << ", recorded only)\n";
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_ablate(const std::string& model_path, const std::string& calib_path,
               const QuantFlags& qf, const TrainFlags& tf, const std::vector<int>& square_set) {
    TrainConfig tc = to_train(tf, qf);
    for (int v : square_set)
        if (v > 0 && qf.group_size <= 0)
            throw ConfigError("--square-n-set entries > 0 require --group-size > 0");
    LayerGraph base = read_model(model_path);
    if (!is_plain_float(base)) throw ConfigError("input model is already quantized");
    auto calib = load_tokens(calib_path, base.spec.vocab);

    struct Variant {
        std::string name;
        PrepOptions prep;
    };
    std::vector<Variant> variants;
    PrepOptions full = to_prep(qf);
    variants.push_back({"full", full});
    {
        PrepOptions p = full;
        p.use_lsi = false;
        variants.push_back({"no_lsi", p});
    }
    {
        PrepOptions p = full;
        p.use_smooth = false;
        variants.push_back({"no_smooth", p});
    }
    {
        PrepOptions p = full;
        p.use_lwc = false;
        variants.push_back({"no_lwc", p});
    }
    for (int v : square_set) {
        PrepOptions p = full;
        p.square_n = v;
        variants.push_back({"square_n=" + std::to_string(v), p});
    }

    json rows = json::array();
    for (const Variant& v : variants) {
        if (tc.trace) *tc.trace << "variant=" << v.name << "\n";
        LayerGraph m = base;
        prepare_for_quantization(m, v.prep);
        ModelCalibResult r = calibrate_model(m, calib, tc);
        json row = summary_json(r);
        row["variant"] = v.name;
        rows.push_back(row);
    }
    std::cout << json{{"command", "ablate"}, {"rows", rows}}.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"post-training quantization toolkit: SVD-increment weights, learnable "
                 "smoothing and clipping, layerwise calibration, low-bit folding"};
    app.require_subcommand(1);

    GenFlags g;
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic model plus token data");
    gen->add_option("--out-model", g.out_model, "model output path")->required();
    gen->add_option("--out-calib", g.out_calib, "calibration token file");
    gen->add_option("--out-eval", g.out_eval, "evaluation token file");
    gen->add_option("--seed", g.seed, "generator seed")->capture_default_str();
    gen->add_option("--layers", g.layers)->capture_default_str();
    gen->add_option("--width", g.width)->capture_default_str();
    gen->add_option("--heads", g.heads)->capture_default_str();
    gen->add_option("--vocab", g.vocab)->capture_default_str();
    gen->add_option("--mlp-mult", g.mlp_mult)->capture_default_str();
    gen->add_option("--max-seq", g.max_seq)->capture_default_str();
    gen->add_option("--outlier-fraction", g.outlier_fraction, "fraction of columns scaled x10")
        ->capture_default_str();
    gen->add_option("--calib-samples", g.calib_samples)->capture_default_str();
    gen->add_option("--eval-samples", g.eval_samples)->capture_default_str();
    gen->add_option("--seq-len", g.seq_len)->capture_default_str();

    auto add_quant_flags = [](CLI::App* cmd, QuantFlags& qf, const CLI::Option*& bo,
                              const CLI::Option*& ao, const CLI::Option*& go) {
        bo = cmd->add_option("--bits", qf.bits, "weight bit width")->capture_default_str();
        ao = cmd->add_option("--act-bits", qf.act_bits, "activation bit width, >8 disables")
                 ->capture_default_str();
        go = cmd->add_option("--group-size", qf.group_size, "weights per group, 0 = per-channel")
                 ->capture_default_str();
        cmd->add_option("--setting", qf.setting, "compact form w<k>a<k>[g<size>], e.g. w4a16g128");
        cmd->add_option("--square-n", qf.square_n, "square block dim, -1 auto, 0 off")
            ->capture_default_str();
        cmd->add_flag("--no-lsi", qf.no_lsi, "disable singular-value increments");
        cmd->add_flag("--no-smooth", qf.no_smooth, "disable channel smoothing");
        cmd->add_flag("--no-lwc", qf.no_lwc, "disable learnable clipping");
    };
    auto add_train_flags = [](CLI::App* cmd, TrainFlags& tf) {
        cmd->add_option("--lr", tf.lr, "learning rate")->capture_default_str();
        cmd->add_option("--weight-decay", tf.weight_decay)->capture_default_str();
        cmd->add_option("--epochs", tf.epochs)->capture_default_str();
        cmd->add_option("--batch-size", tf.batch_size, "sequences per step, 0 = full set")
            ->capture_default_str();
        cmd->add_option("--seed", tf.seed, "shuffle seed")->capture_default_str();
        cmd->add_flag("--two-phase", tf.two_phase, "per epoch: factor params, then smoothing");
        cmd->add_flag("--quiet", tf.quiet, "suppress the per-epoch trace on stderr");
    };

    std::string q_model, q_calib, q_out;
    QuantFlags q_qf;
    TrainFlags q_tf;
    const CLI::Option *q_bo, *q_ao, *q_go;
    CLI::App* quantize = app.add_subcommand("quantize", "calibrate and fold a model to low bits");
    quantize->add_option("--model", q_model, "full-precision model")->required();
    quantize->add_option("--calib", q_calib, "calibration token file")->required();
    quantize->add_option("--out", q_out, "quantized model output")->required();
    add_quant_flags(quantize, q_qf, q_bo, q_ao, q_go);
    add_train_flags(quantize, q_tf);

    std::string e_model, e_data, e_ref;
    int e_act_bits = 16;
    CLI::App* eval = app.add_subcommand("eval", "perplexity and error metrics");
    eval->add_option("--model", e_model, "model to evaluate")->required();
    eval->add_option("--data", e_data, "evaluation token file")->required();
    eval->add_option("--ref", e_ref, "full-precision reference model for MSE metrics");
    eval->add_option("--act-bits", e_act_bits, "activation bit width for quantized models")
        ->capture_default_str();

    std::string f_model, f_calib, f_holdout, f_out;
    QuantFlags f_qf;
    TrainFlags f_tf;
    const CLI::Option *f_bo, *f_ao, *f_go;
    int f_last = 0;
    CLI::App* finetune = app.add_subcommand("finetune", "quantize but train only the last layers");
    finetune->add_option("--model", f_model, "full-precision model")->required();
    finetune->add_option("--calib", f_calib, "target token file")->required();
    finetune->add_option("--holdout", f_holdout, "held-out token file, loss delta recorded only");
    finetune->add_option("--out", f_out, "quantized model output")->required();
    finetune->add_option("--finetune-last", f_last, "number of trailing layers to train")
        ->required();
    add_quant_flags(finetune, f_qf, f_bo, f_ao, f_go);
    add_train_flags(finetune, f_tf);

    std::string a_model, a_calib;
    QuantFlags a_qf;
    TrainFlags a_tf;
    const CLI::Option *a_bo, *a_ao, *a_go;
    std::vector<int> a_square_set;
    CLI::App* ablate = app.add_subcommand("ablate", "loss table across pipeline variants");
    ablate->add_option("--model", a_model, "full-precision model")->required();
    ablate->add_option("--calib", a_calib, "calibration token file")->required();
    ablate->add_option("--square-n-set", a_square_set, "extra square block dims to tabulate")
        ->delimiter(',');
    add_quant_flags(ablate, a_qf, a_bo, a_ao, a_go);
    add_train_flags(ablate, a_tf);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen(g);
        if (quantize->parsed()) {
            resolve_quant(q_qf, q_bo, q_ao, q_go);
            return run_quantize(q_model, q_calib, q_out, q_qf, q_tf);
        }
        if (eval->parsed()) return run_eval(e_model, e_data, e_ref, e_act_bits);
        if (finetune->parsed()) {
            resolve_quant(f_qf, f_bo, f_ao, f_go);
            return run_finetune(f_model, f_calib, f_holdout, f_out, f_qf, f_tf, f_last);
        }
        if (ablate->parsed()) {
            resolve_quant(a_qf, a_bo, a_ao, a_go);
            return run_ablate(a_model, a_calib, a_qf, a_tf, a_square_set);
        }
    } catch (const TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 4;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DomainError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
