#pragma once

#include <cstdint>
#include <optional>

#include "lsiq/lsi.hpp"
#include "lsiq/quant.hpp"
#include "lsiq/rng.hpp"
#include "lsiq/smooth.hpp"

namespace lsiq {

struct ModelSpec {
    int layers = 4;
    int width = 64;
    int heads = 4;
    int vocab = 256;
    int mlp_mult = 4;
    int max_seq = 64;
    double outlier_fraction = 0.0;
};

enum class WeightState { Float, Lsi, Quantized };

// One linear weight plus its quantization state. Exactly one state is active:
// Float (master weight, optionally RTN fake-quantized when quant_enabled),
// Lsi (frozen factors + trainable increments), Quantized (plain codes).
struct QuantWeight {
    Matrix w;
    std::vector<double> bias;
    WeightState state = WeightState::Float;
    bool quant_enabled = false;
    LsiParams lsi;
    QuantizedTensor q;
    std::vector<double> folded_bias;
    QuantConfig cfg;

    int in_dim() const { return state == WeightState::Quantized ? q.rows : w.rows; }
    int out_dim() const { return state == WeightState::Quantized ? q.cols : w.cols; }
};

struct LinearSmooth {
    bool enabled = false;
    std::vector<double> log_sc;
    std::vector<double> delta;
};

struct Block {
    std::vector<double> norm_gain, norm_bias;
    QuantWeight wq, wk, wv, wo; // width x width, bias-free
    QuantWeight w_up, w_down;   // width x (mlp_mult*width) and back, with bias
    LinearSmooth sm_qkv;        // shared input transform for q/k/v
    LinearSmooth sm_out;        // input transform for wo
    LinearSmooth sm_up;         // input transform for w_up
    std::vector<double> log_sa; // q/k channel smoothing, length head_dim; empty = off
    int heads = 1;
    int head_dim = 0;
};

struct LayerGraph {
    ModelSpec spec;
    Matrix embedding; // vocab x width
    Matrix pos;       // max_seq x width, sinusoidal, not trainable
    std::vector<Block> blocks;
    Matrix head; // width x vocab

    bool has_float_weights() const;
};

// batch of sequences flattened into rows of x; attention respects seq_len
struct Activations {
    Matrix x;
    int seq_len = 0;
    int n_seq() const { return seq_len > 0 ? x.rows / seq_len : 0; }
};

struct QuantPathOpts {
    int act_bits = 16; // > 8 disables activation quantization
    FrozenRounds* frozen = nullptr;
};

// ---- forward caches (consumed by the calibration backward pass) ----

struct WeightFwd {
    Matrix recon; // reconstructed (or master) weight before smoothing
    Matrix ws;    // row-scaled by s_c
    Matrix wm;    // fake-quantized weight used in the matmul
    FqCache fq;
    std::vector<double> bias_eff;
};

struct BlockCache {
    Activations in;
    Matrix norm_out;
    Matrix qkv_xs, qkv_xq;
    FqCache qkv_act;
    WeightFwd fq_q, fq_k, fq_v, fq_o, fq_up, fq_down;
    Matrix q, k, v;
    Matrix qs, ks; // after s_a
    Matrix qq, kq; // after activation quant
    FqCache q_act, k_act;
    std::vector<Matrix> probs; // softmax outputs, indexed seq * heads + head
    Matrix attn_concat;
    Matrix out_xs, out_xq;
    FqCache out_act;
    Matrix attn_out;
    Matrix h1;
    Matrix up_xs, up_xq;
    FqCache up_act;
    Matrix mlp_pre; // before gelu
    Matrix mlp_act; // after gelu
    Matrix mlp_gq;  // after activation quant
    FqCache g_act;
    Matrix out;
};

// ---- elementary pieces ----

Matrix layernorm(const Matrix& x, const std::vector<double>& gain,
                 const std::vector<double>& bias);
double gelu(double x);
double gelu_grad(double x);
Matrix sinusoidal_positions(int max_seq, int width);

std::vector<double> exp_vec(const std::vector<double>& v);
Matrix scale_rows(const Matrix& w, const std::vector<double>& s);
// (x - delta) / s_c applied column-wise
Matrix smooth_columns(const Matrix& x, const std::vector<double>& delta,
                      const std::vector<double>& sc);
// b + delta * w with delta as a row vector; empty b acts as zeros
std::vector<double> bias_with_delta(const std::vector<double>& b, const std::vector<double>& delta,
                                    const Matrix& w);
void add_bias_rows(Matrix& y, const std::vector<double>& b);
// resolves state/smoothing into the matrices actually used by a forward pass
void weight_forward(const QuantWeight& qw, const LinearSmooth* sm, FrozenRounds* fr,
                    WeightFwd& wf);

Matrix embed_tokens(const LayerGraph& m, const std::vector<std::vector<int32_t>>& seqs);

Matrix block_forward_fp(const Block& b, const Activations& a);
Matrix block_forward_quant(const Block& b, const Activations& a, const QuantPathOpts& opt,
                           BlockCache* cache);

// logits for one sequence
Matrix model_forward_fp(const LayerGraph& m, const std::vector<int32_t>& seq);
Matrix model_forward_quant(const LayerGraph& m, const std::vector<int32_t>& seq,
                           const QuantPathOpts& opt);

enum class EvalMode { Fp, Quant };
double perplexity(const LayerGraph& m, const std::vector<std::vector<int32_t>>& seqs,
                  EvalMode mode, const QuantPathOpts& opt = {});

// mean squared logit deviation between quant and fp paths over a data set
double logit_mse(const LayerGraph& m, const LayerGraph& ref,
                 const std::vector<std::vector<int32_t>>& seqs, const QuantPathOpts& opt);

// ---- quantization preparation / folding ----

struct PrepOptions {
    int weight_bits = 4;
    Granularity granularity = Granularity::PerChannel;
    int group_size = 0;
    bool use_lsi = true;
    bool use_smooth = true;
    bool use_lwc = true;
    int square_n = -1;          // -1: default 200 clamped to rank (group granularity only)
    double param_budget = 1.5;  // max trainable fraction per weight
};

void prepare_for_quantization(LayerGraph& m, const PrepOptions& opt);
void fold_weight(QuantWeight& qw, const LinearSmooth* sm);
void fold_block(Block& b);
void fold_model(LayerGraph& m);

// rewrite norm affine params so the qkv smoothing becomes a no-op
void fold_qkv_smoothing_into_norm(LayerGraph& m);

// ---- synthetic fixtures ----

LayerGraph make_synthetic_model(const ModelSpec& spec, uint64_t seed);
std::vector<std::vector<int32_t>> make_synthetic_data(const ModelSpec& spec, uint64_t seed,
                                                      int n_samples, int seq_len);

// mean over quantizable weights of max/median output-channel norm
double channel_outlier_ratio(const LayerGraph& m);

} // namespace lsiq
