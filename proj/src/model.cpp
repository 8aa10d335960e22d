#include "lsiq/model.hpp"

#include <algorithm>
#include <cmath>

namespace lsiq {

std::vector<double> exp_vec(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
    return out;
}

Matrix scale_rows(const Matrix& w, const std::vector<double>& s) {
    if (static_cast<int>(s.size()) != w.rows) throw ShapeError("scale_rows: factor count != rows");
    Matrix out(w.rows, w.cols);
    for (int r = 0; r < w.rows; ++r) {
        const double f = s[r];
        const double* src = w.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (int c = 0; c < w.cols; ++c) dst[c] = src[c] * f;
    }
    return out;
}

std::vector<double> bias_with_delta(const std::vector<double>& b, const std::vector<double>& delta,
                                    const Matrix& w) {
    if (static_cast<int>(delta.size()) != w.rows)
        throw ShapeError("bias_with_delta: delta size != weight rows");
    std::vector<double> out(w.cols, 0.0);
    if (!b.empty()) {
        if (static_cast<int>(b.size()) != w.cols)
            throw ShapeError("bias_with_delta: bias size != weight cols");
        out = b;
    }
    for (int r = 0; r < w.rows; ++r) {
        const double d = delta[r];
        const double* row = w.row_ptr(r);
        for (int c = 0; c < w.cols; ++c) out[c] += d * row[c];
    }
    return out;
}

Matrix smooth_columns(const Matrix& x, const std::vector<double>& delta,
                      const std::vector<double>& sc) {
    if (static_cast<int>(sc.size()) != x.cols || static_cast<int>(delta.size()) != x.cols)
        throw ShapeError("smooth_columns: channel count mismatch");
    Matrix out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        const double* src = x.row_ptr(r);
        double* dst = out.row_ptr(r);
        for (int c = 0; c < x.cols; ++c) dst[c] = (src[c] - delta[c]) / sc[c];
    }
    return out;
}

void add_bias_rows(Matrix& y, const std::vector<double>& b) {
    if (b.empty()) return;
    if (static_cast<int>(b.size()) != y.cols) throw ShapeError("add_bias_rows: size mismatch");
    for (int r = 0; r < y.rows; ++r) {
        double* row = y.row_ptr(r);
        for (int c = 0; c < y.cols; ++c) row[c] += b[c];
    }
}

namespace {

const Matrix& master(const QuantWeight& qw) {
    if (qw.w.empty()) throw ConfigError("full-precision weights unavailable for this model");
    return qw.w;
}

// causal multi-head attention; probs (if non-null) receives one T x T softmax
// matrix per (sequence, head) pair
Matrix attention_core(const Matrix& q, const Matrix& k, const Matrix& v, int heads, int seq_len,
                      std::vector<Matrix>* probs) {
    const int width = q.cols;
    const int dh = width / heads;
    const int n_seq = q.rows / seq_len;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(q.rows, width);
    if (probs) probs->assign(static_cast<size_t>(n_seq) * heads, Matrix());
    for (int s = 0; s < n_seq; ++s) {
        const int base = s * seq_len;
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            Matrix p(seq_len, seq_len);
            for (int i = 0; i < seq_len; ++i) {
                const double* qi = q.row_ptr(base + i) + c0;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = k.row_ptr(base + j) + c0;
                    double dot = 0.0;
                    for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
                    double sc = dot * inv;
                    p(i, j) = sc;
                    if (sc > mx) mx = sc;
                }
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double e = std::exp(p(i, j) - mx);
                    p(i, j) = e;
                    sum += e;
                }
                for (int j = 0; j <= i; ++j) p(i, j) /= sum;
                double* oi = out.row_ptr(base + i) + c0;
                for (int d = 0; d < dh; ++d) {
                    double acc = 0.0;
                    for (int j = 0; j <= i; ++j) acc += p(i, j) * v(base + j, c0 + d);
                    oi[d] = acc;
                }
            }
            if (probs) (*probs)[static_cast<size_t>(s) * heads + h] = std::move(p);
        }
    }
    return out;
}

// expand per-head-dim factors across all heads
std::vector<double> expand_sa(const std::vector<double>& log_sa, int width) {
    const int dh = static_cast<int>(log_sa.size());
    std::vector<double> f(width);
    for (int j = 0; j < width; ++j) f[j] = std::exp(log_sa[j % dh]);
    return f;
}

} // namespace

void weight_forward(const QuantWeight& qw, const LinearSmooth* sm, FrozenRounds* fr,
                    WeightFwd& wf) {
    if (qw.state == WeightState::Quantized) {
        wf.recon = Matrix();
        wf.ws = Matrix();
        wf.fq = FqCache{};
        wf.wm = dequantize(qw.q);
        wf.bias_eff = qw.folded_bias;
        return;
    }
    const bool smooth = sm && sm->enabled;
    wf.recon = (qw.state == WeightState::Lsi) ? reconstruct(qw.lsi) : master(qw);
    wf.ws = smooth ? scale_rows(wf.recon, exp_vec(sm->log_sc)) : wf.recon;
    if (qw.quant_enabled) {
        wf.wm = fake_quantize_cached(wf.ws, qw.cfg, &wf.fq, fr);
    } else {
        wf.fq = FqCache{};
        wf.wm = wf.ws;
    }
    wf.bias_eff = smooth ? bias_with_delta(qw.bias, sm->delta, wf.recon) : qw.bias;
}

namespace {

void check_activations(const Activations& a) {
    if (a.seq_len <= 0) throw ShapeError("activations need seq_len > 0");
    if (a.x.rows % a.seq_len != 0)
        throw ShapeError("activation rows not a multiple of seq_len");
}

} // namespace

bool LayerGraph::has_float_weights() const {
    if (embedding.empty()) return false;
    for (const auto& b : blocks)
        for (const QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            if (qw->w.empty()) return false;
    return true;
}

Matrix layernorm(const Matrix& x, const std::vector<double>& gain,
                 const std::vector<double>& bias) {
    if (static_cast<int>(gain.size()) != x.cols || static_cast<int>(bias.size()) != x.cols)
        throw ShapeError("layernorm: affine size mismatch");
    constexpr double eps = 1e-5;
    Matrix out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) {
        const double* src = x.row_ptr(r);
        double mean = 0.0;
        for (int c = 0; c < x.cols; ++c) mean += src[c];
        mean /= x.cols;
        double var = 0.0;
        for (int c = 0; c < x.cols; ++c) {
            double d = src[c] - mean;
            var += d * d;
        }
        var /= x.cols;
        double inv = 1.0 / std::sqrt(var + eps);
        double* dst = out.row_ptr(r);
        for (int c = 0; c < x.cols; ++c) dst[c] = (src[c] - mean) * inv * gain[c] + bias[c];
    }
    return out;
}

double gelu(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    constexpr double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    constexpr double a = 0.044715;
    double u = c * (x + a * x * x * x);
    double t = std::tanh(u);
    double du = c * (1.0 + 3.0 * a * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix sinusoidal_positions(int max_seq, int width) {
    Matrix p(max_seq, width);
    for (int t = 0; t < max_seq; ++t)
        for (int j = 0; j < width; ++j) {
            double freq = std::pow(10000.0, -2.0 * (j / 2) / static_cast<double>(width));
            double ang = t * freq;
            p(t, j) = (j % 2 == 0) ? std::sin(ang) : std::cos(ang);
        }
    return p;
}

Matrix embed_tokens(const LayerGraph& m, const std::vector<std::vector<int32_t>>& seqs) {
    if (seqs.empty()) throw ShapeError("embed: no sequences");
    const int T = static_cast<int>(seqs[0].size());
    if (T <= 0) throw ShapeError("embed: empty sequence");
    if (T > m.spec.max_seq) throw ShapeError("embed: sequence longer than max_seq");
    Matrix x(static_cast<int>(seqs.size()) * T, m.spec.width);
    for (size_t s = 0; s < seqs.size(); ++s) {
        if (static_cast<int>(seqs[s].size()) != T)
            throw ShapeError("embed: ragged sequence lengths");
        for (int t = 0; t < T; ++t) {
            int32_t id = seqs[s][t];
            if (id < 0 || id >= m.spec.vocab)
                throw DomainError("embed: token id out of range: " + std::to_string(id));
            double* dst = x.row_ptr(static_cast<int>(s) * T + t);
            const double* emb = m.embedding.row_ptr(id);
            const double* pos = m.pos.row_ptr(t);
            for (int c = 0; c < m.spec.width; ++c) dst[c] = emb[c] + pos[c];
        }
    }
    return x;
}

Matrix block_forward_fp(const Block& b, const Activations& a) {
    check_activations(a);
    Matrix n = layernorm(a.x, b.norm_gain, b.norm_bias);
    Matrix q = matmul(n, master(b.wq));
    add_bias_rows(q, b.wq.bias);
    Matrix k = matmul(n, master(b.wk));
    add_bias_rows(k, b.wk.bias);
    Matrix v = matmul(n, master(b.wv));
    add_bias_rows(v, b.wv.bias);
    Matrix o = attention_core(q, k, v, b.heads, a.seq_len, nullptr);
    Matrix attn = matmul(o, master(b.wo));
    add_bias_rows(attn, b.wo.bias);
    Matrix h1 = add(a.x, attn);
    Matrix u = matmul(h1, master(b.w_up));
    add_bias_rows(u, b.w_up.bias);
    Matrix g(u.rows, u.cols);
    for (size_t i = 0; i < u.size(); ++i) g.data[i] = gelu(u.data[i]);
    Matrix d = matmul(g, master(b.w_down));
    add_bias_rows(d, b.w_down.bias);
    return add(h1, d);
}

Matrix block_forward_quant(const Block& b, const Activations& a, const QuantPathOpts& opt,
                           BlockCache* cache) {
    check_activations(a);
    BlockCache c;
    c.in = a;
    c.norm_out = layernorm(a.x, b.norm_gain, b.norm_bias);

    c.qkv_xs = b.sm_qkv.enabled
                   ? smooth_columns(c.norm_out, b.sm_qkv.delta, exp_vec(b.sm_qkv.log_sc))
                   : c.norm_out;
    c.qkv_xq = quantize_activation_cached(c.qkv_xs, opt.act_bits, &c.qkv_act, opt.frozen);

    weight_forward(b.wq, &b.sm_qkv, opt.frozen, c.fq_q);
    weight_forward(b.wk, &b.sm_qkv, opt.frozen, c.fq_k);
    weight_forward(b.wv, &b.sm_qkv, opt.frozen, c.fq_v);
    c.q = matmul(c.qkv_xq, c.fq_q.wm);
    add_bias_rows(c.q, c.fq_q.bias_eff);
    c.k = matmul(c.qkv_xq, c.fq_k.wm);
    add_bias_rows(c.k, c.fq_k.bias_eff);
    c.v = matmul(c.qkv_xq, c.fq_v.wm);
    add_bias_rows(c.v, c.fq_v.bias_eff);

    if (!b.log_sa.empty()) {
        std::vector<double> f = expand_sa(b.log_sa, c.q.cols);
        c.qs = Matrix(c.q.rows, c.q.cols);
        c.ks = Matrix(c.k.rows, c.k.cols);
        for (int r = 0; r < c.q.rows; ++r)
            for (int j = 0; j < c.q.cols; ++j) {
                c.qs(r, j) = c.q(r, j) / f[j];
                c.ks(r, j) = c.k(r, j) * f[j];
            }
    } else {
        c.qs = c.q;
        c.ks = c.k;
    }
    c.qq = quantize_activation_cached(c.qs, opt.act_bits, &c.q_act, opt.frozen);
    c.kq = quantize_activation_cached(c.ks, opt.act_bits, &c.k_act, opt.frozen);

    c.attn_concat = attention_core(c.qq, c.kq, c.v, b.heads, a.seq_len, &c.probs);

    c.out_xs = b.sm_out.enabled
                   ? smooth_columns(c.attn_concat, b.sm_out.delta, exp_vec(b.sm_out.log_sc))
                   : c.attn_concat;
    c.out_xq = quantize_activation_cached(c.out_xs, opt.act_bits, &c.out_act, opt.frozen);
    weight_forward(b.wo, &b.sm_out, opt.frozen, c.fq_o);
    c.attn_out = matmul(c.out_xq, c.fq_o.wm);
    add_bias_rows(c.attn_out, c.fq_o.bias_eff);
    c.h1 = add(a.x, c.attn_out);

    c.up_xs = b.sm_up.enabled ? smooth_columns(c.h1, b.sm_up.delta, exp_vec(b.sm_up.log_sc))
                              : c.h1;
    c.up_xq = quantize_activation_cached(c.up_xs, opt.act_bits, &c.up_act, opt.frozen);
    weight_forward(b.w_up, &b.sm_up, opt.frozen, c.fq_up);
    c.mlp_pre = matmul(c.up_xq, c.fq_up.wm);
    add_bias_rows(c.mlp_pre, c.fq_up.bias_eff);

    c.mlp_act = Matrix(c.mlp_pre.rows, c.mlp_pre.cols);
    for (size_t i = 0; i < c.mlp_pre.size(); ++i) c.mlp_act.data[i] = gelu(c.mlp_pre.data[i]);
    c.mlp_gq = quantize_activation_cached(c.mlp_act, opt.act_bits, &c.g_act, opt.frozen);
    weight_forward(b.w_down, nullptr, opt.frozen, c.fq_down);
    Matrix d = matmul(c.mlp_gq, c.fq_down.wm);
    add_bias_rows(d, c.fq_down.bias_eff);
    c.out = add(c.h1, d);

    Matrix out = c.out;
    if (cache) *cache = std::move(c);
    return out;
}

Matrix model_forward_fp(const LayerGraph& m, const std::vector<int32_t>& seq) {
    Activations a;
    a.x = embed_tokens(m, {seq});
    a.seq_len = static_cast<int>(seq.size());
    for (const auto& b : m.blocks) a.x = block_forward_fp(b, a);
    return matmul(a.x, m.head);
}

Matrix model_forward_quant(const LayerGraph& m, const std::vector<int32_t>& seq,
                           const QuantPathOpts& opt) {
    Activations a;
    a.x = embed_tokens(m, {seq});
    a.seq_len = static_cast<int>(seq.size());
    for (const auto& b : m.blocks) a.x = block_forward_quant(b, a, opt, nullptr);
    return matmul(a.x, m.head);
}

double perplexity(const LayerGraph& m, const std::vector<std::vector<int32_t>>& seqs,
                  EvalMode mode, const QuantPathOpts& opt) {
    double nll = 0.0;
    int64_t count = 0;
    for (const auto& seq : seqs) {
        if (seq.size() < 2) throw DomainError("perplexity: sequence shorter than 2 tokens");
        Matrix logits = (mode == EvalMode::Fp) ? model_forward_fp(m, seq)
                                               : model_forward_quant(m, seq, opt);
        for (size_t t = 0; t + 1 < seq.size(); ++t) {
            const double* row = logits.row_ptr(static_cast<int>(t));
            double mx = row[0];
            for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
            double lse = mx + std::log(sum);
            nll += lse - row[seq[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw DomainError("perplexity: no predictions");
    return std::exp(nll / static_cast<double>(count));
}

double logit_mse(const LayerGraph& m, const LayerGraph& ref,
                 const std::vector<std::vector<int32_t>>& seqs, const QuantPathOpts& opt) {
    if (seqs.empty()) throw ShapeError("logit_mse: no sequences");
    double acc = 0.0;
    for (const auto& seq : seqs) {
        Matrix lq = model_forward_quant(m, seq, opt);
        Matrix lf = model_forward_fp(ref, seq);
        acc += frobenius_mse(lq, lf);
    }
    return acc / static_cast<double>(seqs.size());
}

namespace {

void prepare_weight(QuantWeight& qw, const PrepOptions& opt) {
    QuantConfig cfg;
    cfg.bits = opt.weight_bits;
    cfg.granularity = opt.granularity;
    cfg.group_size = opt.group_size;
    cfg.target = QuantTarget::Weight;
    cfg.validate(qw.w.rows, qw.w.cols);
    if (opt.use_lwc) {
        const double init = std::log(9999.0); // sigmoid = 1 - 1e-4
        size_t ng = static_cast<size_t>(cfg.num_groups(qw.w.rows, qw.w.cols));
        cfg.clip_gamma.assign(ng, init);
        cfg.clip_beta.assign(ng, init);
    }
    qw.cfg = cfg;
    qw.quant_enabled = true;
    if (opt.use_lsi) {
        int n = 0;
        if (opt.granularity == Granularity::Group && opt.square_n != 0) {
            n = opt.square_n > 0 ? opt.square_n : 200;
            n = std::min(n, std::min(qw.w.rows, qw.w.cols));
        }
        check_param_budget(qw.w.rows, qw.w.cols, n, opt.param_budget);
        qw.lsi = capture(qw.w, n);
        qw.state = WeightState::Lsi;
    } else {
        qw.state = WeightState::Float;
    }
}

} // namespace

void prepare_for_quantization(LayerGraph& m, const PrepOptions& opt) {
    if (!m.has_float_weights())
        throw ConfigError("prepare: model has no full-precision weights");
    for (auto& b : m.blocks) {
        for (QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            prepare_weight(*qw, opt);
        const int width = b.wq.w.rows;
        for (LinearSmooth* sm : {&b.sm_qkv, &b.sm_out, &b.sm_up}) {
            sm->enabled = opt.use_smooth;
            sm->log_sc.assign(width, 0.0);
            sm->delta.assign(width, 0.0);
        }
        b.sm_up.log_sc.assign(b.w_up.w.rows, 0.0);
        b.sm_up.delta.assign(b.w_up.w.rows, 0.0);
        b.log_sa = opt.use_smooth ? std::vector<double>(b.head_dim, 0.0) : std::vector<double>{};
    }
}

void fold_weight(QuantWeight& qw, const LinearSmooth* sm) {
    if (qw.state == WeightState::Quantized) return;
    if (!qw.quant_enabled) throw ConfigError("fold: weight was not prepared for quantization");
    const bool smooth = sm && sm->enabled;
    Matrix recon = (qw.state == WeightState::Lsi) ? reconstruct(qw.lsi) : master(qw);
    Matrix ws = smooth ? scale_rows(recon, exp_vec(sm->log_sc)) : recon;
    qw.q = quantize(ws, qw.cfg);
    qw.folded_bias = smooth ? bias_with_delta(qw.bias, sm->delta, recon) : qw.bias;
    qw.state = WeightState::Quantized;
    qw.lsi = LsiParams{};
}

void fold_block(Block& b) {
    fold_weight(b.wq, &b.sm_qkv);
    fold_weight(b.wk, &b.sm_qkv);
    fold_weight(b.wv, &b.sm_qkv);
    fold_weight(b.wo, &b.sm_out);
    fold_weight(b.w_up, &b.sm_up);
    fold_weight(b.w_down, nullptr);
}

void fold_model(LayerGraph& m) {
    for (auto& b : m.blocks) fold_block(b);
}

void fold_qkv_smoothing_into_norm(LayerGraph& m) {
    for (auto& b : m.blocks) {
        if (!b.sm_qkv.enabled) continue;
        if (b.wq.state != WeightState::Quantized || b.wk.state != WeightState::Quantized ||
            b.wv.state != WeightState::Quantized)
            throw ConfigError("norm folding requires folded q/k/v weights");
        SmoothParams p;
        p.s_c = exp_vec(b.sm_qkv.log_sc);
        p.delta = b.sm_qkv.delta;
        FoldedNorm fn = fold_scale_into_norm(b.norm_gain, b.norm_bias, p);
        b.norm_gain = fn.gain;
        b.norm_bias = fn.bias;
        b.sm_qkv.enabled = false;
    }
}

namespace {

void apply_column_outliers(Matrix& w, double fraction, double factor, RandomStream& rng) {
    if (fraction <= 0.0) return;
    int k = static_cast<int>(std::ceil(fraction * w.cols));
    k = std::min(k, w.cols);
    std::vector<int> cols(w.cols);
    for (int i = 0; i < w.cols; ++i) cols[i] = i;
    for (int i = 0; i < k; ++i) {
        int j = static_cast<int>(rng.uniform_int(i, w.cols - 1));
        std::swap(cols[i], cols[j]);
    }
    for (int i = 0; i < k; ++i)
        for (int r = 0; r < w.rows; ++r) w(r, cols[i]) *= factor;
}

} // namespace

LayerGraph make_synthetic_model(const ModelSpec& spec, uint64_t seed) {
    if (spec.width <= 0 || spec.heads <= 0 || spec.width % spec.heads != 0)
        throw ConfigError("model width must be a positive multiple of heads");
    if (spec.vocab <= 1 || spec.max_seq <= 1 || spec.layers < 0 || spec.mlp_mult <= 0)
        throw ConfigError("invalid model spec");
    RandomStream rng(seed);
    LayerGraph m;
    m.spec = spec;
    m.embedding = rng.gaussian_matrix(spec.vocab, spec.width);
    m.pos = sinusoidal_positions(spec.max_seq, spec.width);
    const int w = spec.width;
    const int hidden = spec.mlp_mult * w;
    for (int l = 0; l < spec.layers; ++l) {
        Block b;
        b.heads = spec.heads;
        b.head_dim = w / spec.heads;
        b.norm_gain.resize(w);
        b.norm_bias.resize(w);
        for (int i = 0; i < w; ++i) {
            b.norm_gain[i] = 1.0 + 0.1 * rng.normal();
            b.norm_bias[i] = 0.02 * rng.normal();
        }
        double s1 = 1.0 / std::sqrt(static_cast<double>(w));
        b.wq.w = rng.gaussian_matrix(w, w, s1);
        b.wk.w = rng.gaussian_matrix(w, w, s1);
        b.wv.w = rng.gaussian_matrix(w, w, s1);
        b.wo.w = rng.gaussian_matrix(w, w, 0.5 * s1);
        b.w_up.w = rng.gaussian_matrix(w, hidden, s1);
        b.w_down.w = rng.gaussian_matrix(hidden, w, 0.5 / std::sqrt(static_cast<double>(hidden)));
        b.w_up.bias.resize(hidden);
        for (double& x : b.w_up.bias) x = 0.02 * rng.normal();
        b.w_down.bias.resize(w);
        for (double& x : b.w_down.bias) x = 0.02 * rng.normal();
        for (QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down})
            apply_column_outliers(qw->w, spec.outlier_fraction, 10.0, rng);
        m.blocks.push_back(std::move(b));
    }
    m.head = rng.gaussian_matrix(w, spec.vocab, 1.0 / std::sqrt(static_cast<double>(w)));
    return m;
}

std::vector<std::vector<int32_t>> make_synthetic_data(const ModelSpec& spec, uint64_t seed,
                                                      int n_samples, int seq_len) {
    if (n_samples <= 0 || seq_len <= 0) throw ConfigError("data generator needs positive sizes");
    RandomStream rng(seed);
    std::vector<std::vector<int32_t>> out(n_samples);
    for (auto& seq : out) {
        seq.resize(seq_len);
        seq[0] = static_cast<int32_t>(rng.uniform_int(0, spec.vocab - 1));
        for (int t = 1; t < seq_len; ++t) {
            int32_t prev = seq[t - 1];
            if (rng.uniform() < 0.85) {
                int j = static_cast<int>(rng.uniform_int(0, 3));
                seq[t] = static_cast<int32_t>((5LL * prev + 1 + j) % spec.vocab);
            } else {
                seq[t] = static_cast<int32_t>(rng.uniform_int(0, spec.vocab - 1));
            }
        }
    }
    return out;
}

double channel_outlier_ratio(const LayerGraph& m) {
    if (m.blocks.empty()) throw ConfigError("outlier ratio needs at least one block");
    double acc = 0.0;
    int count = 0;
    for (const auto& b : m.blocks) {
        for (const QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down}) {
            const Matrix& w = master(*qw);
            std::vector<double> norms(w.cols, 0.0);
            for (int r = 0; r < w.rows; ++r)
                for (int c = 0; c < w.cols; ++c) norms[c] += w(r, c) * w(r, c);
            for (double& n : norms) n = std::sqrt(n);
            std::vector<double> sorted = norms;
            std::sort(sorted.begin(), sorted.end());
            double median = (w.cols % 2 == 1)
                                ? sorted[w.cols / 2]
                                : 0.5 * (sorted[w.cols / 2 - 1] + sorted[w.cols / 2]);
            acc += sorted.back() / median;
            ++count;
        }
    }
    return acc / count;
}

} // namespace lsiq
