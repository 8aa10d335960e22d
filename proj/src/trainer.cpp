#include "lsiq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lsiq/rng.hpp"

namespace lsiq {

Matrix ste_backward(const Matrix& grad, const FqCache& cache, bool clip_mask) {
    if (!clip_mask || cache.in_range.empty()) return grad;
    if (cache.in_range.size() != grad.size())
        throw ShapeError("ste_backward: cache does not match gradient shape");
    Matrix out = grad;
    for (size_t i = 0; i < out.size(); ++i)
        if (!cache.in_range[i]) out.data[i] = 0.0;
    return out;
}

Matrix fq_backward(const Matrix& grad, const Matrix& pre, const FqCache& cache, int levels,
                   const double* gamma, const double* beta, bool ste_clip, double* dgamma,
                   double* dbeta) {
    if (cache.groups.empty()) return grad; // quantization was a passthrough
    if (cache.in_range.size() != grad.size() || pre.size() != grad.size())
        throw ShapeError("fq_backward: cache does not match gradient shape");
    const int len = cache.group_len;
    const double m = static_cast<double>(levels);
    Matrix dw(grad.rows, grad.cols);
    for (size_t g = 0; g < cache.groups.size(); ++g) {
        const FqGroup& G = cache.groups[g];
        const double* gp = grad.data.data() + g * len;
        const double* wp = pre.data.data() + g * len;
        const double* cp = cache.code.data() + g * len;
        const uint8_t* ip = cache.in_range.data() + g * len;
        double* dp = dw.data.data() + g * len;
        if (G.degenerate) {
            for (int i = 0; i < len; ++i) dp[i] = (ste_clip && !ip[i]) ? 0.0 : gp[i];
            continue;
        }
        double a = 0.0, bsum = 0.0, dzt = 0.0;
        for (int i = 0; i < len; ++i) {
            const double gi = gp[i];
            a += gi * (cp[i] - G.zero);
            if (ip[i]) {
                bsum -= gi * wp[i] / G.scale;
                dp[i] = gi;
            } else {
                dzt -= gi * G.scale;
                dp[i] = ste_clip ? 0.0 : gi;
            }
        }
        const double ds = a + bsum + dzt * (G.lo / (G.scale * G.scale));
        double dlo = dzt * (-1.0 / G.scale);
        const double dhi = ds / m;
        dlo -= ds / m;
        if (gamma && beta) {
            const double sg = sigmoid(gamma[g]);
            const double sb = sigmoid(beta[g]);
            if (dgamma) dgamma[g] += dhi * sg * (1.0 - sg) * G.wmax;
            if (dbeta) dbeta[g] += dlo * sb * (1.0 - sb) * G.wmin;
            dp[G.argmax] += dhi * sg;
            dp[G.argmin] += dlo * sb;
        } else {
            dp[G.argmax] += dhi;
            dp[G.argmin] += dlo;
        }
    }
    return dw;
}

namespace {

struct WeightGradBuf {
    std::vector<double> inc, gamma, beta;
    Matrix kb;
};

void init_wbuf(const QuantWeight& qw, WeightGradBuf& b) {
    if (qw.state == WeightState::Lsi) {
        b.inc.assign(qw.lsi.increment.size(), 0.0);
        if (!qw.lsi.k_block.empty())
            b.kb = Matrix(qw.lsi.k_block.rows, qw.lsi.k_block.cols);
    }
    if (!qw.cfg.clip_gamma.empty()) {
        b.gamma.assign(qw.cfg.clip_gamma.size(), 0.0);
        b.beta.assign(qw.cfg.clip_beta.size(), 0.0);
    }
}

struct BlockGradBuffers {
    WeightGradBuf q, k, v, o, up, down;
    std::vector<double> sm_qkv_ls, sm_qkv_de, sm_out_ls, sm_out_de, sm_up_ls, sm_up_de;
    std::vector<double> sa;
};

void init_buffers(const Block& b, BlockGradBuffers& gb) {
    init_wbuf(b.wq, gb.q);
    init_wbuf(b.wk, gb.k);
    init_wbuf(b.wv, gb.v);
    init_wbuf(b.wo, gb.o);
    init_wbuf(b.w_up, gb.up);
    init_wbuf(b.w_down, gb.down);
    if (b.sm_qkv.enabled) {
        gb.sm_qkv_ls.assign(b.sm_qkv.log_sc.size(), 0.0);
        gb.sm_qkv_de.assign(b.sm_qkv.delta.size(), 0.0);
    }
    if (b.sm_out.enabled) {
        gb.sm_out_ls.assign(b.sm_out.log_sc.size(), 0.0);
        gb.sm_out_de.assign(b.sm_out.delta.size(), 0.0);
    }
    if (b.sm_up.enabled) {
        gb.sm_up_ls.assign(b.sm_up.log_sc.size(), 0.0);
        gb.sm_up_de.assign(b.sm_up.delta.size(), 0.0);
    }
    if (!b.log_sa.empty()) gb.sa.assign(b.log_sa.size(), 0.0);
}

// weight-side backward for y = xq * wm + bias_eff; returns dXq
Matrix linear_weight_backward(const QuantWeight& qw, const LinearSmooth* sm, const WeightFwd& wf,
                              const Matrix& xq, const Matrix& dY, bool ste_clip,
                              WeightGradBuf& wb, std::vector<double>* sm_ls,
                              std::vector<double>* sm_de) {
    Matrix dXq = matmul(dY, transpose(wf.wm));
    if (qw.state == WeightState::Quantized) return dXq; // nothing trainable behind the codes
    Matrix dWm = matmul(transpose(xq), dY);
    const bool smooth = sm && sm->enabled;
    Matrix dRecon(wf.recon.rows, wf.recon.cols);
    if (smooth) {
        std::vector<double> db(dY.cols, 0.0);
        for (int r = 0; r < dY.rows; ++r) {
            const double* row = dY.row_ptr(r);
            for (int c = 0; c < dY.cols; ++c) db[c] += row[c];
        }
        // bias_eff = bias + delta * recon
        for (int r = 0; r < wf.recon.rows; ++r) {
            const double* wr = wf.recon.row_ptr(r);
            double* dr = dRecon.row_ptr(r);
            const double d = sm->delta[r];
            double acc = 0.0;
            for (int c = 0; c < wf.recon.cols; ++c) {
                acc += wr[c] * db[c];
                dr[c] += d * db[c];
            }
            if (sm_de) (*sm_de)[r] += acc;
        }
    }
    Matrix dWs = qw.quant_enabled
                     ? fq_backward(dWm, wf.ws, wf.fq, qw.cfg.levels(),
                                   qw.cfg.clip_gamma.empty() ? nullptr : qw.cfg.clip_gamma.data(),
                                   qw.cfg.clip_beta.empty() ? nullptr : qw.cfg.clip_beta.data(),
                                   ste_clip, wb.gamma.empty() ? nullptr : wb.gamma.data(),
                                   wb.beta.empty() ? nullptr : wb.beta.data())
                     : std::move(dWm);
    if (smooth) {
        const std::vector<double> f = exp_vec(sm->log_sc);
        for (int r = 0; r < dWs.rows; ++r) {
            const double* gr = dWs.row_ptr(r);
            const double* wsr = wf.ws.row_ptr(r);
            double* dr = dRecon.row_ptr(r);
            double acc = 0.0;
            for (int c = 0; c < dWs.cols; ++c) {
                dr[c] += gr[c] * f[r];
                acc += gr[c] * wsr[c];
            }
            if (sm_ls) (*sm_ls)[r] += acc;
        }
    } else {
        for (size_t i = 0; i < dRecon.size(); ++i) dRecon.data[i] += dWs.data[i];
    }
    if (qw.state == WeightState::Lsi) {
        const SvdFactors& f = qw.lsi.factors;
        Matrix t = matmul(transpose(f.u), dRecon); // r x cols
        const int r = static_cast<int>(f.s.size());
        for (int j = 0; j < r; ++j) {
            const double* tr = t.row_ptr(j);
            const double* vr = f.v_h.row_ptr(j);
            double acc = 0.0;
            for (int c = 0; c < t.cols; ++c) acc += tr[c] * vr[c];
            wb.inc[j] += acc;
        }
        const int n = qw.lsi.k_block.rows;
        for (int i = 0; i < n; ++i) {
            const double* ti = t.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                const double* vj = f.v_h.row_ptr(j);
                double acc = 0.0;
                for (int c = 0; c < t.cols; ++c) acc += ti[c] * vj[c];
                wb.kb(i, j) += acc;
            }
        }
    }
    return dXq;
}

// input-side backward: activation quantizer then the smoothing transform
Matrix linear_input_backward(const LinearSmooth* sm, const Matrix& xs, const FqCache& act,
                             int act_levels, const Matrix& dXq, bool ste_clip,
                             std::vector<double>* sm_ls, std::vector<double>* sm_de) {
    Matrix dXs = act.groups.empty() ? dXq
                                    : fq_backward(dXq, xs, act, act_levels, nullptr, nullptr,
                                                  ste_clip, nullptr, nullptr);
    if (!(sm && sm->enabled)) return dXs;
    const std::vector<double> f = exp_vec(sm->log_sc);
    Matrix dX(dXs.rows, dXs.cols);
    for (int r = 0; r < dXs.rows; ++r) {
        const double* gr = dXs.row_ptr(r);
        const double* xr = xs.row_ptr(r);
        double* dr = dX.row_ptr(r);
        for (int j = 0; j < dXs.cols; ++j) {
            const double g = gr[j];
            dr[j] = g / f[j];
            if (sm_de) (*sm_de)[j] -= g / f[j];
            if (sm_ls) (*sm_ls)[j] -= g * xr[j];
        }
    }
    return dX;
}

void attention_backward(const Block& b, const BlockCache& c, const Matrix& dO, Matrix& dQq,
                        Matrix& dKq, Matrix& dV) {
    const int T = c.in.seq_len;
    const int width = dO.cols;
    const int H = b.heads, dh = width / H;
    const int n_seq = dO.rows / T;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    dQq = Matrix(dO.rows, width);
    dKq = Matrix(dO.rows, width);
    dV = Matrix(dO.rows, width);
    for (int s = 0; s < n_seq; ++s) {
        const int base = s * T;
        for (int h = 0; h < H; ++h) {
            const int c0 = h * dh;
            const Matrix& p = c.probs[static_cast<size_t>(s) * H + h];
            for (int i = 0; i < T; ++i) {
                const double* doi = dO.row_ptr(base + i) + c0;
                std::vector<double> dp(i + 1);
                double rowdot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = c.v.row_ptr(base + j) + c0;
                    double acc = 0.0;
                    for (int d = 0; d < dh; ++d) acc += doi[d] * vj[d];
                    dp[j] = acc;
                    rowdot += acc * p(i, j);
                }
                double* dqi = dQq.row_ptr(base + i) + c0;
                const double* qqi = c.qq.row_ptr(base + i) + c0;
                for (int j = 0; j <= i; ++j) {
                    const double ds = (dp[j] - rowdot) * p(i, j) * inv;
                    const double* kqj = c.kq.row_ptr(base + j) + c0;
                    double* dkj = dKq.row_ptr(base + j) + c0;
                    double* dvj = dV.row_ptr(base + j) + c0;
                    const double pij = p(i, j);
                    for (int d = 0; d < dh; ++d) {
                        dqi[d] += ds * kqj[d];
                        dkj[d] += ds * qqi[d];
                        dvj[d] += pij * doi[d];
                    }
                }
            }
        }
    }
}

void block_backward(const Block& b, const BlockCache& c, const Matrix& dOut,
                    const TrainConfig& cfg, BlockGradBuffers& gb) {
    const int act_levels = cfg.act_bits <= 8 ? (1 << cfg.act_bits) - 1 : 0;
    // out = h1 + down(gelu(up(h1)))
    Matrix dGq = linear_weight_backward(b.w_down, nullptr, c.fq_down, c.mlp_gq, dOut,
                                        cfg.ste_clip, gb.down, nullptr, nullptr);
    Matrix dG = linear_input_backward(nullptr, c.mlp_act, c.g_act, act_levels, dGq, cfg.ste_clip,
                                      nullptr, nullptr);
    Matrix dU(dG.rows, dG.cols);
    for (size_t i = 0; i < dG.size(); ++i)
        dU.data[i] = dG.data[i] * gelu_grad(c.mlp_pre.data[i]);
    Matrix dXqUp = linear_weight_backward(b.w_up, &b.sm_up, c.fq_up, c.up_xq, dU, cfg.ste_clip,
                                          gb.up, &gb.sm_up_ls, &gb.sm_up_de);
    Matrix dH1 = linear_input_backward(&b.sm_up, c.up_xs, c.up_act, act_levels, dXqUp,
                                       cfg.ste_clip, &gb.sm_up_ls, &gb.sm_up_de);
    for (size_t i = 0; i < dH1.size(); ++i) dH1.data[i] += dOut.data[i];
    // h1 = x + attn_out
    Matrix dXqO = linear_weight_backward(b.wo, &b.sm_out, c.fq_o, c.out_xq, dH1, cfg.ste_clip,
                                         gb.o, &gb.sm_out_ls, &gb.sm_out_de);
    Matrix dOatt = linear_input_backward(&b.sm_out, c.out_xs, c.out_act, act_levels, dXqO,
                                         cfg.ste_clip, &gb.sm_out_ls, &gb.sm_out_de);
    Matrix dQq, dKq, dV;
    attention_backward(b, c, dOatt, dQq, dKq, dV);
    Matrix dQs = c.q_act.groups.empty()
                     ? std::move(dQq)
                     : fq_backward(dQq, c.qs, c.q_act, act_levels, nullptr, nullptr,
                                   cfg.ste_clip, nullptr, nullptr);
    Matrix dKs = c.k_act.groups.empty()
                     ? std::move(dKq)
                     : fq_backward(dKq, c.ks, c.k_act, act_levels, nullptr, nullptr,
                                   cfg.ste_clip, nullptr, nullptr);
    Matrix dQ, dK;
    if (!b.log_sa.empty()) {
        const int dh = b.head_dim;
        std::vector<double> f(static_cast<size_t>(c.q.cols));
        for (int j = 0; j < c.q.cols; ++j) f[j] = std::exp(b.log_sa[j % dh]);
        dQ = Matrix(dQs.rows, dQs.cols);
        dK = Matrix(dKs.rows, dKs.cols);
        for (int r = 0; r < dQs.rows; ++r)
            for (int j = 0; j < dQs.cols; ++j) {
                dQ(r, j) = dQs(r, j) / f[j];
                dK(r, j) = dKs(r, j) * f[j];
                gb.sa[j % dh] += dKs(r, j) * c.ks(r, j) - dQs(r, j) * c.qs(r, j);
            }
    } else {
        dQ = std::move(dQs);
        dK = std::move(dKs);
    }
    Matrix dXq = linear_weight_backward(b.wq, &b.sm_qkv, c.fq_q, c.qkv_xq, dQ, cfg.ste_clip,
                                        gb.q, &gb.sm_qkv_ls, &gb.sm_qkv_de);
    Matrix dXk = linear_weight_backward(b.wk, &b.sm_qkv, c.fq_k, c.qkv_xq, dK, cfg.ste_clip,
                                        gb.k, &gb.sm_qkv_ls, &gb.sm_qkv_de);
    Matrix dXv = linear_weight_backward(b.wv, &b.sm_qkv, c.fq_v, c.qkv_xq, dV, cfg.ste_clip,
                                        gb.v, &gb.sm_qkv_ls, &gb.sm_qkv_de);
    for (size_t i = 0; i < dXq.size(); ++i) dXq.data[i] += dXk.data[i] + dXv.data[i];
    linear_input_backward(&b.sm_qkv, c.qkv_xs, c.qkv_act, act_levels, dXq, cfg.ste_clip,
                          &gb.sm_qkv_ls, &gb.sm_qkv_de);
}

void flush(ParamGroup& p, const std::string& name, const std::vector<double>& buf) {
    ParamEntry* e = p.find(name);
    if (!e) return;
    const size_t n = std::min(e->size, buf.size());
    for (size_t i = 0; i < n; ++i) e->grad[i] += buf[i];
}

void flush_weight(ParamGroup& p, const std::string& pfx, const WeightGradBuf& wb) {
    flush(p, pfx + ".inc", wb.inc);
    flush(p, pfx + ".kb", wb.kb.data);
    flush(p, pfx + ".ga", wb.gamma);
    flush(p, pfx + ".be", wb.beta);
}

void flush_buffers(ParamGroup& p, const BlockGradBuffers& gb) {
    flush_weight(p, "q", gb.q);
    flush_weight(p, "k", gb.k);
    flush_weight(p, "v", gb.v);
    flush_weight(p, "o", gb.o);
    flush_weight(p, "up", gb.up);
    flush_weight(p, "down", gb.down);
    flush(p, "sm_qkv.ls", gb.sm_qkv_ls);
    flush(p, "sm_qkv.de", gb.sm_qkv_de);
    flush(p, "sm_out.ls", gb.sm_out_ls);
    flush(p, "sm_out.de", gb.sm_out_de);
    flush(p, "sm_up.ls", gb.sm_up_ls);
    flush(p, "sm_up.de", gb.sm_up_de);
    flush(p, "sa", gb.sa);
}

void register_weight(QuantWeight& qw, const std::string& pfx, ParamGroup& factors,
                     ParamGroup& other, int increment_dims) {
    if (qw.state == WeightState::Lsi) {
        size_t r = qw.lsi.increment.size();
        size_t d = increment_dims > 0 ? std::min(static_cast<size_t>(increment_dims), r) : r;
        factors.add(pfx + ".inc", qw.lsi.increment.data(), d);
        if (!qw.lsi.k_block.empty())
            factors.add(pfx + ".kb", qw.lsi.k_block.data.data(), qw.lsi.k_block.size());
    }
    if (!qw.cfg.clip_gamma.empty() && qw.state != WeightState::Quantized) {
        other.add(pfx + ".ga", qw.cfg.clip_gamma.data(), qw.cfg.clip_gamma.size());
        other.add(pfx + ".be", qw.cfg.clip_beta.data(), qw.cfg.clip_beta.size());
    }
}

double block_factor_norm(const Block& b) {
    double acc = 0.0;
    for (const QuantWeight* qw : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down}) {
        if (qw->state != WeightState::Lsi) continue;
        for (double x : qw->lsi.increment) acc += x * x;
        for (double x : qw->lsi.k_block.data) acc += x * x;
    }
    return std::sqrt(acc);
}

} // namespace

void register_block_params(Block& b, ParamGroup& factors, ParamGroup& other,
                           int increment_dims) {
    register_weight(b.wq, "q", factors, other, increment_dims);
    register_weight(b.wk, "k", factors, other, increment_dims);
    register_weight(b.wv, "v", factors, other, increment_dims);
    register_weight(b.wo, "o", factors, other, increment_dims);
    register_weight(b.w_up, "up", factors, other, increment_dims);
    register_weight(b.w_down, "down", factors, other, increment_dims);
    auto reg_sm = [&other](LinearSmooth& sm, const std::string& pfx) {
        if (!sm.enabled) return;
        other.add(pfx + ".ls", sm.log_sc.data(), sm.log_sc.size());
        other.add(pfx + ".de", sm.delta.data(), sm.delta.size());
    };
    reg_sm(b.sm_qkv, "sm_qkv");
    reg_sm(b.sm_out, "sm_out");
    reg_sm(b.sm_up, "sm_up");
    if (!b.log_sa.empty()) other.add("sa", b.log_sa.data(), b.log_sa.size());
}

double block_loss_only(const Block& b, const Activations& x, const Matrix& target,
                       const TrainConfig& cfg, FrozenRounds* frozen) {
    QuantPathOpts opt;
    opt.act_bits = cfg.act_bits;
    opt.frozen = frozen;
    Matrix out = block_forward_quant(b, x, opt, nullptr);
    return frobenius_mse(out, target);
}

double block_loss_and_grads(const Block& b, const Activations& x, const Matrix& target,
                            const TrainConfig& cfg, ParamGroup& params, FrozenRounds* frozen) {
    QuantPathOpts opt;
    opt.act_bits = cfg.act_bits;
    opt.frozen = frozen;
    BlockCache c;
    Matrix out = block_forward_quant(b, x, opt, &c);
    if (out.rows != target.rows || out.cols != target.cols)
        throw ShapeError("block target shape mismatch");
    const double loss = frobenius_mse(out, target);
    const double scale = 2.0 / static_cast<double>(out.size());
    Matrix dOut(out.rows, out.cols);
    for (size_t i = 0; i < out.size(); ++i)
        dOut.data[i] = scale * (out.data[i] - target.data[i]);
    BlockGradBuffers gb;
    init_buffers(b, gb);
    block_backward(b, c, dOut, cfg, gb);
    flush_buffers(params, gb);
    return loss;
}

// ---- linear unit ----

Matrix linear_unit_forward_fp(const LinearUnit& u, const Matrix& x) {
    if (u.w.w.empty()) throw ConfigError("linear unit has no full-precision weight");
    Matrix y = matmul(x, u.w.w);
    add_bias_rows(y, u.w.bias);
    return y;
}

Matrix linear_unit_forward(const LinearUnit& u, const Matrix& x, const TrainConfig& cfg,
                           FrozenRounds* frozen, LinearUnitCache* cache) {
    LinearUnitCache c;
    c.xs = u.sm.enabled ? smooth_columns(x, u.sm.delta, exp_vec(u.sm.log_sc)) : x;
    c.xq = quantize_activation_cached(c.xs, cfg.act_bits, &c.act, frozen);
    weight_forward(u.w, &u.sm, frozen, c.wf);
    Matrix y = matmul(c.xq, c.wf.wm);
    add_bias_rows(y, c.wf.bias_eff);
    c.out = y;
    if (cache) *cache = std::move(c);
    return y;
}

void register_linear_params(LinearUnit& u, ParamGroup& factors, ParamGroup& other,
                            int increment_dims) {
    register_weight(u.w, "w", factors, other, increment_dims);
    if (u.sm.enabled) {
        other.add("sm.ls", u.sm.log_sc.data(), u.sm.log_sc.size());
        other.add("sm.de", u.sm.delta.data(), u.sm.delta.size());
    }
}

double linear_loss_only(const LinearUnit& u, const Matrix& x, const Matrix& target,
                        const TrainConfig& cfg, FrozenRounds* frozen) {
    return frobenius_mse(linear_unit_forward(u, x, cfg, frozen, nullptr), target);
}

double linear_loss_and_grads(const LinearUnit& u, const Matrix& x, const Matrix& target,
                             const TrainConfig& cfg, ParamGroup& params, FrozenRounds* frozen) {
    LinearUnitCache c;
    Matrix out = linear_unit_forward(u, x, cfg, frozen, &c);
    if (out.rows != target.rows || out.cols != target.cols)
        throw ShapeError("linear target shape mismatch");
    const double loss = frobenius_mse(out, target);
    const double scale = 2.0 / static_cast<double>(out.size());
    Matrix dOut(out.rows, out.cols);
    for (size_t i = 0; i < out.size(); ++i)
        dOut.data[i] = scale * (out.data[i] - target.data[i]);
    WeightGradBuf wb;
    init_wbuf(u.w, wb);
    std::vector<double> sm_ls, sm_de;
    if (u.sm.enabled) {
        sm_ls.assign(u.sm.log_sc.size(), 0.0);
        sm_de.assign(u.sm.delta.size(), 0.0);
    }
    const int act_levels = cfg.act_bits <= 8 ? (1 << cfg.act_bits) - 1 : 0;
    Matrix dXq = linear_weight_backward(u.w, &u.sm, c.wf, c.xq, dOut, cfg.ste_clip, wb,
                                        u.sm.enabled ? &sm_ls : nullptr,
                                        u.sm.enabled ? &sm_de : nullptr);
    linear_input_backward(&u.sm, c.xs, c.act, act_levels, dXq, cfg.ste_clip,
                          u.sm.enabled ? &sm_ls : nullptr, u.sm.enabled ? &sm_de : nullptr);
    flush_weight(params, "w", wb);
    flush(params, "sm.ls", sm_ls);
    flush(params, "sm.de", sm_de);
    return loss;
}

// ---- calibration loop ----

namespace {

struct CalibProblem {
    virtual ~CalibProblem() = default;
    virtual int n_items() const = 0;
    virtual double loss(const std::vector<int>& items) const = 0;
    virtual double loss_and_grads(const std::vector<int>& items, ParamGroup& g) const = 0;
    virtual double factor_norm() const = 0;
};

LayerResult run_calibration(const CalibProblem& p, const std::vector<ParamGroup*>& phases,
                            const TrainConfig& cfg, int layer_index) {
    std::vector<int> all(static_cast<size_t>(p.n_items()));
    std::iota(all.begin(), all.end(), 0);
    LayerResult res;
    res.initial_loss = p.loss(all);
    double best = res.initial_loss;
    auto snap_all = [&phases]() {
        std::vector<std::vector<double>> s;
        for (ParamGroup* g : phases) s.push_back(g->snapshot());
        return s;
    };
    auto best_snap = snap_all();
    if (cfg.trace)
        *cfg.trace << "layer=" << layer_index << " epoch=0 loss=" << res.initial_loss
                   << " inorm=" << p.factor_norm() << "\n";
    size_t total = 0;
    for (ParamGroup* g : phases) total += g->total_size();
    if (total == 0 || res.initial_loss == 0.0 || cfg.epochs <= 0) {
        res.final_loss = res.initial_loss;
        return res;
    }
    const double diverged_at = cfg.divergence_factor * res.initial_loss + 1e-12;
    AdamConfig acfg;
    acfg.lr = cfg.learning_rate;
    acfg.weight_decay = cfg.weight_decay;
    RandomStream rng(cfg.seed);
    const size_t bs = cfg.batch_size > 0 ? static_cast<size_t>(cfg.batch_size) : all.size();
    for (int e = 1; e <= cfg.epochs; ++e) {
        std::vector<int> order = all;
        for (size_t i = order.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)));
            std::swap(order[i], order[j]);
        }
        double min_batch = 1e300;
        double full = 0.0;
        // numeric blow-ups mid-epoch are divergence, not bad input data
        try {
            for (ParamGroup* g : phases) {
                if (g->total_size() == 0) continue;
                for (size_t o = 0; o < order.size(); o += bs) {
                    std::vector<int> batch(order.begin() + static_cast<long>(o),
                                           order.begin() +
                                               static_cast<long>(std::min(order.size(), o + bs)));
                    g->zero_grads();
                    double bl = p.loss_and_grads(batch, *g);
                    min_batch = std::min(min_batch, bl);
                    adam_step(*g, acfg);
                }
            }
            full = p.loss(all);
        } catch (const TrainError& te) {
            throw TrainError("layer " + std::to_string(layer_index) + ": " + te.what());
        } catch (const DomainError& de) {
            throw TrainError("calibration diverged at layer " + std::to_string(layer_index) +
                             ": " + de.what());
        }
        if (!std::isfinite(full))
            throw TrainError("calibration diverged at layer " + std::to_string(layer_index) +
                             ": non-finite epoch loss");
        res.epoch_losses.push_back(full);
        res.epochs_run = e;
        if (cfg.trace)
            *cfg.trace << "layer=" << layer_index << " epoch=" << e << " loss=" << full
                       << " inorm=" << p.factor_norm() << "\n";
        if (full < best) {
            best = full;
            best_snap = snap_all();
        }
        if (min_batch > diverged_at)
            throw TrainError("calibration diverged at layer " + std::to_string(layer_index) +
                             ": batch loss exceeded " + std::to_string(cfg.divergence_factor) +
                             "x the initial loss");
    }
    for (size_t i = 0; i < phases.size(); ++i) phases[i]->restore(best_snap[i]);
    res.final_loss = best;
    return res;
}

struct BlockProblem : CalibProblem {
    const Block& b;
    const Activations& x;
    const Matrix& target;
    const TrainConfig& cfg;

    BlockProblem(const Block& b_, const Activations& x_, const Matrix& t_,
                 const TrainConfig& c_)
        : b(b_), x(x_), target(t_), cfg(c_) {}

    int n_items() const override { return x.n_seq(); }

    void subset(const std::vector<int>& items, Activations& sx, Matrix& st) const {
        const int t = x.seq_len;
        sx.seq_len = t;
        sx.x = Matrix(static_cast<int>(items.size()) * t, x.x.cols);
        st = Matrix(static_cast<int>(items.size()) * t, target.cols);
        for (size_t i = 0; i < items.size(); ++i)
            for (int r = 0; r < t; ++r) {
                const int src = items[i] * t + r;
                const int dst = static_cast<int>(i) * t + r;
                std::copy(x.x.row_ptr(src), x.x.row_ptr(src) + x.x.cols, sx.x.row_ptr(dst));
                std::copy(target.row_ptr(src), target.row_ptr(src) + target.cols,
                          st.row_ptr(dst));
            }
    }

    double loss(const std::vector<int>& items) const override {
        Activations sx;
        Matrix st;
        subset(items, sx, st);
        return block_loss_only(b, sx, st, cfg, nullptr);
    }

    double loss_and_grads(const std::vector<int>& items, ParamGroup& g) const override {
        Activations sx;
        Matrix st;
        subset(items, sx, st);
        return block_loss_and_grads(b, sx, st, cfg, g, nullptr);
    }

    double factor_norm() const override { return block_factor_norm(b); }
};

struct LinearProblem : CalibProblem {
    const LinearUnit& u;
    const Matrix& x;
    const Matrix& target;
    const TrainConfig& cfg;

    LinearProblem(const LinearUnit& u_, const Matrix& x_, const Matrix& t_,
                  const TrainConfig& c_)
        : u(u_), x(x_), target(t_), cfg(c_) {}

    int n_items() const override { return x.rows; }

    void subset(const std::vector<int>& items, Matrix& sx, Matrix& st) const {
        sx = Matrix(static_cast<int>(items.size()), x.cols);
        st = Matrix(static_cast<int>(items.size()), target.cols);
        for (size_t i = 0; i < items.size(); ++i) {
            std::copy(x.row_ptr(items[i]), x.row_ptr(items[i]) + x.cols,
                      sx.row_ptr(static_cast<int>(i)));
            std::copy(target.row_ptr(items[i]), target.row_ptr(items[i]) + target.cols,
                      st.row_ptr(static_cast<int>(i)));
        }
    }

    double loss(const std::vector<int>& items) const override {
        Matrix sx, st;
        subset(items, sx, st);
        return linear_loss_only(u, sx, st, cfg, nullptr);
    }

    double loss_and_grads(const std::vector<int>& items, ParamGroup& g) const override {
        Matrix sx, st;
        subset(items, sx, st);
        return linear_loss_and_grads(u, sx, st, cfg, g, nullptr);
    }

    double factor_norm() const override {
        if (u.w.state != WeightState::Lsi) return 0.0;
        double acc = 0.0;
        for (double v : u.w.lsi.increment) acc += v * v;
        for (double v : u.w.lsi.k_block.data) acc += v * v;
        return std::sqrt(acc);
    }
};

} // namespace

LayerResult calibrate_block(Block& b, const Activations& x, const Matrix& fp_target,
                            const TrainConfig& cfg, int layer_index) {
    if (x.x.rows != fp_target.rows) throw ShapeError("calibration target row mismatch");
    ParamGroup factors, other;
    std::vector<ParamGroup*> phases;
    if (cfg.two_phase) {
        register_block_params(b, factors, other, cfg.increment_dims);
        phases = {&factors, &other};
    } else {
        register_block_params(b, factors, factors, cfg.increment_dims);
        phases = {&factors};
    }
    BlockProblem prob(b, x, fp_target, cfg);
    return run_calibration(prob, phases, cfg, layer_index);
}

LayerResult calibrate_linear(LinearUnit& u, const Matrix& x, const TrainConfig& cfg) {
    Matrix target = linear_unit_forward_fp(u, x);
    ParamGroup factors, other;
    std::vector<ParamGroup*> phases;
    if (cfg.two_phase) {
        register_linear_params(u, factors, other, cfg.increment_dims);
        phases = {&factors, &other};
    } else {
        register_linear_params(u, factors, factors, cfg.increment_dims);
        phases = {&factors};
    }
    LinearProblem prob(u, x, target, cfg);
    return run_calibration(prob, phases, cfg, 0);
}

ModelCalibResult calibrate_model(LayerGraph& m, const std::vector<std::vector<int32_t>>& calib,
                                 const TrainConfig& cfg) {
    if (!m.has_float_weights())
        throw ConfigError("calibration needs the full-precision weights");
    ModelCalibResult res;
    Activations fp, qs;
    fp.x = embed_tokens(m, calib);
    fp.seq_len = static_cast<int>(calib[0].size());
    qs = fp;
    QuantPathOpts opt;
    opt.act_bits = cfg.act_bits;
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        Block& b = m.blocks[i];
        Matrix target = block_forward_fp(b, fp);
        res.layers.push_back(calibrate_block(b, qs, target, cfg, static_cast<int>(i)));
        fold_block(b);
        qs.x = block_forward_quant(b, qs, opt, nullptr);
        fp.x = std::move(target);
    }
    return res;
}

ModelCalibResult finetune_last_layers(LayerGraph& m,
                                      const std::vector<std::vector<int32_t>>& calib,
                                      const TrainConfig& cfg, int last_layers) {
    const int n = static_cast<int>(m.blocks.size());
    if (last_layers < 1 || last_layers > n)
        throw ConfigError("finetune layer count must be in [1, layers]");
    if (!m.has_float_weights())
        throw ConfigError("finetuning needs the full-precision weights");
    TrainConfig tc = cfg;
    tc.two_phase = true;
    ModelCalibResult res;
    Activations fp, qs;
    fp.x = embed_tokens(m, calib);
    fp.seq_len = static_cast<int>(calib[0].size());
    qs = fp;
    QuantPathOpts opt;
    opt.act_bits = cfg.act_bits;
    const int first_trained = n - last_layers;
    for (int i = 0; i < n; ++i) {
        Block& b = m.blocks[i];
        Matrix target = block_forward_fp(b, fp);
        if (i >= first_trained)
            res.layers.push_back(calibrate_block(b, qs, target, tc, i));
        fold_block(b);
        qs.x = block_forward_quant(b, qs, opt, nullptr);
        fp.x = std::move(target);
    }
    return res;
}

} // namespace lsiq
