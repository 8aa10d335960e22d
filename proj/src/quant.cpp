#include "lsiq/quant.hpp"

#include <cmath>

namespace lsiq {

double round_half_even(double x) {
    double f = std::floor(x);
    double d = x - f;
    if (d < 0.5) return f;
    if (d > 0.5) return f + 1.0;
    // exact half: pick the even neighbour
    return (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double FrozenRounds::round(double x) {
    if (capturing) {
        double r = round_half_even(x) - x;
        residuals.push_back(r);
        return x + r;
    }
    if (cursor >= residuals.size()) throw Error("frozen rounds: residual stream exhausted");
    return x + residuals[cursor++];
}

int FrozenRounds::clamp_side(double code, double max_code) {
    if (capturing) {
        int8_t b = code < 0.0 ? -1 : (code > max_code ? 1 : 0);
        branches.push_back(b);
        return b;
    }
    if (bcursor >= branches.size()) throw Error("frozen rounds: branch stream exhausted");
    return branches[bcursor++];
}

int QuantConfig::num_groups(int rows, int cols) const {
    switch (granularity) {
        case Granularity::PerTensor: return 1;
        case Granularity::PerChannel: return rows;
        case Granularity::Group: return rows * (cols / group_size);
    }
    return 1;
}

int QuantConfig::group_len(int rows, int cols) const {
    switch (granularity) {
        case Granularity::PerTensor: return rows * cols;
        case Granularity::PerChannel: return cols;
        case Granularity::Group: return group_size;
    }
    return rows * cols;
}

void QuantConfig::validate(int rows, int cols) const {
    if (bits < 2 || bits > 8)
        throw ConfigError("quant bits must be in [2, 8], got " + std::to_string(bits));
    if (granularity == Granularity::Group) {
        if (group_size <= 0) throw ConfigError("group granularity requires group_size > 0");
        if (cols % group_size != 0)
            throw ConfigError("group_size " + std::to_string(group_size) +
                              " does not divide row length " + std::to_string(cols));
    }
    if (target == QuantTarget::Weight && granularity == Granularity::PerTensor)
        throw ConfigError("weight quantization must be per-channel or grouped");
    if (target == QuantTarget::Activation && granularity != Granularity::PerTensor)
        throw ConfigError("activation quantization must be per-tensor");
    size_t ng = static_cast<size_t>(num_groups(rows, cols));
    if (clip_gamma.size() != clip_beta.size())
        throw ConfigError("clip_gamma/clip_beta size mismatch");
    if (!clip_gamma.empty() && clip_gamma.size() != ng)
        throw ConfigError("clip logits size " + std::to_string(clip_gamma.size()) +
                          " != group count " + std::to_string(ng));
}

QParams compute_qparams(const double* w, size_t n, int bits, const double* gamma,
                        const double* beta) {
    if (n == 0) throw DomainError("compute_qparams: empty group");
    double wmin = w[0], wmax = w[0];
    for (size_t i = 1; i < n; ++i) {
        if (w[i] < wmin) wmin = w[i];
        if (w[i] > wmax) wmax = w[i];
    }
    QParams p;
    p.lo = beta ? sigmoid(*beta) * wmin : wmin;
    p.hi = gamma ? sigmoid(*gamma) * wmax : wmax;
    if (p.hi <= p.lo) {
        p.degenerate = true;
        p.scale = 1.0;
        p.zero = 0.0;
        return p;
    }
    double levels = static_cast<double>((1 << bits) - 1);
    p.scale = (p.hi - p.lo) / levels;
    p.zero = round_half_even(-p.lo / p.scale);
    return p;
}

QParams compute_qparams(const Matrix& group, int bits) {
    return compute_qparams(group.data.data(), group.size(), bits, nullptr, nullptr);
}

namespace {

struct GroupResult {
    QParams p;
    int argmin = 0, argmax = 0;
    double wmin = 0.0, wmax = 0.0;
};

GroupResult group_params(const double* w, int n, const QuantConfig& cfg, int g) {
    GroupResult r;
    r.wmin = w[0];
    r.wmax = w[0];
    for (int i = 1; i < n; ++i) {
        if (w[i] < r.wmin) {
            r.wmin = w[i];
            r.argmin = i;
        }
        if (w[i] > r.wmax) {
            r.wmax = w[i];
            r.argmax = i;
        }
    }
    const double* ga = cfg.clip_gamma.empty() ? nullptr : &cfg.clip_gamma[g];
    const double* be = cfg.clip_beta.empty() ? nullptr : &cfg.clip_beta[g];
    r.p = compute_qparams(w, static_cast<size_t>(n), cfg.bits, ga, be);
    return r;
}

} // namespace

QuantizedTensor quantize(const Matrix& w, const QuantConfig& cfg) {
    cfg.validate(w.rows, w.cols);
    if (!all_finite(w)) throw DomainError("quantize: non-finite input");
    QuantizedTensor q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.cfg = cfg;
    const int ng = cfg.num_groups(w.rows, w.cols);
    const int len = cfg.group_len(w.rows, w.cols);
    const double m = static_cast<double>(cfg.levels());
    q.codes.resize(w.size());
    q.scales.resize(ng);
    q.zeros.resize(ng);
    for (int g = 0; g < ng; ++g) {
        const double* src = w.data.data() + static_cast<size_t>(g) * len;
        GroupResult r = group_params(src, len, cfg, g);
        q.scales[g] = r.p.scale;
        q.zeros[g] = r.p.zero;
        int32_t* dst = q.codes.data() + static_cast<size_t>(g) * len;
        for (int i = 0; i < len; ++i) {
            double c = round_half_even(src[i] / r.p.scale) + r.p.zero;
            if (c < 0.0) c = 0.0;
            if (c > m) c = m;
            dst[i] = static_cast<int32_t>(c);
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    Matrix out(q.rows, q.cols);
    const int ng = q.cfg.num_groups(q.rows, q.cols);
    const int len = q.cfg.group_len(q.rows, q.cols);
    for (int g = 0; g < ng; ++g) {
        double s = q.scales[g], z = q.zeros[g];
        const int32_t* src = q.codes.data() + static_cast<size_t>(g) * len;
        double* dst = out.data.data() + static_cast<size_t>(g) * len;
        for (int i = 0; i < len; ++i) dst[i] = (static_cast<double>(src[i]) - z) * s;
    }
    return out;
}

Matrix fake_quantize(const Matrix& w, const QuantConfig& cfg) {
    return dequantize(quantize(w, cfg));
}

Matrix fake_quantize_cached(const Matrix& w, const QuantConfig& cfg, FqCache* cache,
                            FrozenRounds* frozen) {
    cfg.validate(w.rows, w.cols);
    if (!all_finite(w)) throw DomainError("fake_quantize: non-finite input");
    const int ng = cfg.num_groups(w.rows, w.cols);
    const int len = cfg.group_len(w.rows, w.cols);
    const double m = static_cast<double>(cfg.levels());
    Matrix out(w.rows, w.cols);
    if (cache) {
        cache->groups.assign(ng, FqGroup{});
        cache->in_range.assign(w.size(), 1);
        cache->code.assign(w.size(), 0.0);
        cache->group_len = len;
    }
    for (int g = 0; g < ng; ++g) {
        const double* src = w.data.data() + static_cast<size_t>(g) * len;
        double* dst = out.data.data() + static_cast<size_t>(g) * len;
        GroupResult r = group_params(src, len, cfg, g);
        double s = r.p.scale;
        double z;
        if (r.p.degenerate) {
            z = 0.0;
        } else if (frozen) {
            z = frozen->round(-r.p.lo / s);
        } else {
            z = r.p.zero;
        }
        if (cache) {
            FqGroup& G = cache->groups[g];
            G.lo = r.p.lo;
            G.hi = r.p.hi;
            G.scale = s;
            G.zero = z;
            G.wmin = r.wmin;
            G.wmax = r.wmax;
            G.argmin = r.argmin;
            G.argmax = r.argmax;
            G.degenerate = r.p.degenerate;
        }
        for (int i = 0; i < len; ++i) {
            double pre = frozen ? frozen->round(src[i] / s) : round_half_even(src[i] / s);
            double c = pre + z;
            int side = frozen ? frozen->clamp_side(c, m) : (c < 0.0 ? -1 : (c > m ? 1 : 0));
            bool in = side == 0;
            if (side < 0) c = 0.0;
            if (side > 0) c = m;
            if (cache) {
                cache->in_range[static_cast<size_t>(g) * len + i] = in ? 1 : 0;
                cache->code[static_cast<size_t>(g) * len + i] = c;
            }
            dst[i] = (c - z) * s;
        }
    }
    return out;
}

Matrix quantize_activation(const Matrix& x, int bits) {
    return quantize_activation_cached(x, bits, nullptr, nullptr);
}

Matrix quantize_activation_cached(const Matrix& x, int bits, FqCache* cache,
                                  FrozenRounds* frozen) {
    if (bits < 2) throw ConfigError("activation bits must be >= 2");
    if (bits > 8) {
        if (cache) {
            cache->groups.clear();
            cache->in_range.clear();
            cache->code.clear();
            cache->group_len = 0;
        }
        return x;
    }
    QuantConfig cfg;
    cfg.bits = bits;
    cfg.granularity = Granularity::PerTensor;
    cfg.target = QuantTarget::Activation;
    return fake_quantize_cached(x, cfg, cache, frozen);
}

} // namespace lsiq
