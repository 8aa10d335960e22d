#include "lsiq/smooth.hpp"

namespace lsiq {

namespace {

void check_positive(const std::vector<double>& v, const char* name) {
    for (double x : v)
        if (!(x > 0.0)) throw DomainError(std::string(name) + " must be strictly positive");
}

} // namespace

SmoothedLinear smooth_linear(const Matrix& x, const Matrix& w, const std::vector<double>& b,
                             const SmoothParams& p) {
    const size_t a = static_cast<size_t>(w.rows);
    if (p.s_c.size() != a || p.delta.size() != a)
        throw ShapeError("smooth_linear: s_c/delta length must equal weight rows");
    if (x.cols != w.rows) throw ShapeError("smooth_linear: x cols != w rows");
    if (!b.empty() && b.size() != static_cast<size_t>(w.cols))
        throw ShapeError("smooth_linear: bias length != w cols");
    check_positive(p.s_c, "s_c");

    SmoothedLinear out;
    out.x = Matrix(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) out.x(i, j) = (x(i, j) - p.delta[j]) / p.s_c[j];

    out.w = Matrix(w.rows, w.cols);
    for (int i = 0; i < w.rows; ++i) {
        double s = p.s_c[i];
        for (int j = 0; j < w.cols; ++j) out.w(i, j) = s * w(i, j);
    }

    out.bias.assign(w.cols, 0.0);
    for (int j = 0; j < w.cols; ++j) {
        double acc = b.empty() ? 0.0 : b[j];
        for (int i = 0; i < w.rows; ++i) acc += p.delta[i] * w(i, j);
        out.bias[j] = acc;
    }
    return out;
}

SmoothedQk smooth_attention(const Matrix& q, const Matrix& k, const SmoothParams& p) {
    const size_t d = static_cast<size_t>(q.cols);
    if (p.s_a.size() != d) throw ShapeError("smooth_attention: s_a length must equal q cols");
    if (k.cols != q.cols) throw ShapeError("smooth_attention: q/k column mismatch");
    check_positive(p.s_a, "s_a");

    SmoothedQk out;
    out.q = Matrix(q.rows, q.cols);
    out.k = Matrix(k.rows, k.cols);
    for (int i = 0; i < q.rows; ++i)
        for (int j = 0; j < q.cols; ++j) out.q(i, j) = q(i, j) / p.s_a[j];
    for (int i = 0; i < k.rows; ++i)
        for (int j = 0; j < k.cols; ++j) out.k(i, j) = k(i, j) * p.s_a[j];
    return out;
}

FoldedNorm fold_scale_into_norm(const std::vector<double>& gain, const std::vector<double>& bias,
                                const SmoothParams& p) {
    if (gain.size() != p.s_c.size() || bias.size() != p.s_c.size())
        throw ShapeError("fold_scale_into_norm: gain/bias length must equal s_c length");
    check_positive(p.s_c, "s_c");
    FoldedNorm out;
    out.gain.resize(gain.size());
    out.bias.resize(bias.size());
    for (size_t i = 0; i < gain.size(); ++i) {
        out.gain[i] = gain[i] / p.s_c[i];
        out.bias[i] = (bias[i] - p.delta[i]) / p.s_c[i];
    }
    return out;
}

} // namespace lsiq
