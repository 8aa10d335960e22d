#include "lsiq/lsi.hpp"

#include <cmath>

namespace lsiq {

LsiParams capture(const Matrix& w, int square_n) {
    if (square_n < 0) throw ConfigError("square_n must be >= 0");
    LsiParams p;
    p.factors = svd(w);
    int r = static_cast<int>(p.factors.s.size());
    p.increment.assign(r, 0.0);
    int n = std::min(square_n, r);
    p.k_block = Matrix(n, n);
    p.base = w;
    return p;
}

static bool all_zero(const std::vector<double>& v) {
    for (double x : v)
        if (x != 0.0) return false;
    return true;
}

Matrix reconstruct(const LsiParams& p) {
    if (all_zero(p.increment) && all_zero(p.k_block.data)) return p.base;

    const Matrix& u = p.factors.u;
    const Matrix& vh = p.factors.v_h;
    const int r = u.cols, b = vh.cols, n = p.k_block.rows;
    if (static_cast<int>(p.increment.size()) != r)
        throw ShapeError("reconstruct: increment length != rank");

    // t = (diag(s + inc) + k_pad) * v_h
    Matrix t(r, b);
    for (int i = 0; i < r; ++i) {
        double d = p.factors.s[i] + p.increment[i];
        for (int j = 0; j < b; ++j) t(i, j) = d * vh(i, j);
    }
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double kv = p.k_block(i, k);
            if (kv == 0.0) continue;
            for (int j = 0; j < b; ++j) t(i, j) += kv * vh(k, j);
        }
    return matmul(u, t);
}

Matrix lsi_fake_quantize(const LsiParams& p, const QuantConfig& cfg) {
    return fake_quantize(reconstruct(p), cfg);
}

QuantizedTensor fold(const LsiParams& p, const QuantConfig& cfg) {
    return quantize(reconstruct(p), cfg);
}

double lsi_param_fraction(int rows, int cols, int square_n) {
    if (rows <= 0 || cols <= 0) throw ShapeError("lsi_param_fraction: empty shape");
    double r = static_cast<double>(std::min(rows, cols));
    double n = static_cast<double>(square_n);
    return (r + n * n) / (static_cast<double>(rows) * static_cast<double>(cols));
}

void check_param_budget(int rows, int cols, int square_n, double budget_fraction) {
    double f = lsi_param_fraction(rows, cols, square_n);
    if (f > budget_fraction)
        throw ConfigError("trainable fraction " + std::to_string(f) + " exceeds budget " +
                          std::to_string(budget_fraction) + " for shape " + std::to_string(rows) +
                          "x" + std::to_string(cols));
}

} // namespace lsiq
