#include "lsiq/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lsiq {

namespace {

constexpr double kConvTol = 1e-12;
constexpr int kMaxSweeps = 60;

// Orthogonalizes the columns of a (m x n, m >= n). Returns a = u * diag(s) * v^T.
void jacobi_core(Matrix a, Matrix& u, std::vector<double>& s, Matrix& v) {
    const int m = a.rows, n = a.cols;
    v = Matrix(n, n);
    for (int i = 0; i < n; ++i) v(i, i) = 1.0;

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double worst = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (int i = 0; i < m; ++i) {
                    double ap = a(i, p), aq = a(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                double denom = std::sqrt(alpha * beta);
                if (denom == 0.0) continue;
                double ratio = std::fabs(gamma) / denom;
                worst = std::max(worst, ratio);
                if (ratio <= kConvTol) continue;

                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double sn = c * t;
                for (int i = 0; i < m; ++i) {
                    double ap = a(i, p), aq = a(i, q);
                    a(i, p) = c * ap - sn * aq;
                    a(i, q) = sn * ap + c * aq;
                }
                for (int i = 0; i < n; ++i) {
                    double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - sn * vq;
                    v(i, q) = sn * vp + c * vq;
                }
            }
        }
        if (worst <= kConvTol) break;
    }

    s.assign(n, 0.0);
    for (int j = 0; j < n; ++j) {
        double nrm = 0.0;
        for (int i = 0; i < m; ++i) nrm += a(i, j) * a(i, j);
        s[j] = std::sqrt(nrm);
    }

    // sort descending, stable on ties
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return s[x] > s[y]; });

    Matrix a2(m, n), v2(n, n);
    std::vector<double> s2(n);
    for (int j = 0; j < n; ++j) {
        s2[j] = s[order[j]];
        for (int i = 0; i < m; ++i) a2(i, j) = a(i, order[j]);
        for (int i = 0; i < n; ++i) v2(i, j) = v(i, order[j]);
    }
    s = std::move(s2);
    v = std::move(v2);

    // columns with negligible norm are treated as exact zeros and replaced
    // with an orthonormal completion so u keeps orthonormal columns
    double smax = s.empty() ? 0.0 : s[0];
    double zero_tol = smax * 1e-13;
    u = Matrix(m, n);
    int rank = 0;
    for (int j = 0; j < n; ++j) {
        if (s[j] > zero_tol && s[j] > 0.0) {
            for (int i = 0; i < m; ++i) u(i, j) = a2(i, j) / s[j];
            rank = j + 1;
        } else {
            s[j] = 0.0;
        }
    }
    for (int j = rank; j < n; ++j) {
        // seed with basis vectors, Gram-Schmidt twice against earlier columns
        for (int cand = 0; cand < m; ++cand) {
            std::vector<double> vec(m, 0.0);
            vec[cand] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (int c = 0; c < j; ++c) {
                    double dot = 0.0;
                    for (int i = 0; i < m; ++i) dot += vec[i] * u(i, c);
                    for (int i = 0; i < m; ++i) vec[i] -= dot * u(i, c);
                }
            }
            double nrm = 0.0;
            for (double x : vec) nrm += x * x;
            nrm = std::sqrt(nrm);
            if (nrm > 1e-6) {
                for (int i = 0; i < m; ++i) u(i, j) = vec[i] / nrm;
                break;
            }
        }
    }
}

void apply_sign_convention(Matrix& u, Matrix& v_h) {
    for (int j = 0; j < u.cols; ++j) {
        int arg = 0;
        double best = -1.0;
        for (int i = 0; i < u.rows; ++i) {
            double mag = std::fabs(u(i, j));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            for (int i = 0; i < u.rows; ++i) u(i, j) = -u(i, j);
            for (int i = 0; i < v_h.cols; ++i) v_h(j, i) = -v_h(j, i);
        }
    }
}

} // namespace

SvdFactors svd(const Matrix& w) {
    if (w.rows == 0 || w.cols == 0) throw ShapeError("svd: empty matrix");
    if (!all_finite(w)) throw DomainError("svd: non-finite input");

    SvdFactors f;
    if (w.rows >= w.cols) {
        Matrix v;
        jacobi_core(w, f.u, f.s, v);
        f.v_h = transpose(v);
    } else {
        // decompose w^T = u1 s v1^T, then w = v1 s u1^T
        Matrix u1, v1;
        std::vector<double> s;
        jacobi_core(transpose(w), u1, s, v1);
        f.u = std::move(v1);
        f.s = std::move(s);
        f.v_h = transpose(u1);
    }
    apply_sign_convention(f.u, f.v_h);
    return f;
}

Matrix svd_reconstruct(const SvdFactors& f) {
    const int a = f.u.rows, r = f.u.cols, b = f.v_h.cols;
    Matrix scaled(r, b);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < b; ++j) scaled(i, j) = f.s[i] * f.v_h(i, j);
    Matrix out(a, b);
    for (int i = 0; i < a; ++i)
        for (int k = 0; k < r; ++k) {
            double uik = f.u(i, k);
            if (uik == 0.0) continue;
            for (int j = 0; j < b; ++j) out(i, j) += uik * scaled(k, j);
        }
    return out;
}

} // namespace lsiq
