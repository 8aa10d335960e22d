#include "doctest.h"

#include <cmath>

#include "lsiq/model.hpp"
#include "lsiq/quant.hpp"
#include "lsiq/rng.hpp"
#include "lsiq/smooth.hpp"

using namespace lsiq;

namespace {

SmoothParams random_params(RandomStream& rng, int in_dim, int head_dim) {
    SmoothParams p;
    for (int i = 0; i < in_dim; ++i) {
        p.s_c.push_back(std::exp(rng.uniform(-1.0, 1.0)));
        p.delta.push_back(rng.normal() * 0.3);
    }
    for (int i = 0; i < head_dim; ++i) p.s_a.push_back(std::exp(rng.uniform(-1.0, 1.0)));
    return p;
}

std::vector<double> random_bias(RandomStream& rng, int n) {
    std::vector<double> b(static_cast<size_t>(n));
    for (double& v : b) v = rng.normal();
    return b;
}

Matrix forward(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
    Matrix y = matmul(x, w);
    for (int r = 0; r < y.rows; ++r)
        for (int c = 0; c < y.cols; ++c) y(r, c) += b[static_cast<size_t>(c)];
    return y;
}

} // namespace

TEST_CASE("unit scale and zero shift change nothing bitwise") {
    RandomStream rng(3);
    Matrix x = rng.gaussian_matrix(4, 6);
    Matrix w = rng.gaussian_matrix(6, 5);
    std::vector<double> b = random_bias(rng, 5);
    SmoothParams p;
    p.s_c.assign(6, 1.0);
    p.delta.assign(6, 0.0);
    SmoothedLinear out = smooth_linear(x, w, b, p);
    CHECK(bit_equal(out.x, x));
    CHECK(bit_equal(out.w, w));
    CHECK(out.bias == b);
}

TEST_CASE("migrating scale rescues a coarse-rounding product") {
    // 1.3 * 15.4 rounded to integers gives 15; after moving scale so both
    // factors sit near 4.5, rounding gives 4 * 5 = 20, much closer to 20.02
    Matrix x(1, 1), w(1, 1);
    x(0, 0) = 1.3;
    w(0, 0) = 15.4;
    SmoothParams p;
    p.s_c = {1.3 / 4.3};
    p.delta = {0.0};
    SmoothedLinear sm = smooth_linear(x, w, {0.0}, p);
    CHECK(sm.x(0, 0) == doctest::Approx(4.3));
    CHECK(sm.w(0, 0) == doctest::Approx(4.656).epsilon(1e-3));
    double exact = 1.3 * 15.4;
    double raw_rounded = round_half_even(1.3) * round_half_even(15.4);
    double smooth_rounded = round_half_even(sm.x(0, 0)) * round_half_even(sm.w(0, 0));
    CHECK(std::fabs(smooth_rounded - exact) < std::fabs(raw_rounded - exact));
}

TEST_CASE("smoothed full-precision forward equals the original within 1e-9") {
    RandomStream rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        int n = 1 + static_cast<int>(rng.uniform_int(0, 15));
        int d = 1 + static_cast<int>(rng.uniform_int(0, 15));
        int o = 1 + static_cast<int>(rng.uniform_int(0, 15));
        Matrix x = rng.gaussian_matrix(n, d);
        Matrix w = rng.gaussian_matrix(d, o);
        std::vector<double> b = random_bias(rng, o);
        SmoothParams p = random_params(rng, d, 0);
        SmoothedLinear sm = smooth_linear(x, w, b, p);
        CHECK(max_abs_diff(forward(sm.x, sm.w, sm.bias), forward(x, w, b)) < 1e-9);
    }
}

TEST_CASE("attention smoothing keeps logits within 1e-9") {
    RandomStream rng(13);
    Matrix q = rng.gaussian_matrix(5, 8);
    Matrix k = rng.gaussian_matrix(5, 8);
    SmoothParams p = random_params(rng, 0, 8);
    SmoothedQk sm = smooth_attention(q, k, p);
    Matrix before = matmul(q, transpose(k));
    Matrix after = matmul(sm.q, transpose(sm.k));
    CHECK(max_abs_diff(before, after) < 1e-9);

    SmoothParams unit;
    unit.s_a.assign(8, 1.0);
    SmoothedQk id = smooth_attention(q, k, unit);
    CHECK(bit_equal(id.q, q));
    CHECK(bit_equal(id.k, k));
}

TEST_CASE("scalar attention smoothing example") {
    Matrix q(1, 1), k(1, 1);
    q(0, 0) = 4.0;
    k(0, 0) = 6.0;
    SmoothParams p;
    p.s_a = {2.0};
    SmoothedQk sm = smooth_attention(q, k, p);
    CHECK(sm.q(0, 0) == 2.0);
    CHECK(sm.k(0, 0) == 12.0);
    CHECK(sm.q(0, 0) * sm.k(0, 0) == q(0, 0) * k(0, 0));
}

TEST_CASE("composing two smooths equals one composed smooth within 1e-9") {
    RandomStream rng(17);
    Matrix x = rng.gaussian_matrix(6, 9);
    Matrix w = rng.gaussian_matrix(9, 4);
    std::vector<double> b = random_bias(rng, 4);
    SmoothParams p1 = random_params(rng, 9, 0);
    SmoothParams p2 = random_params(rng, 9, 0);

    SmoothedLinear first = smooth_linear(x, w, b, p1);
    SmoothedLinear second = smooth_linear(first.x, first.w, first.bias, p2);

    SmoothParams combined;
    for (size_t i = 0; i < 9; ++i) {
        combined.s_c.push_back(p1.s_c[i] * p2.s_c[i]);
        combined.delta.push_back(p1.delta[i] + p2.delta[i] * p1.s_c[i]);
    }
    SmoothedLinear once = smooth_linear(x, w, b, combined);
    CHECK(max_abs_diff(second.x, once.x) < 1e-9);
    CHECK(max_abs_diff(second.w, once.w) < 1e-9);
    for (size_t i = 0; i < 4; ++i) CHECK(std::fabs(second.bias[i] - once.bias[i]) < 1e-9);
}

TEST_CASE("the inverse smooth restores the originals within 1e-9") {
    RandomStream rng(19);
    Matrix x = rng.gaussian_matrix(5, 7);
    Matrix w = rng.gaussian_matrix(7, 3);
    std::vector<double> b = random_bias(rng, 3);
    SmoothParams p = random_params(rng, 7, 0);
    SmoothParams inv;
    for (size_t i = 0; i < 7; ++i) {
        inv.s_c.push_back(1.0 / p.s_c[i]);
        inv.delta.push_back(-p.delta[i] / p.s_c[i]);
    }
    SmoothedLinear fwd = smooth_linear(x, w, b, p);
    SmoothedLinear back = smooth_linear(fwd.x, fwd.w, fwd.bias, inv);
    CHECK(max_abs_diff(back.x, x) < 1e-9);
    CHECK(max_abs_diff(back.w, w) < 1e-9);
    for (size_t i = 0; i < 3; ++i) CHECK(std::fabs(back.bias[i] - b[i]) < 1e-9);
}

TEST_CASE("under quantization smoothing does change the result") {
    RandomStream rng(23);
    Matrix x = rng.gaussian_matrix(8, 16);
    Matrix w = rng.gaussian_matrix(16, 8);
    std::vector<double> b = random_bias(rng, 8);
    SmoothParams p = random_params(rng, 16, 0);
    QuantConfig cfg;
    cfg.bits = 3;

    SmoothedLinear sm = smooth_linear(x, w, b, p);
    Matrix raw_q = forward(x, fake_quantize(w, cfg), b);
    Matrix smooth_q = forward(sm.x, fake_quantize(sm.w, cfg), sm.bias);
    CHECK(max_abs_diff(raw_q, smooth_q) > 1e-6);

    // scale-only smoothing moves activation quantization error as well
    SmoothParams scale_only = p;
    scale_only.delta.assign(16, 0.0);
    SmoothedLinear sc = smooth_linear(x, w, b, scale_only);
    Matrix raw_aq = forward(quantize_activation(x, 4), w, b);
    Matrix smooth_aq = forward(quantize_activation(sc.x, 4), sc.w, sc.bias);
    CHECK(max_abs_diff(raw_aq, smooth_aq) > 1e-6);
}

TEST_CASE("folding scales into the norm matches explicit smoothing") {
    RandomStream rng(29);
    int d = 12;
    Matrix x = rng.gaussian_matrix(6, d);
    Matrix w = rng.gaussian_matrix(d, 5);
    std::vector<double> b = random_bias(rng, 5);
    std::vector<double> gain = random_bias(rng, d);
    std::vector<double> nbias = random_bias(rng, d);
    SmoothParams p = random_params(rng, d, 0);

    SmoothedLinear sm = smooth_linear(Matrix(1, d), w, b, p); // only w/bias used
    Matrix explicit_path = layernorm(x, gain, nbias);
    SmoothedLinear sx = smooth_linear(explicit_path, w, b, p);
    Matrix y1 = forward(sx.x, sm.w, sm.bias);

    FoldedNorm fn = fold_scale_into_norm(gain, nbias, p);
    Matrix y2 = forward(layernorm(x, fn.gain, fn.bias), sm.w, sm.bias);
    CHECK(max_abs_diff(y1, y2) < 1e-9);
}

TEST_CASE("fold_scale_into_norm identity and exact cancellation") {
    SmoothParams unit;
    unit.s_c.assign(4, 1.0);
    unit.delta.assign(4, 0.0);
    std::vector<double> gain = {1.0, 2.0, 3.0, 4.0};
    std::vector<double> bias = {0.5, -0.5, 0.25, 0.0};
    FoldedNorm fn = fold_scale_into_norm(gain, bias, unit);
    CHECK(fn.gain == gain);
    CHECK(fn.bias == bias);

    SmoothParams match;
    match.s_c = gain;
    match.delta = bias;
    FoldedNorm cancel = fold_scale_into_norm(gain, bias, match);
    for (double g : cancel.gain) CHECK(g == doctest::Approx(1.0));
    for (double z : cancel.bias) CHECK(z == doctest::Approx(0.0));
}

TEST_CASE("non-positive scales and shape mismatches are rejected") {
    RandomStream rng(31);
    Matrix x = rng.gaussian_matrix(2, 3);
    Matrix w = rng.gaussian_matrix(3, 2);
    std::vector<double> b = random_bias(rng, 2);
    SmoothParams p = random_params(rng, 3, 3);
    p.s_c[1] = 0.0;
    CHECK_THROWS_AS(smooth_linear(x, w, b, p), DomainError);
    p.s_c[1] = -1.0;
    CHECK_THROWS_AS(smooth_linear(x, w, b, p), DomainError);
    p.s_c[1] = 1.0;
    p.s_a[0] = -2.0;
    CHECK_THROWS_AS(smooth_attention(rng.gaussian_matrix(2, 3), rng.gaussian_matrix(2, 3), p),
                    DomainError);
    SmoothParams wrong = random_params(rng, 4, 0);
    CHECK_THROWS_AS(smooth_linear(x, w, b, wrong), ShapeError);
}
