#include "doctest.h"

#include <cmath>
#include <vector>

#include "lsiq/errors.hpp"
#include "lsiq/lsi.hpp"
#include "lsiq/rng.hpp"
#include "oracles.hpp"

using namespace lsiq;

namespace {

// U * (diag(S + inc) + K in the top-left corner) * Vh, by naive matmul
Matrix rebuild_by_hand(const LsiParams& p) {
    int r = p.factors.u.cols;
    Matrix mid(r, r);
    for (int i = 0; i < r; ++i)
        mid(i, i) = p.factors.s[static_cast<size_t>(i)] + p.increment[static_cast<size_t>(i)];
    for (int i = 0; i < p.k_block.rows; ++i)
        for (int j = 0; j < p.k_block.cols; ++j) mid(i, j) += p.k_block(i, j);
    return oracle::matmul_naive(oracle::matmul_naive(p.factors.u, mid), p.factors.v_h);
}

} // namespace

TEST_CASE("capturing the identity yields unit singular values and zero deltas") {
    Matrix eye(4, 4);
    for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
    LsiParams p = capture(eye);
    REQUIRE(p.increment.size() == 4);
    for (double s : p.factors.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    for (double d : p.increment) CHECK(d == 0.0);
    CHECK(p.k_block.rows == 0);
    CHECK(bit_equal(p.base, eye));
}

TEST_CASE("zero increment reconstructs the original weight verbatim") {
    RandomStream rng(41);
    Matrix w = rng.gaussian_matrix(9, 6);
    LsiParams p = capture(w, 3);
    CHECK(bit_equal(reconstruct(p), w));
    // even via the slow path the error stays under the factorization tolerance
    p.increment[0] = 1e-300; // forces the full rebuild without moving anything
    Matrix slow = reconstruct(p);
    CHECK(max_abs_diff(slow, w) / max_abs(w) < 1e-6);
}

TEST_CASE("increment length tracks the short matrix side") {
    RandomStream rng(43);
    LsiParams tall = capture(rng.gaussian_matrix(64, 48));
    CHECK(tall.increment.size() == 48);
    LsiParams wide = capture(rng.gaussian_matrix(5, 17));
    CHECK(wide.increment.size() == 5);
}

TEST_CASE("nonzero increments match the hand-rebuilt factorization") {
    RandomStream rng(47);
    for (int trial = 0; trial < 10; ++trial) {
        int rows = 2 + static_cast<int>(rng.uniform_int(0, 10));
        int cols = 2 + static_cast<int>(rng.uniform_int(0, 10));
        int n = trial % 3 == 0 ? 2 : 0;
        Matrix w = rng.gaussian_matrix(rows, cols);
        LsiParams p = capture(w, n);
        for (double& d : p.increment) d = rng.normal() * 0.1;
        for (int i = 0; i < p.k_block.rows; ++i)
            for (int j = 0; j < p.k_block.cols; ++j) p.k_block(i, j) = rng.normal() * 0.05;
        CHECK(max_abs_diff(reconstruct(p), rebuild_by_hand(p)) < 1e-9);
    }
}

TEST_CASE("bumping the lone singular value of a rank-1 weight scales it") {
    RandomStream rng(53);
    std::vector<double> u(6), v(4);
    double un = 0.0, vn = 0.0;
    for (double& x : u) { x = rng.normal(); un += x * x; }
    for (double& x : v) { x = rng.normal(); vn += x * x; }
    un = std::sqrt(un);
    vn = std::sqrt(vn);
    double sigma = 2.5, eps = 0.125;
    Matrix w(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) w(i, j) = sigma * (u[static_cast<size_t>(i)] / un) *
                                              (v[static_cast<size_t>(j)] / vn);
    LsiParams p = capture(w);
    CHECK(p.factors.s[0] == doctest::Approx(sigma).epsilon(1e-9));
    p.increment[0] = eps;
    Matrix expected(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) expected(i, j) = w(i, j) * (sigma + eps) / sigma;
    CHECK(max_abs_diff(reconstruct(p), expected) < 1e-9);
}

TEST_CASE("a corner entry of the square block adds a rank-1 cross term") {
    Matrix w(4, 4);
    w(0, 0) = 5.0;
    w(1, 1) = 4.0;
    w(2, 2) = 3.0;
    w(3, 3) = 2.0;
    LsiParams p = capture(w, 2);
    REQUIRE(p.k_block.rows == 2);
    double c = 0.75;
    p.k_block(0, 0) = c;
    Matrix got = reconstruct(p);
    CHECK(got(0, 0) == doctest::Approx(5.0 + c).epsilon(1e-12));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (i != 0 || j != 0) CHECK(got(i, j) == doctest::Approx(w(i, j)).epsilon(1e-12));
    // the off-diagonal corner couples the first two singular directions
    p.k_block(0, 0) = 0.0;
    p.k_block(0, 1) = c;
    got = reconstruct(p);
    CHECK(got(0, 1) == doctest::Approx(c).epsilon(1e-12));
    CHECK(got(0, 0) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("square block size clamps to the rank bound and 0 disables it") {
    RandomStream rng(59);
    Matrix w = rng.gaussian_matrix(8, 6);
    LsiParams big = capture(w, 200);
    CHECK(big.k_block.rows == 6);
    CHECK(big.k_block.cols == 6);
    LsiParams off = capture(w, 0);
    CHECK(off.k_block.rows == 0);
}

TEST_CASE("untouched params fake-quantize exactly like the raw weight") {
    RandomStream rng(61);
    for (int bits : {2, 3, 4}) {
        Matrix w = rng.gaussian_matrix(16, 16);
        QuantConfig cfg;
        cfg.bits = bits;
        LsiParams p = capture(w, 4);
        CHECK(bit_equal(lsi_fake_quantize(p, cfg), fake_quantize(w, cfg)));
        QuantizedTensor direct = quantize(w, cfg);
        QuantizedTensor folded = fold(p, cfg);
        CHECK(folded.codes == direct.codes);
        CHECK(folded.scales == direct.scales);
        CHECK(folded.zeros == direct.zeros);
    }
}

TEST_CASE("weights already on the grid stay exact under capture and fold") {
    QuantConfig cfg;
    cfg.bits = 4;
    Matrix w(3, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) w(i, j) = static_cast<double>((i * 4 + j) % 16);
    LsiParams p = capture(w);
    Matrix fq = lsi_fake_quantize(p, cfg);
    CHECK(max_abs_diff(fq, w) < 1e-12);
}

TEST_CASE("folded codes always agree with the fake-quantized values") {
    RandomStream rng(67);
    for (int trial = 0; trial < 8; ++trial) {
        Matrix w = rng.gaussian_matrix(12, 8);
        QuantConfig cfg;
        cfg.bits = 2 + trial % 3;
        if (trial % 2 == 1) {
            cfg.granularity = Granularity::Group;
            cfg.group_size = 4;
        }
        LsiParams p = capture(w, trial % 2 == 1 ? 3 : 0);
        for (double& d : p.increment) d = rng.normal() * 0.05;
        for (int i = 0; i < p.k_block.rows; ++i)
            for (int j = 0; j < p.k_block.cols; ++j) p.k_block(i, j) = rng.normal() * 0.02;
        Matrix fq = lsi_fake_quantize(p, cfg);
        QuantizedTensor qt = fold(p, cfg);
        CHECK(bit_equal(dequantize(qt), fq));
    }
}

TEST_CASE("a tiny increment nudge does not flip codes away from boundaries") {
    RandomStream rng(71);
    Matrix w = rng.gaussian_matrix(8, 8);
    QuantConfig cfg;
    cfg.bits = 3;
    LsiParams p = capture(w);
    for (double& d : p.increment) d = rng.normal() * 0.01;
    QuantizedTensor before = fold(p, cfg);
    Matrix recon = reconstruct(p);
    p.increment[0] += 1e-9;
    QuantizedTensor after = fold(p, cfg);
    REQUIRE(before.codes.size() == after.codes.size());
    size_t n = before.codes.size();
    for (size_t i = 0; i < n; ++i) {
        size_t g = i / static_cast<size_t>(8); // per-channel rows of 8
        double s = before.scales[g];
        double t = recon.data[i] / s;
        double dist = std::fabs(t - std::nearbyint(t));
        if (std::fabs(dist - 0.5) > 1e-6) CHECK(before.codes[i] == after.codes[i]);
    }
}

TEST_CASE("trainable fraction is tiny at production shapes and bounded here") {
    // a 4096 x 11008 projection with a 200-wide block trains under 0.1%
    CHECK(lsi_param_fraction(4096, 11008, 200) < 0.001);
    CHECK(lsi_param_fraction(4096, 4096, 0) == doctest::Approx(1.0 / 4096.0));
    // toy 64 x 64 with a full-rank block barely exceeds its own size
    CHECK(lsi_param_fraction(64, 64, 64) == doctest::Approx((64.0 + 4096.0) / 4096.0));
    CHECK_NOTHROW(check_param_budget(64, 64, 64, 1.5));
    CHECK_THROWS_AS(check_param_budget(64, 64, 64, 0.5), ConfigError);
    CHECK_NOTHROW(check_param_budget(4096, 11008, 200, 0.001));
}

TEST_CASE("degenerate and invalid captures") {
    Matrix zero(3, 3);
    LsiParams pz = capture(zero);
    for (double s : pz.factors.s) CHECK(s == 0.0);
    CHECK(bit_equal(reconstruct(pz), zero));
    pz.increment[0] = 0.5;
    Matrix lifted = reconstruct(pz);
    double norm = std::sqrt(frobenius_mse(lifted, zero) * static_cast<double>(zero.size()));
    CHECK(norm == doctest::Approx(0.5).epsilon(1e-9));

    Matrix bad(2, 2);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(capture(bad), DomainError);
    CHECK_THROWS_AS(capture(Matrix(2, 2), -3), ConfigError);
}

TEST_CASE("driving a singular value negative still reconstructs consistently") {
    RandomStream rng(73);
    Matrix w = rng.gaussian_matrix(5, 5);
    LsiParams p = capture(w);
    p.increment[0] = -2.0 * p.factors.s[0];
    Matrix got = reconstruct(p);
    CHECK(max_abs_diff(got, rebuild_by_hand(p)) < 1e-9);
    for (double v : got.data) CHECK(std::isfinite(v));
}
