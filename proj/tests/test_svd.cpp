#include "doctest.h"

#include <cmath>

#include "lsiq/rng.hpp"
#include "lsiq/svd.hpp"
#include "oracles.hpp"

using namespace lsiq;

namespace {

double ortho_residual(const Matrix& u) {
    // max |u^T u - I|
    Matrix g = matmul(transpose(u), u);
    double worst = 0.0;
    for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j)
            worst = std::max(worst, std::fabs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
}

double rel_recon_err(const Matrix& w, const SvdFactors& f) {
    Matrix r = svd_reconstruct(f);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        double d = w.data[i] - r.data[i];
        num += d * d;
        den += w.data[i] * w.data[i];
    }
    return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

void check_contract(const Matrix& w) {
    SvdFactors f = svd(w);
    size_t r = static_cast<size_t>(std::min(w.rows, w.cols));
    REQUIRE(f.s.size() == r);
    for (size_t i = 0; i < r; ++i) {
        CHECK(f.s[i] >= 0.0);
        if (i + 1 < r) CHECK(f.s[i] >= f.s[i + 1]);
    }
    CHECK(ortho_residual(f.u) < 1e-8);
    CHECK(ortho_residual(transpose(f.v_h)) < 1e-8);
    CHECK(rel_recon_err(w, f) < 1e-6);

    std::vector<double> ref = oracle::gram_singular_values(w);
    double scale = std::max(1.0, ref.empty() ? 0.0 : ref[0]);
    for (size_t i = 0; i < r; ++i) CHECK(std::fabs(f.s[i] - ref[i]) / scale < 1e-8);
}

} // namespace

TEST_CASE("identity input yields unit singular values") {
    Matrix eye(4, 4);
    for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
    SvdFactors f = svd(eye);
    for (double s : f.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    Matrix uv = matmul(f.u, f.v_h);
    CHECK(max_abs_diff(uv, eye) < 1e-10);
}

TEST_CASE("diagonal input reports its diagonal as singular values") {
    Matrix d(2, 2);
    d(0, 0) = 3.0;
    d(1, 1) = 1.0;
    SvdFactors f = svd(d);
    CHECK(f.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(f.s[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("contract holds on random tall, wide and square shapes") {
    RandomStream rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        int a = 1 + static_cast<int>(rng.uniform_int(0, 15));
        int b = 1 + static_cast<int>(rng.uniform_int(0, 15));
        check_contract(rng.gaussian_matrix(a, b));
    }
    check_contract(rng.gaussian_matrix(6, 4));
    check_contract(rng.gaussian_matrix(4, 6));
}

TEST_CASE("contract holds on rank-deficient inputs") {
    RandomStream rng(77);
    // outer product stack: rank <= 2 inside an 8x6 shape
    Matrix u1 = rng.gaussian_matrix(8, 1);
    Matrix v1 = rng.gaussian_matrix(1, 6);
    Matrix u2 = rng.gaussian_matrix(8, 1);
    Matrix v2 = rng.gaussian_matrix(1, 6);
    Matrix w = add(matmul(u1, v1), matmul(u2, v2));
    check_contract(w);

    Matrix zero(5, 3);
    SvdFactors f = svd(zero);
    for (double s : f.s) CHECK(s == 0.0);
}

TEST_CASE("svd of a single column and a single row") {
    RandomStream rng(5);
    check_contract(rng.gaussian_matrix(7, 1));
    check_contract(rng.gaussian_matrix(1, 7));
}

TEST_CASE("svd is deterministic and sign-fixed") {
    RandomStream rng(9);
    Matrix w = rng.gaussian_matrix(12, 9);
    SvdFactors f1 = svd(w);
    SvdFactors f2 = svd(w);
    CHECK(bit_equal(f1.u, f2.u));
    CHECK(bit_equal(f1.v_h, f2.v_h));
    REQUIRE(f1.s.size() == f2.s.size());
    for (size_t i = 0; i < f1.s.size(); ++i) CHECK(f1.s[i] == f2.s[i]);

    // largest-magnitude entry of every u column is non-negative
    for (int j = 0; j < f1.u.cols; ++j) {
        int arg = 0;
        for (int i = 0; i < f1.u.rows; ++i)
            if (std::fabs(f1.u(i, j)) > std::fabs(f1.u(arg, j))) arg = i;
        CHECK(f1.u(arg, j) >= 0.0);
    }
}

TEST_CASE("non-finite input is rejected") {
    Matrix w(2, 2);
    w(0, 0) = std::nan("");
    CHECK_THROWS_AS(svd(w), DomainError);
    Matrix inf(2, 2);
    inf(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(svd(inf), DomainError);
}

TEST_CASE("svd handles widely spread singular values") {
    // diag(1e6, 1, 1e-6) embedded in a rotation
    RandomStream rng(13);
    SvdFactors basis = svd(rng.gaussian_matrix(3, 3));
    Matrix d(3, 3);
    d(0, 0) = 1e6;
    d(1, 1) = 1.0;
    d(2, 2) = 1e-6;
    Matrix w = matmul(basis.u, matmul(d, basis.v_h));
    SvdFactors f = svd(w);
    CHECK(f.s[0] == doctest::Approx(1e6).epsilon(1e-9));
    CHECK(f.s[1] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ortho_residual(f.u) < 1e-8);
    CHECK(rel_recon_err(w, f) < 1e-6);
}
