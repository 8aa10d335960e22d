#pragma once

#include "lsiq/matrix.hpp"

namespace lsiq {

// Thin SVD of an a x b matrix: w = u * diag(s) * v_h with r = min(a, b).
// u is a x r with orthonormal columns, v_h is r x b with orthonormal rows,
// s is non-negative and sorted descending.
struct SvdFactors {
    Matrix u;
    std::vector<double> s;
    Matrix v_h;
};

// One-sided Jacobi: rotations applied until all column-pair cosines fall
// below 1e-12, capped at 60 sweeps. Deterministic: fixed sweep order plus a
// sign convention (largest-magnitude entry of each u column is non-negative).
// Throws DomainError on non-finite input, ShapeError on empty input.
SvdFactors svd(const Matrix& w);

// u * diag(s) * v_h
Matrix svd_reconstruct(const SvdFactors& f);

} // namespace lsiq
