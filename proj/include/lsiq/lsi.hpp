#pragma once

#include "lsiq/quant.hpp"
#include "lsiq/svd.hpp"

namespace lsiq {

// Learnable singular-value state for one weight. Factors are frozen at
// capture; training moves only the per-value increment and, for grouped
// quantization, the square block added to the top-left n x n corner of the
// singular-value matrix.
struct LsiParams {
    SvdFactors factors;
    std::vector<double> increment; // length r = min(rows, cols)
    Matrix k_block;                // n x n; 0 x 0 when disabled
    Matrix base;                   // original weight, returned verbatim while
                                   // increment and k_block are exactly zero
};

// square_n is clamped to r; pass 0 to disable the square block
LsiParams capture(const Matrix& w, int square_n = 0);

Matrix reconstruct(const LsiParams& p);

// fake-quantize the reconstructed weight; qparams are recomputed from the
// perturbed weight on every call
Matrix lsi_fake_quantize(const LsiParams& p, const QuantConfig& cfg);

// quantize the reconstructed weight into a plain code tensor; the result
// carries no trace of the factors
QuantizedTensor fold(const LsiParams& p, const QuantConfig& cfg);

// trainable parameters (r + n^2) as a fraction of the weight count
double lsi_param_fraction(int rows, int cols, int square_n);

// throws ConfigError when the trainable-parameter fraction exceeds the budget
void check_param_budget(int rows, int cols, int square_n, double budget_fraction);

} // namespace lsiq
