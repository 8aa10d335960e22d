#pragma once

#include "lsiq/matrix.hpp"

namespace lsiq {

// Learnable equivalence transforms. s_c scales activation columns into weight
// rows, delta shifts activations into the bias, s_a rebalances query/key
// channels. All three leave full-precision outputs unchanged.
struct SmoothParams {
    std::vector<double> s_c;   // per input channel, > 0
    std::vector<double> delta; // per input channel
    std::vector<double> s_a;   // per head dimension, > 0
};

struct SmoothedLinear {
    Matrix x;                 // (x - delta) / s_c, column-wise
    Matrix w;                 // diag(s_c) * w
    std::vector<double> bias; // b + delta * w
};

SmoothedLinear smooth_linear(const Matrix& x, const Matrix& w, const std::vector<double>& b,
                             const SmoothParams& p);

struct SmoothedQk {
    Matrix q; // q / s_a, column-wise
    Matrix k; // k * s_a, column-wise
};

SmoothedQk smooth_attention(const Matrix& q, const Matrix& k, const SmoothParams& p);

// Rewrites a norm's affine parameters so its output arrives pre-smoothed:
// gain' = gain / s_c, bias' = (bias - delta) / s_c.
struct FoldedNorm {
    std::vector<double> gain;
    std::vector<double> bias;
};

FoldedNorm fold_scale_into_norm(const std::vector<double>& gain, const std::vector<double>& bias,
                                const SmoothParams& p);

} // namespace lsiq
