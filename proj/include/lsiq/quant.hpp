#pragma once

#include <cstdint>
#include <optional>

#include "lsiq/matrix.hpp"

namespace lsiq {

enum class Granularity { PerTensor, PerChannel, Group };
enum class QuantTarget { Weight, Activation };

// Uniform affine quantization config. Weight targets use per-channel (rows)
// or grouped (contiguous runs of group_size inside a row) granularity;
// activation targets are per-tensor. clip_gamma/clip_beta are unconstrained
// logits, one per quantization group; sigmoid(logit) scales the raw max/min
// when present (empty vectors disable clipping).
struct QuantConfig {
    int bits = 4;
    Granularity granularity = Granularity::PerChannel;
    int group_size = 0;
    QuantTarget target = QuantTarget::Weight;
    std::vector<double> clip_gamma;
    std::vector<double> clip_beta;

    int levels() const { return (1 << bits) - 1; } // max code value
    int num_groups(int rows, int cols) const;
    int group_len(int rows, int cols) const;
    void validate(int rows, int cols) const;
};

struct QuantizedTensor {
    int rows = 0;
    int cols = 0;
    QuantConfig cfg;
    std::vector<int32_t> codes;  // row-major
    std::vector<double> scales;  // per group
    std::vector<double> zeros;   // per group, integer-valued
};

// per-group state retained for gradient computation
struct FqGroup {
    double lo = 0.0, hi = 0.0;     // clipped range endpoints
    double scale = 1.0, zero = 0.0;
    double wmin = 0.0, wmax = 0.0; // raw extremes
    int argmin = 0, argmax = 0;    // flat index within the group
    bool degenerate = false;
};

struct FqCache {
    std::vector<FqGroup> groups;
    std::vector<uint8_t> in_range; // per element: pre-clamp code within [0, levels]
    std::vector<double> code;      // per element: post-clamp code
    int group_len = 0;
};

// Replays rounding residuals and clamp branches captured at a base point,
// turning the quantizer into a locally smooth function of its inputs; used by
// finite-difference checks. Freezing the clamp branch matters because group
// extremes land exactly on the code-range boundary.
struct FrozenRounds {
    std::vector<double> residuals;
    std::vector<int8_t> branches; // per element: -1 clamp low, 0 in range, 1 clamp high
    size_t cursor = 0;
    size_t bcursor = 0;
    bool capturing = true;

    double round(double x);
    int clamp_side(double code, double max_code);
    void rewind() {
        cursor = 0;
        bcursor = 0;
        capturing = false;
    }
};

double round_half_even(double x);
double sigmoid(double x);

// s_h/z for one group; gamma/beta optional clip logits
struct QParams {
    double scale = 1.0;
    double zero = 0.0;
    double lo = 0.0, hi = 0.0;
    bool degenerate = false;
};
QParams compute_qparams(const double* w, size_t n, int bits, const double* gamma,
                        const double* beta);
QParams compute_qparams(const Matrix& group, int bits);

QuantizedTensor quantize(const Matrix& w, const QuantConfig& cfg);
Matrix dequantize(const QuantizedTensor& q);
Matrix fake_quantize(const Matrix& w, const QuantConfig& cfg);

// identical values to fake_quantize when frozen == nullptr; optionally fills
// the cache and/or replays frozen rounding residuals
Matrix fake_quantize_cached(const Matrix& w, const QuantConfig& cfg, FqCache* cache,
                            FrozenRounds* frozen);

// per-tensor dynamic fake quantization; bits > 8 returns the input unchanged
Matrix quantize_activation(const Matrix& x, int bits);
Matrix quantize_activation_cached(const Matrix& x, int bits, FqCache* cache,
                                  FrozenRounds* frozen);

} // namespace lsiq
