#pragma once

#include <ostream>

#include "lsiq/adam.hpp"
#include "lsiq/model.hpp"

namespace lsiq {

struct TrainConfig {
    double learning_rate = 2e-4;
    double weight_decay = 0.0;
    int epochs = 20;
    int batch_size = 0; // items per optimizer step, 0 = full set
    uint64_t seed = 0;
    int act_bits = 16;
    bool ste_clip = true;   // zero pass-through gradients for clamped entries
    bool two_phase = false; // per epoch: factor params first, then the rest
    int increment_dims = 0; // > 0: train only the first d singular increments
    double divergence_factor = 10.0;
    std::ostream* trace = nullptr;
};

struct LayerResult {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_losses; // full-set loss after each epoch
    int epochs_run = 0;
};

// gradient pass-through for a fake-quantized tensor: grad masked to in-range
// entries when clip_mask is set, unchanged otherwise
Matrix ste_backward(const Matrix& grad, const FqCache& cache, bool clip_mask);

// exact gradient of the frozen-rounding forward; pre is the tensor that was
// fed to the quantizer, cache the state it recorded. Clip-logit gradients are
// accumulated into dgamma/dbeta (group-indexed) when provided.
Matrix fq_backward(const Matrix& grad, const Matrix& pre, const FqCache& cache, int levels,
                   const double* gamma, const double* beta, bool ste_clip, double* dgamma,
                   double* dbeta);

// Trainable views of one block. Pass the same group twice for joint training;
// pass two groups to split singular-factor params from smoothing/clip params.
void register_block_params(Block& b, ParamGroup& factors, ParamGroup& other, int increment_dims);

double block_loss_only(const Block& b, const Activations& x, const Matrix& target,
                       const TrainConfig& cfg, FrozenRounds* frozen);
double block_loss_and_grads(const Block& b, const Activations& x, const Matrix& target,
                            const TrainConfig& cfg, ParamGroup& params, FrozenRounds* frozen);

LayerResult calibrate_block(Block& b, const Activations& x, const Matrix& fp_target,
                            const TrainConfig& cfg, int layer_index);

// standalone linear layer y = x w + b, for small calibration studies
struct LinearUnit {
    QuantWeight w;
    LinearSmooth sm;
};

struct LinearUnitCache {
    Matrix xs, xq;
    FqCache act;
    WeightFwd wf;
    Matrix out;
};

Matrix linear_unit_forward(const LinearUnit& u, const Matrix& x, const TrainConfig& cfg,
                           FrozenRounds* frozen, LinearUnitCache* cache);
Matrix linear_unit_forward_fp(const LinearUnit& u, const Matrix& x);
void register_linear_params(LinearUnit& u, ParamGroup& factors, ParamGroup& other,
                            int increment_dims);
double linear_loss_only(const LinearUnit& u, const Matrix& x, const Matrix& target,
                        const TrainConfig& cfg, FrozenRounds* frozen);
double linear_loss_and_grads(const LinearUnit& u, const Matrix& x, const Matrix& target,
                             const TrainConfig& cfg, ParamGroup& params, FrozenRounds* frozen);

// fp target is computed internally from the unit's master weight
LayerResult calibrate_linear(LinearUnit& u, const Matrix& x, const TrainConfig& cfg);

struct ModelCalibResult {
    std::vector<LayerResult> layers;
};

// Layer-by-layer calibration: each block is trained against the fp stream
// target on quantized-stream inputs, then folded; both streams advance.
ModelCalibResult calibrate_model(LayerGraph& m, const std::vector<std::vector<int32_t>>& calib,
                                 const TrainConfig& cfg);

// Folds the first (layers - last_layers) blocks at their current params and
// trains only the tail, two-phase. All blocks must be prepared beforehand.
ModelCalibResult finetune_last_layers(LayerGraph& m,
                                      const std::vector<std::vector<int32_t>>& calib,
                                      const TrainConfig& cfg, int last_layers);

} // namespace lsiq
