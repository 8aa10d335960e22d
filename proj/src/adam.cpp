#include "lsiq/adam.hpp"

#include <cmath>

namespace lsiq {

void adam_step(ParamGroup& params, const AdamConfig& cfg) {
    params.step += 1;
    double t = static_cast<double>(params.step);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& e : params.entries) {
        for (size_t i = 0; i < e.size; ++i) {
            double g = e.grad[i];
            if (!std::isfinite(g))
                throw TrainError("non-finite gradient for parameter '" + e.name + "'");
            e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
            e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
            double mhat = e.m[i] / bc1;
            double vhat = e.v[i] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.weight_decay != 0.0) upd += cfg.weight_decay * e.data[i];
            e.data[i] -= cfg.lr * upd;
        }
    }
}

} // namespace lsiq
