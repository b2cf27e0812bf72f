#pragma once

#include <cstdint>
#include <vector>

#include "cwdiff/numerics/graph.hpp"

namespace cwdiff {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Moments are aligned with ParamStore indices; buffers keep empty moments.
template <typename T>
struct OptimizerState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
};

template <typename T>
OptimizerState<T> make_optimizer(const ParamStore<T>& params, const AdamConfig& config);

/// AdamW with decoupled weight decay. `learning_rate` overrides the configured
/// rate for this step when positive (used by schedules). Throws on non-finite
/// gradients before touching any parameter.
template <typename T>
void adam_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& state,
               double learning_rate = -1.0);

}  // namespace cwdiff
