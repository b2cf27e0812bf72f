#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cwdiff/numerics/graph.hpp"
#include "cwdiff/rng.hpp"

namespace cwdiff {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_coordinate;  // "param:<name>[i]" or "input:<name>[i]"
    std::size_t checked = 0;
    double max_abs_analytic = 0.0;
    bool passed = false;
};

struct GradCheckOptions {
    std::size_t coordinates = 100;
    double step = 1e-5;
    double tolerance = 1e-4;
    Mode mode = Mode::eval;
    /// One flag per graph input; empty means every input is differentiable.
    std::vector<bool> differentiable_inputs;
};

/// Compares backprop against central differences of the scalar
/// L = sum_k <r_k, output_k> with random projections r_k, on a random
/// subsample of parameter and input coordinates. Relative error uses
/// max(|analytic|, |numeric|, 1e-6) as denominator.
GradCheckReport grad_check(const OpGraph& graph, const std::vector<TensorD>& inputs, const ParamStore<double>& params,
                           Rng& rng, const GradCheckOptions& options = {});

}  // namespace cwdiff

namespace cwdiff {

struct OpCheckResult {
    std::string op;
    GradCheckReport report;
};

/// Runs grad_check on a small randomized graph for every differentiable op
/// (batch norm in both modes, mse with and without weights).
std::vector<OpCheckResult> gradcheck_all_ops(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace cwdiff
