#include "cwdiff/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cwdiff {

namespace {

double projected_loss(const OpGraph& graph, const std::vector<TensorD>& inputs, const ParamStore<double>& params,
                      const std::vector<TensorD>& proj, Mode mode) {
    const auto st = evaluate(graph, inputs, params, mode);
    double loss = 0.0;
    for (std::size_t k = 0; k < proj.size(); ++k) {
        const TensorD& out = st.value(graph.outputs()[k]);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            loss += proj[k][i] * out[i];
        }
    }
    return loss;
}

struct Coordinate {
    bool is_param;
    std::size_t tensor;
    std::size_t index;
};

}  // namespace

GradCheckReport grad_check(const OpGraph& graph, const std::vector<TensorD>& inputs, const ParamStore<double>& params,
                           Rng& rng, const GradCheckOptions& options) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto st = evaluate(graph, inputs, params, options.mode);
    std::vector<TensorD> proj;
    for (NodeId id : graph.outputs()) {
        TensorD r(st.value(id).shape());
        for (auto& x : r.values()) x = normal(rng);
        proj.push_back(std::move(r));
    }
    const Gradients<double> grads = backprop(graph, st, params, proj);

    std::vector<Coordinate> coords;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params.trainable(p)) continue;
        for (std::size_t i = 0; i < params[p].numel(); ++i) coords.push_back({true, p, i});
    }
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!options.differentiable_inputs.empty() && !options.differentiable_inputs.at(k)) continue;
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) coords.push_back({false, k, i});
    }
    if (coords.size() > options.coordinates) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.coordinates);
    }

    GradCheckReport report;
    ParamStore<double> p_work = params;
    std::vector<TensorD> in_work = inputs;
    for (const Coordinate& c : coords) {
        double* slot = c.is_param ? &p_work[c.tensor][c.index] : &in_work[c.tensor][c.index];
        const double orig = *slot;
        *slot = orig + options.step;
        const double up = projected_loss(graph, in_work, p_work, proj, options.mode);
        *slot = orig - options.step;
        const double down = projected_loss(graph, in_work, p_work, proj, options.mode);
        *slot = orig;
        const double numeric = (up - down) / (2.0 * options.step);
        const double analytic = c.is_param ? grads.params[c.tensor][c.index] : grads.inputs[c.tensor][c.index];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        const double rel = std::abs(analytic - numeric) / denom;
        report.max_abs_analytic = std::max(report.max_abs_analytic, std::abs(analytic));
        if (rel > report.max_rel_error || report.worst_coordinate.empty()) {
            report.max_rel_error = std::max(rel, report.max_rel_error);
            const std::string name =
                c.is_param ? "param:" + params.name(c.tensor)
                           : "input:" + graph.node(graph.input_nodes()[c.tensor]).label;
            report.worst_coordinate = name + "[" + std::to_string(c.index) + "]";
        }
        ++report.checked;
    }
    report.passed = report.max_rel_error <= options.tolerance;
    return report;
}

}  // namespace cwdiff
