#include <functional>

#include "cwdiff/numerics/gradcheck.hpp"
#include "cwdiff/numerics/init.hpp"

namespace cwdiff {

namespace {

TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    TensorD t(std::move(shape));
    for (auto& x : t.values()) x = normal(rng);
    return t;
}

struct Case {
    explicit Case(std::string n) : name(std::move(n)) {}

    std::string name;
    OpGraph graph;
    std::vector<TensorD> inputs;
    ParamStore<double> params;
    Mode mode = Mode::eval;
    std::vector<bool> differentiable;
};

std::vector<Case> build_cases(Rng& rng) {
    std::vector<Case> cases;
    auto unary = [&](const std::string& name, std::function<NodeId(OpGraph&, NodeId)> op, Shape shape,
                     double scale = 1.0) {
        Case c{name};
        const NodeId x = c.graph.input("x");
        c.graph.mark_output(op(c.graph, x));
        c.inputs.push_back(random_tensor(shape, rng, scale));
        cases.push_back(std::move(c));
    };

    {
        Case c{"linear"};
        const NodeId x = c.graph.input("x");
        c.graph.mark_output(c.graph.linear(x, c.graph.param("l.w"), c.graph.param("l.b")));
        add_linear_params(c.params, "l", 5, 4, rng);
        c.inputs.push_back(random_tensor({3, 5}, rng));
        cases.push_back(std::move(c));
    }
    {
        Case c{"conv3x3"};
        const NodeId x = c.graph.input("x");
        c.graph.mark_output(c.graph.conv3x3(x, c.graph.param("c.w"), c.graph.param("c.b")));
        add_conv_params(c.params, "c", 3, 4, rng);
        c.inputs.push_back(random_tensor({2, 3, 5, 4}, rng));
        cases.push_back(std::move(c));
    }
    unary("downsample2", [](OpGraph& g, NodeId x) { return g.downsample2(x); }, {2, 3, 4, 6});
    unary("upsample2", [](OpGraph& g, NodeId x) { return g.upsample2(x); }, {2, 3, 3, 2});
    unary("silu", [](OpGraph& g, NodeId x) { return g.silu(x); }, {4, 7}, 2.0);
    unary("tanh", [](OpGraph& g, NodeId x) { return g.tanh(x); }, {4, 7});
    unary("expm1", [](OpGraph& g, NodeId x) { return g.expm1(x); }, {4, 7});
    unary("global_avg_pool", [](OpGraph& g, NodeId x) { return g.global_avg_pool(x); }, {2, 3, 4, 4});
    {
        Case c{"group_norm"};
        const NodeId x = c.graph.input("x");
        c.graph.mark_output(c.graph.group_norm(x, c.graph.param("n.gamma"), c.graph.param("n.beta"), 2));
        c.params.add("n.gamma", random_tensor({4}, rng));
        c.params.add("n.beta", random_tensor({4}, rng));
        c.inputs.push_back(random_tensor({2, 4, 3, 3}, rng));
        cases.push_back(std::move(c));
    }
    for (Mode mode : {Mode::train, Mode::eval}) {
        Case c{mode == Mode::train ? "batch_norm(train)" : "batch_norm(eval)"};
        const NodeId x = c.graph.input("x");
        c.graph.mark_output(c.graph.batch_norm(x, c.graph.param("bn.gamma"), c.graph.param("bn.beta"),
                                               "bn.running_mean", "bn.running_var"));
        c.params.add("bn.gamma", random_tensor({5}, rng));
        c.params.add("bn.beta", random_tensor({5}, rng));
        c.params.add("bn.running_mean", random_tensor({5}, rng), false);
        TensorD rv({5});
        for (auto& v : rv.values()) v = 0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        c.params.add("bn.running_var", rv, false);
        c.inputs.push_back(random_tensor({6, 5}, rng));
        c.mode = mode;
        cases.push_back(std::move(c));
    }
    for (const char* name : {"add", "mul"}) {
        Case c{name};
        const NodeId a = c.graph.input("a"), b = c.graph.input("b");
        c.graph.mark_output(std::string(name) == "add" ? c.graph.add(a, b) : c.graph.mul(a, b));
        c.inputs.push_back(random_tensor({3, 4, 2}, rng));
        c.inputs.push_back(random_tensor({3, 4, 2}, rng));
        cases.push_back(std::move(c));
    }
    {
        Case c{"film"};
        const NodeId x = c.graph.input("x"), s = c.graph.input("scale"), h = c.graph.input("shift");
        c.graph.mark_output(c.graph.film(x, s, h));
        c.inputs.push_back(random_tensor({2, 3, 4, 4}, rng));
        c.inputs.push_back(random_tensor({2, 3}, rng, 0.5));
        c.inputs.push_back(random_tensor({2, 3}, rng));
        cases.push_back(std::move(c));
    }
    {
        Case c{"concat"};
        const NodeId a = c.graph.input("a"), b = c.graph.input("b");
        c.graph.mark_output(c.graph.concat({a, b}));
        c.inputs.push_back(random_tensor({2, 3, 2, 2}, rng));
        c.inputs.push_back(random_tensor({2, 1, 2, 2}, rng));
        cases.push_back(std::move(c));
    }
    {
        Case c{"mse"};
        const NodeId a = c.graph.input("pred"), b = c.graph.input("target");
        c.graph.mark_output(c.graph.mse(a, b));
        c.inputs.push_back(random_tensor({3, 5}, rng));
        c.inputs.push_back(random_tensor({3, 5}, rng));
        cases.push_back(std::move(c));
    }
    {
        Case c{"mse(weighted)"};
        const NodeId a = c.graph.input("pred"), b = c.graph.input("target"), w = c.graph.input("weights");
        c.graph.mark_output(c.graph.mse(a, b, w));
        c.inputs.push_back(random_tensor({3, 5}, rng));
        c.inputs.push_back(random_tensor({3, 5}, rng));
        TensorD wt({3, 5});
        for (std::size_t i = 0; i < wt.numel(); ++i) wt[i] = (i % 3 == 0) ? 0.0 : 1.0;
        c.inputs.push_back(wt);
        c.differentiable = {true, true, false};
        cases.push_back(std::move(c));
    }
    return cases;
}

}  // namespace

std::vector<OpCheckResult> gradcheck_all_ops(std::uint64_t seed, const GradCheckOptions& options) {
    Rng rng(derive_seed(seed, "gradcheck"));
    std::vector<OpCheckResult> results;
    for (Case& c : build_cases(rng)) {
        GradCheckOptions opt = options;
        opt.mode = c.mode;
        opt.differentiable_inputs = c.differentiable;
        results.push_back({c.name, grad_check(c.graph, c.inputs, c.params, rng, opt)});
    }
    return results;
}

}  // namespace cwdiff
