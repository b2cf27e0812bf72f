#include <cmath>

#include "cwdiff/numerics/gradcheck.hpp"
#include "cwdiff/numerics/graph.hpp"
#include "cwdiff/numerics/init.hpp"
#include "cwdiff/numerics/optimizer.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

OpGraph two_layer(bool nonlinear) {
    OpGraph g;
    const NodeId x = g.input("x");
    NodeId h = g.linear(x, g.param("l1.w"), g.param("l1.b"));
    if (nonlinear) h = g.silu(h);
    g.mark_output(g.linear(h, g.param("l2.w"), g.param("l2.b")));
    return g;
}

}  // namespace

TEST_CASE("evaluate: identity graph returns its input") {
    OpGraph g;
    g.mark_output(g.input("x"));
    ParamStore<float> p;
    TensorF x({2, 3}, {1, 2, 3, 4, 5, 6});
    auto out = outputs(g, evaluate(g, {x}, p));
    CHECK(out.at(0) == x);
}

TEST_CASE("evaluate: zero linear layer annihilates") {
    OpGraph g;
    g.mark_output(g.linear(g.input("x"), g.param("l.w"), g.param("l.b")));
    ParamStore<float> p;
    Rng rng(1);
    add_linear_params(p, "l", 3, 2, rng, true);
    auto out = outputs(g, evaluate(g, {TensorF({4, 3}, 7.0f)}, p));
    for (float v : out[0].values()) CHECK(v == 0.0f);
}

TEST_CASE("evaluate: two-layer affine graph matches hand-computed product") {
    // W1 = [[1,2,0],[0,-1,3]], b1 = [1,-1]; W2 = [[2,1]], b2 = [0.5]; x = [1,2,3]
    // h = W1 x + b1 = [1+4+0+1, 0-2+9-1] = [6, 6]; y = 2*6 + 6 + 0.5 = 18.5
    OpGraph g = two_layer(false);
    ParamStore<double> p;
    p.add("l1.w", TensorD({2, 3}, {1, 2, 0, 0, -1, 3}));
    p.add("l1.b", TensorD({2}, {1, -1}));
    p.add("l2.w", TensorD({1, 2}, {2, 1}));
    p.add("l2.b", TensorD({1}, {0.5}));
    auto out = outputs(g, evaluate(g, {TensorD({1, 3}, {1, 2, 3})}, p));
    CHECK(out[0][0] == doctest::Approx(18.5));
}

TEST_CASE("evaluate: shape mismatch names the offending node") {
    OpGraph g;
    const NodeId x = g.input("x");
    const NodeId y = g.input("y");
    const NodeId s = g.add(x, y);
    g.mark_output(s);
    ParamStore<float> p;
    try {
        (void)evaluate(g, {TensorF({2}), TensorF({3})}, p);
        FAIL("expected a shape error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::shape);
        CHECK(std::string(e.what()).find("node " + std::to_string(s)) != std::string::npos);
    }
}

TEST_CASE("backprop: linear functional and quadratic seeds") {
    OpGraph g;
    g.mark_output(g.input("x"));
    ParamStore<double> p;
    TensorD x({5}, {0.5, -1, 2, 3, -4});
    auto st = evaluate(g, {x}, p);
    // L = sum(x): seed of ones gives dL/dx = 1.
    auto ones = backprop(g, st, p, {TensorD::ones({5})});
    for (double v : ones.inputs[0].values()) CHECK(v == 1.0);
    // L = 0.5 |x|^2: dL/d(out) = x, so dL/dx = x.
    auto quad = backprop(g, st, p, {x});
    CHECK(quad.inputs[0] == x);
    CHECK_THROWS_AS(backprop(g, st, p, {TensorD::ones({4})}), Error);
}

TEST_CASE("backprop: untouched parameters receive exact zeros") {
    OpGraph g;
    g.mark_output(g.linear(g.input("x"), g.param("l.w"), g.param("l.b")));
    ParamStore<double> p;
    Rng rng(3);
    add_linear_params(p, "l", 2, 2, rng);
    add_linear_params(p, "unused", 2, 2, rng);
    auto st = evaluate(g, {TensorD({1, 2}, {1, 1})}, p);
    auto gr = backprop(g, st, p, {TensorD::ones({1, 2})});
    for (double v : gr.params[p.index("unused.w")].values()) CHECK(v == 0.0);
}

TEST_CASE("grad_check: random two-layer network matches finite differences") {
    OpGraph g = two_layer(true);
    ParamStore<double> p;
    Rng rng(11);
    add_linear_params(p, "l1", 4, 6, rng);
    add_linear_params(p, "l2", 6, 3, rng);
    std::normal_distribution<double> n(0, 1);
    TensorD x({5, 4});
    for (auto& v : x.values()) v = n(rng);
    auto report = grad_check(g, {x}, p, rng);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked == 71);  // every coordinate: 24+6+18+3 params + 20 inputs
}

TEST_CASE("grad_check: affine graph is exact to 1e-8") {
    OpGraph g = two_layer(false);
    ParamStore<double> p;
    Rng rng(12);
    add_linear_params(p, "l1", 3, 3, rng);
    add_linear_params(p, "l2", 3, 2, rng);
    TensorD x({2, 3}, {0.1, 0.2, -0.3, 1.0, 0.5, -0.25});
    auto report = grad_check(g, {x}, p, rng);
    CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("grad_check: constant graph has all-zero gradients") {
    OpGraph g;
    g.input("x");
    g.mark_output(g.param("c"));
    ParamStore<double> p;
    p.add("c", TensorD({3}, {1, 2, 3}), false);
    Rng rng(5);
    auto report = grad_check(g, {TensorD({2}, {1, 2})}, p, rng);
    CHECK(report.max_abs_analytic == 0.0);
    CHECK(report.max_rel_error == 0.0);
}

TEST_CASE("grad_check: every op within 1e-4") {
    for (const auto& r : gradcheck_all_ops(2024)) {
        INFO(r.op << " worst " << r.report.worst_coordinate);
        CHECK(r.report.max_rel_error < 1e-4);
        CHECK(r.report.checked > 0);
    }
}

TEST_CASE("gradient linearity: grad(a L1 + b L2) = a grad L1 + b grad L2") {
    OpGraph g = two_layer(true);
    ParamStore<double> p;
    Rng rng(21);
    add_linear_params(p, "l1", 3, 4, rng);
    add_linear_params(p, "l2", 4, 2, rng);
    TensorD x({3, 3}, {0.1, 0.4, -0.3, 1.0, 0.5, -0.25, 0.7, -0.9, 0.2});
    auto st = evaluate(g, {x}, p);
    TensorD s1({3, 2}, {1, 0, 0, 1, 1, 1}), s2({3, 2}, {0.5, -1, 2, 0, 0, 3});
    TensorD mix({3, 2});
    for (std::size_t i = 0; i < 6; ++i) mix[i] = 2.0 * s1[i] - 3.0 * s2[i];
    auto g1 = backprop(g, st, p, {s1}), g2 = backprop(g, st, p, {s2}), gm = backprop(g, st, p, {mix});
    for (std::size_t k = 0; k < p.size(); ++k)
        for (std::size_t i = 0; i < p[k].numel(); ++i)
            CHECK(gm.params[k][i] == doctest::Approx(2.0 * g1.params[k][i] - 3.0 * g2.params[k][i]).epsilon(1e-12));
}

TEST_CASE("evaluate/backprop are bitwise deterministic") {
    OpGraph g;
    const NodeId x = g.input("x");
    NodeId h = g.conv3x3(x, g.param("c.w"), g.param("c.b"));
    h = g.group_norm(h, g.param("n.gamma"), g.param("n.beta"), 2);
    g.mark_output(g.silu(h));
    ParamStore<float> p;
    Rng rng(8);
    add_conv_params(p, "c", 2, 4, rng);
    add_norm_params(p, "n", 4);
    TensorF in({2, 2, 6, 6});
    std::normal_distribution<float> n(0, 1);
    for (auto& v : in.values()) v = n(rng);
    auto a = evaluate(g, {in}, p), b = evaluate(g, {in}, p);
    CHECK(outputs(g, a)[0] == outputs(g, b)[0]);
    TensorF seed = TensorF::ones(outputs(g, a)[0].shape());
    auto ga = backprop(g, a, p, {seed}), gb = backprop(g, b, p, {seed});
    for (std::size_t k = 0; k < p.size(); ++k) CHECK(ga.params[k] == gb.params[k]);
}

TEST_CASE("batch norm: eval mode uses running statistics") {
    OpGraph g;
    g.mark_output(g.batch_norm(g.input("x"), g.param("bn.gamma"), g.param("bn.beta"), "bn.running_mean",
                               "bn.running_var", 0.5));
    ParamStore<double> p;
    add_batch_norm_params(p, "bn", 1);
    TensorD x({4, 1}, {1, 2, 3, 4});
    auto st = evaluate(g, {x}, p, Mode::train);
    auto y = outputs(g, st)[0];
    CHECK(y[0] == doctest::Approx(-1.5 / std::sqrt(1.25 + 1e-5)));
    update_running_stats(g, st, p);
    CHECK(p.at("bn.running_mean")[0] == doctest::Approx(1.25));
    // unbiased batch variance 5/3, blended with 1 at momentum 0.5
    CHECK(p.at("bn.running_var")[0] == doctest::Approx(0.5 + 0.5 * 5.0 / 3.0));
    auto ye = outputs(g, evaluate(g, {x}, p))[0];
    CHECK(ye[0] == doctest::Approx((1.0 - 1.25) / std::sqrt(0.5 + 2.5 / 3.0 + 1e-5)));
}

TEST_CASE("adam: zero gradient keeps parameters and decays moments") {
    ParamStore<float> p;
    p.add("w", TensorF({2}, {1.0f, -2.0f}));
    auto st = make_optimizer(p, {});
    adam_step(p, {TensorF({2})}, st);
    CHECK(p[0][0] == 1.0f);
    CHECK(p[0][1] == -2.0f);
    CHECK(st.step == 1);
    // after a real step, a zero gradient scales the first moment by beta1
    adam_step(p, {TensorF({2}, {1.0f, 1.0f})}, st);
    const float m_before = st.m[0][0];
    adam_step(p, {TensorF({2})}, st);
    CHECK(st.m[0][0] == doctest::Approx(0.9 * m_before));
    CHECK(st.step == 3);
}

TEST_CASE("adam: first step moves by -lr * g / (|g| + eps)") {
    ParamStore<double> p;
    p.add("w", TensorD({3}, {0.0, 1.0, -1.0}));
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    auto st = make_optimizer(p, cfg);
    const TensorD g({3}, {0.3, -2.0, 1e-3});
    adam_step(p, {g}, st);
    const double expect[3] = {0.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1.0 + 0.01 * 2.0 / (2.0 + 1e-8),
                              -1.0 - 0.01 * 1e-3 / (1e-3 + 1e-8)};
    for (int i = 0; i < 3; ++i) CHECK(p[0][i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("adam: identical parameters with identical gradients stay identical") {
    ParamStore<float> p;
    p.add("a", TensorF({2}, {0.3f, 0.3f}));
    auto st = make_optimizer(p, {});
    for (int k = 0; k < 5; ++k) adam_step(p, {TensorF({2}, {0.1f * k - 0.2f, 0.1f * k - 0.2f})}, st);
    CHECK(p[0][0] == p[0][1]);
}

TEST_CASE("adam: non-finite gradient is rejected with the parameter name") {
    ParamStore<float> p;
    p.add("bad", TensorF({1}, {0.0f}));
    auto st = make_optimizer(p, {});
    try {
        adam_step(p, {TensorF({1}, {std::nanf("")})}, st);
        FAIL("expected rejection");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(std::string(e.what()).find("bad") != std::string::npos);
    }
    CHECK(st.step == 0);
}
