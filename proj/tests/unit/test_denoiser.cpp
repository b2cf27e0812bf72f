#include <cmath>
#include <random>

#include "cwdiff/denoiser/denoiser.hpp"
#include "cwdiff/diffusion/diffusion.hpp"
#include "cwdiff/error.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.latent_channels = 10;
    c.base_width = 8;
    c.groups = 4;
    c.time_dim = 8;
    c.context_dim = 8;
    return c;
}

TensorF randn(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    return gaussian(s, rng);
}

// Non-zero output head so outputs depend on the inputs.
Denoiser live_model(std::uint64_t seed) {
    Denoiser m = init_denoiser(small_config(), seed);
    Rng rng(seed + 100);
    std::normal_distribution<float> n(0.0f, 0.1f);
    for (float& v : m.params.at("out.w").values()) v = n(rng);
    return m;
}

DenoiseInputs inputs_for(const Denoiser& m, std::size_t B, std::uint64_t seed) {
    const auto& c = m.config;
    DenoiseInputs in{randn({B, c.latent_channels, 8, 8}, seed), randn({B, 3, 8, 8}, seed + 1),
                     TensorF({B, c.time_dim}), randn({B, c.context_dim}, seed + 2)};
    for (std::size_t b = 0; b < B; ++b) {
        const auto e = timestep_embedding(static_cast<int>(b), 16, c.time_dim);
        std::copy(e.begin(), e.end(), in.temb.data() + b * c.time_dim);
    }
    return in;
}

TensorF row(const TensorF& t, std::size_t b) {
    Shape s = t.shape();
    s[0] = 1;
    const std::size_t n = t.numel() / t.dim(0);
    return TensorF(s, std::vector<float>(t.data() + b * n, t.data() + (b + 1) * n));
}

}  // namespace

TEST_CASE("timestep_embedding") {
    const auto e0 = timestep_embedding(0, 64, 16);
    for (std::size_t k = 0; k < 8; ++k) {
        CHECK(e0[k] == 0.0f);
        CHECK(e0[8 + k] == 1.0f);
    }
    CHECK(timestep_embedding(17, 64, 16) == timestep_embedding(17, 64, 16));
    const auto e1 = timestep_embedding(63, 64, 16);
    double dist = 0, norm = 0;
    for (std::size_t k = 0; k < 16; ++k) {
        dist += (e1[k] - e0[k]) * (e1[k] - e0[k]);
        norm += e1[k] * e1[k];
    }
    CHECK(dist > 0.0);
    CHECK(std::sqrt(norm) <= std::sqrt(8.0) + 1e-6);
    CHECK_THROWS_AS(timestep_embedding(0, 4, 7), Error);
    CHECK_THROWS_AS(timestep_embedding(4, 4, 8), Error);
    CHECK_NOTHROW(timestep_embedding(0, 1, 8));
}

TEST_CASE("encode_condition: drop probability") {
    DenoiserConfig c = small_config();
    const TensorF image = randn({3, 4, 4}, 3);
    Rng rng(5);
    SUBCASE("inference never drops") {
        const Denoiser m = init_denoiser(c, 1);
        for (int i = 0; i < 100; ++i) CHECK_FALSE(encode_condition(m, image, rng, false).null);
    }
    SUBCASE("p = 1 always drops to the zero vector") {
        c.cfg_drop = 0.999999999;
        const Denoiser m = init_denoiser(c, 1);
        for (int i = 0; i < 100; ++i) {
            const auto ctx = encode_condition(m, image, rng, true);
            CHECK(ctx.null);
            CHECK(ctx.vector == std::vector<float>(c.context_dim, 0.0f));
        }
    }
    SUBCASE("p = 0.05 over 1e4 calls") {
        const Denoiser m = init_denoiser(c, 1);
        int nulls = 0;
        for (int i = 0; i < 10000; ++i) nulls += encode_condition(m, image, rng, true).null;
        CHECK(nulls >= 350);
        CHECK(nulls <= 650);
    }
    SUBCASE("wrong resolution") {
        const Denoiser m = init_denoiser(c, 1);
        CHECK_THROWS_AS(encode_condition(m, randn({3, 6, 6}, 1), rng, false), Error);
        CHECK_THROWS_AS(encode_condition(m, randn({4, 4, 4}, 1), rng, false), Error);
    }
}

TEST_CASE("denoise: zero-initialized head") {
    const Denoiser m = init_denoiser(small_config(), 2);
    const TensorF v = denoise(m, inputs_for(m, 3, 7));
    CHECK(v.shape() == Shape{3, 10, 8, 8});
    for (float x : v.values()) CHECK(x == 0.0f);
}

TEST_CASE("denoise: deterministic and batch-equivariant") {
    const Denoiser m = live_model(4);
    const DenoiseInputs in = inputs_for(m, 3, 11);
    const TensorF v = denoise(m, in);
    CHECK(denoise(m, in).storage() == v.storage());
    double mag = 0;
    for (float x : v.values()) mag += std::abs(x);
    CHECK(mag > 0.0);
    for (std::size_t b = 0; b < 3; ++b) {
        const TensorF vb = denoise(m, {row(in.z, b), row(in.image, b), row(in.temb, b), row(in.context, b)});
        const TensorF ref = row(v, b);
        for (std::size_t i = 0; i < vb.numel(); ++i) CHECK(vb[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    }
    // permuting the batch permutes the output
    DenoiseInputs sw = in;
    for (TensorF* t : {&sw.z, &sw.image, &sw.temb, &sw.context}) {
        const std::size_t n = t->numel() / 3;
        std::swap_ranges(t->data(), t->data() + n, t->data() + 2 * n);
    }
    const TensorF vs = denoise(m, sw);
    const TensorF r0 = row(vs, 0), r2 = row(v, 2);
    for (std::size_t i = 0; i < r0.numel(); ++i) CHECK(r0[i] == doctest::Approx(r2[i]).epsilon(1e-5));
}

TEST_CASE("denoise: input validation") {
    const Denoiser m = init_denoiser(small_config(), 2);
    DenoiseInputs in = inputs_for(m, 2, 1);
    DenoiseInputs nan = in;
    nan.z[5] = std::nanf("");
    CHECK_THROWS_AS(denoise(m, nan), Error);
    DenoiseInputs bad = in;
    bad.z = randn({2, 9, 8, 8}, 1);
    CHECK_THROWS_AS(denoise(m, bad), Error);
    bad = in;
    bad.image = randn({2, 3, 4, 4}, 1);
    CHECK_THROWS_AS(denoise(m, bad), Error);
}

TEST_CASE("cfg_combine") {
    const TensorF c({4}, 1.0f), u({4}, 0.0f);
    const TensorF a = randn({2, 5}, 1), b = randn({2, 5}, 2);
    const TensorF w1 = cfg_combine(a, b, 1.0), w0 = cfg_combine(a, b, 0.0), w2 = cfg_combine(c, u, 2.0);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(w1[i] == doctest::Approx(a[i]).epsilon(1e-6));
        CHECK(w0[i] == b[i]);
    }
    for (float x : w2.values()) CHECK(x == 2.0f);
    CHECK_THROWS_AS(cfg_combine(a, c, 1.5), Error);
}

TEST_CASE("denoiser: every parameter block receives gradient after a few steps") {
    const DenoiserConfig c = small_config();
    Denoiser m = init_denoiser(c, 3);
    auto opt = make_optimizer(m.params, {});
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 16}, layout);
    Rng rng(1);
    TrainBatch batch{randn({4, 10, 8, 8}, 2), randn({4, 3, 8, 8}, 3)};
    for (int i = 0; i < 3; ++i) train_step_pdm(m, opt, batch, table, layout, rng, 1e-2);

    OpGraph g;
    const NodeId z = g.input("z"), image = g.input("image"), temb = g.input("temb"), tgt = g.input("target");
    const NodeId v = build_denoiser(g, c, z, image, temb, build_condition_encoder(g, c, image));
    g.mark_output(g.mse(v, tgt));
    const DenoiseInputs in = inputs_for(m, 4, 9);
    const auto st = evaluate(g, {in.z, in.image, in.temb, randn({4, 10, 8, 8}, 10)}, m.params, Mode::train);
    const auto grads = backprop(g, st, m.params, {TensorF({1}, 1.0f)});
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        double s = 0;
        for (float x : grads.params[i].values()) s += std::abs(x);
        CHECK_MESSAGE(s > 0.0, m.params.name(i));
    }
}

TEST_CASE("denoiser config: schema") {
    CHECK(denoiser_config_from_json(to_json(small_config())).base_width == 8);
    CHECK_THROWS_AS(denoiser_config_from_json({{"base_width", 8}, {"typo", 1}}), Error);
    CHECK_THROWS_AS(denoiser_config_from_json({{"cfg_drop", 1.0}}), Error);
    CHECK_THROWS_AS(denoiser_config_from_json({{"base_width", 10}, {"groups", 4}}), Error);
}
