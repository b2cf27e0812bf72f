#include <cmath>
#include <numbers>
#include <random>

#include "cwdiff/error.hpp"
#include "cwdiff/lighting/ilr.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

IlrConfig tiny_config() {
    IlrConfig c;
    c.features = 4;
    c.encoder_layers = 3;
    c.encoder_width = 16;
    c.env_layers = 2;
    c.shading_layers = 2;
    c.specular_layers = 2;
    c.decoder_width = 16;
    c.n_freq = 2;
    c.steps = 5;
    c.batch = 32;
    return c;
}

SceneTensors dark_scene(std::uint64_t seed) {
    SceneConfig sc;
    sc.height = sc.width = 4;
    SceneTensors s = gen_scene(seed, sc);
    for (float& v : s.env.values()) v = 0.0f;
    render(s, hemisphere_quadrature(sc.directions));
    return s;
}

}  // namespace

TEST_CASE("log1p/expm1 radiance") {
    CHECK(log1p_radiance(0.0) == 0.0);
    CHECK(log1p_radiance(std::numbers::e - 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(log1p_radiance(-1e-3), Error);
    CHECK(expm1_radiance(-3.0) == 0.0);  // decoder outputs are clamped at 0
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> logu(-6.0, 4.0);
    for (int i = 0; i < 1000; ++i) {
        const double x = std::pow(10.0, logu(rng));
        CHECK(std::abs(expm1_radiance(log1p_radiance(x)) - x) <= 1e-6 * x);
    }
}

TEST_CASE("reflect_dir") {
    const Vec3 n{0, 0, 1};
    const Vec3 v = normalize(Vec3{0.3, -0.2, 0.9});
    const Vec3 r = reflect_dir(v, v);
    CHECK(r.x == doctest::Approx(v.x));
    CHECK(r.y == doctest::Approx(v.y));
    CHECK(r.z == doctest::Approx(v.z));
    const double s = 1.0 / std::sqrt(2.0);
    const Vec3 m = reflect_dir(n, {s, 0, s});
    CHECK(m.x == doctest::Approx(-s).epsilon(1e-12));
    CHECK(m.y == doctest::Approx(0.0));
    CHECK(m.z == doctest::Approx(s).epsilon(1e-12));
    CHECK_THROWS_AS(reflect_dir(n, {1, 0, 1}), Error);
}

TEST_CASE("positional_encode") {
    const std::vector<double> zero{0.0, 0.0, 0.0};
    const auto e = positional_encode(zero, 4);
    REQUIRE(e.size() == 24);
    for (std::size_t i = 0; i < e.size(); i += 2) {
        CHECK(e[i] == 0.0);
        CHECK(e[i + 1] == 1.0);
    }
    const std::vector<double> half{0.5};
    const auto h = positional_encode(half, 2);  // sin(pi/2), cos(pi/2), sin(pi), cos(pi)
    CHECK(h[0] == doctest::Approx(1.0));
    CHECK(h[1] == doctest::Approx(0.0));
    CHECK(h[3] == doctest::Approx(-1.0));
}

TEST_CASE("specular_inputs layout") {
    const IlrConfig c;
    const auto e = specular_inputs(0.4, {0, 0, 1}, c.n_freq);
    CHECK(e.size() == c.specular_inputs() - c.features);
    CHECK(e.front() == doctest::Approx(0.4));
    CHECK(e.back() == doctest::Approx(1.0));  // n.v at normal incidence
}

TEST_CASE("encoder: bounded, deterministic, per-pixel") {
    const IlrModel m = init_ilr(tiny_config(), 3);
    std::mt19937_64 rng(8);
    std::exponential_distribution<float> radiance(0.5f);
    TensorF env({6, 48});
    for (float& v : env.values()) v = radiance(rng);
    std::copy_n(env.data(), 48, env.data() + 48);  // rows 0 and 1 identical
    const TensorF f = encode_env(m, env);
    REQUIRE(f.shape() == Shape{6, 4});
    for (float v : f.values()) CHECK(std::abs(v) < 1.0f);
    for (std::size_t c = 0; c < 4; ++c) CHECK(f[c] == f[4 + c]);
    CHECK(encode_env(m, env).storage() == f.storage());
    TensorF bad = env;
    bad[3] = -1.0f;
    CHECK_THROWS_AS(encode_env(m, bad), Error);
}

TEST_CASE("decoders: non-negative radiance and shape checks") {
    const IlrModel m = init_ilr(tiny_config(), 5);
    TensorF f({3, 4}, 0.5f);
    f[0] = 7.0f;  // out of range, clamped
    const TensorF env = decode_env(m, f), shading = decode_shading(m, f);
    for (float v : env.values()) CHECK(v >= 0.0f);
    for (float v : shading.values()) CHECK(v >= 0.0f);
    CHECK_THROWS_AS(decode_env(m, TensorF({3, 5})), Error);
    CHECK_THROWS_AS(decode_specular(m, f, TensorF({2, m.config.specular_inputs() - 4})), Error);
}

TEST_CASE("train_ilr: same seed, same parameters") {
    const std::vector<SceneTensors> scenes{gen_scene(1, {}), gen_scene(2, {})};
    const IlrModel a = train_ilr(scenes, tiny_config(), 9);
    const IlrModel b = train_ilr(scenes, tiny_config(), 9);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].storage() == b.params[i].storage());
}

TEST_CASE("train_ilr: zero lighting converges to the all-zero fixed point") {
    std::vector<SceneTensors> scenes;
    for (std::uint64_t s = 0; s < 4; ++s) scenes.push_back(dark_scene(s));
    IlrConfig c = tiny_config();
    c.steps = 1500;
    IlrTrainReport rep;
    const IlrModel m = train_ilr(scenes, c, 1, &rep);
    CHECK(rep.final_loss < 1e-4);

    // black albedo leaves only the (vanishing) specular term
    const SceneTensors& s = scenes[0];
    TensorF black(s.albedo.shape());
    const TensorF img = neural_render(m, encode_scene(m, s), black, s.roughness, s.normal, s.view);
    double ms = 0;
    for (float v : img.values()) ms += double(v) * v;
    CHECK(ms / img.numel() < 1e-3);
}
