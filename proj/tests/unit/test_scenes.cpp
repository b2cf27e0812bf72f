#include <cmath>
#include <numbers>

#include "cwdiff/error.hpp"
#include "cwdiff/scenes/scene.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

constexpr double kPi = std::numbers::pi;

TensorF uniform_env(std::size_t H, std::size_t W, std::size_t C, float e) { return TensorF({H, W, C, 3}, e); }

TensorF zenith_normals(std::size_t H, std::size_t W) {
    TensorF n({3, H, W});
    for (std::size_t k = 0; k < H * W; ++k) n[2 * H * W + k] = 1.0f;
    return n;
}

double cosine_sum(const Quadrature& q) {
    double s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) s += std::max(0.0, q.directions[j].z) * q.weights[j];
    return s;
}

}  // namespace

TEST_CASE("hemisphere_quadrature") {
    for (std::size_t C : {4u, 16u, 64u, 128u}) {
        const Quadrature q = hemisphere_quadrature(C);
        double wsum = 0;
        for (std::size_t j = 0; j < C; ++j) {
            CHECK(std::abs(norm(q.directions[j]) - 1.0) < 1e-12);
            CHECK(q.directions[j].z > 0.0);
            CHECK(q.weights[j] > 0.0);
            wsum += q.weights[j];
        }
        CHECK(std::abs(wsum - 2 * kPi) < 1e-3);
    }
    // int cos(theta) d omega over the hemisphere is pi
    for (std::size_t C : {16u, 32u, 64u}) CHECK(std::abs(cosine_sum(hemisphere_quadrature(C)) - kPi) < 0.03 * kPi);
    for (std::size_t C : {16u, 32u, 64u}) {
        const double a = cosine_sum(hemisphere_quadrature(C)), b = cosine_sum(hemisphere_quadrature(2 * C));
        CHECK(std::abs(a - b) / b < 0.01);
    }
    CHECK_THROWS_AS(hemisphere_quadrature(3), Error);
}

TEST_CASE("Frame round trip") {
    for (Vec3 n : {Vec3{0, 0, 1}, Vec3{0, 0, -1}, normalize({1, 2, 3}), normalize({-0.3, 0.1, -0.9})}) {
        const Frame f = Frame::around(n);
        CHECK(std::abs(dot(f.t, f.b)) < 1e-12);
        CHECK(std::abs(dot(f.t, f.n)) < 1e-12);
        CHECK(std::abs(norm(f.t) - 1) < 1e-12);
        const Vec3 w = normalize({0.2, -0.7, 0.4});
        const Vec3 back = f.to_world(f.to_local(w));
        CHECK(norm(back - w) < 1e-12);
    }
}

TEST_CASE("render_diffuse oracles") {
    const Quadrature q = hemisphere_quadrature(16);
    const std::size_t H = 2, W = 3;
    const TensorF n = zenith_normals(H, W);
    TensorF albedo({3, H, W}, 0.6f);

    SUBCASE("zero light gives zero") {
        const auto r = render_diffuse(albedo, n, uniform_env(H, W, 16, 0.0f), q);
        for (float v : r.diffuse.values()) CHECK(v == 0.0f);
    }
    SUBCASE("uniform white environment gives a*e") {
        const auto r = render_diffuse(albedo, n, uniform_env(H, W, 16, 2.0f), q);
        for (float v : r.diffuse.values()) CHECK(std::abs(v - 1.2) < 0.03 * 1.2);
    }
    SUBCASE("linear in E and A; (A,E) and (A/2,2E) agree") {
        const SceneTensors s = gen_scene(7, {});
        const auto base = render_diffuse(s.albedo, s.normal, s.env, q);
        TensorF env2 = s.env;
        for (float& v : env2.values()) v *= 2.0f;
        TensorF a2 = s.albedo;
        for (float& v : a2.values()) v *= 2.0f;
        TensorF ahalf = s.albedo;
        for (float& v : ahalf.values()) v *= 0.5f;
        const auto de = render_diffuse(s.albedo, s.normal, env2, q);
        const auto da = render_diffuse(a2, s.normal, s.env, q);
        const auto swap = render_diffuse(ahalf, s.normal, env2, q);
        for (std::size_t i = 0; i < base.diffuse.numel(); ++i) {
            // powers of two scale exactly in binary floating point
            CHECK(de.diffuse[i] == 2.0f * base.diffuse[i]);
            CHECK(da.diffuse[i] == 2.0f * base.diffuse[i]);
            CHECK(swap.diffuse[i] == base.diffuse[i]);
        }
        TensorF zero_a({3, s.height(), s.width()});
        const auto dark = render_diffuse(zero_a, s.normal, s.env, q);
        for (float v : dark.diffuse.values()) CHECK(v == 0.0f);
    }
    CHECK_THROWS_AS(render_diffuse(albedo, n, uniform_env(H, W, 8, 1.0f), q), Error);
}

TEST_CASE("render_specular oracles") {
    const Quadrature q = hemisphere_quadrature(16);
    const std::size_t H = 1, W = 1;
    const TensorF n = zenith_normals(H, W);
    const TensorF v = zenith_normals(H, W);

    SUBCASE("zero light gives zero") {
        const TensorF out = render_specular(TensorF({1, 1, 1}, 0.5f), n, uniform_env(H, W, 16, 0.0f), v, q);
        for (float x : out.values()) CHECK(x == 0.0f);
    }
    SUBCASE("energy of a rough lobe under uniform light is close to F0*e") {
        const float e = 3.0f;
        for (float r : {0.5f, 0.7f, 0.9f, 1.0f}) {
            const TensorF out = render_specular(TensorF({1, 1, 1}, r), n, uniform_env(H, W, 16, e), v, q);
            for (float x : out.values()) CHECK(std::abs(x - kSpecularF0 * e) < 0.15 * kSpecularF0 * e);
        }
    }
    SUBCASE("sharper lobe is brighter for a mirror-aligned light") {
        const Vec3 view_local = normalize({0.4, 0.1, 1.0});
        const Vec3 mirror = 2.0 * view_local.z * Vec3{0, 0, 1} - view_local;
        std::vector<float> env(16 * 3, 0.0f);
        for (std::size_t j = 0; j < 16; ++j) {
            const float l = static_cast<float>(std::exp(40.0 * (dot(q.directions[j], mirror) - 1.0)));
            for (std::size_t c = 0; c < 3; ++c) env[j * 3 + c] = l;
        }
        const double smooth = specular_pixel(0.2, view_local, env.data(), q).x;
        const double rough = specular_pixel(0.9, view_local, env.data(), q).x;
        CHECK(smooth > rough);
    }
    SUBCASE("linear in E") {
        const SceneTensors s = gen_scene(11, {});
        TensorF env2 = s.env;
        for (float& x : env2.values()) x *= 2.0f;
        const TensorF a = render_specular(s.roughness, s.normal, s.env, s.view, q);
        const TensorF b = render_specular(s.roughness, s.normal, env2, s.view, q);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(b[i] == 2.0f * a[i]);
    }
    CHECK(blinn_exponent(0.0) == blinn_exponent(kMinRoughness));
    CHECK(blinn_exponent(1.0) == 1.0);
}

TEST_CASE("gen_scene contract") {
    const SceneConfig cfg;
    const SceneTensors a = gen_scene(123, cfg), b = gen_scene(123, cfg), c = gen_scene(124, cfg);
    CHECK(a.image == b.image);
    CHECK(a.env == b.env);
    CHECK(a.depth == b.depth);
    CHECK_FALSE(a.image == c.image);
    CHECK(a.normal.shape() == Shape{3, 16, 16});
    CHECK(a.env.shape() == Shape{16, 16, 16, 3});

    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const SceneTensors s = gen_scene(seed, cfg);
        CHECK_NOTHROW(validate_scene(s));
        for (float d : s.depth.values()) {
            CHECK(d > cfg.depth_min);
            CHECK(d < cfg.depth_max);
        }
        // camera looks down -z: visible surfaces face the viewer
        for (std::size_t y = 0; y < s.height(); ++y)
            for (std::size_t x = 0; x < s.width(); ++x) CHECK(local_view(s, y, x).z > 0.0);
    }
}
