#include <cmath>
#include <random>

#include "cwdiff/diffusion/diffusion.hpp"
#include "cwdiff/error.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

TensorF randn(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    return gaussian(s, rng);
}

TensorF uniform_unit(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(-0.95f, 0.95f);
    TensorF t(s);
    for (float& v : t.values()) v = u(rng);
    return t;
}

// Returns the exact velocity of a known z0 for whatever z_t it is given.
VelocityFn oracle(const TensorF& z0, const ScheduleTable& table, const GroupLayout& layout) {
    return [&z0, &table, &layout](const TensorF& z_t, int t) {
        const auto a = table.channel_alphas(t, layout);
        const std::size_t C = a.size(), S = z_t.numel() / (z_t.dim(0) * C);
        TensorF v(z_t.shape());
        for (std::size_t i = 0; i < v.numel(); ++i) {
            const double ab = a[(i / S) % C];
            if (ab >= 1.0) continue;  // x0 = z_t there regardless of v
            const double eps = (z_t[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab);
            v[i] = static_cast<float>(std::sqrt(ab) * eps - std::sqrt(1.0 - ab) * z0[i]);
        }
        return v;
    };
}

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.latent_channels = 10;
    c.base_width = 8;
    c.groups = 4;
    c.time_dim = 8;
    c.context_dim = 8;
    return c;
}

}  // namespace

TEST_CASE("forward_diffuse / velocity_target examples") {
    const TensorF one({1, 1, 1}, 1.0f), zero({1, 1, 1}, 0.0f);
    const std::vector<double> q{0.25};
    CHECK(forward_diffuse(one, zero, q)[0] == doctest::Approx(0.5));
    CHECK(velocity_target(one, zero, q)[0] == doctest::Approx(-std::sqrt(0.75)));

    const TensorF z0 = randn({2, 3, 4, 4}, 1), eps = randn({2, 3, 4, 4}, 2);
    const std::vector<double> ones(3, 1.0), zeros(3, 0.0);
    CHECK(forward_diffuse(z0, eps, ones).storage() == z0.storage());
    CHECK(forward_diffuse(z0, eps, zeros).storage() == eps.storage());
    CHECK(velocity_target(z0, eps, ones).storage() == eps.storage());
    const TensorF v0 = velocity_target(z0, eps, zeros);
    for (std::size_t i = 0; i < v0.numel(); ++i) CHECK(v0[i] == -z0[i]);

    const std::vector<double> bad{0.5, 1.5, 0.2};
    CHECK_THROWS_AS(forward_diffuse(z0, eps, bad), Error);
    CHECK_THROWS_AS(forward_diffuse(z0, eps, std::vector<double>{0.5, 0.5}), Error);
}

TEST_CASE("recover_x0_eps inverts the forward process") {
    const TensorF z0 = randn({3, 5, 4, 4}, 3), eps = randn({3, 5, 4, 4}, 4);
    std::vector<double> a(15);
    Rng rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& x : a) x = u(rng);
    a[0] = 0.0;
    a[1] = 1.0;
    const auto [x0, e] = recover_x0_eps(forward_diffuse(z0, eps, a), velocity_target(z0, eps, a), a);
    for (std::size_t i = 0; i < z0.numel(); ++i) {
        CHECK(std::abs(x0[i] - z0[i]) <= 1e-6 * std::max(1.0f, std::abs(z0[i])) + 1e-6);
    }
    for (std::size_t i = 0; i < eps.numel(); ++i) CHECK(std::abs(e[i] - eps[i]) <= 2e-6);

    const TensorF v = randn({1, 2, 2, 2}, 9), zt = randn({1, 2, 2, 2}, 10);
    const auto [xa, ea] = recover_x0_eps(zt, v, std::vector<double>{1.0, 0.0});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(xa[i] == zt[i]);
        CHECK(xa[4 + i] == -v[4 + i]);
    }
}

TEST_CASE("forward process moments") {
    const std::size_t N = 100000;
    const TensorF z0({N, 1, 1, 1}, 0.7f);
    const TensorF noise = randn({N, 1, 1, 1}, 21);
    for (double ab : {0.0, 0.25, 0.5, 0.9, 1.0}) {
        const TensorF zt = forward_diffuse(z0, noise, std::vector<double>{ab});
        double mean = 0;
        for (float x : zt.values()) mean += x;
        mean /= N;
        double var = 0;
        for (float x : zt.values()) var += (x - mean) * (x - mean);
        var /= N - 1;
        const double sigma = std::sqrt(1.0 - ab);
        CHECK(std::abs(mean - std::sqrt(ab) * 0.7) <= 4.0 * sigma / std::sqrt(double(N)) + 1e-7);
        if (ab < 1.0) {
            CHECK(std::abs(var - (1.0 - ab)) <= 0.02 * (1.0 - ab));
        } else {
            CHECK(var < 1e-12);
        }
    }
}

TEST_CASE("network_input scales by sqrt(alpha-bar)") {
    const TensorF z = randn({1, 2, 3, 3}, 5);
    const TensorF n = network_input(z, std::vector<double>{0.0, 0.25});
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(n[i] == 0.0f);
        CHECK(n[9 + i] == doctest::Approx(0.5 * z[9 + i]));
    }
}

TEST_CASE("ddim_grid") {
    CHECK(ddim_grid(64, 1) == std::vector<int>{63, 0});
    CHECK(ddim_grid(64, 2) == std::vector<int>{63, 32, 0});
    CHECK(ddim_grid(10, 10) == std::vector<int>{9, 8, 7, 6, 5, 4, 3, 2, 1, 0});
    CHECK(ddim_grid(1, 1) == std::vector<int>{0});
    const auto g = ddim_grid(256, 10);
    CHECK(g.front() == 255);
    CHECK(g.back() == 0);
    CHECK(g.size() == 11);
    CHECK_THROWS_AS(ddim_grid(8, 9), Error);
    CHECK_THROWS_AS(ddim_grid(8, 0), Error);
}

TEST_CASE("ddim_sample with an oracle reconstructs z0") {
    const auto layout = GroupLayout::standard(4);
    const TensorF z0 = uniform_unit({2, 12, 4, 4}, 7);
    for (GroupAlphas taus : {GroupAlphas{1, 1, 1}, GroupAlphas{0.9, 1.2, 1.5}, GroupAlphas{1.5, 1.2, 0.9}}) {
        for (int T : {1, 16, 64}) {
            const auto table = build_schedule({.taus = taus, .T = T}, layout);
            for (int steps : {1, 2, 10}) {
                if (steps > T) continue;
                const TensorF out = ddim_sample(oracle(z0, table, layout), table, layout, randn(z0.shape(), 8), steps);
                for (std::size_t i = 0; i < z0.numel(); ++i) CHECK(std::abs(out[i] - z0[i]) <= 1e-5);
            }
        }
    }
}

TEST_CASE("ddim_sample: a single step is the x0 prediction at T-1") {
    const auto layout = GroupLayout::standard(4);
    const auto table = build_schedule({.T = 32}, layout);
    int calls = 0;
    const TensorF v = uniform_unit({1, 12, 2, 2}, 3);
    const VelocityFn f = [&](const TensorF&, int t) {
        ++calls;
        CHECK(t == 31);
        return v;
    };
    const TensorF out = ddim_sample(f, table, layout, randn({1, 12, 2, 2}, 4), 1);
    CHECK(calls == 1);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(-v[i]));
}

TEST_CASE("velocity loss weights and the SDM mask") {
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 4, .mode = ScheduleMode::sdm_switch}, layout);
    const Shape s{1, 10, 2, 2};
    const TensorF all = velocity_loss_weights(s, table.channel_alphas(3, layout), true);
    for (float w : all.values()) CHECK(w == 1.0f);
    // t = 0 has (1, 1, 0): only the lighting channels count
    const TensorF light = velocity_loss_weights(s, table.channel_alphas(0, layout), true);
    for (std::size_t c = 0; c < 10; ++c)
        for (std::size_t p = 0; p < 4; ++p) CHECK(light[c * 4 + p] == (c >= 8 ? 1.0f : 0.0f));
    const TensorF dense = velocity_loss_weights(s, table.channel_alphas(0, layout), false);
    for (float w : dense.values()) CHECK(w == 1.0f);

    const TensorF target = randn(s, 1);
    CHECK(velocity_loss(target, target, light) == 0.0);
    // residuals on masked channels do not move the loss
    TensorF off = target;
    for (std::size_t i = 0; i < 32; ++i) off[i] += 5.0f;
    CHECK(velocity_loss(off, target, light) == 0.0);
    CHECK(velocity_loss(off, target, dense) > 0.0);
}

TEST_CASE("masked mse: zero gradient on masked residuals") {
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 7, .mode = ScheduleMode::sdm_switch}, layout);
    const Shape s{1, 10, 2, 2};
    for (int t = 0; t < 7; ++t) {
        const auto a = table.channel_alphas(t, layout);
        OpGraph g;
        const NodeId v = g.input("v"), tgt = g.input("target"), w = g.input("w");
        g.mark_output(g.mse(v, tgt, w));
        ParamStore<float> none;
        const auto st = evaluate(g, {randn(s, 1), randn(s, 2), velocity_loss_weights(s, a, true)}, none);
        const auto grads = backprop(g, st, none, {TensorF({1}, 1.0f)});
        const TensorF& dv = grads.inputs[0];
        for (std::size_t c = 0; c < 10; ++c)
            for (std::size_t p = 0; p < 4; ++p) {
                if (a[c] != 0.0) CHECK(dv[c * 4 + p] == 0.0f);
                else CHECK(dv[c * 4 + p] != 0.0f);
            }
    }
}

TEST_CASE("train_step_pdm: initial loss on unit-variance data") {
    const DenoiserConfig c = small_config();
    Denoiser m = init_denoiser(c, 1);
    auto opt = make_optimizer(m.params, {});
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 64}, layout);
    Rng rng(3);
    double mean = 0;
    for (int i = 0; i < 4; ++i) {
        TrainBatch b{randn({16, 10, 8, 8}, 10 + i), randn({16, 3, 8, 8}, 20 + i)};
        mean += train_step_pdm(m, opt, b, table, layout, rng, 0.0).loss / 4;
    }
    CHECK(mean >= 0.9);
    CHECK(mean <= 1.1);
    CHECK(opt.step == 0);  // lr = 0 leaves the model untouched
}

TEST_CASE("train steps: reproducible and mode-checked") {
    const DenoiserConfig c = small_config();
    const auto layout = GroupLayout::standard(2);
    const auto pdm = build_schedule({.T = 16}, layout);
    const auto sdm = build_schedule({.T = 4, .mode = ScheduleMode::sdm_switch}, layout);
    TrainBatch b{uniform_unit({4, 10, 8, 8}, 1), randn({4, 3, 8, 8}, 2)};
    auto run = [&](bool switchable) {
        Denoiser m = init_denoiser(c, 5);
        auto opt = make_optimizer(m.params, {});
        Rng rng(9);
        std::vector<double> losses;
        for (int i = 0; i < 3; ++i) {
            losses.push_back(switchable ? train_step_sdm(m, opt, b, sdm, layout, rng, 1e-3).loss
                                        : train_step_pdm(m, opt, b, pdm, layout, rng, 1e-3).loss);
        }
        return losses;
    };
    CHECK(run(false) == run(false));
    CHECK(run(true) == run(true));
    Denoiser m = init_denoiser(c, 5);
    auto opt = make_optimizer(m.params, {});
    Rng rng(1);
    CHECK_THROWS_AS(train_step_pdm(m, opt, b, sdm, layout, rng, 1e-3), Error);
    CHECK_THROWS_AS(train_step_sdm(m, opt, b, pdm, layout, rng, 1e-3), Error);
}

TEST_CASE("sdm_sample: refinement order and commit rule") {
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 4, .mode = ScheduleMode::sdm_switch}, layout);
    std::vector<int> seen;
    std::vector<GroupAlphas> rows;
    // x0 = -v at SNR 0, so each step writes (t + 1) / 10 into its group
    const VelocityFn f = [&](const TensorF& z, int t) {
        seen.push_back(t);
        rows.push_back(table.at(t));
        return TensorF(z.shape(), -0.1f * static_cast<float>(t + 1));
    };
    Rng rng(1);
    const TensorF out = sdm_sample(f, table, layout, {1, 10, 2, 2}, NoisePolicy::fresh, rng);
    CHECK(seen == std::vector<int>{3, 2, 1, 0});
    CHECK(rows[0] == GroupAlphas{0, 0, 0});
    CHECK(rows[1] == GroupAlphas{0, 1, 1});  // geometry
    CHECK(rows[2] == GroupAlphas{1, 0, 1});  // material
    CHECK(rows[3] == GroupAlphas{1, 1, 0});  // lighting
    for (std::size_t c = 0; c < 10; ++c) {
        const float expect = c < 4 ? 0.3f : c < 8 ? 0.2f : 0.1f;
        for (std::size_t p = 0; p < 4; ++p) CHECK(out[c * 4 + p] == doctest::Approx(expect));
    }

    const auto single = build_schedule({.T = 1, .mode = ScheduleMode::sdm_switch}, layout);
    seen.clear();
    const VelocityFn g = [&](const TensorF& z, int t) {
        seen.push_back(t);
        return TensorF(z.shape(), 0.25f);
    };
    const TensorF one = sdm_sample(g, single, layout, {1, 10, 2, 2}, NoisePolicy::fresh, rng);
    CHECK(seen == std::vector<int>{0});
    for (float x : one.values()) CHECK(x == -0.25f);
}

TEST_CASE("sdm_sample: zeros policy is deterministic, fresh noise is not") {
    const DenoiserConfig c = small_config();
    Denoiser m = init_denoiser(c, 2);
    Rng prng(3);
    std::normal_distribution<float> n(0.0f, 0.1f);
    for (float& v : m.params.at("out.w").values()) v = n(prng);
    const auto layout = GroupLayout::standard(2);
    const auto table = build_schedule({.T = 4, .mode = ScheduleMode::sdm_switch}, layout);
    const TensorF image = randn({2, 3, 8, 8}, 4);
    const VelocityFn v = guided_velocity(m, image, table, layout, 1.5);
    Rng r1(1), r2(2);
    const TensorF a = sdm_sample(v, table, layout, {2, 10, 8, 8}, NoisePolicy::zeros, r1);
    const TensorF b = sdm_sample(v, table, layout, {2, 10, 8, 8}, NoisePolicy::zeros, r2);
    CHECK(a.storage() == b.storage());
    // the network never sees the noise of SNR-0 channels, so fresh noise gives the same result
    const TensorF f = sdm_sample(v, table, layout, {2, 10, 8, 8}, NoisePolicy::fresh, r1);
    CHECK(f.storage() == a.storage());
    CHECK_THROWS_AS(noise_policy_from_string("gaussian"), Error);
    CHECK(noise_policy_from_string("fixed-seed") == NoisePolicy::fixed_seed);
}

TEST_CASE("pack/unpack round trip") {
    SceneConfig sc;
    sc.height = sc.width = 4;
    const SceneTensors s = gen_scene(3, sc);
    TensorF f = uniform_unit({16, 4, 4}, 2);
    const TensorF z = pack_modalities(s, f, sc);
    REQUIRE(z.shape() == Shape{24, 4, 4});
    const UnpackedLatent u = unpack_modalities(z, sc);
    for (std::size_t i = 0; i < s.normal.numel(); ++i) CHECK(u.scene.normal[i] == doctest::Approx(s.normal[i]).epsilon(1e-6));
    for (std::size_t i = 0; i < s.depth.numel(); ++i) CHECK(u.scene.depth[i] == doctest::Approx(s.depth[i]).epsilon(1e-5));
    for (std::size_t i = 0; i < s.albedo.numel(); ++i) CHECK(std::abs(u.scene.albedo[i] - s.albedo[i]) <= 1e-6);
    for (std::size_t i = 0; i < s.roughness.numel(); ++i) CHECK(std::abs(u.scene.roughness[i] - s.roughness[i]) <= 1e-6);
    CHECK(u.features.storage() == f.storage());

    SceneTensors flat = s;
    for (std::size_t p = 0; p < 16; ++p) {
        flat.normal[p] = 0.0f;
        flat.normal[16 + p] = 0.0f;
        flat.normal[32 + p] = 1.0f;
        flat.albedo[p] = 0.5f;
    }
    const TensorF zf = pack_modalities(flat, f, sc);
    CHECK(zf[0] == 0.0f);
    CHECK(zf[16] == 0.0f);
    CHECK(zf[32] == 1.0f);
    CHECK(zf[4 * 16] == 0.0f);  // albedo 0.5

    std::size_t clamped = 0;
    f[0] = 1.5f;
    pack_modalities(s, f, sc, &clamped);
    CHECK(clamped == 1);
}

TEST_CASE("train_diffusion: reproducible, config schema") {
    SceneConfig sc;
    sc.height = sc.width = 8;
    std::vector<TensorF> latents, images;
    for (std::uint64_t i = 0; i < 4; ++i) {
        latents.push_back(uniform_unit({10, 8, 8}, i));
        images.push_back(randn({3, 8, 8}, 10 + i));
    }
    DiffusionTrainConfig tc;
    tc.steps = 3;
    tc.batch = 2;
    DiffusionTrainReport r1, r2;
    const Denoiser a = train_diffusion(small_config(), {.T = 8}, tc, latents, images, 4, &r1);
    const Denoiser b = train_diffusion(small_config(), {.T = 8}, tc, latents, images, 4, &r2);
    CHECK(r1.losses == r2.losses);
    CHECK(checksum(a.params) == checksum(b.params));
    CHECK(diffusion_train_config_from_json(to_json(tc)).steps == 3);
    CHECK_THROWS_AS(diffusion_train_config_from_json({{"steps", 0}}), Error);
    CHECK_THROWS_AS(diffusion_train_config_from_json({{"lr", 0.1}}), Error);
    CHECK(sampler_config_from_json(to_json(SamplerConfig{})).ddim_steps == 10);
}
