#include "cwdiff/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cwdiff/io/json_fields.hpp"

namespace cwdiff {

namespace {

// Resolves the alpha for flat index i of a [B, C, S...] tensor.
struct AlphaView {
    std::span<const double> a;
    std::size_t C, S, B;

    AlphaView(const TensorF& t, std::span<const double> alphas) : a(alphas) {
        require(t.rank() >= 2, ErrorKind::shape, "diffusion tensors need a channel dimension");
        // a bare [C, H, W] latent is treated as a batch of one
        const bool batched = t.rank() == 4;
        B = batched ? t.dim(0) : 1;
        C = batched ? t.dim(1) : t.dim(0);
        S = t.numel() / (B * C);
        require(a.size() == C || a.size() == B * C, ErrorKind::shape,
                "expected " + std::to_string(C) + " or " + std::to_string(B * C) + " alphas, got " +
                    std::to_string(a.size()));
        for (double x : a) require(x >= 0.0 && x <= 1.0, ErrorKind::invalid_argument, "alpha-bar outside [0, 1]");
    }

    double operator[](std::size_t i) const {
        const std::size_t row = i / S;  // b * C + c
        return a.size() == C ? a[row % C] : a[row];
    }
};

std::vector<double> batch_alphas(const ScheduleTable& table, const GroupLayout& layout, const std::vector<int>& ts) {
    std::vector<double> out;
    for (int t : ts) {
        const auto ch = table.channel_alphas(t, layout);
        out.insert(out.end(), ch.begin(), ch.end());
    }
    return out;
}

StepResult train_step(Denoiser& model, OptimizerState<float>& opt, const TrainBatch& batch,
                      const ScheduleTable& table, const GroupLayout& layout, Rng& rng, double lr, bool masked) {
    const auto& c = model.config;
    require(batch.z0.rank() == 4 && batch.z0.dim(1) == c.latent_channels, ErrorKind::shape,
            "training batch latent has the wrong shape " + shape_string(batch.z0.shape()));
    require(layout.channels() == c.latent_channels, ErrorKind::shape, "group layout and denoiser disagree");
    const std::size_t B = batch.z0.dim(0);

    std::uniform_int_distribution<int> pick_t(0, table.T - 1);
    std::vector<int> ts(B);
    for (int& t : ts) t = pick_t(rng);
    const TensorF noise = gaussian(batch.z0.shape(), rng);
    const std::vector<double> alphas = batch_alphas(table, layout, ts);
    const TensorF z_t = forward_diffuse(batch.z0, noise, alphas);
    const TensorF target = velocity_target(batch.z0, noise, alphas);

    TensorF temb({B, c.time_dim}), mask({B, c.context_dim}, 1.0f);
    const TensorF weights = velocity_loss_weights(batch.z0.shape(), alphas, masked);
    std::bernoulli_distribution drop(c.cfg_drop);
    StepResult r;
    for (std::size_t b = 0; b < B; ++b) {
        const auto e = timestep_embedding(ts[b], table.T, c.time_dim);
        std::copy(e.begin(), e.end(), temb.data() + b * c.time_dim);
        if (drop(rng)) {
            ++r.null_contexts;
            std::fill(mask.data() + b * c.context_dim, mask.data() + (b + 1) * c.context_dim, 0.0f);
        }
    }

    OpGraph g;
    const NodeId z = g.input("z"), image = g.input("image"), te = g.input("temb"), m = g.input("context_mask"),
                 tgt = g.input("target"), wts = g.input("weights");
    const NodeId ctx = g.mul(build_condition_encoder(g, c, image), m);
    const NodeId v = build_denoiser(g, c, z, image, te, ctx);
    g.mark_output(g.mse(v, tgt, wts));

    const auto st = evaluate(g, {network_input(z_t, alphas), batch.image_log, temb, mask, target, weights},
                             model.params, Mode::train);
    r.loss = st.value(g.outputs()[0])[0];
    require(std::isfinite(r.loss), ErrorKind::numeric, "non-finite diffusion loss; step aborted");
    if (lr > 0.0) {
        const Gradients<float> grads = backprop(g, st, model.params, {TensorF({1}, 1.0f)});
        adam_step(model.params, grads.params, opt, lr);
    }
    return r;
}

void clamp_unit(TensorF& t) {
    for (float& v : t.values()) v = std::clamp(v, -1.0f, 1.0f);
}

}  // namespace

TensorF velocity_loss_weights(const Shape& shape, std::span<const double> alphas, bool snr0_only) {
    TensorF w(shape, 1.0f);
    const AlphaView a(w, alphas);
    // at alpha-bar 1 the target is pure noise absent from the input, so the
    // switchable model only learns the SNR-0 channels
    if (snr0_only) {
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = a[i] == 0.0 ? 1.0f : 0.0f;
    }
    return w;
}

double velocity_loss(const TensorF& v, const TensorF& target, const TensorF& w) {
    require(v.shape() == target.shape() && w.shape() == v.shape(), ErrorKind::shape,
            "velocity_loss: prediction, target and weights must share a shape");
    double num = 0, den = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) {
        const double d = static_cast<double>(v[i]) - target[i];
        num += w[i] * d * d;
        den += w[i];
    }
    return den > 0 ? num / den : 0.0;
}

TensorF forward_diffuse(const TensorF& z0, const TensorF& noise, std::span<const double> alphas) {
    require(z0.shape() == noise.shape(), ErrorKind::shape, "forward_diffuse: z0 and noise differ in shape");
    const AlphaView a(z0, alphas);
    TensorF out(z0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double ab = a[i];
        out[i] = static_cast<float>(std::sqrt(ab) * z0[i] + std::sqrt(1.0 - ab) * noise[i]);
    }
    return out;
}

TensorF velocity_target(const TensorF& z0, const TensorF& noise, std::span<const double> alphas) {
    require(z0.shape() == noise.shape(), ErrorKind::shape, "velocity_target: z0 and noise differ in shape");
    const AlphaView a(z0, alphas);
    TensorF out(z0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double ab = a[i];
        out[i] = static_cast<float>(std::sqrt(ab) * noise[i] - std::sqrt(1.0 - ab) * z0[i]);
    }
    return out;
}

std::pair<TensorF, TensorF> recover_x0_eps(const TensorF& z_t, const TensorF& v, std::span<const double> alphas) {
    require(z_t.shape() == v.shape(), ErrorKind::shape, "recover_x0_eps: z_t and v differ in shape");
    const AlphaView a(z_t, alphas);
    TensorF x0(z_t.shape()), eps(z_t.shape());
    for (std::size_t i = 0; i < z_t.numel(); ++i) {
        const double s = std::sqrt(a[i]), r = std::sqrt(1.0 - a[i]);
        x0[i] = static_cast<float>(s * z_t[i] - r * v[i]);
        eps[i] = static_cast<float>(r * z_t[i] + s * v[i]);
    }
    return {std::move(x0), std::move(eps)};
}

TensorF network_input(const TensorF& z_t, std::span<const double> alphas) {
    const AlphaView a(z_t, alphas);
    TensorF out(z_t.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(std::sqrt(a[i]) * z_t[i]);
    return out;
}

TensorF pack_modalities(const SceneTensors& scene, const TensorF& features, const SceneConfig& config,
                        std::size_t* clamped) {
    const std::size_t H = scene.height(), W = scene.width();
    require(features.rank() == 3 && features.dim(1) == H && features.dim(2) == W, ErrorKind::shape,
            "feature planes do not match the scene resolution");
    const TensorF base = normalize_modalities(scene, config, clamped);
    const std::size_t F = features.dim(0), P = H * W;
    TensorF z({kSceneChannels + F, H, W});
    std::copy(base.data(), base.data() + base.numel(), z.data());
    for (std::size_t i = 0; i < F * P; ++i) {
        float v = features[i];
        if (v < -1.0f || v > 1.0f) {
            if (clamped) ++*clamped;
            v = std::clamp(v, -1.0f, 1.0f);
        }
        z[kSceneChannels * P + i] = v;
    }
    return z;
}

UnpackedLatent unpack_modalities(const TensorF& z, const SceneConfig& config, std::size_t* clamped) {
    require(z.rank() == 3 && z.dim(0) > kSceneChannels, ErrorKind::shape,
            "latent must be [8+F,H,W], got " + shape_string(z.shape()));
    const std::size_t H = z.dim(1), W = z.dim(2), P = H * W, F = z.dim(0) - kSceneChannels;
    UnpackedLatent u;
    const TensorF base({kSceneChannels, H, W}, std::vector<float>(z.data(), z.data() + kSceneChannels * P));
    denormalize_modalities(base, config, u.scene, clamped);
    u.features = TensorF({F, H, W}, std::vector<float>(z.data() + kSceneChannels * P, z.data() + z.numel()));
    for (float& v : u.features.values()) {
        if (v < -1.0f || v > 1.0f) {
            if (clamped) ++*clamped;
            v = std::clamp(v, -1.0f, 1.0f);
        }
    }
    return u;
}

TensorF gaussian(const Shape& shape, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    TensorF out(shape);
    for (float& v : out.values()) v = static_cast<float>(n(rng));
    return out;
}

StepResult train_step_pdm(Denoiser& model, OptimizerState<float>& opt, const TrainBatch& batch,
                          const ScheduleTable& table, const GroupLayout& layout, Rng& rng, double lr) {
    require(table.mode == ScheduleMode::continuous_cosine, ErrorKind::invalid_argument,
            "train_step_pdm needs a continuous-cosine schedule");
    return train_step(model, opt, batch, table, layout, rng, lr, false);
}

StepResult train_step_sdm(Denoiser& model, OptimizerState<float>& opt, const TrainBatch& batch,
                          const ScheduleTable& table, const GroupLayout& layout, Rng& rng, double lr) {
    require(table.mode == ScheduleMode::sdm_switch, ErrorKind::invalid_argument,
            "train_step_sdm needs an sdm-switch schedule");
    return train_step(model, opt, batch, table, layout, rng, lr, true);
}

VelocityFn guided_velocity(const Denoiser& model, const TensorF& image_log, const ScheduleTable& table,
                           const GroupLayout& layout, double guidance) {
    const auto& c = model.config;
    const std::size_t B = image_log.dim(0);
    const TensorF ctx = encode_condition_batch(model, image_log);
    // conditional rows first, then the same images with the null context
    const bool guided = guidance != 1.0;
    const std::size_t R = guided ? 2 * B : B;
    TensorF images({R, image_log.dim(1), image_log.dim(2), image_log.dim(3)});
    TensorF contexts({R, c.context_dim});
    std::copy(image_log.data(), image_log.data() + image_log.numel(), images.data());
    std::copy(ctx.data(), ctx.data() + ctx.numel(), contexts.data());
    if (guided) std::copy(image_log.data(), image_log.data() + image_log.numel(), images.data() + image_log.numel());

    return [&model, &table, &layout, guidance, guided, B, R, images = std::move(images),
            contexts = std::move(contexts)](const TensorF& z_t, int t) {
        const auto& c = model.config;
        require(z_t.rank() == 4 && z_t.dim(0) == B, ErrorKind::shape, "sampler batch does not match conditioning");
        const auto alphas = table.channel_alphas(t, layout);
        const TensorF zin = network_input(z_t, alphas);
        TensorF zz({R, zin.dim(1), zin.dim(2), zin.dim(3)});
        std::copy(zin.data(), zin.data() + zin.numel(), zz.data());
        if (guided) std::copy(zin.data(), zin.data() + zin.numel(), zz.data() + zin.numel());
        TensorF temb({R, c.time_dim});
        const auto e = timestep_embedding(t, table.T, c.time_dim);
        for (std::size_t r = 0; r < R; ++r) std::copy(e.begin(), e.end(), temb.data() + r * c.time_dim);
        const TensorF v = denoise(model, {std::move(zz), images, std::move(temb), contexts});
        if (!guided) return v;
        const std::size_t n = v.numel() / 2;
        const TensorF vc(z_t.shape(), std::vector<float>(v.data(), v.data() + n));
        const TensorF vu(z_t.shape(), std::vector<float>(v.data() + n, v.data() + 2 * n));
        return cfg_combine(vc, vu, guidance);
    };
}

std::vector<int> ddim_grid(int T, int steps) {
    require(T >= 1, ErrorKind::invalid_argument, "T must be >= 1");
    require(steps >= 1 && steps <= T, ErrorKind::invalid_argument,
            "DDIM steps must lie in [1, T]; got " + std::to_string(steps) + " for T=" + std::to_string(T));
    std::vector<int> grid;
    for (int i = 0; i <= steps; ++i) {
        const int t = static_cast<int>(std::lround(static_cast<double>(T - 1) * (steps - i) / steps));
        if (grid.empty() || grid.back() != t) grid.push_back(t);
    }
    return grid;
}

TensorF ddim_sample(const VelocityFn& model, const ScheduleTable& table, const GroupLayout& layout, TensorF z,
                    int steps) {
    const std::vector<int> grid = ddim_grid(table.T, steps);
    TensorF x0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto a = table.channel_alphas(grid[i], layout);
        TensorF eps;
        if (std::all_of(a.begin(), a.end(), [](double x) { return x == 1.0; })) {
            x0 = z;  // clean state: nothing left to predict
            eps = TensorF(z.shape());
        } else {
            std::tie(x0, eps) = recover_x0_eps(z, model(z, grid[i]), a);
        }
        if (i + 1 < grid.size()) {
            const auto next = table.channel_alphas(grid[i + 1], layout);
            z = forward_diffuse(x0, eps, next);
        }
    }
    clamp_unit(x0);
    return x0;
}

const char* to_string(NoisePolicy p) noexcept {
    switch (p) {
        case NoisePolicy::fresh: return "fresh";
        case NoisePolicy::zeros: return "zeros";
        case NoisePolicy::fixed_seed: return "fixed-seed";
    }
    return "?";
}

NoisePolicy noise_policy_from_string(const std::string& s) {
    if (s == "fresh") return NoisePolicy::fresh;
    if (s == "zeros") return NoisePolicy::zeros;
    if (s == "fixed-seed") return NoisePolicy::fixed_seed;
    fail(ErrorKind::schema, "unknown noise policy '" + s + "' (expected fresh, zeros or fixed-seed)");
}

TensorF sdm_sample(const VelocityFn& model, const ScheduleTable& table, const GroupLayout& layout, const Shape& shape,
                   NoisePolicy policy, Rng& rng) {
    require(table.mode == ScheduleMode::sdm_switch, ErrorKind::invalid_argument, "sdm_sample needs an sdm schedule");
    require(shape.size() == 4 && shape[1] == layout.channels(), ErrorKind::shape, "sdm_sample: bad latent shape");
    const std::size_t B = shape[0], C = shape[1], S = shape[2] * shape[3];
    const TensorF fixed = policy == NoisePolicy::fixed_seed ? gaussian(shape, rng) : TensorF();
    TensorF pred(shape);
    for (int t = table.T - 1; t >= 0; --t) {
        const auto a = table.channel_alphas(t, layout);
        TensorF noise = policy == NoisePolicy::fresh ? gaussian(shape, rng)
                        : policy == NoisePolicy::zeros ? TensorF(shape)
                                                       : fixed;
        const TensorF z_t = forward_diffuse(pred, noise, a);
        TensorF x0 = recover_x0_eps(z_t, model(z_t, t), a).first;
        clamp_unit(x0);
        // commit only the groups that were at SNR 0
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                if (a[c] == 0.0) std::copy_n(x0.data() + (b * C + c) * S, S, pred.data() + (b * C + c) * S);
    }
    clamp_unit(pred);
    return pred;
}

void DiffusionTrainConfig::validate() const {
    require(steps >= 1 && batch >= 1, ErrorKind::schema, "diffusion training: steps and batch must be >= 1");
    require(learning_rate > 0 && final_learning_rate >= 0 && final_learning_rate <= learning_rate &&
                weight_decay >= 0,
            ErrorKind::schema, "diffusion training: invalid optimizer settings");
}

nlohmann::json to_json(const DiffusionTrainConfig& c) {
    return {{"steps", c.steps},
            {"batch", c.batch},
            {"learning_rate", c.learning_rate},
            {"final_learning_rate", c.final_learning_rate},
            {"weight_decay", c.weight_decay}};
}

DiffusionTrainConfig diffusion_train_config_from_json(const nlohmann::json& j) {
    DiffusionTrainConfig c;
    JsonFields(j, "train")
        .get("steps", c.steps)
        .get("batch", c.batch)
        .get("learning_rate", c.learning_rate)
        .get("final_learning_rate", c.final_learning_rate)
        .get("weight_decay", c.weight_decay)
        .finish();
    c.validate();
    return c;
}

Denoiser train_diffusion(const DenoiserConfig& mc, const ScheduleSpec& spec, const DiffusionTrainConfig& c,
                         const std::vector<TensorF>& latents, const std::vector<TensorF>& images_log,
                         std::uint64_t seed, DiffusionTrainReport* report, const TrainProgressFn& progress) {
    c.validate();
    require(!latents.empty() && latents.size() == images_log.size(), ErrorKind::invalid_argument,
            "train_diffusion needs matching, non-empty latent and image lists");
    const Shape zs = latents[0].shape(), is = images_log[0].shape();
    require(zs.size() == 3 && is.size() == 3 && zs[1] == is[1] && zs[2] == is[2], ErrorKind::shape,
            "latents must be [C,H,W] and images [3,H,W] at the same resolution");
    for (std::size_t i = 0; i < latents.size(); ++i) {
        require(latents[i].shape() == zs && images_log[i].shape() == is, ErrorKind::shape,
                "training examples differ in shape");
    }
    const GroupLayout layout = GroupLayout::standard(zs[0] - kSceneChannels);
    const ScheduleTable table = build_schedule(spec, layout);
    Denoiser model = init_denoiser(mc, seed);
    AdamConfig ac;
    ac.learning_rate = c.learning_rate;
    ac.weight_decay = c.weight_decay;
    OptimizerState<float> opt = make_optimizer(model.params, ac);
    Rng rng = make_stream(seed, "diffusion.batches");
    std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);

    const std::size_t B = c.batch, zn = latents[0].numel(), in = images_log[0].numel();
    DiffusionTrainReport rep;
    for (std::size_t step = 0; step < c.steps; ++step) {
        TrainBatch tb{TensorF({B, zs[0], zs[1], zs[2]}), TensorF({B, is[0], is[1], is[2]})};
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t i = pick(rng);
            std::copy_n(latents[i].data(), zn, tb.z0.data() + b * zn);
            std::copy_n(images_log[i].data(), in, tb.image_log.data() + b * in);
        }
        const double t = c.steps > 1 ? static_cast<double>(step) / static_cast<double>(c.steps - 1) : 1.0;
        const double lr = c.final_learning_rate +
                          0.5 * (c.learning_rate - c.final_learning_rate) * (1 + std::cos(std::numbers::pi * t));
        const StepResult r = spec.mode == ScheduleMode::sdm_switch
                                 ? train_step_sdm(model, opt, tb, table, layout, rng, lr)
                                 : train_step_pdm(model, opt, tb, table, layout, rng, lr);
        rep.losses.push_back(r.loss);
        rep.null_contexts += r.null_contexts;
        if (progress) progress(step + 1, c.steps, r.loss);
    }
    const std::size_t tail = std::max<std::size_t>(1, rep.losses.size() / 20);
    for (std::size_t i = rep.losses.size() - tail; i < rep.losses.size(); ++i) rep.final_loss += rep.losses[i];
    rep.final_loss /= static_cast<double>(tail);
    if (report) *report = std::move(rep);
    return model;
}

void SamplerConfig::validate(const ScheduleTable& table) const {
    require(samples >= 1, ErrorKind::schema, "sampler: K must be >= 1");
    require(std::isfinite(guidance) && guidance >= 0.0, ErrorKind::schema, "sampler: guidance must be >= 0");
    if (table.mode == ScheduleMode::continuous_cosine) {
        require(ddim_steps >= 1 && ddim_steps <= table.T, ErrorKind::schema,
                "sampler: DDIM steps must lie in [1, T]; got " + std::to_string(ddim_steps) +
                    " for T=" + std::to_string(table.T));
    }
}

nlohmann::json to_json(const SamplerConfig& c) {
    return {{"ddim_steps", c.ddim_steps},
            {"samples", c.samples},
            {"guidance", c.guidance},
            {"noise_policy", to_string(c.noise_policy)}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
    SamplerConfig c;
    std::string policy = to_string(c.noise_policy);
    JsonFields(j, "sampler")
        .get("ddim_steps", c.ddim_steps)
        .get("samples", c.samples)
        .get("guidance", c.guidance)
        .get("noise_policy", policy)
        .finish();
    c.noise_policy = noise_policy_from_string(policy);
    require(c.samples >= 1 && c.ddim_steps >= 1 && c.guidance >= 0.0, ErrorKind::schema,
            "sampler: samples and ddim_steps must be >= 1, guidance >= 0");
    return c;
}

std::vector<TensorF> sample_latents(const Denoiser& model, const ScheduleTable& table, const GroupLayout& layout,
                                    const TensorF& images_log, const SamplerConfig& c, Rng& rng) {
    c.validate(table);
    require(images_log.rank() == 4, ErrorKind::shape, "sample_latents expects [B,3,H,W] images");
    const Shape shape{images_log.dim(0), layout.channels(), images_log.dim(2), images_log.dim(3)};
    const VelocityFn v = guided_velocity(model, images_log, table, layout, c.guidance);
    std::vector<TensorF> out;
    out.reserve(c.samples);
    for (std::size_t k = 0; k < c.samples; ++k) {
        if (table.mode == ScheduleMode::sdm_switch) {
            out.push_back(sdm_sample(v, table, layout, shape, c.noise_policy, rng));
        } else {
            out.push_back(ddim_sample(v, table, layout, gaussian(shape, rng), c.ddim_steps));
        }
    }
    return out;
}

}  // namespace cwdiff
