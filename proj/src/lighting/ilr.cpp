#include "cwdiff/lighting/ilr.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cwdiff/io/json_fields.hpp"
#include "cwdiff/numerics/init.hpp"
#include "cwdiff/numerics/optimizer.hpp"
#include "cwdiff/rng.hpp"

namespace cwdiff {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::size_t kChunk = 4096;

void add_mlp(ParamStore<float>& p, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
             std::size_t layers, bool batch_norm, Rng& rng) {
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t a = l == 0 ? in : hidden, b = l + 1 == layers ? out : hidden;
        const std::string name = prefix + ".l" + std::to_string(l);
        add_linear_params(p, name, a, b, rng);
        if (batch_norm && l + 1 < layers) add_batch_norm_params(p, name + ".bn", b);
    }
}

NodeId mlp(OpGraph& g, NodeId x, const std::string& prefix, std::size_t layers, bool batch_norm) {
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string name = prefix + ".l" + std::to_string(l);
        x = g.linear(x, g.param(name + ".w"), g.param(name + ".b"));
        if (l + 1 == layers) break;
        if (batch_norm) {
            x = g.batch_norm(x, g.param(name + ".bn.gamma"), g.param(name + ".bn.beta"), name + ".bn.running_mean",
                             name + ".bn.running_var");
        }
        x = g.silu(x);
    }
    return x;
}

NodeId encoder(OpGraph& g, NodeId env_log, const IlrConfig& c) { return g.tanh(mlp(g, env_log, "enc", c.encoder_layers, true)); }
NodeId env_decoder(OpGraph& g, NodeId f, const IlrConfig& c) { return mlp(g, f, "dec_e", c.env_layers, false); }
NodeId shading_decoder(OpGraph& g, NodeId f, const IlrConfig& c) { return mlp(g, f, "dec_s", c.shading_layers, false); }
NodeId specular_decoder(OpGraph& g, NodeId in, const IlrConfig& c) {
    return mlp(g, in, "dec_i", c.specular_layers, false);
}

void require_rows(const TensorF& t, std::size_t cols, const char* what) {
    require(t.rank() == 2 && t.dim(1) == cols, ErrorKind::shape,
            std::string(what) + " must be [P, " + std::to_string(cols) + "], got " + shape_string(t.shape()));
}

// Runs a single-input single-output graph over row chunks.
TensorF run_rows(const OpGraph& g, const ParamStore<float>& params, const std::vector<const TensorF*>& inputs,
                 std::size_t out_cols) {
    const std::size_t P = inputs[0]->dim(0);
    TensorF out({P, out_cols});
    for (std::size_t r0 = 0; r0 < P; r0 += kChunk) {
        const std::size_t n = std::min(kChunk, P - r0);
        std::vector<TensorF> chunk;
        for (const TensorF* t : inputs) {
            const std::size_t cols = t->dim(1);
            chunk.emplace_back(Shape{n, cols},
                               std::vector<float>(t->data() + r0 * cols, t->data() + (r0 + n) * cols));
        }
        const auto st = evaluate(g, std::move(chunk), params, Mode::eval);
        const TensorF& y = st.value(g.outputs()[0]);
        std::copy(y.data(), y.data() + n * out_cols, out.data() + r0 * out_cols);
    }
    return out;
}

TensorF clamp_features(const TensorF& f) {
    TensorF out = f;
    for (float& v : out.values()) v = std::clamp(v, -1.0f, 1.0f);
    return out;
}

void expm1_in_place(TensorF& t) {
    for (float& v : t.values()) v = static_cast<float>(expm1_radiance(v));
}

Vec3 plane_vec(const TensorF& t, std::size_t k) {
    const std::size_t P = t.dim(1) * t.dim(2);
    return {t[k], t[P + k], t[2 * P + k]};
}

}  // namespace

double log1p_radiance(double x) {
    require(std::isfinite(x) && x >= 0.0, ErrorKind::invalid_argument, "radiance must be finite and non-negative");
    return std::log1p(x);
}

double expm1_radiance(double y) { return std::expm1(std::max(0.0, y)); }

Vec3 reflect_dir(Vec3 n, Vec3 v) {
    require(std::abs(norm(n) - 1.0) <= 1e-6 && std::abs(norm(v) - 1.0) <= 1e-6, ErrorKind::invalid_argument,
            "reflect_dir needs unit vectors");
    return 2.0 * dot(n, v) * n - v;
}

std::vector<double> positional_encode(std::span<const double> x, int n_freq) {
    std::vector<double> out;
    out.reserve(x.size() * 2 * static_cast<std::size_t>(n_freq));
    for (double xi : x) {
        for (int k = 0; k < n_freq; ++k) {
            const double a = std::ldexp(kPi * xi, k);
            out.push_back(std::sin(a));
            out.push_back(std::cos(a));
        }
    }
    return out;
}

void IlrConfig::validate() const {
    require(directions >= 4 && features >= 1, ErrorKind::schema, "ilr: directions >= 4 and features >= 1 required");
    require(encoder_layers >= 2 && env_layers >= 1 && shading_layers >= 1 && specular_layers >= 1, ErrorKind::schema,
            "ilr: layer counts too small");
    require(encoder_width > 0 && decoder_width > 0 && n_freq >= 1, ErrorKind::schema, "ilr: widths must be positive");
    require(batch >= 2, ErrorKind::schema, "ilr: batch must be >= 2 for batch statistics");
    require(learning_rate > 0 && final_learning_rate > 0 && weight_decay >= 0 && image_weight >= 0,
            ErrorKind::schema, "ilr: invalid optimizer settings");
}

nlohmann::json to_json(const IlrConfig& c) {
    return {{"directions", c.directions},
            {"features", c.features},
            {"encoder_layers", c.encoder_layers},
            {"encoder_width", c.encoder_width},
            {"env_layers", c.env_layers},
            {"shading_layers", c.shading_layers},
            {"specular_layers", c.specular_layers},
            {"decoder_width", c.decoder_width},
            {"n_freq", c.n_freq},
            {"steps", c.steps},
            {"batch", c.batch},
            {"learning_rate", c.learning_rate},
            {"final_learning_rate", c.final_learning_rate},
            {"weight_decay", c.weight_decay},
            {"image_weight", c.image_weight}};
}

IlrConfig ilr_config_from_json(const nlohmann::json& j) {
    IlrConfig c;
    JsonFields(j, "ilr")
        .get("directions", c.directions)
        .get("features", c.features)
        .get("encoder_layers", c.encoder_layers)
        .get("encoder_width", c.encoder_width)
        .get("env_layers", c.env_layers)
        .get("shading_layers", c.shading_layers)
        .get("specular_layers", c.specular_layers)
        .get("decoder_width", c.decoder_width)
        .get("n_freq", c.n_freq)
        .get("steps", c.steps)
        .get("batch", c.batch)
        .get("learning_rate", c.learning_rate)
        .get("final_learning_rate", c.final_learning_rate)
        .get("weight_decay", c.weight_decay)
        .get("image_weight", c.image_weight)
        .finish();
    c.validate();
    return c;
}

IlrModel init_ilr(const IlrConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng = make_stream(seed, "ilr.init");
    IlrModel m{c, {}};
    const std::size_t env = c.directions * 3;
    add_mlp(m.params, "enc", env, c.encoder_width, c.features, c.encoder_layers, true, rng);
    add_mlp(m.params, "dec_e", c.features, c.decoder_width, env, c.env_layers, false, rng);
    add_mlp(m.params, "dec_s", c.features, c.decoder_width, 3, c.shading_layers, false, rng);
    add_mlp(m.params, "dec_i", c.specular_inputs(), c.decoder_width, 3, c.specular_layers, false, rng);
    return m;
}

std::vector<float> specular_inputs(double roughness, Vec3 view_local, int n_freq) {
    const Vec3 r = reflect_dir({0, 0, 1}, view_local);
    const double rc[3] = {r.x, r.y, r.z};
    std::vector<float> out;
    out.push_back(static_cast<float>(roughness));
    for (double g : positional_encode(rc, n_freq)) out.push_back(static_cast<float>(g));
    out.push_back(static_cast<float>(std::clamp(view_local.z, 0.0, 1.0)));
    return out;
}

TensorF encode_env(const IlrModel& m, const TensorF& env) {
    const std::size_t cols = m.config.directions * 3;
    require_rows(env, cols, "environment batch");
    TensorF logs = env;
    for (float& v : logs.values()) v = static_cast<float>(log1p_radiance(v));
    OpGraph g;
    g.mark_output(encoder(g, g.input("env_log"), m.config));
    return run_rows(g, m.params, {&logs}, m.config.features);
}

TensorF decode_env(const IlrModel& m, const TensorF& features) {
    require_rows(features, m.config.features, "feature batch");
    const TensorF f = clamp_features(features);
    OpGraph g;
    g.mark_output(env_decoder(g, g.input("f"), m.config));
    TensorF out = run_rows(g, m.params, {&f}, m.config.directions * 3);
    expm1_in_place(out);
    return out;
}

TensorF decode_shading(const IlrModel& m, const TensorF& features) {
    require_rows(features, m.config.features, "feature batch");
    const TensorF f = clamp_features(features);
    OpGraph g;
    g.mark_output(shading_decoder(g, g.input("f"), m.config));
    TensorF out = run_rows(g, m.params, {&f}, 3);
    expm1_in_place(out);
    return out;
}

TensorF decode_specular(const IlrModel& m, const TensorF& features, const TensorF& extra) {
    require_rows(features, m.config.features, "feature batch");
    require_rows(extra, m.config.specular_inputs() - m.config.features, "specular inputs");
    require(extra.dim(0) == features.dim(0), ErrorKind::shape, "specular inputs and features differ in rows");
    const TensorF f = clamp_features(features);
    OpGraph g;
    g.mark_output(specular_decoder(g, g.concat({g.input("f"), g.input("extra")}), m.config));
    TensorF out = run_rows(g, m.params, {&f, &extra}, 3);
    expm1_in_place(out);
    return out;
}

TensorF encode_scene(const IlrModel& m, const SceneTensors& s) {
    const std::size_t H = s.height(), W = s.width(), P = H * W, C = s.directions(), F = m.config.features;
    require(C == m.config.directions, ErrorKind::shape, "scene and ILR disagree on the direction count");
    const TensorF rows = encode_env(m, s.env.reshaped({P, C * 3}));
    TensorF planes({F, H, W});
    for (std::size_t k = 0; k < P; ++k)
        for (std::size_t c = 0; c < F; ++c) planes[c * P + k] = rows[k * F + c];
    return planes;
}

TensorF decode_scene_env(const IlrModel& m, const TensorF& planes) {
    const std::size_t F = m.config.features, C = m.config.directions;
    require(planes.rank() == 3 && planes.dim(0) == F, ErrorKind::shape, "feature planes must be [F,H,W]");
    const std::size_t H = planes.dim(1), W = planes.dim(2), P = H * W;
    TensorF rows({P, F});
    for (std::size_t k = 0; k < P; ++k)
        for (std::size_t c = 0; c < F; ++c) rows[k * F + c] = planes[c * P + k];
    return decode_env(m, rows).reshaped({H, W, C, 3});
}

TensorF neural_render(const IlrModel& m, const TensorF& planes, const TensorF& albedo, const TensorF& roughness,
                      const TensorF& normal, const TensorF& view) {
    const std::size_t F = m.config.features;
    require(planes.rank() == 3 && planes.dim(0) == F, ErrorKind::shape, "feature planes must be [F,H,W]");
    const std::size_t H = planes.dim(1), W = planes.dim(2), P = H * W;
    require(albedo.shape() == Shape{3, H, W} && roughness.shape() == Shape{1, H, W} &&
                normal.shape() == Shape{3, H, W} && view.shape() == Shape{3, H, W},
            ErrorKind::shape, "neural_render: modalities are not aligned with the feature planes");
    const std::size_t K = m.config.specular_inputs() - F;
    TensorF rows({P, F}), extra({P, K});
    for (std::size_t k = 0; k < P; ++k) {
        for (std::size_t c = 0; c < F; ++c) rows[k * F + c] = planes[c * P + k];
        const Frame fr = Frame::around(normalize(plane_vec(normal, k)));
        const Vec3 v = normalize(fr.to_local(plane_vec(view, k)));
        const auto e = specular_inputs(std::clamp(roughness[k], 0.0f, 1.0f), v, m.config.n_freq);
        std::copy(e.begin(), e.end(), extra.data() + k * K);
    }
    const TensorF S = decode_shading(m, rows);
    const TensorF Is = decode_specular(m, rows, extra);
    TensorF out({3, H, W});
    for (std::size_t k = 0; k < P; ++k)
        for (std::size_t c = 0; c < 3; ++c)
            out[c * P + k] = static_cast<float>(albedo[c * P + k] / kPi * S[k * 3 + c] + Is[k * 3 + c]);
    return out;
}

IlrModel train_ilr(const std::vector<SceneTensors>& scenes, const IlrConfig& c, std::uint64_t seed,
                   IlrTrainReport* report, const ProgressFn& progress) {
    require(!scenes.empty(), ErrorKind::invalid_argument, "train_ilr needs at least one scene");
    IlrModel m = init_ilr(c, seed);
    const std::size_t C = c.directions, B = c.batch, K = c.specular_inputs() - c.features;
    for (const SceneTensors& s : scenes) {
        require(s.directions() == C, ErrorKind::shape, "scene direction count differs from the ILR config");
    }
    const Quadrature quad = hemisphere_quadrature(C);

    OpGraph g;
    const NodeId env_log = g.input("env_log"), s_log = g.input("shading_log"), spec_in = g.input("spec_in"),
                 spec_log = g.input("spec_log"), rand_in = g.input("rand_in"), rand_log = g.input("rand_log"),
                 a_pi = g.input("albedo_over_pi"), image = g.input("image");
    const NodeId f = encoder(g, env_log, c);
    const NodeId ye = env_decoder(g, f, c);
    const NodeId ys = shading_decoder(g, f, c);
    const NodeId yi = specular_decoder(g, g.concat({f, spec_in}), c);
    const NodeId yr = specular_decoder(g, g.concat({f, rand_in}), c);
    const NodeId render = g.add(g.mul(a_pi, g.expm1(ys)), g.expm1(yi));
    for (NodeId loss : {g.mse(ye, env_log), g.mse(ys, s_log), g.mse(yi, spec_log), g.mse(yr, rand_log),
                        g.mse(render, image)}) {
        g.mark_output(loss);
    }
    const std::vector<TensorF> seeds = {TensorF({1}, 1.0f), TensorF({1}, 1.0f), TensorF({1}, 1.0f),
                                        TensorF({1}, 1.0f), TensorF({1}, static_cast<float>(c.image_weight))};

    AdamConfig ac;
    ac.learning_rate = c.learning_rate;
    ac.weight_decay = c.weight_decay;
    OptimizerState<float> opt = make_optimizer(m.params, ac);
    Rng rng = make_stream(seed, "ilr.batches");
    std::uniform_int_distribution<std::size_t> pick_scene(0, scenes.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    IlrTrainReport rep;
    for (std::size_t step = 0; step < c.steps; ++step) {
        std::vector<TensorF> in = {TensorF({B, C * 3}), TensorF({B, 3}), TensorF({B, K}), TensorF({B, 3}),
                                   TensorF({B, K}),     TensorF({B, 3}), TensorF({B, 3}), TensorF({B, 3})};
        for (std::size_t b = 0; b < B; ++b) {
            const SceneTensors& s = scenes[pick_scene(rng)];
            const std::size_t P = s.height() * s.width();
            const std::size_t k = std::uniform_int_distribution<std::size_t>(0, P - 1)(rng);
            const float* e = s.env.data() + k * C * 3;
            for (std::size_t i = 0; i < C * 3; ++i) in[0][b * C * 3 + i] = std::log1p(e[i]);
            const Vec3 v = local_view(s, k / s.width(), k % s.width());
            const auto gt = specular_inputs(s.roughness[k], v, c.n_freq);
            const double r_rand = unit(rng);
            const auto rnd = specular_inputs(r_rand, v, c.n_freq);
            std::copy(gt.begin(), gt.end(), in[2].data() + b * K);
            std::copy(rnd.begin(), rnd.end(), in[4].data() + b * K);
            const Vec3 spec_rand = specular_pixel(r_rand, v, e, quad);
            const double sr[3] = {spec_rand.x, spec_rand.y, spec_rand.z};
            for (std::size_t ch = 0; ch < 3; ++ch) {
                in[1][b * 3 + ch] = std::log1p(s.shading[ch * P + k]);
                in[3][b * 3 + ch] = std::log1p(s.specular[ch * P + k]);
                in[5][b * 3 + ch] = static_cast<float>(std::log1p(sr[ch]));
                in[6][b * 3 + ch] = static_cast<float>(s.albedo[ch * P + k] / kPi);
                in[7][b * 3 + ch] = s.image[ch * P + k];
            }
        }
        const auto st = evaluate(g, std::move(in), m.params, Mode::train);
        double loss = 0;
        for (std::size_t o = 0; o < seeds.size(); ++o) loss += seeds[o][0] * st.value(g.outputs()[o])[0];
        if (step == 0) rep.initial_loss = loss;
        require(std::isfinite(loss) && loss <= 10.0 * rep.initial_loss, ErrorKind::numeric,
                "ILR training diverged at step " + std::to_string(step));
        rep.losses.push_back(loss);
        const Gradients<float> grads = backprop(g, st, m.params, seeds);
        const double t = c.steps > 1 ? static_cast<double>(step) / static_cast<double>(c.steps - 1) : 1.0;
        const double lr = c.final_learning_rate + 0.5 * (c.learning_rate - c.final_learning_rate) * (1 + std::cos(kPi * t));
        adam_step(m.params, grads.params, opt, lr);
        update_running_stats(g, st, m.params);
        if (progress) progress(step + 1, c.steps, loss);
    }
    const std::size_t tail = std::max<std::size_t>(1, rep.losses.size() / 20);
    for (std::size_t i = rep.losses.size() - tail; i < rep.losses.size(); ++i) rep.final_loss += rep.losses[i];
    rep.final_loss /= static_cast<double>(tail);
    if (report) *report = std::move(rep);
    return m;
}

}  // namespace cwdiff
