#include "cwdiff/denoiser/denoiser.hpp"

#include <cmath>

#include "cwdiff/io/json_fields.hpp"
#include "cwdiff/numerics/init.hpp"

namespace cwdiff {

namespace {

struct Builder {
    OpGraph& g;
    const DenoiserConfig& c;
    NodeId cond;

    NodeId p(const std::string& name) { return g.param(name); }

    NodeId conv(NodeId x, const std::string& name) { return g.conv3x3(x, p(name + ".w"), p(name + ".b")); }

    NodeId norm_act(NodeId x, const std::string& name) {
        return g.silu(g.group_norm(x, p(name + ".gamma"), p(name + ".beta"), static_cast<int>(c.groups)));
    }

    // pre-activation residual block with FiLM from the conditioning vector
    NodeId resblock(NodeId x, const std::string& name) {
        NodeId h = conv(norm_act(x, name + ".n1"), name + ".c1");
        const NodeId scale = g.linear(cond, p(name + ".scale.w"), p(name + ".scale.b"));
        const NodeId shift = g.linear(cond, p(name + ".shift.w"), p(name + ".shift.b"));
        h = g.film(norm_act(h, name + ".n2"), scale, shift);
        h = conv(h, name + ".c2");
        return g.add(x, h);
    }
};

void add_resblock(ParamStore<float>& ps, const std::string& name, std::size_t ch, std::size_t cond_dim, Rng& rng) {
    add_norm_params(ps, name + ".n1", ch);
    add_conv_params(ps, name + ".c1", ch, ch, rng);
    add_linear_params(ps, name + ".scale", cond_dim, ch, rng, true);
    add_linear_params(ps, name + ".shift", cond_dim, ch, rng, true);
    add_norm_params(ps, name + ".n2", ch);
    add_conv_params(ps, name + ".c2", ch, ch, rng);
}

std::string lvl(const char* stem, std::size_t l) { return std::string(stem) + std::to_string(l); }

}  // namespace

void DenoiserConfig::validate() const {
    require(latent_channels > 0 && image_channels > 0 && base_width > 0, ErrorKind::schema,
            "denoiser widths must be positive");
    require(levels >= 1 && levels <= 4, ErrorKind::schema, "denoiser levels must lie in [1, 4]");
    require(time_dim >= 2 && time_dim % 2 == 0 && context_dim > 0, ErrorKind::schema,
            "time_dim must be even and context_dim positive");
    require(groups > 0 && base_width % groups == 0, ErrorKind::schema, "base_width must be divisible by groups");
    require(cfg_drop >= 0.0 && cfg_drop < 1.0, ErrorKind::schema, "cfg_drop must lie in [0, 1)");
}

nlohmann::json to_json(const DenoiserConfig& c) {
    return {{"latent_channels", c.latent_channels}, {"image_channels", c.image_channels},
            {"base_width", c.base_width},           {"levels", c.levels},
            {"time_dim", c.time_dim},               {"context_dim", c.context_dim},
            {"groups", c.groups},                   {"cfg_drop", c.cfg_drop}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    JsonFields(j, "denoiser")
        .get("latent_channels", c.latent_channels)
        .get("image_channels", c.image_channels)
        .get("base_width", c.base_width)
        .get("levels", c.levels)
        .get("time_dim", c.time_dim)
        .get("context_dim", c.context_dim)
        .get("groups", c.groups)
        .get("cfg_drop", c.cfg_drop)
        .finish();
    c.validate();
    return c;
}

std::vector<float> timestep_embedding(int t, int T, std::size_t dim) {
    require(dim % 2 == 0 && dim > 0, ErrorKind::invalid_argument, "timestep embedding dimension must be even");
    require(T >= 1 && t >= 0 && t <= T - 1, ErrorKind::invalid_argument, "timestep out of range");
    const double u = static_cast<double>(t) / static_cast<double>(std::max(T - 1, 1));
    const std::size_t half = dim / 2;
    std::vector<float> out(dim);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = 1000.0 * std::pow(1000.0, -static_cast<double>(k) / static_cast<double>(half));
        out[k] = static_cast<float>(std::sin(u * freq));
        out[half + k] = static_cast<float>(std::cos(u * freq));
    }
    return out;
}

Denoiser init_denoiser(const DenoiserConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng = make_stream(seed, "denoiser.init");
    Denoiser d{c, {}};
    auto& ps = d.params;
    const std::size_t cd = c.context_dim, w0 = c.base_width;

    // conditioning encoder
    add_conv_params(ps, "cond.c0", c.image_channels, 16, rng);
    add_conv_params(ps, "cond.c1", 16, 32, rng);
    add_conv_params(ps, "cond.c2", 32, 32, rng);
    add_linear_params(ps, "cond.out", 32, cd, rng);

    add_linear_params(ps, "temb.l0", c.time_dim, cd, rng);
    add_linear_params(ps, "temb.l1", cd, cd, rng);
    add_linear_params(ps, "ctx.proj", cd, cd, rng);

    add_conv_params(ps, "in", c.latent_channels + c.image_channels, w0, rng);
    for (std::size_t l = 0; l < c.levels; ++l) {
        const std::size_t w = c.width(l);
        add_resblock(ps, lvl("down", l), w, cd, rng);
        if (l + 1 < c.levels) add_conv_params(ps, lvl("down", l) + ".to", w, c.width(l + 1), rng);
    }
    add_resblock(ps, "mid", c.width(c.levels - 1), cd, rng);
    for (std::size_t l = c.levels - 1; l-- > 0;) {
        const std::size_t w = c.width(l);
        add_conv_params(ps, lvl("up", l) + ".from", c.width(l + 1), w, rng);
        add_conv_params(ps, lvl("up", l) + ".merge", 2 * w, w, rng);
        add_resblock(ps, lvl("up", l), w, cd, rng);
    }
    add_norm_params(ps, "out.n", w0);
    add_conv_params(ps, "out", w0, c.latent_channels, rng, true);
    return d;
}

NodeId build_condition_encoder(OpGraph& g, const DenoiserConfig&, NodeId image) {
    auto conv = [&](NodeId x, const char* n) {
        return g.conv3x3(x, g.param(std::string(n) + ".w"), g.param(std::string(n) + ".b"));
    };
    NodeId h = g.silu(conv(image, "cond.c0"));
    h = g.silu(conv(g.downsample2(h), "cond.c1"));
    h = g.silu(conv(g.downsample2(h), "cond.c2"));
    return g.linear(g.global_avg_pool(h), g.param("cond.out.w"), g.param("cond.out.b"));
}

NodeId build_denoiser(OpGraph& g, const DenoiserConfig& c, NodeId z, NodeId image, NodeId temb, NodeId context) {
    NodeId t = g.silu(g.linear(temb, g.param("temb.l0.w"), g.param("temb.l0.b")));
    t = g.linear(t, g.param("temb.l1.w"), g.param("temb.l1.b"));
    const NodeId ctx = g.linear(context, g.param("ctx.proj.w"), g.param("ctx.proj.b"));
    Builder b{g, c, g.silu(g.add(t, ctx))};

    NodeId h = b.conv(g.concat({z, image}), "in");
    std::vector<NodeId> skips;
    for (std::size_t l = 0; l < c.levels; ++l) {
        h = b.resblock(h, lvl("down", l));
        if (l + 1 < c.levels) {
            skips.push_back(h);
            h = b.conv(g.downsample2(h), lvl("down", l) + ".to");
        }
    }
    h = b.resblock(h, "mid");
    for (std::size_t l = c.levels - 1; l-- > 0;) {
        h = b.conv(g.upsample2(h), lvl("up", l) + ".from");
        h = b.conv(g.concat({h, skips[l]}), lvl("up", l) + ".merge");
        h = b.resblock(h, lvl("up", l));
    }
    return b.conv(b.norm_act(h, "out.n"), "out");
}

TensorF encode_condition_batch(const Denoiser& m, const TensorF& image_log) {
    require(image_log.rank() == 4 && image_log.dim(1) == m.config.image_channels, ErrorKind::shape,
            "conditioning images must be [B,3,H,W]");
    const std::size_t f = std::size_t{1} << 2;
    require(image_log.dim(2) % f == 0 && image_log.dim(3) % f == 0, ErrorKind::shape,
            "conditioning image resolution must be divisible by 4");
    OpGraph g;
    g.mark_output(build_condition_encoder(g, m.config, g.input("image")));
    return outputs(g, evaluate(g, {image_log}, m.params))[0];
}

ConditionContext encode_condition(const Denoiser& m, const TensorF& image_log, Rng& rng, bool training) {
    require(image_log.rank() == 3, ErrorKind::shape, "encode_condition expects a [3,H,W] image");
    if (training && std::bernoulli_distribution(m.config.cfg_drop)(rng)) {
        return {std::vector<float>(m.config.context_dim, 0.0f), true};
    }
    const TensorF ctx = encode_condition_batch(m, image_log.reshaped({1, image_log.dim(0), image_log.dim(1),
                                                                      image_log.dim(2)}));
    return {std::vector<float>(ctx.values().begin(), ctx.values().end()), false};
}

TensorF denoise(const Denoiser& m, const DenoiseInputs& in) {
    const auto& c = m.config;
    require(in.z.rank() == 4 && in.z.dim(1) == c.latent_channels, ErrorKind::shape,
            "latent must be [B," + std::to_string(c.latent_channels) + ",H,W], got " + shape_string(in.z.shape()));
    const std::size_t B = in.z.dim(0), H = in.z.dim(2), W = in.z.dim(3);
    const std::size_t f = std::size_t{1} << (c.levels - 1);
    require(H % f == 0 && W % f == 0, ErrorKind::shape, "latent resolution not divisible by the level count");
    require(in.image.shape() == Shape{B, c.image_channels, H, W}, ErrorKind::shape,
            "conditioning image does not match the latent resolution");
    require(in.temb.shape() == Shape{B, c.time_dim} && in.context.shape() == Shape{B, c.context_dim},
            ErrorKind::shape, "timestep embedding or context has the wrong shape");
    require(in.z.all_finite() && in.image.all_finite(), ErrorKind::numeric, "denoise input contains NaN or Inf");
    OpGraph g;
    const NodeId z = g.input("z"), image = g.input("image"), temb = g.input("temb"), ctx = g.input("context");
    g.mark_output(build_denoiser(g, c, z, image, temb, ctx));
    return outputs(g, evaluate(g, {in.z, in.image, in.temb, in.context}, m.params))[0];
}

TensorF cfg_combine(const TensorF& v_cond, const TensorF& v_uncond, double w) {
    require(v_cond.shape() == v_uncond.shape(), ErrorKind::shape, "cfg_combine: shapes differ");
    TensorF out(v_cond.shape());
    const float wf = static_cast<float>(w);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = v_uncond[i] + wf * (v_cond[i] - v_uncond[i]);
    return out;
}

}  // namespace cwdiff
