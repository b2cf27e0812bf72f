#pragma once

#include <cstdint>
#include <vector>

#include "cwdiff/numerics/graph.hpp"
#include "cwdiff/rng.hpp"
#include "json.hpp"

namespace cwdiff {

struct DenoiserConfig {
    std::size_t latent_channels = 24;
    std::size_t image_channels = 3;
    std::size_t base_width = 32;
    std::size_t levels = 2;
    std::size_t time_dim = 64;
    std::size_t context_dim = 64;
    std::size_t groups = 8;
    double cfg_drop = 0.05;

    void validate() const;
    std::size_t width(std::size_t level) const { return base_width << level; }
};

nlohmann::json to_json(const DenoiserConfig& config);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

/// Sinusoidal features of t / max(T-1, 1): dim/2 sines then dim/2 cosines at
/// frequencies 1000^(-k/(dim/2)) scaled by 1000.
std::vector<float> timestep_embedding(int t, int T, std::size_t dim);

struct ConditionContext {
    std::vector<float> vector;
    bool null = false;
};

struct Denoiser {
    DenoiserConfig config;
    ParamStore<float> params;
};

/// Fan-in uniform init; the output head starts at exactly zero.
Denoiser init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

/// Network inputs for a batch. `z` is the latent as seen by the network,
/// `image` the log1p conditioning image, `temb` timestep embeddings and
/// `context` the conditioning vectors (zeros for the null context).
struct DenoiseInputs {
    TensorF z;        // [B, latent, H, W]
    TensorF image;    // [B, 3, H, W]
    TensorF temb;     // [B, time_dim]
    TensorF context;  // [B, context_dim]
};

/// Builds the denoiser body; returns the v-prediction node.
NodeId build_denoiser(OpGraph& g, const DenoiserConfig& config, NodeId z, NodeId image, NodeId temb, NodeId context);
/// Builds the conditioning encoder; returns the context node [B, context_dim].
NodeId build_condition_encoder(OpGraph& g, const DenoiserConfig& config, NodeId image);

/// Pooled context vectors for a batch of log1p images [B, 3, H, W].
TensorF encode_condition_batch(const Denoiser& model, const TensorF& image_log);

/// Single image [3, H, W] (log1p). In training mode the null context is
/// returned with probability config.cfg_drop.
ConditionContext encode_condition(const Denoiser& model, const TensorF& image_log, Rng& rng, bool training);

/// Velocity prediction for a batch; rejects non-finite input.
TensorF denoise(const Denoiser& model, const DenoiseInputs& inputs);

/// v_uncond + w (v_cond - v_uncond).
TensorF cfg_combine(const TensorF& v_cond, const TensorF& v_uncond, double w);

}  // namespace cwdiff
