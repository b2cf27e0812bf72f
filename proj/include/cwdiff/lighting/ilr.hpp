#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cwdiff/numerics/graph.hpp"
#include "cwdiff/scenes/scene.hpp"
#include "json.hpp"

namespace cwdiff {

/// log1p of a radiance value; negative input is rejected.
double log1p_radiance(double x);
/// expm1 of a decoder output clamped at 0, so the result is >= 0.
double expm1_radiance(double y);

/// Mirror of v about n: 2(n.v)n - v. Both inputs must be unit length.
Vec3 reflect_dir(Vec3 n, Vec3 v);

/// [sin(2^k pi x), cos(2^k pi x)] for k = 0..n_freq-1, grouped per component.
std::vector<double> positional_encode(std::span<const double> x, int n_freq);

struct IlrConfig {
    std::size_t directions = 16;
    std::size_t features = 16;
    std::size_t encoder_layers = 7;
    std::size_t encoder_width = 64;
    std::size_t env_layers = 3;
    std::size_t shading_layers = 3;
    std::size_t specular_layers = 6;
    std::size_t decoder_width = 128;
    int n_freq = 4;

    std::size_t steps = 3000;
    std::size_t batch = 512;
    double learning_rate = 2e-3;
    double final_learning_rate = 1e-4;
    double weight_decay = 0.0;
    double image_weight = 1.0;

    void validate() const;
    /// Width of the specular decoder input: f, R, gamma(r), n.v.
    std::size_t specular_inputs() const { return features + 2 + 6 * static_cast<std::size_t>(n_freq); }
};

nlohmann::json to_json(const IlrConfig& config);
IlrConfig ilr_config_from_json(const nlohmann::json& j);

struct IlrModel {
    IlrConfig config;
    ParamStore<float> params;
};

IlrModel init_ilr(const IlrConfig& config, std::uint64_t seed);

/// Extra specular decoder inputs for one pixel, given the view direction in
/// the pixel's normal frame: R, gamma(reflect_dir(n, v)), n.v.
std::vector<float> specular_inputs(double roughness, Vec3 view_local, int n_freq);

/// Per-pixel batched inference. Rows are pixels.
TensorF encode_env(const IlrModel& model, const TensorF& env);        // [P, C*3] radiance -> [P, F]
TensorF decode_env(const IlrModel& model, const TensorF& features);   // [P, F] -> [P, C*3] radiance
TensorF decode_shading(const IlrModel& model, const TensorF& features);  // [P, F] -> [P, 3]
TensorF decode_specular(const IlrModel& model, const TensorF& features, const TensorF& extra);  // -> [P, 3]

/// Feature planes [F, H, W] for a scene's per-pixel environment maps.
TensorF encode_scene(const IlrModel& model, const SceneTensors& scene);
/// Environment maps [H, W, C, 3] decoded from feature planes.
TensorF decode_scene_env(const IlrModel& model, const TensorF& feature_planes);

/// I = (A/pi) * S + I_s from feature planes and the other modalities.
TensorF neural_render(const IlrModel& model, const TensorF& feature_planes, const TensorF& albedo,
                      const TensorF& roughness, const TensorF& normal, const TensorF& view);

struct IlrTrainReport {
    std::vector<double> losses;  // total loss per step
    double initial_loss = 0;
    double final_loss = 0;       // mean of the last 5% of steps
    std::size_t clamped_features = 0;
};

using ProgressFn = std::function<void(std::size_t step, std::size_t total, double loss)>;

/// Joint training of the encoder and the three decoders on random pixels of
/// `scenes`. Throws ErrorKind::numeric if the loss exceeds 10x its initial value.
IlrModel train_ilr(const std::vector<SceneTensors>& scenes, const IlrConfig& config, std::uint64_t seed,
                   IlrTrainReport* report = nullptr, const ProgressFn& progress = {});

}  // namespace cwdiff
