#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cwdiff/denoiser/denoiser.hpp"
#include "cwdiff/numerics/optimizer.hpp"
#include "cwdiff/scenes/dataset.hpp"
#include "cwdiff/schedule/schedule.hpp"
#include "json.hpp"

namespace cwdiff {

// Per-channel alpha-bar arrays. For a tensor [B, C, ...] `alphas` holds either
// C values (shared by the batch) or B*C values (one row per element).

TensorF forward_diffuse(const TensorF& z0, const TensorF& noise, std::span<const double> alphas);
TensorF velocity_target(const TensorF& z0, const TensorF& noise, std::span<const double> alphas);
std::pair<TensorF, TensorF> recover_x0_eps(const TensorF& z_t, const TensorF& v, std::span<const double> alphas);

/// What the network sees: sqrt(alpha_bar) * z_t per channel. This is the
/// linear least-squares estimate of z0 for unit-variance data and is exactly
/// zero for channels at SNR 0, which carry no information about z0.
TensorF network_input(const TensorF& z_t, std::span<const double> alphas);

/// Latent layout N(3) D(1) A(3) R(1) f(F). `features` are ILR planes [F,H,W].
TensorF pack_modalities(const SceneTensors& scene, const TensorF& features, const SceneConfig& config,
                        std::size_t* clamped = nullptr);

struct UnpackedLatent {
    SceneTensors scene;  // normal, depth, albedo, roughness filled
    TensorF features;    // [F, H, W]
};

UnpackedLatent unpack_modalities(const TensorF& z, const SceneConfig& config, std::size_t* clamped = nullptr);

/// Standard-normal tensor from `rng`.
TensorF gaussian(const Shape& shape, Rng& rng);

/// Loss weights for a batch [B,C,...]: all ones, or with `snr0_only` one
/// exactly where the channel's alpha-bar is 0 and zero elsewhere.
TensorF velocity_loss_weights(const Shape& shape, std::span<const double> alphas, bool snr0_only);

/// sum(w d^2) / sum(w); 0 when every weight is 0. The training graph computes
/// the same quantity.
double velocity_loss(const TensorF& v_pred, const TensorF& v_target, const TensorF& weights);

struct TrainBatch {
    TensorF z0;         // [B, C, H, W]
    TensorF image_log;  // [B, 3, H, W]
};

struct StepResult {
    double loss = 0;
    std::size_t null_contexts = 0;
};

/// Uniform t per element, per-group alpha-bar, v-prediction MSE over all
/// channels, one AdamW step at `learning_rate` (no update when it is 0).
StepResult train_step_pdm(Denoiser& model, OptimizerState<float>& opt, const TrainBatch& batch,
                          const ScheduleTable& table, const GroupLayout& layout, Rng& rng, double learning_rate);

/// As train_step_pdm with the binary schedule; the loss only covers channels
/// of groups at alpha-bar 0.
StepResult train_step_sdm(Denoiser& model, OptimizerState<float>& opt, const TrainBatch& batch,
                          const ScheduleTable& table, const GroupLayout& layout, Rng& rng, double learning_rate);

/// v-prediction of the model for a batch at a shared timestep.
using VelocityFn = std::function<TensorF(const TensorF& z_t, int t)>;

/// Denoiser with classifier-free guidance. Conditional and unconditional
/// passes share one batched evaluation.
VelocityFn guided_velocity(const Denoiser& model, const TensorF& image_log, const ScheduleTable& table,
                           const GroupLayout& layout, double guidance);

/// Descending timesteps from T-1 to 0, evenly spaced, duplicates removed.
std::vector<int> ddim_grid(int T, int steps);

/// Deterministic DDIM (eta = 0) from the start noise `z`. Timesteps whose
/// alpha-bar is 1 in every channel are not sent to the model. Output is the
/// final x0 estimate clamped to [-1, 1].
TensorF ddim_sample(const VelocityFn& model, const ScheduleTable& table, const GroupLayout& layout, TensorF z,
                    int steps);

enum class NoisePolicy { fresh, zeros, fixed_seed };
const char* to_string(NoisePolicy p) noexcept;
NoisePolicy noise_policy_from_string(const std::string& s);

/// Switchable sampling: predict every group at T-1, then re-predict the
/// SNR-0 group at each remaining step while the others carry their current
/// estimates. Output clamped to [-1, 1].
TensorF sdm_sample(const VelocityFn& model, const ScheduleTable& table, const GroupLayout& layout, const Shape& shape,
                   NoisePolicy policy, Rng& rng);

struct DiffusionTrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 32;
    double learning_rate = 1e-3;
    double final_learning_rate = 1e-4;  // cosine decay target
    double weight_decay = 0.0;

    void validate() const;
};

nlohmann::json to_json(const DiffusionTrainConfig& config);
DiffusionTrainConfig diffusion_train_config_from_json(const nlohmann::json& j);

struct DiffusionTrainReport {
    std::vector<double> losses;
    std::size_t null_contexts = 0;
    double final_loss = 0;  // mean of the last 5% of steps
};

using TrainProgressFn = std::function<void(std::size_t step, std::size_t total, double loss)>;

/// Trains a PDM (continuous schedule) or SDM (switch schedule) on packed
/// latents [C,H,W] and their log1p images [3,H,W]. Minibatches are drawn with
/// replacement from the "diffusion.batches" stream of `seed`.
Denoiser train_diffusion(const DenoiserConfig& model_config, const ScheduleSpec& schedule,
                         const DiffusionTrainConfig& config, const std::vector<TensorF>& latents,
                         const std::vector<TensorF>& images_log, std::uint64_t seed,
                         DiffusionTrainReport* report = nullptr, const TrainProgressFn& progress = {});

struct SamplerConfig {
    int ddim_steps = 10;     // PDM only
    std::size_t samples = 10;  // K
    double guidance = 1.5;
    NoisePolicy noise_policy = NoisePolicy::fresh;  // SDM only

    void validate(const ScheduleTable& table) const;
};

nlohmann::json to_json(const SamplerConfig& config);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

/// K samples for every image of `images_log` [B,3,H,W]; returns K tensors of
/// shape [B,C,H,W]. PDM or SDM is chosen by the table's mode.
std::vector<TensorF> sample_latents(const Denoiser& model, const ScheduleTable& table, const GroupLayout& layout,
                                    const TensorF& images_log, const SamplerConfig& config, Rng& rng);

}  // namespace cwdiff
