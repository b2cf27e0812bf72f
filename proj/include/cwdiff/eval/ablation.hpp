#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cwdiff/diffusion/diffusion.hpp"
#include "cwdiff/eval/metrics.hpp"
#include "json.hpp"

namespace cwdiff {

/// Ground truth and diffusion inputs for one split, ILR-encoded.
struct PreparedSplit {
    std::vector<SceneTensors> scenes;
    std::vector<TensorF> latents;     // [8+F,H,W]
    std::vector<TensorF> images_log;  // [3,H,W]
};

PreparedSplit prepare_split(const std::vector<SceneTensors>& scenes, const IlrModel& ilr, const SceneConfig& config);

struct ImageRecord {
    MetricArray sample_mse{};  // average single-sample MSE
    MetricArray mean_mse{};    // PDM(Mean)
    MetricArray best_mse{};    // PDM(Best)
    MetricArray variance{};    // normalized space
    MetricArray error{};       // PDM(Mean) MSE in the same normalized space
};

/// Per-image variance against error, one Pearson coefficient per modality.
/// `mean` averages the six and is empty when any of them is undefined.
struct VarianceErrorR {
    std::array<std::optional<double>, kMetricCount> per_modality{};
    std::optional<double> mean;
};

VarianceErrorR variance_error_correlation(const std::vector<ImageRecord>& records);

struct EvalSummary {
    std::size_t images = 0;
    std::size_t samples = 0;
    MetricArray sample_mse{}, mean_mse{}, best_mse{}, variance{};
    VarianceErrorR variance_error_r;
    std::vector<ImageRecord> records;
};

/// Samples `sampler.samples` latents per test image (in chunks of
/// `chunk` images) and scores them against the ground truth.
EvalSummary evaluate_model(const Denoiser& model, const ScheduleSpec& schedule, const SamplerConfig& sampler,
                           const IlrModel& ilr, const PreparedSplit& test, const SceneConfig& config,
                           std::size_t max_images, std::uint64_t seed, std::size_t chunk = 64);

enum class AblationKind { t_sweep, tau_order, sdm_steps };
const char* to_string(AblationKind k) noexcept;
AblationKind ablation_kind_from_string(const std::string& s);

struct SweepSettings {
    DiffusionTrainConfig train;
    SamplerConfig sampler;
    std::size_t eval_images = 256;
};

struct AblationConfig {
    DenoiserConfig model;

    SweepSettings t_sweep;
    std::vector<int> t_values{1, 8, 64};
    GroupAlphas t_sweep_taus{1.0, 1.0, 1.0};

    SweepSettings tau_order;
    std::vector<GroupAlphas> orders{{0.9, 1.2, 1.5}, {1.5, 1.2, 0.9}};
    GroupAlphas order_baseline{1.0, 1.0, 1.0};
    int order_T = 64;
    std::vector<std::uint64_t> order_seeds{0, 1, 2};

    SweepSettings sdm_steps;
    std::vector<int> sdm_T{1, 4};

    AblationConfig();
    void validate() const;
};

nlohmann::json to_json(const AblationConfig& config);
AblationConfig ablation_config_from_json(const nlohmann::json& j);

struct SweepRow {
    std::string variant;
    std::string mode;  // pdm or sdm
    int T = 0;
    GroupAlphas taus{};
    std::uint64_t seed = 0;
    std::size_t samples = 0;
    EvalSummary eval;
    double final_loss = 0;
    bool diverged = false;
    std::string note;
    double train_seconds = 0;  // kept out of the CSV so metrics files stay reproducible
    double eval_seconds = 0;
};

struct TrendCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct SweepResult {
    AblationKind kind = AblationKind::t_sweep;
    std::vector<SweepRow> rows;
    std::vector<TrendCheck> checks;

    bool passed() const;
};

using AblationProgress = std::function<void(const std::string& message)>;

/// Trains every variant of the sweep from `seed` on `train`, scores it on
/// `test` and evaluates the trend assertions. A diverging variant is flagged
/// and the sweep continues.
SweepResult run_ablation(AblationKind kind, const AblationConfig& config, const PreparedSplit& train,
                         const PreparedSplit& test, const IlrModel& ilr, const SceneConfig& scene_config,
                         std::uint64_t seed, const AblationProgress& progress = {});

/// Fixed header, one row per variant, then "# summary" lines.
std::string sweep_csv(const SweepResult& result);
/// Per-image, per-modality variance and error, for the correlation plot.
std::string records_table(const std::vector<ImageRecord>& records);
std::string records_csv(const SweepRow& row);
nlohmann::json variance_error_json(const VarianceErrorR& r);
nlohmann::json sweep_json(const SweepResult& result);

}  // namespace cwdiff
