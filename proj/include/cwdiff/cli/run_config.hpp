#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cwdiff/denoiser/denoiser.hpp"
#include "cwdiff/diffusion/diffusion.hpp"
#include "cwdiff/eval/ablation.hpp"
#include "cwdiff/lighting/ilr.hpp"
#include "cwdiff/scenes/dataset.hpp"
#include "cwdiff/schedule/schedule.hpp"
#include "json.hpp"

namespace cwdiff {

/// Input locations; empty means "pass it on the command line".
struct RunPaths {
    std::string dataset;
    std::string ilr;
    std::string checkpoint;
};

/// Everything a command needs. See docs/config.md for the schema.
struct RunConfig {
    std::uint64_t seed = 0;
    SceneConfig scene;
    std::size_t train_scenes = 2048;
    std::size_t test_scenes = 256;
    IlrConfig ilr;
    DenoiserConfig model;
    ScheduleSpec schedule;  // PDM schedule; mode selects the default family
    int sdm_T = 4;
    DiffusionTrainConfig train;
    SamplerConfig sampler;
    std::size_t eval_images = 256;
    AblationConfig ablation;
    RunPaths paths;

    /// Cross-field checks: resolutions, latent width, schedule validity.
    void validate() const;

    /// The schedule for `mode`: the configured cosine schedule for PDM, the
    /// switch schedule with sdm_T steps for SDM.
    ScheduleSpec schedule_for(ScheduleMode mode) const;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys anywhere raise ErrorKind::schema. Validates.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Parses and validates a UTF-8 JSON file.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace cwdiff
