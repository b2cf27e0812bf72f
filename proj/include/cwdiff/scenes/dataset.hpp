#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cwdiff/scenes/scene.hpp"
#include "json.hpp"

namespace cwdiff {

/// Geometry and material planes in the order N(3), D(1), A(3), R(1).
inline constexpr std::size_t kSceneChannels = 8;

/// Maps N, D, A, R into [-1, 1]: normals pass through, depth is log-mapped
/// between the configured bounds, albedo and roughness are affine. Depths
/// outside the bounds are clamped and counted in `clamped`.
TensorF normalize_modalities(const SceneTensors& scene, const SceneConfig& config, std::size_t* clamped = nullptr);

/// Inverse of normalize_modalities; values outside [-1, 1] are clamped and
/// counted. Fills normal, depth, albedo and roughness of `out` (resizing
/// them); normals are re-normalized to unit length.
void denormalize_modalities(const TensorF& planes, const SceneConfig& config, SceneTensors& out,
                            std::size_t* clamped = nullptr);

double normalize_depth(double depth, const SceneConfig& config);
double denormalize_depth(double value, const SceneConfig& config);

struct DatasetSplit {
    std::string name;
    std::vector<SceneTensors> scenes;
};

struct Dataset {
    std::uint64_t seed = 0;
    SceneConfig config;
    std::vector<DatasetSplit> splits;

    const DatasetSplit& split(const std::string& name) const;
};

/// Scene i of split s is generated from derive_seed(seed, s, i).
Dataset generate_dataset(std::uint64_t seed, const SceneConfig& config,
                         const std::vector<std::pair<std::string, std::size_t>>& split_sizes);

nlohmann::json to_json(const SceneConfig& config);
/// Unknown keys are rejected with ErrorKind::schema.
SceneConfig scene_config_from_json(const nlohmann::json& j);

/// Writes manifest.json plus one blob per split and returns the manifest.
nlohmann::json write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Verifies every blob against the manifest checksum before decoding.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace cwdiff
