#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cwdiff/numerics/params.hpp"
#include "cwdiff/rng.hpp"
#include "json.hpp"

namespace cwdiff {

/// On disk: <dir>/checkpoint.json (header) and <dir>/params.bin (tensor blob).
/// The header records the blob's SHA-256; loading rejects a mismatch.
struct Checkpoint {
    std::string kind;  // "ilr", "pdm" or "sdm"
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t step = 0;
    std::string rng_state;  // textual std::mt19937_64 state
    ParamStore<float> params;
};

inline constexpr int kCheckpointFormat = 1;

/// Returns the blob digest.
std::string save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::string rng_state_string(const Rng& rng);
Rng rng_from_state(const std::string& state);

}  // namespace cwdiff
