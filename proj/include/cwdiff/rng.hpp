#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cwdiff {

using Rng = std::mt19937_64;

/// Seed for a named stream: splitmix64 of (root seed XOR FNV-1a(label)).
/// Every random draw in the project comes from a stream derived this way.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

inline Rng make_stream(std::uint64_t root, std::string_view label) { return Rng(derive_seed(root, label)); }

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index) {
    return derive_seed(derive_seed(root, label) ^ (index * 0x9E3779B97F4A7C15ULL), "#");
}

}  // namespace cwdiff
