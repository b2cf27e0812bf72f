#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cwdiff/numerics/tensor.hpp"

namespace cwdiff {

struct NamedTensor {
    std::string name;
    TensorF value;
};

inline constexpr std::string_view kBlobMagic = "CWDIFF01";

/// Binary tensor container: 8-byte magic, u32 tensor count, then per tensor
/// u32 name length, name bytes, u32 rank, u32 dims, float32 payload.
/// All integers and floats are little-endian.
std::string encode_blob(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_blob(std::string_view bytes);

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace cwdiff
