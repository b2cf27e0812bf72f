#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"

namespace cwdiff::cli {

/// Output directory of one command. Construction fails if the directory
/// already holds anything, so outputs are never overwritten; the directory
/// itself appears with the first write.
class RunDir {
public:
    explicit RunDir(std::filesystem::path root);

    const std::filesystem::path& path() const noexcept { return root_; }
    void ensure() const;
    std::filesystem::path operator/(const std::string& name) const { return root_ / name; }

    /// Atomic write; the SHA-256 of `bytes` is listed under "outputs" in result.json.
    void write(const std::string& name, std::string_view bytes);
    /// Records a file written by someone else (a checkpoint or dataset).
    void record(const std::string& name, const std::string& sha256);

    /// Writes result.json last: command, versions, seed, outputs, summary.
    void finish(const std::string& command, std::uint64_t seed, const nlohmann::json& summary);

private:
    std::filesystem::path root_;
    std::map<std::string, std::string> outputs_;
};

/// --out if given, else $CWDIFF_OUT_ROOT (or ./runs) / <command>-seed<N>.
std::filesystem::path resolve_out_dir(const std::string& flag, const std::string& command, std::uint64_t seed);

}  // namespace cwdiff::cli
