#include "run_dir.hpp"

#include <cstdlib>

#include "cwdiff/error.hpp"
#include "cwdiff/io/blob.hpp"

#ifndef CWDIFF_VERSION
#define CWDIFF_VERSION "unknown"
#endif

namespace cwdiff::cli {

namespace fs = std::filesystem;

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
    std::error_code ec;
    if (fs::exists(root_, ec)) {
        require(fs::is_directory(root_, ec), ErrorKind::io, root_.string() + " exists and is not a directory");
        require(fs::is_empty(root_, ec), ErrorKind::io,
                root_.string() + " is not empty; outputs are write-once, pick another --out");
    }
}

void RunDir::ensure() const {
    std::error_code ec;
    fs::create_directories(root_, ec);
    require(!ec, ErrorKind::io, "cannot create " + root_.string() + ": " + ec.message());
}

void RunDir::write(const std::string& name, std::string_view bytes) {
    ensure();
    write_file_atomic(root_ / name, bytes);
    outputs_[name] = sha256_hex(bytes);
}

void RunDir::record(const std::string& name, const std::string& sha256) { outputs_[name] = sha256; }

void RunDir::finish(const std::string& command, std::uint64_t seed, const nlohmann::json& summary) {
    const nlohmann::json result{
        {"command", command},
        {"status", "ok"},
        {"version", CWDIFF_VERSION},
        {"seed", seed},
        {"outputs", outputs_},
        {"summary", summary},
    };
    ensure();
    write_file_atomic(root_ / "result.json", result.dump(2) + "\n");
}

fs::path resolve_out_dir(const std::string& flag, const std::string& command, std::uint64_t seed) {
    if (!flag.empty()) return flag;
    const char* env = std::getenv("CWDIFF_OUT_ROOT");
    const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
    return root / (command + "-seed" + std::to_string(seed));
}

}  // namespace cwdiff::cli
