#include "cwdiff/io/checkpoint.hpp"

#include <algorithm>
#include <sstream>

#include "cwdiff/io/blob.hpp"

namespace cwdiff {

std::string rng_state_string(const Rng& rng) {
    std::ostringstream ss;
    ss << rng;
    return ss.str();
}

Rng rng_from_state(const std::string& state) {
    Rng rng;
    if (!state.empty()) {
        std::istringstream ss(state);
        ss >> rng;
        require(!ss.fail(), ErrorKind::schema, "malformed RNG state in checkpoint");
    }
    return rng;
}

std::string save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
    std::vector<NamedTensor> tensors;
    nlohmann::json buffers = nlohmann::json::array();
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        tensors.push_back({c.params.name(i), c.params[i]});
        if (!c.params.trainable(i)) buffers.push_back(c.params.name(i));
    }
    const std::string blob = encode_blob(tensors);
    const std::string digest = sha256_hex(blob);
    const nlohmann::json header = {{"format", "cwdiff-checkpoint"},
                                   {"format_version", kCheckpointFormat},
                                   {"kind", c.kind},
                                   {"config", c.config},
                                   {"step", c.step},
                                   {"rng_state", c.rng_state},
                                   {"buffers", buffers},
                                   {"parameter_count", c.params.parameter_count()},
                                   {"blob", "params.bin"},
                                   {"sha256", digest}};
    write_file_atomic(dir / "params.bin", blob);
    write_file_atomic(dir / "checkpoint.json", header.dump(2) + "\n");
    return digest;
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema, "malformed checkpoint header: " + std::string(e.what()));
    }
    require(h.value("format", "") == "cwdiff-checkpoint" && h.value("format_version", 0) == kCheckpointFormat,
            ErrorKind::schema, "unsupported checkpoint in " + dir.string());
    const std::string blob = read_file(dir / h.at("blob").get<std::string>());
    require(sha256_hex(blob) == h.at("sha256").get<std::string>(), ErrorKind::checksum,
            "checkpoint blob checksum mismatch in " + dir.string());
    Checkpoint c;
    c.kind = h.at("kind").get<std::string>();
    c.config = h.at("config");
    c.step = h.at("step").get<std::uint64_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
    const auto buffers = h.at("buffers").get<std::vector<std::string>>();
    for (NamedTensor& t : decode_blob(blob)) {
        const bool buffer = std::find(buffers.begin(), buffers.end(), t.name) != buffers.end();
        c.params.add(t.name, std::move(t.value), !buffer);
    }
    return c;
}

}  // namespace cwdiff
