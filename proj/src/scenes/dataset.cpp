#include "cwdiff/scenes/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "cwdiff/io/blob.hpp"
#include "cwdiff/rng.hpp"

namespace cwdiff {

namespace {

constexpr int kDatasetFormat = 1;

const char* const kFields[] = {"normal", "depth", "albedo", "roughness", "env",
                               "view",   "shading", "diffuse", "specular", "image"};

TensorF& field(SceneTensors& s, std::size_t i) {
    TensorF* f[] = {&s.normal, &s.depth, &s.albedo, &s.roughness, &s.env,
                    &s.view,   &s.shading, &s.diffuse, &s.specular, &s.image};
    return *f[i];
}

float clamp_count(double v, double lo, double hi, std::size_t* counter) {
    if (v < lo || v > hi) {
        if (counter) ++*counter;
        v = std::clamp(v, lo, hi);
    }
    return static_cast<float>(v);
}

}  // namespace

double normalize_depth(double depth, const SceneConfig& c) {
    const double lo = std::log(c.depth_min), hi = std::log(c.depth_max);
    return 2.0 * (std::log(depth) - lo) / (hi - lo) - 1.0;
}

double denormalize_depth(double value, const SceneConfig& c) {
    const double lo = std::log(c.depth_min), hi = std::log(c.depth_max);
    return std::exp(lo + (value + 1.0) * 0.5 * (hi - lo));
}

TensorF normalize_modalities(const SceneTensors& s, const SceneConfig& c, std::size_t* clamped) {
    const std::size_t H = s.height(), W = s.width(), P = H * W;
    TensorF out({kSceneChannels, H, W});
    for (std::size_t k = 0; k < P; ++k) {
        for (std::size_t ch = 0; ch < 3; ++ch) out[ch * P + k] = s.normal[ch * P + k];
        const double d = std::clamp(static_cast<double>(s.depth[k]), c.depth_min, c.depth_max);
        if (clamped && d != s.depth[k]) ++*clamped;
        out[3 * P + k] = static_cast<float>(normalize_depth(d, c));
        for (std::size_t ch = 0; ch < 3; ++ch) out[(4 + ch) * P + k] = 2.0f * s.albedo[ch * P + k] - 1.0f;
        out[7 * P + k] = 2.0f * s.roughness[k] - 1.0f;
    }
    return out;
}

void denormalize_modalities(const TensorF& planes, const SceneConfig& c, SceneTensors& s, std::size_t* clamped) {
    require(planes.rank() == 3 && planes.dim(0) == kSceneChannels, ErrorKind::shape,
            "expected [8,H,W] modality planes, got " + shape_string(planes.shape()));
    const std::size_t H = planes.dim(1), W = planes.dim(2), P = H * W;
    s.normal = TensorF({3, H, W});
    s.depth = TensorF({1, H, W});
    s.albedo = TensorF({3, H, W});
    s.roughness = TensorF({1, H, W});
    auto at = [&](std::size_t ch, std::size_t k) { return clamp_count(planes[ch * P + k], -1.0, 1.0, clamped); };
    for (std::size_t k = 0; k < P; ++k) {
        double n[3], len = 0;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            n[ch] = at(ch, k);
            len += n[ch] * n[ch];
        }
        len = std::sqrt(len);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            // a degenerate prediction falls back to the camera-facing normal
            s.normal[ch * P + k] = len > 1e-8 ? static_cast<float>(n[ch] / len) : (ch == 2 ? 1.0f : 0.0f);
        }
        s.depth[k] = static_cast<float>(denormalize_depth(at(3, k), c));
        for (std::size_t ch = 0; ch < 3; ++ch) s.albedo[ch * P + k] = 0.5f * (at(4 + ch, k) + 1.0f);
        s.roughness[k] = 0.5f * (at(7, k) + 1.0f);
    }
}

const DatasetSplit& Dataset::split(const std::string& name) const {
    for (const DatasetSplit& s : splits) {
        if (s.name == name) return s;
    }
    fail(ErrorKind::invalid_argument, "dataset has no split '" + name + "'");
}

Dataset generate_dataset(std::uint64_t seed, const SceneConfig& config,
                         const std::vector<std::pair<std::string, std::size_t>>& split_sizes) {
    Dataset d{seed, config, {}};
    for (const auto& [name, count] : split_sizes) {
        DatasetSplit split{name, {}};
        split.scenes.reserve(count);
        for (std::size_t i = 0; i < count; ++i) split.scenes.push_back(gen_scene(derive_seed(seed, name, i), config));
        d.splits.push_back(std::move(split));
    }
    return d;
}

nlohmann::json to_json(const SceneConfig& c) {
    return {{"height", c.height},
            {"width", c.width},
            {"directions", c.directions},
            {"min_anchors", c.min_anchors},
            {"max_anchors", c.max_anchors},
            {"min_lobes", c.min_lobes},
            {"max_lobes", c.max_lobes},
            {"min_intensity", c.min_intensity},
            {"max_intensity", c.max_intensity},
            {"min_regions", c.min_regions},
            {"max_regions", c.max_regions},
            {"fov_degrees", c.fov_degrees},
            {"depth_min", c.depth_min},
            {"depth_max", c.depth_max}};
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorKind::schema, "scene config must be an object");
    SceneConfig c;
    const nlohmann::json defaults = to_json(c);
    for (const auto& [key, value] : j.items()) {
        require(defaults.contains(key), ErrorKind::schema, "unknown scene config key '" + key + "'");
        require(value.is_number(), ErrorKind::schema, "scene config key '" + key + "' must be a number");
        require(!defaults[key].is_number_integer() || (value.is_number_integer() && value.get<long long>() >= 0),
                ErrorKind::schema, "scene config key '" + key + "' must be a non-negative integer");
    }
    auto get = [&](const char* key, auto& dst) {
        if (j.contains(key)) dst = j[key].get<std::remove_reference_t<decltype(dst)>>();
    };
    get("height", c.height);
    get("width", c.width);
    get("directions", c.directions);
    get("min_anchors", c.min_anchors);
    get("max_anchors", c.max_anchors);
    get("min_lobes", c.min_lobes);
    get("max_lobes", c.max_lobes);
    get("min_intensity", c.min_intensity);
    get("max_intensity", c.max_intensity);
    get("min_regions", c.min_regions);
    get("max_regions", c.max_regions);
    get("fov_degrees", c.fov_degrees);
    get("depth_min", c.depth_min);
    get("depth_max", c.depth_max);
    require(c.height % 4 == 0 && c.width % 4 == 0 && c.height > 0 && c.width > 0, ErrorKind::schema,
            "scene resolution must be a positive multiple of 4");
    require(c.directions >= 4, ErrorKind::schema, "need at least 4 quadrature directions");
    require(c.min_lobes >= 1 && c.min_lobes <= c.max_lobes, ErrorKind::schema, "invalid lobe range");
    require(c.min_regions >= 1 && c.min_regions <= c.max_regions, ErrorKind::schema, "invalid region range");
    require(c.min_intensity > 0 && c.min_intensity <= c.max_intensity, ErrorKind::schema, "invalid intensity range");
    require(c.depth_min > 0 && c.depth_min < c.depth_max, ErrorKind::schema, "invalid depth bounds");
    return c;
}

nlohmann::json write_dataset(const Dataset& d, const std::filesystem::path& dir) {
    nlohmann::json manifest = {{"format", "cwdiff-dataset"},
                               {"format_version", kDatasetFormat},
                               {"seed", d.seed},
                               {"config", to_json(d.config)},
                               {"splits", nlohmann::json::array()}};
    for (const DatasetSplit& split : d.splits) {
        std::vector<NamedTensor> tensors;
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < split.scenes.size(); ++i) {
            SceneTensors s = split.scenes[i];
            seeds.push_back(s.seed);
            for (std::size_t f = 0; f < std::size(kFields); ++f) {
                tensors.push_back({std::to_string(i) + "/" + kFields[f], std::move(field(s, f))});
            }
        }
        const std::string blob = encode_blob(tensors);
        const std::string file = split.name + ".bin";
        write_file_atomic(dir / file, blob);
        manifest["splits"].push_back({{"name", split.name},
                                      {"file", file},
                                      {"count", split.scenes.size()},
                                      {"scene_seeds", seeds},
                                      {"sha256", sha256_hex(blob)}});
    }
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

Dataset read_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema, "malformed dataset manifest: " + std::string(e.what()));
    }
    require(manifest.value("format", "") == "cwdiff-dataset" && manifest.value("format_version", 0) == kDatasetFormat,
            ErrorKind::schema, "unsupported dataset manifest in " + dir.string());
    Dataset d;
    d.seed = manifest.at("seed").get<std::uint64_t>();
    d.config = scene_config_from_json(manifest.at("config"));
    for (const auto& entry : manifest.at("splits")) {
        const std::string file = entry.at("file").get<std::string>();
        const std::string blob = read_file(dir / file);
        require(sha256_hex(blob) == entry.at("sha256").get<std::string>(), ErrorKind::checksum,
                "checksum mismatch for " + (dir / file).string());
        std::vector<NamedTensor> tensors = decode_blob(blob);
        const auto count = entry.at("count").get<std::size_t>();
        const auto seeds = entry.at("scene_seeds").get<std::vector<std::uint64_t>>();
        require(tensors.size() == count * std::size(kFields) && seeds.size() == count, ErrorKind::schema,
                "split '" + entry.at("name").get<std::string>() + "' does not match its manifest count");
        DatasetSplit split{entry.at("name").get<std::string>(), std::vector<SceneTensors>(count)};
        for (std::size_t i = 0; i < count; ++i) {
            split.scenes[i].seed = seeds[i];
            for (std::size_t f = 0; f < std::size(kFields); ++f) {
                NamedTensor& t = tensors[i * std::size(kFields) + f];
                require(t.name == std::to_string(i) + "/" + kFields[f], ErrorKind::schema,
                        "unexpected tensor '" + t.name + "' in " + file);
                field(split.scenes[i], f) = std::move(t.value);
            }
        }
        d.splits.push_back(std::move(split));
    }
    return d;
}

}  // namespace cwdiff
