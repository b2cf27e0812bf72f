#include "cwdiff/cli/run_config.hpp"

#include "cwdiff/io/blob.hpp"
#include "cwdiff/io/json_fields.hpp"

namespace cwdiff {

void RunConfig::validate() const {
    require(scene.height >= 4 && scene.width >= 4 && scene.height % 4 == 0 && scene.width % 4 == 0,
            ErrorKind::invalid_argument, "scene height and width must be multiples of 4");
    require(train_scenes >= 1 && test_scenes >= 1, ErrorKind::invalid_argument, "dataset splits must be non-empty");
    require(eval_images >= 1, ErrorKind::invalid_argument, "eval.images must be >= 1");
    ilr.validate();
    require(ilr.directions == scene.directions, ErrorKind::invalid_argument,
            "ilr.directions must equal scene.directions");
    model.validate();
    require(model.latent_channels == kSceneChannels + ilr.features, ErrorKind::invalid_argument,
            "model.latent_channels must be 8 + ilr.features");
    require(ablation.model.latent_channels == model.latent_channels, ErrorKind::invalid_argument,
            "ablation.model.latent_channels must match model.latent_channels");
    schedule.validate();
    schedule_for(ScheduleMode::sdm_switch).validate();
    train.validate();
    for (ScheduleMode m : {ScheduleMode::continuous_cosine, ScheduleMode::sdm_switch}) {
        sampler.validate(build_schedule(schedule_for(m), GroupLayout::standard(ilr.features)));
    }
    ablation.validate();
}

ScheduleSpec RunConfig::schedule_for(ScheduleMode mode) const {
    ScheduleSpec s = schedule;
    s.mode = mode;
    if (mode == ScheduleMode::sdm_switch) s.T = sdm_T;
    return s;
}

nlohmann::json to_json(const RunConfig& c) {
    return {
        {"seed", c.seed},
        {"scene", to_json(c.scene)},
        {"dataset", {{"train", c.train_scenes}, {"test", c.test_scenes}}},
        {"ilr", to_json(c.ilr)},
        {"model", to_json(c.model)},
        {"schedule", to_json(c.schedule)},
        {"sdm_T", c.sdm_T},
        {"train", to_json(c.train)},
        {"sampler", to_json(c.sampler)},
        {"eval", {{"images", c.eval_images}}},
        {"ablation", to_json(c.ablation)},
        {"paths", {{"dataset", c.paths.dataset}, {"ilr", c.paths.ilr}, {"checkpoint", c.paths.checkpoint}}},
    };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    JsonFields f(j, "config");
    f.get("seed", c.seed).get("sdm_T", c.sdm_T);
    if (j.contains("scene")) c.scene = scene_config_from_json(j.at("scene"));
    if (j.contains("dataset")) {
        JsonFields(j.at("dataset"), "dataset").get("train", c.train_scenes).get("test", c.test_scenes).finish();
    }
    if (j.contains("ilr")) c.ilr = ilr_config_from_json(j.at("ilr"));
    if (j.contains("model")) c.model = denoiser_config_from_json(j.at("model"));
    if (j.contains("schedule")) c.schedule = schedule_spec_from_json(j.at("schedule"));
    if (j.contains("train")) c.train = diffusion_train_config_from_json(j.at("train"));
    if (j.contains("sampler")) c.sampler = sampler_config_from_json(j.at("sampler"));
    if (j.contains("eval")) JsonFields(j.at("eval"), "eval").get("images", c.eval_images).finish();
    if (j.contains("ablation")) c.ablation = ablation_config_from_json(j.at("ablation"));
    if (j.contains("paths")) {
        JsonFields(j.at("paths"), "paths")
            .get("dataset", c.paths.dataset)
            .get("ilr", c.paths.ilr)
            .get("checkpoint", c.paths.checkpoint)
            .finish();
    }
    f.known("scene").known("dataset").known("ilr").known("model").known("schedule").known("train");
    f.known("sampler").known("eval").known("ablation").known("paths").finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::schema, path.string() + ": " + e.what());
    }
    try {
        return run_config_from_json(j);
    } catch (const Error& e) {
        // range and consistency failures in a file are schema violations
        if (e.kind() == ErrorKind::invalid_argument) fail(ErrorKind::schema, path.string() + ": " + e.what());
        throw;
    }
}

}  // namespace cwdiff
