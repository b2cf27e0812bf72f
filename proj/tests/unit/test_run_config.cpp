#include "cwdiff/cli/run_config.hpp"
#include "cwdiff/error.hpp"
#include "doctest.h"

using namespace cwdiff;

namespace {

ErrorKind kind_of(const nlohmann::json& j) {
    try {
        run_config_from_json(j);
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::numeric;  // sentinel: nothing thrown
}

}  // namespace

TEST_CASE("run config: defaults round-trip and carry the stated constants") {
    const RunConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(to_json(run_config_from_json(to_json(c))) == to_json(c));
    CHECK(run_config_from_json(nlohmann::json::object()).seed == 0);
    CHECK(c.sdm_T == 4);
    CHECK(c.sampler.samples == 10);
    CHECK(c.sampler.ddim_steps == 10);
    CHECK(c.model.cfg_drop == 0.05);
    CHECK(c.schedule.taus == GroupAlphas{0.9, 1.2, 1.5});
    CHECK(c.schedule_for(ScheduleMode::sdm_switch).T == 4);
    CHECK(c.schedule_for(ScheduleMode::continuous_cosine).T == c.schedule.T);
}

TEST_CASE("run config: unknown keys are rejected at every level") {
    CHECK(kind_of({{"seeds", 1}}) == ErrorKind::schema);
    CHECK(kind_of({{"dataset", {{"val", 3}}}}) == ErrorKind::schema);
    CHECK(kind_of({{"ilr", {{"layers", 3}}}}) == ErrorKind::schema);
    CHECK(kind_of({{"paths", {{"data", "x"}}}}) == ErrorKind::schema);
    CHECK(kind_of({{"ablation", {{"t_sweep", {{"train", {{"stepz", 1}}}}}}}}) == ErrorKind::schema);
    CHECK(kind_of({{"seed", "seven"}}) == ErrorKind::schema);
}

TEST_CASE("run config: cross-field consistency") {
    CHECK(kind_of({{"ilr", {{"features", 8}}}}) == ErrorKind::invalid_argument);
    CHECK(kind_of({{"ilr", {{"features", 8}}},
                   {"model", {{"latent_channels", 16}}},
                   {"ablation", {{"model", {{"latent_channels", 16}}}}}}) == ErrorKind::numeric);
    CHECK(kind_of({{"sdm_T", 5}}) == ErrorKind::invalid_argument);
    CHECK(kind_of({{"scene", {{"directions", 32}}}}) == ErrorKind::invalid_argument);
}

TEST_CASE("ablation settings: partial overrides keep the other sweep defaults") {
    const AblationConfig base;
    const AblationConfig c = ablation_config_from_json({{"tau_order", {{"train", {{"batch", 8}}}}}});
    CHECK(c.tau_order.train.batch == 8);
    CHECK(c.tau_order.train.steps == base.tau_order.train.steps);
    CHECK(c.tau_order.sampler.samples == base.tau_order.sampler.samples);
    CHECK(ablation_config_from_json({{"model", {{"groups", 4}}}}).model.base_width == base.model.base_width);
}
