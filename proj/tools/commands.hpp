#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cwdiff/cli/run_config.hpp"
#include "run_dir.hpp"

namespace cwdiff::cli {

struct GlobalOptions {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

struct CommandOptions {
    std::string dataset, ilr, checkpoint;
    std::string split = "test";
    std::size_t count = 0;
    std::string mode;
    std::string noise_policy;
    std::optional<std::size_t> samples;
    std::string from;
    std::optional<std::size_t> images;
    std::string kind;
    std::optional<int> T;
    std::vector<double> taus;
    std::size_t coordinates = 100;
};

struct Context {
    std::string command;
    RunConfig config;
    std::uint64_t seed = 0;
    RunDir out;
};

/// Loads and validates the config, applies overrides and claims the run directory.
Context make_context(const std::string& command, const GlobalOptions& g);

int cmd_gen_scenes(Context& ctx);
int cmd_train_ilr(Context& ctx, const CommandOptions& o);
int cmd_train_diffusion(Context& ctx, const CommandOptions& o);
int cmd_sample(Context& ctx, const CommandOptions& o);
int cmd_render(Context& ctx, const CommandOptions& o);
int cmd_eval(Context& ctx, const CommandOptions& o);
int cmd_ablate(Context& ctx, const CommandOptions& o);
int cmd_plot_schedule(Context& ctx, const CommandOptions& o);
int cmd_gradcheck(Context& ctx, const CommandOptions& o);

}  // namespace cwdiff::cli
