#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "cwdiff/error.hpp"

using namespace cwdiff;
using namespace cwdiff::cli;

int main(int argc, char** argv) {
    CLI::App app{"cwdiff: channel-wise noise-scheduled diffusion for inverse rendering"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--config", g.config, "JSON run config (defaults when omitted)");
    app.add_option("--out", g.out, "run directory (default: $CWDIFF_OUT_ROOT or ./runs, then <command>-seed<N>)");
    app.add_option("--seed", g.seed, "override the root seed");
    app.add_option("--threads", g.threads, "worker threads; computation is single-threaded, only 1 is accepted");

    CommandOptions o;
    auto inputs = [&](CLI::App* sub, bool dataset, bool ilr, bool checkpoint) {
        if (dataset) sub->add_option("--dataset", o.dataset, "dataset directory from gen-scenes");
        if (ilr) sub->add_option("--ilr", o.ilr, "ILR checkpoint directory from train-ilr");
        if (checkpoint) sub->add_option("--checkpoint", o.checkpoint, "diffusion checkpoint from train-diffusion");
    };
    auto subset = [&](CLI::App* sub) {
        sub->add_option("--split", o.split, "dataset split")->capture_default_str();
        sub->add_option("--count", o.count, "number of images (0 = all)")->capture_default_str();
    };

    auto* gen = app.add_subcommand("gen-scenes", "generate the procedural train/test dataset");
    auto* tilr = app.add_subcommand("train-ilr", "train the implicit lighting representation");
    inputs(tilr, true, false, false);
    auto* tdiff = app.add_subcommand("train-diffusion", "train a PDM or SDM denoiser");
    inputs(tdiff, true, true, false);
    tdiff->add_option("--mode", o.mode, "pdm or sdm (default: schedule.mode)");
    auto* sample = app.add_subcommand("sample", "draw latent samples for dataset images");
    inputs(sample, true, true, true);
    subset(sample);
    sample->add_option("--mode", o.mode, "expected model family: pdm or sdm");
    sample->add_option("--noise-policy", o.noise_policy, "SDM re-noising: fresh or zeros");
    sample->add_option("--samples", o.samples, "samples per image (overrides sampler.samples)");
    auto* render = app.add_subcommand("render", "re-render ground truth or sampled modalities");
    inputs(render, true, true, false);
    subset(render);
    render->add_option("--from", o.from, "a sample run directory; ground truth when omitted");
    auto* eval = app.add_subcommand("eval", "score a diffusion checkpoint on held-out images");
    inputs(eval, true, true, true);
    eval->add_option("--images", o.images, "test images (overrides eval.images)");
    auto* ablate = app.add_subcommand("ablate", "run an ablation sweep and its trend checks");
    inputs(ablate, true, true, false);
    ablate->add_option("--kind", o.kind, "t-sweep, tau-order or sdm-steps")->required();
    auto* plot = app.add_subcommand("plot-schedule", "export alpha_bar and SNR curves as CSV and SVG");
    plot->add_option("--mode", o.mode, "pdm or sdm (default: schedule.mode)");
    plot->add_option("--T", o.T, "timesteps (overrides the config)");
    plot->add_option("--taus", o.taus, "three tau values G M L")->expected(3);
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    grad->add_option("--coordinates", o.coordinates, "coordinates per op")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ErrorKind::invalid_argument);
    }

    const CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        Context ctx = make_context(command, g);
        if (sub == gen) return cmd_gen_scenes(ctx);
        if (sub == tilr) return cmd_train_ilr(ctx, o);
        if (sub == tdiff) return cmd_train_diffusion(ctx, o);
        if (sub == sample) return cmd_sample(ctx, o);
        if (sub == render) return cmd_render(ctx, o);
        if (sub == eval) return cmd_eval(ctx, o);
        if (sub == ablate) return cmd_ablate(ctx, o);
        if (sub == plot) return cmd_plot_schedule(ctx, o);
        return cmd_gradcheck(ctx, o);
    } catch (const Error& e) {
        std::cerr << command << ": " << to_string(e.kind()) << " error: " << e.what() << "\n";
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << command << ": internal error: " << e.what() << "\n";
        return 1;
    }
}
