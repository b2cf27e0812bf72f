#include "commands.hpp"

#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cwdiff/eval/ablation.hpp"
#include "cwdiff/eval/metrics.hpp"
#include "cwdiff/io/blob.hpp"
#include "cwdiff/io/checkpoint.hpp"
#include "cwdiff/numerics/gradcheck.hpp"

namespace cwdiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string pick(const std::string& flag, const std::string& from_config, const char* what) {
    const std::string v = flag.empty() ? from_config : flag;
    require(!v.empty(), ErrorKind::invalid_argument, std::string("missing --") + what + " (or paths." + what + ")");
    return v;
}

std::string file_sha(const fs::path& p) { return sha256_hex(read_file(p)); }

struct LoadedDataset {
    Dataset data;
    std::string manifest_sha;
};

LoadedDataset load_dataset(const std::string& dir) {
    return {read_dataset(dir), file_sha(fs::path(dir) / "manifest.json")};
}

struct LoadedIlr {
    IlrModel model;
    std::string sha;
};

LoadedIlr load_ilr(const std::string& dir, const SceneConfig& scene) {
    Checkpoint c = load_checkpoint(dir);
    require(c.kind == "ilr", ErrorKind::schema, dir + " holds a '" + c.kind + "' checkpoint, expected 'ilr'");
    IlrModel m{ilr_config_from_json(c.config), std::move(c.params)};
    require(m.config.directions == scene.directions, ErrorKind::invalid_argument,
            "ILR was trained for " + std::to_string(m.config.directions) + " directions, dataset has " +
                std::to_string(scene.directions));
    return {std::move(m), file_sha(fs::path(dir) / "params.bin")};
}

struct LoadedDiffusion {
    Denoiser model;
    ScheduleSpec schedule;
    std::string sha;
    std::string ilr_sha;
};

LoadedDiffusion load_diffusion(const std::string& dir) {
    Checkpoint c = load_checkpoint(dir);
    require(c.kind == "pdm" || c.kind == "sdm", ErrorKind::schema,
            dir + " holds a '" + c.kind + "' checkpoint, expected 'pdm' or 'sdm'");
    require(c.config.is_object() && c.config.contains("model") && c.config.contains("schedule"), ErrorKind::schema,
            dir + ": checkpoint config lacks model or schedule");
    LoadedDiffusion d{{denoiser_config_from_json(c.config.at("model")), std::move(c.params)},
                      schedule_spec_from_json(c.config.at("schedule")),
                      file_sha(fs::path(dir) / "params.bin"),
                      c.config.value("ilr_sha256", "")};
    return d;
}

ScheduleMode parse_mode(const std::string& s) {
    if (s == "pdm") return ScheduleMode::continuous_cosine;
    if (s == "sdm") return ScheduleMode::sdm_switch;
    fail(ErrorKind::invalid_argument, "--mode must be pdm or sdm, got '" + s + "'");
}

const char* family(ScheduleMode m) { return m == ScheduleMode::sdm_switch ? "sdm" : "pdm"; }

/// Prints roughly twenty progress lines per run.
auto step_progress(const std::string& label) {
    return [label](std::size_t step, std::size_t total, double loss) {
        const std::size_t every = std::max<std::size_t>(1, total / 20);
        if (step % every == 0 || step == total) {
            std::cerr << label << ": step " << step << "/" << total << " loss " << loss << "\n";
        }
    };
}

std::vector<SceneTensors> subset(const Dataset& ds, const std::string& split, std::size_t count) {
    const auto& scenes = ds.split(split).scenes;
    const std::size_t n = count == 0 ? scenes.size() : std::min(count, scenes.size());
    return {scenes.begin(), scenes.begin() + static_cast<std::ptrdiff_t>(n)};
}

TensorF stack(const std::vector<TensorF>& items) {
    require(!items.empty(), ErrorKind::invalid_argument, "nothing to stack");
    Shape s{items.size()};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    TensorF out(s);
    const std::size_t n = items[0].numel();
    for (std::size_t i = 0; i < items.size(); ++i) {
        require(items[i].shape() == items[0].shape(), ErrorKind::shape, "stack: mismatched shapes");
        std::copy_n(items[i].data(), n, out.data() + i * n);
    }
    return out;
}

TensorF unstack(const TensorF& t, std::size_t i) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    const std::size_t n = t.numel() / t.dim(0);
    return TensorF(s, std::vector<float>(t.data() + i * n, t.data() + (i + 1) * n));
}

std::string fixed(double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

json metrics_json(const MetricArray& m) {
    json j = json::object();
    for (std::size_t k = 0; k < kMetricCount; ++k) j[kMetricNames[k]] = m[k];
    return j;
}

void require_ilr_match(const LoadedDiffusion& d, const LoadedIlr& ilr) {
    require(d.model.config.latent_channels == kSceneChannels + ilr.model.config.features, ErrorKind::invalid_argument,
            "diffusion latent width does not match the ILR feature count");
    if (!d.ilr_sha.empty() && d.ilr_sha != ilr.sha) {
        std::cerr << "warning: the diffusion checkpoint was trained with a different ILR checkpoint\n";
    }
}

}  // namespace

Context make_context(const std::string& command, const GlobalOptions& g) {
    require(g.threads == 1, ErrorKind::invalid_argument,
            "--threads: this build runs single-threaded, only 1 is supported");
    RunConfig config = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.config.empty()) config.validate();
    if (g.seed) config.seed = *g.seed;
    const fs::path out = resolve_out_dir(g.out, command, config.seed);
    Context ctx{command, config, config.seed, RunDir(out)};
    std::cerr << command << ": writing to " << out.string() << "\n";
    return ctx;
}

int cmd_gen_scenes(Context& ctx) {
    const RunConfig& c = ctx.config;
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");
    std::cerr << "gen-scenes: " << c.train_scenes << " train + " << c.test_scenes << " test scenes\n";
    const Dataset ds =
        generate_dataset(derive_seed(ctx.seed, "scenes"), c.scene, {{"train", c.train_scenes}, {"test", c.test_scenes}});
    ctx.out.ensure();
    const json manifest = write_dataset(ds, ctx.out / "dataset");
    ctx.out.record("dataset/manifest.json", file_sha(ctx.out / "dataset" / "manifest.json"));
    ctx.out.finish(ctx.command, ctx.seed, {{"dataset_seed", ds.seed}, {"manifest", manifest}});
    return 0;
}

int cmd_train_ilr(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    require(c.ilr.directions == ds.data.config.directions, ErrorKind::invalid_argument,
            "ilr.directions does not match the dataset");
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");

    IlrTrainReport report;
    const IlrModel ilr = train_ilr(ds.data.split("train").scenes, c.ilr, derive_seed(ctx.seed, "ilr"), &report,
                                   step_progress("train-ilr"));
    Checkpoint ckpt{"ilr", to_json(c.ilr), c.ilr.steps, rng_state_string(make_stream(ctx.seed, "ilr")), ilr.params};
    ctx.out.ensure();
    ctx.out.record("checkpoint/params.bin", save_checkpoint(ckpt, ctx.out / "checkpoint"));

    std::string losses = "step,loss\n";
    for (std::size_t i = 0; i < report.losses.size(); ++i) losses += std::to_string(i + 1) + "," + fixed(report.losses[i]) + "\n";
    ctx.out.write("losses.csv", losses);

    std::cerr << "train-ilr: evaluating on the test split\n";
    const IlrEvaluation ev = evaluate_ilr(ilr, ds.data.split("test").scenes);
    ctx.out.write("ilr_metrics.csv", "env_r2,neural_render_mse,recon_render_mse,ratio,roundtrip_error\n" +
                                         fixed(ev.env_r2) + "," + fixed(ev.neural_render_mse) + "," +
                                         fixed(ev.recon_render_mse) + "," + fixed(ev.ratio) + "," +
                                         fixed(ev.roundtrip_error) + "\n");
    ctx.out.finish(ctx.command, ctx.seed,
                   {{"dataset_manifest_sha256", ds.manifest_sha},
                    {"initial_loss", report.initial_loss},
                    {"final_loss", report.final_loss},
                    {"env_r2", ev.env_r2},
                    {"neural_render_mse", ev.neural_render_mse},
                    {"recon_render_mse", ev.recon_render_mse},
                    {"ratio", ev.ratio},
                    {"roundtrip_error", ev.roundtrip_error}});
    return 0;
}

int cmd_train_diffusion(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const ScheduleMode mode = o.mode.empty() ? c.schedule.mode : parse_mode(o.mode);
    const ScheduleSpec spec = c.schedule_for(mode);
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    const LoadedIlr ilr = load_ilr(pick(o.ilr, c.paths.ilr, "ilr"), ds.data.config);
    require(c.model.latent_channels == kSceneChannels + ilr.model.config.features, ErrorKind::invalid_argument,
            "model.latent_channels does not match the ILR feature count");
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");

    std::cerr << "train-diffusion: encoding the train split\n";
    const PreparedSplit train = prepare_split(ds.data.split("train").scenes, ilr.model, ds.data.config);
    DiffusionTrainReport report;
    const std::string kind = family(mode);
    const Denoiser model = train_diffusion(c.model, spec, c.train, train.latents, train.images_log,
                                           derive_seed(ctx.seed, "diffusion"), &report,
                                           step_progress("train-diffusion[" + kind + "]"));
    const json snapshot{{"model", to_json(c.model)},
                        {"schedule", to_json(spec)},
                        {"train", to_json(c.train)},
                        {"ilr_sha256", ilr.sha}};
    Checkpoint ckpt{kind, snapshot, c.train.steps, rng_state_string(make_stream(ctx.seed, "diffusion")),
                    model.params};
    ctx.out.ensure();
    ctx.out.record("checkpoint/params.bin", save_checkpoint(ckpt, ctx.out / "checkpoint"));

    std::string losses = "step,loss\n";
    for (std::size_t i = 0; i < report.losses.size(); ++i) losses += std::to_string(i + 1) + "," + fixed(report.losses[i]) + "\n";
    ctx.out.write("losses.csv", losses);
    ctx.out.finish(ctx.command, ctx.seed,
                   {{"mode", kind},
                    {"schedule", to_json(spec)},
                    {"dataset_manifest_sha256", ds.manifest_sha},
                    {"ilr_sha256", ilr.sha},
                    {"final_loss", report.final_loss},
                    {"null_contexts", report.null_contexts},
                    {"parameters", model.params.parameter_count()}});
    return 0;
}

int cmd_sample(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const LoadedDiffusion d = load_diffusion(pick(o.checkpoint, c.paths.checkpoint, "checkpoint"));
    if (!o.mode.empty()) {
        require(parse_mode(o.mode) == d.schedule.mode, ErrorKind::invalid_argument,
                "--mode " + o.mode + " does not match the " + family(d.schedule.mode) + " checkpoint");
    }
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    const LoadedIlr ilr = load_ilr(pick(o.ilr, c.paths.ilr, "ilr"), ds.data.config);
    require_ilr_match(d, ilr);

    SamplerConfig sampler = c.sampler;
    if (!o.noise_policy.empty()) sampler.noise_policy = noise_policy_from_string(o.noise_policy);
    if (o.samples) sampler.samples = *o.samples;
    const GroupLayout layout = GroupLayout::standard(d.model.config.latent_channels - kSceneChannels);
    const ScheduleTable table = build_schedule(d.schedule, layout);
    sampler.validate(table);

    const std::vector<SceneTensors> scenes = subset(ds.data, o.split, o.count);
    const PreparedSplit prepared = prepare_split(scenes, ilr.model, ds.data.config);
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");
    std::cerr << "sample: " << scenes.size() << " images x " << sampler.samples << " samples ("
              << family(d.schedule.mode) << ", T=" << d.schedule.T << ")\n";
    Rng rng = make_stream(ctx.seed, "sample");
    const std::vector<TensorF> samples =
        sample_latents(d.model, table, layout, stack(prepared.images_log), sampler, rng);

    std::vector<NamedTensor> blob;
    for (std::size_t k = 0; k < samples.size(); ++k) blob.push_back({"sample." + std::to_string(k), samples[k]});
    const std::string bytes = encode_blob(blob);
    ctx.out.write("samples.bin", bytes);
    ctx.out.finish(ctx.command, ctx.seed,
                   {{"mode", family(d.schedule.mode)},
                    {"split", o.split},
                    {"images", scenes.size()},
                    {"sampler", to_json(sampler)},
                    {"checkpoint_sha256", d.sha},
                    {"ilr_sha256", ilr.sha},
                    {"dataset_manifest_sha256", ds.manifest_sha},
                    {"samples_sha256", sha256_hex(bytes)}});
    return 0;
}

int cmd_render(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    const LoadedIlr ilr = load_ilr(pick(o.ilr, c.paths.ilr, "ilr"), ds.data.config);
    const std::vector<SceneTensors> scenes = subset(ds.data, o.split, o.count);
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");

    std::vector<NamedTensor> blob;
    std::string csv;
    json summary{{"split", o.split}, {"images", scenes.size()}, {"ilr_sha256", ilr.sha}};
    double total = 0;
    std::size_t n = 0;
    if (o.from.empty()) {
        csv = "image,neural_render_mse\n";
        std::vector<TensorF> neural, reference;
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            const SceneTensors& s = scenes[i];
            const TensorF img = neural_render(ilr.model, encode_scene(ilr.model, s), s.albedo, s.roughness, s.normal, s.view);
            double e = 0;
            for (std::size_t j = 0; j < img.numel(); ++j) e += (double(img[j]) - s.image[j]) * (double(img[j]) - s.image[j]);
            e /= img.numel();
            csv += std::to_string(i) + "," + fixed(e) + "\n";
            total += e;
            ++n;
            neural.push_back(img);
            reference.push_back(s.image);
        }
        blob = {{"neural", stack(neural)}, {"reference", stack(reference)}};
        summary["source"] = "ground-truth";
    } else {
        const fs::path from(o.from);
        const std::vector<NamedTensor> samples = decode_blob(read_file(from / "samples.bin"));
        summary["source"] = "samples";
        summary["samples_sha256"] = file_sha(from / "samples.bin");
        csv = "image,sample,rerender_mse\n";
        for (const NamedTensor& t : samples) {
            require(t.value.rank() == 4 && t.value.dim(0) == scenes.size(), ErrorKind::shape,
                    "samples hold " + std::to_string(t.value.rank() ? t.value.dim(0) : 0) + " images, the split subset has " +
                        std::to_string(scenes.size()) + " (match --split/--count to the sample run)");
            std::vector<TensorF> images;
            for (std::size_t i = 0; i < scenes.size(); ++i) {
                const Prediction p = decode_latent(unstack(t.value, i), ilr.model, scenes[i], ds.data.config);
                const double e = rerender_error(ilr.model, p, scenes[i].image);
                csv += std::to_string(i) + "," + t.name.substr(t.name.find('.') + 1) + "," + fixed(e) + "\n";
                total += e;
                ++n;
                images.push_back(p.scene.image);
            }
            blob.push_back({"render." + t.name, stack(images)});
        }
    }
    ctx.out.write("renders.bin", encode_blob(blob));
    ctx.out.write("render_metrics.csv", csv);
    summary["mean_mse"] = n ? total / n : 0.0;
    ctx.out.finish(ctx.command, ctx.seed, summary);
    return 0;
}

int cmd_eval(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const LoadedDiffusion d = load_diffusion(pick(o.checkpoint, c.paths.checkpoint, "checkpoint"));
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    const LoadedIlr ilr = load_ilr(pick(o.ilr, c.paths.ilr, "ilr"), ds.data.config);
    require_ilr_match(d, ilr);
    const std::size_t images = o.images.value_or(c.eval_images);
    require(images >= 1, ErrorKind::invalid_argument, "--images must be >= 1");
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");

    const std::vector<SceneTensors> scenes = subset(ds.data, "test", images);
    const PreparedSplit test = prepare_split(scenes, ilr.model, ds.data.config);
    std::cerr << "eval: " << scenes.size() << " images x " << c.sampler.samples << " samples\n";
    const EvalSummary s = evaluate_model(d.model, d.schedule, c.sampler, ilr.model, test, ds.data.config, images,
                                         derive_seed(ctx.seed, "eval"));
    std::string csv = "statistic,N,D,A,R,E,I\n";
    const std::pair<const char*, const MetricArray*> rows[] = {
        {"sample_mse", &s.sample_mse}, {"mean_mse", &s.mean_mse}, {"best_mse", &s.best_mse}, {"variance", &s.variance}};
    for (const auto& [name, m] : rows) csv += std::string(name) + "," + metrics_csv_values(*m) + "\n";
    ctx.out.write("metrics.csv", csv);
    ctx.out.write("records.csv", records_table(s.records));
    json summary{{"mode", family(d.schedule.mode)},
                 {"images", s.images},
                 {"samples", s.samples},
                 {"checkpoint_sha256", d.sha},
                 {"ilr_sha256", ilr.sha},
                 {"sample_mse", metrics_json(s.sample_mse)},
                 {"mean_mse", metrics_json(s.mean_mse)},
                 {"best_mse", metrics_json(s.best_mse)},
                 {"variance", metrics_json(s.variance)}};
    summary["variance_error_r"] = variance_error_json(s.variance_error_r);
    ctx.out.finish(ctx.command, ctx.seed, summary);
    return 0;
}

int cmd_ablate(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const AblationKind kind = ablation_kind_from_string(o.kind);
    const LoadedDataset ds = load_dataset(pick(o.dataset, c.paths.dataset, "dataset"));
    const LoadedIlr ilr = load_ilr(pick(o.ilr, c.paths.ilr, "ilr"), ds.data.config);
    require(c.ablation.model.latent_channels == kSceneChannels + ilr.model.config.features,
            ErrorKind::invalid_argument, "ablation.model.latent_channels does not match the ILR feature count");
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");

    std::cerr << "ablate: encoding splits\n";
    const PreparedSplit train = prepare_split(ds.data.split("train").scenes, ilr.model, ds.data.config);
    const PreparedSplit test = prepare_split(ds.data.split("test").scenes, ilr.model, ds.data.config);
    const SweepResult r = run_ablation(kind, c.ablation, train, test, ilr.model, ds.data.config,
                                       derive_seed(ctx.seed, "ablation"),
                                       [&](const std::string& m) { std::cerr << "ablate[" << o.kind << "]: " << m << "\n"; });
    ctx.out.write(o.kind + ".csv", sweep_csv(r));
    for (const SweepRow& row : r.rows) ctx.out.write("records_" + row.variant + ".csv", records_csv(row));
    json checks = json::array();
    for (const TrendCheck& t : r.checks) {
        checks.push_back({{"name", t.name}, {"pass", t.pass}, {"detail", t.detail}});
        std::cerr << (t.pass ? "PASS " : "FAIL ") << t.name << " (" << t.detail << ")\n";
    }
    ctx.out.finish(ctx.command, ctx.seed,
                   {{"kind", o.kind},
                    {"ilr_sha256", ilr.sha},
                    {"dataset_manifest_sha256", ds.manifest_sha},
                    {"trend_passed", r.passed()},
                    {"checks", checks},
                    {"sweep", sweep_json(r)}});
    return 0;
}

int cmd_plot_schedule(Context& ctx, const CommandOptions& o) {
    const RunConfig& c = ctx.config;
    const ScheduleMode mode = o.mode.empty() ? c.schedule.mode : parse_mode(o.mode);
    ScheduleSpec spec = c.schedule_for(mode);
    if (o.T) spec.T = *o.T;
    if (!o.taus.empty()) spec.taus = {o.taus[0], o.taus[1], o.taus[2]};
    spec.validate();
    const ScheduleTable table = build_schedule(spec, GroupLayout::standard(c.ilr.features));
    ctx.out.write("config.json", to_json(c).dump(2) + "\n");
    const std::vector<CurveRow> rows = export_curves(table);
    std::ostringstream title;
    title << family(mode) << " T=" << spec.T << " taus=(" << spec.taus[0] << ", " << spec.taus[1] << ", "
          << spec.taus[2] << ")";
    ctx.out.write("schedule.csv", curves_csv(rows));
    ctx.out.write("schedule.svg", curves_svg(rows, title.str()));
    json ends = json::object();
    for (std::size_t g = 0; g < kGroupCount; ++g) {
        ends[to_string(static_cast<Group>(g))] = {table.alpha_bar.front()[g], table.alpha_bar.back()[g]};
    }
    ctx.out.finish(ctx.command, ctx.seed, {{"schedule", to_json(spec)}, {"rows", rows.size()}, {"endpoints", ends}});
    return 0;
}

int cmd_gradcheck(Context& ctx, const CommandOptions& o) {
    ctx.out.write("config.json", to_json(ctx.config).dump(2) + "\n");
    GradCheckOptions opt;
    opt.coordinates = o.coordinates;
    opt.tolerance = 1e-4;
    const std::vector<OpCheckResult> results = gradcheck_all_ops(derive_seed(ctx.seed, "gradcheck"), opt);
    std::string csv = "op,checked,max_rel_error,worst_coordinate,passed\n";
    double worst = 0;
    bool ok = true;
    for (const OpCheckResult& r : results) {
        csv += r.op + "," + std::to_string(r.report.checked) + "," + fixed(r.report.max_rel_error) + "," +
               r.report.worst_coordinate + "," + (r.report.passed ? "1" : "0") + "\n";
        worst = std::max(worst, r.report.max_rel_error);
        ok = ok && r.report.passed;
        if (!r.report.passed) std::cerr << "gradcheck: " << r.op << " failed, rel error " << r.report.max_rel_error << "\n";
    }
    ctx.out.write("gradcheck.csv", csv);
    ctx.out.finish(ctx.command, ctx.seed,
                   {{"ops", results.size()}, {"max_rel_error", worst}, {"tolerance", opt.tolerance}, {"passed", ok}});
    std::cerr << "gradcheck: " << results.size() << " ops, max relative error " << worst << "\n";
    return ok ? 0 : static_cast<int>(ErrorKind::numeric);
}

}  // namespace cwdiff::cli
