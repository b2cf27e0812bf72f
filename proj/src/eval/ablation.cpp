#include "cwdiff/eval/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "cwdiff/io/json_fields.hpp"

namespace cwdiff {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

TensorF log1p_image(const TensorF& image) {
    TensorF out = image;
    for (float& v : out.values()) v = static_cast<float>(log1p_radiance(v));
    return out;
}

TensorF slice_batch(const TensorF& t, std::size_t b) {
    const Shape s{t.dim(1), t.dim(2), t.dim(3)};
    const std::size_t n = s[0] * s[1] * s[2];
    return TensorF(s, std::vector<float>(t.data() + b * n, t.data() + (b + 1) * n));
}

std::string taus_string(const GroupAlphas& t) {
    std::ostringstream os;
    os << t[0] << '|' << t[1] << '|' << t[2];
    return os.str();
}

nlohmann::json sweep_settings_json(const SweepSettings& s) {
    return {{"train", to_json(s.train)}, {"sampler", to_json(s.sampler)}, {"eval_images", s.eval_images}};
}

SweepSettings sweep_settings_from_json(const nlohmann::json& j, SweepSettings s, const std::string& ctx) {
    JsonFields(j, ctx).known("train").known("sampler").get("eval_images", s.eval_images).finish();
    // partial objects override only the keys they name
    if (j.contains("train")) {
        nlohmann::json t = to_json(s.train);
        t.merge_patch(j.at("train"));
        s.train = diffusion_train_config_from_json(t);
    }
    if (j.contains("sampler")) {
        nlohmann::json t = to_json(s.sampler);
        t.merge_patch(j.at("sampler"));
        s.sampler = sampler_config_from_json(t);
    }
    return s;
}

struct Variant {
    std::string name;
    ScheduleSpec schedule;
    std::uint64_t seed;
};

SweepRow run_variant(const Variant& v, const DenoiserConfig& model_config, const SweepSettings& settings,
                     const PreparedSplit& train, const PreparedSplit& test, const IlrModel& ilr,
                     const SceneConfig& scene_config, const AblationProgress& progress) {
    SweepRow row;
    row.variant = v.name;
    row.mode = v.schedule.mode == ScheduleMode::sdm_switch ? "sdm" : "pdm";
    row.T = v.schedule.T;
    row.taus = v.schedule.taus;
    row.seed = v.seed;
    SamplerConfig sampler = settings.sampler;
    sampler.ddim_steps = std::min(sampler.ddim_steps, v.schedule.T);
    row.samples = sampler.samples;
    try {
        const auto t0 = Clock::now();
        DiffusionTrainReport report;
        const std::size_t every = std::max<std::size_t>(1, settings.train.steps / 10);
        const Denoiser model = train_diffusion(
            model_config, v.schedule, settings.train, train.latents, train.images_log, v.seed, &report,
            [&](std::size_t step, std::size_t total, double loss) {
                if (progress && (step % every == 0 || step == total)) {
                    std::ostringstream os;
                    os << v.name << ": step " << step << "/" << total << " loss " << loss;
                    progress(os.str());
                }
            });
        row.train_seconds = seconds_since(t0);
        row.final_loss = report.final_loss;
        const auto t1 = Clock::now();
        row.eval = evaluate_model(model, v.schedule, sampler, ilr, test, scene_config, settings.eval_images,
                                  derive_seed(v.seed, "ablation.eval"));
        row.eval_seconds = seconds_since(t1);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        row.diverged = true;
        row.note = e.what();
    }
    if (progress) {
        std::ostringstream os;
        os << v.name << ": done (train " << row.train_seconds << " s, eval " << row.eval_seconds << " s"
           << (row.diverged ? ", diverged" : "") << ")";
        progress(os.str());
    }
    return row;
}

std::vector<TrendCheck> t_sweep_checks(const std::vector<SweepRow>& rows) {
    std::vector<TrendCheck> checks;
    const bool ok = std::none_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.diverged; });
    TrendCheck mono{"variance non-decreasing in T", ok, ""};
    for (std::size_t i = 1; ok && i < rows.size(); ++i) {
        for (std::size_t m = 0; m < kMetricCount; ++m) {
            if (rows[i].eval.variance[m] < rows[i - 1].eval.variance[m]) {
                mono.pass = false;
                mono.detail += std::string(kMetricNames[m]) + " drops from T=" + std::to_string(rows[i - 1].T) +
                               " to T=" + std::to_string(rows[i].T) + "; ";
            }
        }
    }
    checks.push_back(mono);
    const SweepRow& lo = rows.front();
    const SweepRow& hi = rows.back();
    const double max_var = *std::max_element(lo.eval.variance.begin(), lo.eval.variance.end());
    checks.push_back({"variance(T=" + std::to_string(lo.T) + ") < 1e-4", ok && max_var < 1e-4,
                      "max " + std::to_string(max_var)});
    int wins = 0;
    for (std::size_t m = 0; m < kMetricCount; ++m) wins += lo.eval.sample_mse[m] <= hi.eval.sample_mse[m];
    checks.push_back({"MSE(T=" + std::to_string(lo.T) + ") <= MSE(T=" + std::to_string(hi.T) + ") on >= 4 of 6",
                      ok && wins >= 4, std::to_string(wins) + " of 6"});
    const VarianceErrorR& r = hi.eval.variance_error_r;
    std::string detail = r.mean ? "mean r=" + std::to_string(*r.mean) : "undefined";
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        detail += std::string(m ? ", " : "; ") + kMetricNames[m] + " " +
                  (r.per_modality[m] ? std::to_string(*r.per_modality[m]) : "undefined");
    }
    checks.push_back({"variance-error Pearson r > 0.1 at T=" + std::to_string(hi.T), ok && r.mean && *r.mean > 0.1,
                      detail});
    return checks;
}

std::string optional_text(const std::optional<double>& v) {
    if (!v) return "nan";
    std::ostringstream os;
    os.precision(9);
    os << *v;
    return os.str();
}

}  // namespace

PreparedSplit prepare_split(const std::vector<SceneTensors>& scenes, const IlrModel& ilr, const SceneConfig& config) {
    PreparedSplit p;
    p.scenes = scenes;
    p.latents.reserve(scenes.size());
    p.images_log.reserve(scenes.size());
    for (const SceneTensors& s : scenes) {
        p.latents.push_back(pack_modalities(s, encode_scene(ilr, s), config));
        p.images_log.push_back(log1p_image(s.image));
    }
    return p;
}

EvalSummary evaluate_model(const Denoiser& model, const ScheduleSpec& spec, const SamplerConfig& sampler,
                           const IlrModel& ilr, const PreparedSplit& test, const SceneConfig& config,
                           std::size_t max_images, std::uint64_t seed, std::size_t chunk) {
    require(!test.scenes.empty() && chunk >= 1, ErrorKind::invalid_argument, "evaluate_model needs test scenes");
    const std::size_t n = std::min(max_images, test.scenes.size());
    const GroupLayout layout = GroupLayout::standard(model.config.latent_channels - kSceneChannels);
    const ScheduleTable table = build_schedule(spec, layout);
    Rng rng = make_stream(seed, "eval.sampling");
    EvalSummary sum;
    sum.images = n;
    sum.samples = sampler.samples;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t B = std::min(chunk, n - begin);
        const Shape is = test.images_log[0].shape();
        TensorF images({B, is[0], is[1], is[2]});
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(test.images_log[begin + b].data(), test.images_log[begin + b].numel(),
                        images.data() + b * test.images_log[begin + b].numel());
        }
        const std::vector<TensorF> samples = sample_latents(model, table, layout, images, sampler, rng);
        for (std::size_t b = 0; b < B; ++b) {
            const SceneTensors& truth = test.scenes[begin + b];
            const ModalityPlanes truth_native = native_planes(truth);
            const ModalityPlanes truth_latent = latent_planes(test.latents[begin + b], truth.image);
            std::vector<ModalityPlanes> native, normalized;
            for (const TensorF& batch : samples) {
                const TensorF z = slice_batch(batch, b);
                const Prediction p = decode_latent(z, ilr, truth, config);
                native.push_back(native_planes(p.scene));
                normalized.push_back(latent_planes(z, p.scene.image));
            }
            ImageRecord r;
            r.sample_mse = mean_sample_mse(native, truth_native);
            r.mean_mse = pdm_aggregate(native, truth_native, Aggregate::mean);
            r.best_mse = pdm_aggregate(native, truth_native, Aggregate::best);
            r.variance = sample_variance(normalized);
            r.error = pdm_aggregate(normalized, truth_latent, Aggregate::mean);
            sum.records.push_back(r);
        }
    }
    for (const ImageRecord& r : sum.records) {
        for (std::size_t m = 0; m < kMetricCount; ++m) {
            sum.sample_mse[m] += r.sample_mse[m] / static_cast<double>(n);
            sum.mean_mse[m] += r.mean_mse[m] / static_cast<double>(n);
            sum.best_mse[m] += r.best_mse[m] / static_cast<double>(n);
            sum.variance[m] += r.variance[m] / static_cast<double>(n);
        }
    }
    sum.variance_error_r = variance_error_correlation(sum.records);
    return sum;
}

VarianceErrorR variance_error_correlation(const std::vector<ImageRecord>& records) {
    VarianceErrorR out;
    double total = 0;
    bool defined = true;
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        std::vector<double> vs, es;
        vs.reserve(records.size());
        es.reserve(records.size());
        for (const ImageRecord& r : records) {
            vs.push_back(r.variance[m]);
            es.push_back(r.error[m]);
        }
        out.per_modality[m] = pearson(vs, es);
        if (out.per_modality[m]) {
            total += *out.per_modality[m];
        } else {
            defined = false;
        }
    }
    if (defined) out.mean = total / static_cast<double>(kMetricCount);
    return out;
}

const char* to_string(AblationKind k) noexcept {
    switch (k) {
        case AblationKind::t_sweep: return "t-sweep";
        case AblationKind::tau_order: return "tau-order";
        case AblationKind::sdm_steps: return "sdm-steps";
    }
    return "?";
}

AblationKind ablation_kind_from_string(const std::string& s) {
    if (s == "t-sweep") return AblationKind::t_sweep;
    if (s == "tau-order") return AblationKind::tau_order;
    if (s == "sdm-steps") return AblationKind::sdm_steps;
    fail(ErrorKind::invalid_argument, "unknown ablation '" + s + "' (expected t-sweep, tau-order or sdm-steps)");
}

AblationConfig::AblationConfig() {
    model.base_width = 16;

    t_sweep.train.steps = 3000;
    t_sweep.sampler.ddim_steps = 2;
    t_sweep.sampler.samples = 10;
    t_sweep.eval_images = 256;

    tau_order.train.steps = 1200;
    tau_order.sampler.ddim_steps = 10;
    tau_order.sampler.samples = 2;
    tau_order.eval_images = 128;

    sdm_steps.train.steps = 4000;
    sdm_steps.sampler.samples = 1;
    sdm_steps.sampler.noise_policy = NoisePolicy::zeros;
    sdm_steps.eval_images = 256;
}

void AblationConfig::validate() const {
    model.validate();
    for (const SweepSettings* s : {&t_sweep, &tau_order, &sdm_steps}) {
        s->train.validate();
        require(s->eval_images >= 3 && s->sampler.samples >= 1, ErrorKind::schema,
                "ablation: eval_images >= 3 and samples >= 1 required");
    }
    require(t_values.size() >= 2 && std::is_sorted(t_values.begin(), t_values.end()) && t_values.front() >= 1,
            ErrorKind::schema, "ablation: t_values must be ascending, >= 1, at least two entries");
    require(orders.size() == 2 && !order_seeds.empty() && order_T >= 2, ErrorKind::schema,
            "ablation: two orders, at least one seed and order_T >= 2 required");
    require(sdm_T.size() == 2 && valid_sdm_steps(sdm_T[0]) && valid_sdm_steps(sdm_T[1]), ErrorKind::schema,
            "ablation: sdm_T must hold two valid SDM step counts");
}

nlohmann::json to_json(const AblationConfig& c) {
    nlohmann::json orders = nlohmann::json::array();
    for (const auto& o : c.orders) orders.push_back(o);
    return {{"model", to_json(c.model)},
            {"t_sweep", sweep_settings_json(c.t_sweep)},
            {"t_values", c.t_values},
            {"t_sweep_taus", c.t_sweep_taus},
            {"tau_order", sweep_settings_json(c.tau_order)},
            {"orders", orders},
            {"order_baseline", c.order_baseline},
            {"order_T", c.order_T},
            {"order_seeds", c.order_seeds},
            {"sdm_steps", sweep_settings_json(c.sdm_steps)},
            {"sdm_T", c.sdm_T}};
}

AblationConfig ablation_config_from_json(const nlohmann::json& j) {
    AblationConfig c;
    JsonFields(j, "ablation")
        .known("model")
        .known("t_sweep")
        .get("t_values", c.t_values)
        .known("t_sweep_taus")
        .known("tau_order")
        .known("orders")
        .known("order_baseline")
        .get("order_T", c.order_T)
        .get("order_seeds", c.order_seeds)
        .known("sdm_steps")
        .get("sdm_T", c.sdm_T)
        .finish();
    if (j.contains("model")) {
        nlohmann::json m = to_json(c.model);
        m.merge_patch(j.at("model"));
        c.model = denoiser_config_from_json(m);
    }
    if (j.contains("t_sweep")) c.t_sweep = sweep_settings_from_json(j.at("t_sweep"), c.t_sweep, "ablation.t_sweep");
    if (j.contains("tau_order")) {
        c.tau_order = sweep_settings_from_json(j.at("tau_order"), c.tau_order, "ablation.tau_order");
    }
    if (j.contains("sdm_steps")) {
        c.sdm_steps = sweep_settings_from_json(j.at("sdm_steps"), c.sdm_steps, "ablation.sdm_steps");
    }
    if (j.contains("t_sweep_taus")) c.t_sweep_taus = group_alphas_from_json(j.at("t_sweep_taus"), "t_sweep_taus");
    if (j.contains("order_baseline")) {
        c.order_baseline = group_alphas_from_json(j.at("order_baseline"), "order_baseline");
    }
    if (j.contains("orders")) {
        require(j.at("orders").is_array(), ErrorKind::schema, "ablation.orders must be an array");
        c.orders.clear();
        for (const auto& o : j.at("orders")) c.orders.push_back(group_alphas_from_json(o, "ablation.orders[]"));
    }
    c.validate();
    return c;
}

bool SweepResult::passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const TrendCheck& c) { return c.pass; });
}

SweepResult run_ablation(AblationKind kind, const AblationConfig& c, const PreparedSplit& train,
                         const PreparedSplit& test, const IlrModel& ilr, const SceneConfig& scene_config,
                         std::uint64_t seed, const AblationProgress& progress) {
    c.validate();
    SweepResult res;
    res.kind = kind;
    auto run = [&](const Variant& v, const SweepSettings& s) {
        res.rows.push_back(run_variant(v, c.model, s, train, test, ilr, scene_config, progress));
    };
    switch (kind) {
        case AblationKind::t_sweep: {
            for (int T : c.t_values) {
                ScheduleSpec spec;
                spec.T = T;
                spec.taus = c.t_sweep_taus;
                run({"T=" + std::to_string(T), spec, seed}, c.t_sweep);
            }
            res.checks = t_sweep_checks(res.rows);
            break;
        }
        case AblationKind::tau_order: {
            int wins = 0;
            bool ok = true;
            std::string detail;
            for (std::uint64_t s : c.order_seeds) {
                const std::uint64_t vs = derive_seed(seed, "ablation.order", s);
                ScheduleSpec spec;
                spec.T = c.order_T;
                spec.taus = c.order_baseline;
                run({"baseline " + taus_string(c.order_baseline) + " seed " + std::to_string(s), spec, vs},
                    c.tau_order);
                const std::size_t base = res.rows.size() - 1;
                for (const GroupAlphas& o : c.orders) {
                    spec.taus = o;
                    run({"order " + taus_string(o) + " seed " + std::to_string(s), spec, vs}, c.tau_order);
                }
                const SweepRow& b = res.rows[base];
                double agg[2] = {0, 0};
                for (int v = 0; v < 2; ++v) {
                    const SweepRow& r = res.rows[base + 1 + static_cast<std::size_t>(v)];
                    ok = ok && !r.diverged && !b.diverged;
                    for (std::size_t m = 0; m < kMetricCount; ++m) {
                        agg[v] += r.eval.sample_mse[m] / b.eval.sample_mse[m] / static_cast<double>(kMetricCount);
                    }
                    res.rows[base + 1 + static_cast<std::size_t>(v)].note =
                        "aggregate normalized error " + std::to_string(agg[v]);
                }
                wins += agg[0] < agg[1];
                detail += "seed " + std::to_string(s) + ": " + std::to_string(agg[0]) + " vs " +
                          std::to_string(agg[1]) + "; ";
            }
            const int needed = static_cast<int>(c.order_seeds.size() / 2 + 1);
            res.checks.push_back({taus_string(c.orders[0]) + " beats " + taus_string(c.orders[1]) + " in >= " +
                                      std::to_string(needed) + " of " + std::to_string(c.order_seeds.size()) +
                                      " seeds",
                                  ok && wins >= needed, detail + std::to_string(wins) + " wins"});
            break;
        }
        case AblationKind::sdm_steps: {
            for (int T : c.sdm_T) {
                ScheduleSpec spec;
                spec.T = T;
                spec.mode = ScheduleMode::sdm_switch;
                run({"SDM T=" + std::to_string(T), spec, seed}, c.sdm_steps);
            }
            const SweepRow& a = res.rows[0];
            const SweepRow& b = res.rows[1];
            int wins = 0;
            for (std::size_t m = 0; m < 5; ++m) wins += b.eval.sample_mse[m] <= a.eval.sample_mse[m];
            res.checks.push_back({"SDM T=" + std::to_string(b.T) + " <= T=" + std::to_string(a.T) +
                                      " on >= 3 of N, D, A, R, E",
                                  !a.diverged && !b.diverged && wins >= 3, std::to_string(wins) + " of 5"});
            break;
        }
    }
    return res;
}

std::string sweep_csv(const SweepResult& r) {
    std::ostringstream os;
    os << "variant,mode,T,tau_G,tau_M,tau_L,seed,K,final_loss,diverged," << metrics_csv_header("mse_") << ','
       << metrics_csv_header("mean_mse_") << ',' << metrics_csv_header("best_mse_") << ','
       << metrics_csv_header("var_") << ',' << metrics_csv_header("r_") << ",variance_error_r\n";
    os.precision(9);
    for (const SweepRow& row : r.rows) {
        os << row.variant << ',' << row.mode << ',' << row.T << ',' << row.taus[0] << ',' << row.taus[1] << ','
           << row.taus[2] << ',' << row.seed << ',' << row.samples << ',' << row.final_loss << ','
           << (row.diverged ? 1 : 0) << ',' << metrics_csv_values(row.eval.sample_mse) << ','
           << metrics_csv_values(row.eval.mean_mse) << ',' << metrics_csv_values(row.eval.best_mse) << ','
           << metrics_csv_values(row.eval.variance);
        for (const auto& r : row.eval.variance_error_r.per_modality) os << ',' << optional_text(r);
        os << ',' << optional_text(row.eval.variance_error_r.mean) << '\n';
    }
    for (const TrendCheck& c : r.checks) {
        os << "# summary: " << (c.pass ? "PASS" : "FAIL") << " " << c.name << " (" << c.detail << ")\n";
    }
    return os.str();
}

std::string records_table(const std::vector<ImageRecord>& records) {
    std::string out = "image," + metrics_csv_header("var_") + ',' + metrics_csv_header("err_") + '\n';
    for (std::size_t i = 0; i < records.size(); ++i) {
        out += std::to_string(i) + ',' + metrics_csv_values(records[i].variance) + ',' +
               metrics_csv_values(records[i].error) + '\n';
    }
    return out;
}

std::string records_csv(const SweepRow& row) { return records_table(row.eval.records); }

nlohmann::json variance_error_json(const VarianceErrorR& r) {
    nlohmann::json per;
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        per[kMetricNames[m]] = r.per_modality[m] ? nlohmann::json(*r.per_modality[m]) : nlohmann::json(nullptr);
    }
    return {{"per_modality", per}, {"mean", r.mean ? nlohmann::json(*r.mean) : nlohmann::json(nullptr)}};
}

nlohmann::json sweep_json(const SweepResult& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const SweepRow& row : r.rows) {
        nlohmann::json m;
        for (std::size_t k = 0; k < kMetricCount; ++k) {
            m[kMetricNames[k]] = {{"mse", row.eval.sample_mse[k]},
                                  {"mean_mse", row.eval.mean_mse[k]},
                                  {"best_mse", row.eval.best_mse[k]},
                                  {"variance", row.eval.variance[k]}};
        }
        rows.push_back({{"variant", row.variant},
                        {"mode", row.mode},
                        {"T", row.T},
                        {"taus", row.taus},
                        {"seed", row.seed},
                        {"K", row.samples},
                        {"final_loss", row.final_loss},
                        {"diverged", row.diverged},
                        {"note", row.note},
                        {"metrics", m},
                        {"variance_error_r", variance_error_json(row.eval.variance_error_r)}});
    }
    nlohmann::json checks = nlohmann::json::array();
    for (const TrendCheck& c : r.checks) checks.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    return {{"kind", to_string(r.kind)}, {"rows", rows}, {"checks", checks}, {"passed", r.passed()},
            {"best_selection", "per modality"}};
}

}  // namespace cwdiff
