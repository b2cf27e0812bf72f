#include "cwdiff/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cwdiff {

namespace {

TensorF channels(const TensorF& z, std::size_t begin, std::size_t end) {
    const std::size_t P = z.dim(1) * z.dim(2);
    return TensorF({end - begin, z.dim(1), z.dim(2)},
                   std::vector<float>(z.data() + begin * P, z.data() + end * P));
}

TensorF log1p_tensor(const TensorF& t) {
    TensorF out = t;
    for (float& v : out.values()) v = static_cast<float>(log1p_radiance(std::max(v, 0.0f)));
    return out;
}

double mse(const TensorF& a, const TensorF& b, const char* what) {
    require(a.shape() == b.shape(), ErrorKind::shape,
            std::string("MSE on ") + what + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    require(a.numel() > 0, ErrorKind::shape, std::string("MSE on ") + what + ": empty tensor");
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

}  // namespace

ModalityPlanes native_planes(const SceneTensors& s) {
    require(!s.env.empty() && !s.image.empty(), ErrorKind::shape, "native_planes needs env and image");
    return {s.normal, s.depth, s.albedo, s.roughness, log1p_tensor(s.env), s.image};
}

ModalityPlanes latent_planes(const TensorF& z, const TensorF& image) {
    require(z.rank() == 3 && z.dim(0) > kSceneChannels, ErrorKind::shape, "latent must be [8+F,H,W]");
    return {channels(z, 0, 3),          channels(z, 3, 4), channels(z, 4, 7), channels(z, 7, 8),
            channels(z, 8, z.dim(0)), log1p_tensor(image)};
}

MetricArray planes_mse(const ModalityPlanes& pred, const ModalityPlanes& truth) {
    MetricArray out{};
    for (std::size_t m = 0; m < kMetricCount; ++m) out[m] = mse(pred[m], truth[m], kMetricNames[m]);
    return out;
}

MetricArray mse_per_modality(const SceneTensors& pred, const SceneTensors& truth) {
    return planes_mse(native_planes(pred), native_planes(truth));
}

MetricArray sample_variance(std::span<const ModalityPlanes> samples) {
    require(!samples.empty(), ErrorKind::invalid_argument, "sample_variance needs at least one sample");
    MetricArray out{};
    const std::size_t K = samples.size();
    if (K == 1) return out;
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        const std::size_t n = samples[0][m].numel();
        for (const auto& s : samples) {
            require(s[m].shape() == samples[0][m].shape(), ErrorKind::shape, "samples differ in shape");
        }
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double mean = 0;
            for (const auto& s : samples) mean += s[m][i];
            mean /= static_cast<double>(K);
            double ss = 0;
            for (const auto& s : samples) ss += (s[m][i] - mean) * (s[m][i] - mean);
            total += ss / static_cast<double>(K - 1);
        }
        out[m] = total / static_cast<double>(n);
    }
    return out;
}

MetricArray pdm_aggregate(std::span<const ModalityPlanes> samples, const ModalityPlanes& truth, Aggregate mode) {
    require(!samples.empty(), ErrorKind::invalid_argument, "pdm_aggregate needs at least one sample");
    MetricArray out{};
    if (mode == Aggregate::best) {
        out.fill(std::numeric_limits<double>::infinity());
        for (const auto& s : samples) {
            const MetricArray e = planes_mse(s, truth);
            for (std::size_t m = 0; m < kMetricCount; ++m) out[m] = std::min(out[m], e[m]);
        }
        return out;
    }
    ModalityPlanes mean;
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        mean[m] = TensorF(samples[0][m].shape());
        std::vector<double> acc(mean[m].numel(), 0.0);
        for (const auto& s : samples) {
            require(s[m].shape() == mean[m].shape(), ErrorKind::shape, "samples differ in shape");
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s[m][i];
        }
        for (std::size_t i = 0; i < acc.size(); ++i) {
            mean[m][i] = static_cast<float>(acc[i] / static_cast<double>(samples.size()));
        }
    }
    return planes_mse(mean, truth);
}

MetricArray mean_sample_mse(std::span<const ModalityPlanes> samples, const ModalityPlanes& truth) {
    require(!samples.empty(), ErrorKind::invalid_argument, "mean_sample_mse needs at least one sample");
    MetricArray out{};
    for (const auto& s : samples) {
        const MetricArray e = planes_mse(s, truth);
        for (std::size_t m = 0; m < kMetricCount; ++m) out[m] += e[m];
    }
    for (double& v : out) v /= static_cast<double>(samples.size());
    return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size(), ErrorKind::shape, "pearson: inputs differ in length");
    const std::size_t n = x.size();
    if (n < 3) return std::nullopt;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0 || syy <= 0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double r_squared(const TensorF& pred, const TensorF& truth) {
    require(pred.shape() == truth.shape() && truth.rank() == 2 && truth.dim(0) >= 2, ErrorKind::shape,
            "r_squared expects matching [rows, cols] tensors with at least two rows");
    const std::size_t R = truth.dim(0), C = truth.dim(1);
    std::vector<double> mean(C, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) mean[c] += truth[r * C + c];
    for (double& m : mean) m /= static_cast<double>(R);
    double res = 0, tot = 0;
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) {
            const double t = truth[r * C + c];
            res += (pred[r * C + c] - t) * (pred[r * C + c] - t);
            tot += (t - mean[c]) * (t - mean[c]);
        }
    }
    require(tot > 0, ErrorKind::numeric, "r_squared: truth has no variance");
    return 1.0 - res / tot;
}

Prediction decode_latent(const TensorF& latent, const IlrModel& ilr, const SceneTensors& reference,
                         const SceneConfig& config) {
    UnpackedLatent u = unpack_modalities(latent, config);
    require(u.features.dim(0) == ilr.config.features, ErrorKind::shape, "latent feature count differs from the ILR");
    require(reference.view.shape() == u.scene.normal.shape(), ErrorKind::shape,
            "reference scene resolution differs from the latent");
    Prediction p{std::move(u.scene), std::move(u.features)};
    p.scene.seed = reference.seed;
    p.scene.view = reference.view;
    p.scene.env = decode_scene_env(ilr, p.features);
    p.scene.image = neural_render(ilr, p.features, p.scene.albedo, p.scene.roughness, p.scene.normal, p.scene.view);
    return p;
}

double rerender_error(const IlrModel& ilr, const Prediction& pred, const TensorF& image_truth) {
    const SceneTensors& s = pred.scene;
    require(!s.albedo.empty() && !s.normal.empty() && !s.view.empty(), ErrorKind::invalid_argument,
            "rerender_error: prediction lacks albedo, normal or view");
    return mse(neural_render(ilr, pred.features, s.albedo, s.roughness, s.normal, s.view), image_truth, "I");
}

IlrEvaluation evaluate_ilr(const IlrModel& ilr, const std::vector<SceneTensors>& scenes) {
    require(!scenes.empty(), ErrorKind::invalid_argument, "evaluate_ilr needs held-out scenes");
    const std::size_t C = ilr.config.directions;
    const Quadrature quad = hemisphere_quadrature(C);
    IlrEvaluation ev;
    std::vector<float> pred_rows, truth_rows;
    double neural = 0, recon = 0;
    std::size_t pixels = 0;
    for (const SceneTensors& s : scenes) {
        const std::size_t P = s.height() * s.width();
        const TensorF features = encode_scene(ilr, s);
        const TensorF decoded = decode_scene_env(ilr, features);
        for (std::size_t i = 0; i < s.env.numel(); ++i) {
            const double x = s.env[i];
            ev.roundtrip_error = std::max(ev.roundtrip_error, std::abs(expm1_radiance(log1p_radiance(x)) - x));
            truth_rows.push_back(static_cast<float>(std::log1p(x)));
            pred_rows.push_back(static_cast<float>(std::log1p(decoded[i])));
        }
        const TensorF nr = neural_render(ilr, features, s.albedo, s.roughness, s.normal, s.view);
        SceneTensors r = s;
        r.env = decoded;
        render(r, quad);
        neural += mse(nr, s.image, "I") * static_cast<double>(P);
        recon += mse(r.image, s.image, "I") * static_cast<double>(P);
        pixels += P;
    }
    const std::size_t rows = truth_rows.size() / (C * 3);
    ev.env_r2 = r_squared(TensorF({rows, C * 3}, std::move(pred_rows)), TensorF({rows, C * 3}, std::move(truth_rows)));
    ev.neural_render_mse = neural / static_cast<double>(pixels);
    ev.recon_render_mse = recon / static_cast<double>(pixels);
    ev.ratio = ev.recon_render_mse > 0 ? ev.neural_render_mse / ev.recon_render_mse
                                       : std::numeric_limits<double>::infinity();
    return ev;
}

std::string metrics_csv_header(const std::string& prefix) {
    std::string out;
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        if (m) out += ',';
        out += prefix + kMetricNames[m];
    }
    return out;
}

std::string metrics_csv_values(const MetricArray& v) {
    std::ostringstream os;
    os.precision(9);
    for (std::size_t m = 0; m < kMetricCount; ++m) {
        if (m) os << ',';
        os << v[m];
    }
    return os.str();
}

}  // namespace cwdiff
