#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cwdiff/diffusion/diffusion.hpp"
#include "cwdiff/lighting/ilr.hpp"
#include "cwdiff/scenes/dataset.hpp"

namespace cwdiff {

/// Tracked modalities, in table order.
enum class Metric : std::size_t { N = 0, D, A, R, E, I };
inline constexpr std::size_t kMetricCount = 6;
inline constexpr std::array<const char*, kMetricCount> kMetricNames{"N", "D", "A", "R", "E", "I"};

using MetricArray = std::array<double, kMetricCount>;

/// One tensor per modality. Shapes only need to agree between the two sides
/// of a comparison.
using ModalityPlanes = std::array<TensorF, kMetricCount>;

/// Native units: N, D (meters), A, R, log1p(E), I. Needs env and image.
ModalityPlanes native_planes(const SceneTensors& scene);

/// Normalized space: the N, D, A, R and feature channels of a [C,H,W] latent
/// plus log1p of a rendered image. Used for sample variance.
ModalityPlanes latent_planes(const TensorF& latent, const TensorF& image);

MetricArray planes_mse(const ModalityPlanes& pred, const ModalityPlanes& truth);

/// Per modality MSE in native units; E is compared in log1p space.
MetricArray mse_per_modality(const SceneTensors& pred, const SceneTensors& truth);

/// Unbiased per-element variance across samples, averaged over each
/// modality's elements. Zero for a single sample.
MetricArray sample_variance(std::span<const ModalityPlanes> samples);

enum class Aggregate { mean, best };

/// mean: MSE of the element-wise average sample. best: per modality, the
/// lowest MSE of any single sample.
MetricArray pdm_aggregate(std::span<const ModalityPlanes> samples, const ModalityPlanes& truth, Aggregate mode);

/// Average over samples of the single-sample MSE.
MetricArray mean_sample_mse(std::span<const ModalityPlanes> samples, const ModalityPlanes& truth);

/// Pearson coefficient; empty when fewer than 3 points or either side has
/// zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

/// 1 - SS_res / SS_tot over rows, with SS_tot taken about each column's mean.
double r_squared(const TensorF& pred, const TensorF& truth);

/// A latent decoded into native modalities: env from the ILR decoder, image
/// from the neural renderer, view copied from the reference scene.
struct Prediction {
    SceneTensors scene;
    TensorF features;  // [F,H,W]
};

Prediction decode_latent(const TensorF& latent, const IlrModel& ilr, const SceneTensors& reference,
                         const SceneConfig& config);

/// MSE between the neural render of predicted modalities and `image_truth`.
double rerender_error(const IlrModel& ilr, const Prediction& pred, const TensorF& image_truth);

struct IlrEvaluation {
    double env_r2 = 0;            // log1p space, held-out pixels
    double neural_render_mse = 0;  // ground-truth modalities through the neural renderer
    double recon_render_mse = 0;   // quadrature render of decode(encode(E))
    double ratio = 0;              // neural / recon
    double roundtrip_error = 0;    // max |expm1(log1p(x)) - x| over the env values
};

IlrEvaluation evaluate_ilr(const IlrModel& ilr, const std::vector<SceneTensors>& scenes);

std::string metrics_csv_header(const std::string& prefix);
std::string metrics_csv_values(const MetricArray& m);

}  // namespace cwdiff
