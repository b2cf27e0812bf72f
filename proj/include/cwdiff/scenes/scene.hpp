#pragma once

#include <cstdint>
#include <vector>

#include "cwdiff/numerics/tensor.hpp"
#include "cwdiff/scenes/geometry.hpp"

namespace cwdiff {

/// Equal-weight directions on the upper hemisphere of a local frame.
struct Quadrature {
    std::vector<Vec3> directions;
    std::vector<double> weights;

    std::size_t size() const noexcept { return directions.size(); }
};

/// Fibonacci spiral with z uniform in (0, 1), so every direction covers the
/// same solid angle 2*pi/C.
Quadrature hemisphere_quadrature(std::size_t count);

struct SceneConfig {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t directions = 16;
    int min_anchors = 2;
    int max_anchors = 4;
    int min_lobes = 1;
    int max_lobes = 3;
    double min_intensity = 0.1;
    double max_intensity = 20.0;
    int min_regions = 2;
    int max_regions = 4;
    double fov_degrees = 60.0;
    double depth_min = 0.5;  // normalization bounds, meters
    double depth_max = 8.0;
};

/// Ground-truth modalities of one micro-scene. Image planes are [3,H,W];
/// the per-pixel environment map is [H,W,C,3] in the normal-aligned local
/// frame of each pixel, sampled at the quadrature directions.
struct SceneTensors {
    std::uint64_t seed = 0;
    TensorF normal;     // [3,H,W] unit, world frame (camera looks down -z)
    TensorF depth;      // [1,H,W] meters
    TensorF albedo;     // [3,H,W] in [0,1]
    TensorF roughness;  // [1,H,W] in [0,1]
    TensorF env;        // [H,W,C,3] radiance >= 0
    TensorF view;       // [3,H,W] unit vector towards the camera, world frame
    TensorF shading;    // [3,H,W] cosine-weighted irradiance integral
    TensorF diffuse;    // [3,H,W] (A/pi) * shading
    TensorF specular;   // [3,H,W]
    TensorF image;      // [3,H,W] diffuse + specular

    std::size_t height() const { return normal.dim(1); }
    std::size_t width() const { return normal.dim(2); }
    std::size_t directions() const { return env.dim(2); }
};

SceneTensors gen_scene(std::uint64_t seed, const SceneConfig& config);

struct DiffuseResult {
    TensorF diffuse;  // I_d
    TensorF shading;  // S = I_d / (A / pi)
};

/// Lambertian term against the per-pixel environment map.
DiffuseResult render_diffuse(const TensorF& albedo, const TensorF& normal, const TensorF& env, const Quadrature& quad);

inline constexpr double kSpecularF0 = 0.04;
inline constexpr double kMinRoughness = 0.05;

/// Blinn exponent for a roughness value; roughness below 0.05 is clamped.
double blinn_exponent(double roughness);

/// Normalized Blinn lobe, F0 = 0.04. Per-pixel radiance at one view.
Vec3 specular_pixel(double roughness, Vec3 view_local, const float* env_pixel, const Quadrature& quad);

TensorF render_specular(const TensorF& roughness, const TensorF& normal, const TensorF& env, const TensorF& view,
                        const Quadrature& quad);

/// Fills shading, diffuse, specular and image from the other fields.
void render(SceneTensors& scene, const Quadrature& quad);

/// Checks the SceneTensors invariants; throws with the first violation.
void validate_scene(const SceneTensors& scene);

/// Pixel-wise view direction expressed in the pixel's normal frame.
Vec3 local_view(const SceneTensors& scene, std::size_t y, std::size_t x);

}  // namespace cwdiff
