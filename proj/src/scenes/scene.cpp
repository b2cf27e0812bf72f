#include "cwdiff/scenes/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "cwdiff/rng.hpp"

namespace cwdiff {

namespace {

constexpr double kPi = std::numbers::pi;

struct Lobe {
    Vec3 mu;
    double kappa;
    std::array<double, 3> intensity;
};

// Distant lighting shared by a neighbourhood of pixels.
struct Anchor {
    std::vector<Lobe> lobes;

    std::array<double, 3> radiance(Vec3 w) const {
        std::array<double, 3> out{0, 0, 0};
        for (const Lobe& l : lobes) {
            const double f = std::exp(l.kappa * (dot(w, l.mu) - 1.0));
            for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] += l.intensity[static_cast<std::size_t>(c)] * f;
        }
        return out;
    }
};

Vec3 pixel_vec(const TensorF& t, std::size_t y, std::size_t x) {
    const std::size_t H = t.dim(1), W = t.dim(2);
    return {t[(0 * H + y) * W + x], t[(1 * H + y) * W + x], t[(2 * H + y) * W + x]};
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Anchor random_anchor(Rng& rng, const SceneConfig& cfg) {
    Anchor a;
    const int lobes = uniform_int(rng, cfg.min_lobes, cfg.max_lobes);
    for (int i = 0; i < lobes; ++i) {
        // directions above the surface plane, biased away from grazing
        const double z = uniform(rng, 0.15, 1.0);
        const double phi = uniform(rng, 0.0, 2.0 * kPi);
        const double r = std::sqrt(1.0 - z * z);
        const double mag = std::exp(uniform(rng, std::log(cfg.min_intensity), std::log(cfg.max_intensity)));
        Lobe l{{r * std::cos(phi), r * std::sin(phi), z}, uniform(rng, 2.0, 24.0), {}};
        for (double& c : l.intensity) c = mag * uniform(rng, 0.6, 1.0);
        a.lobes.push_back(l);
    }
    return a;
}

}  // namespace

Quadrature hemisphere_quadrature(std::size_t count) {
    require(count >= 4, ErrorKind::invalid_argument, "hemisphere quadrature needs at least 4 directions");
    Quadrature q;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (std::size_t j = 0; j < count; ++j) {
        const double z = 1.0 - (static_cast<double>(j) + 0.5) / static_cast<double>(count);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * static_cast<double>(j);
        q.directions.push_back({r * std::cos(phi), r * std::sin(phi), z});
        q.weights.push_back(2.0 * kPi / static_cast<double>(count));
    }
    return q;
}

double blinn_exponent(double roughness) {
    const double r = std::max(roughness, kMinRoughness);
    return std::max(1.0, 2.0 / (r * r) - 2.0);
}

Vec3 specular_pixel(double roughness, Vec3 view_local, const float* env_pixel, const Quadrature& quad) {
    const double p = blinn_exponent(roughness);
    const double norm_factor = (p + 8.0) / (8.0 * kPi);
    double acc[3] = {0, 0, 0};
    for (std::size_t j = 0; j < quad.size(); ++j) {
        const Vec3& w = quad.directions[j];
        const Vec3 h = w + view_local;
        const double hl = norm(h);
        if (hl <= 0.0) continue;
        const double nh = std::max(0.0, h.z / hl);
        const double lobe = std::pow(nh, p) * norm_factor * std::max(0.0, w.z) * quad.weights[j];
        for (int c = 0; c < 3; ++c) acc[c] += env_pixel[j * 3 + static_cast<std::size_t>(c)] * lobe;
    }
    return {kSpecularF0 * acc[0], kSpecularF0 * acc[1], kSpecularF0 * acc[2]};
}

DiffuseResult render_diffuse(const TensorF& albedo, const TensorF& normal, const TensorF& env, const Quadrature& quad) {
    const std::size_t H = normal.dim(1), W = normal.dim(2), C = quad.size();
    require(env.shape() == Shape{H, W, C, 3} && albedo.shape() == Shape{3, H, W}, ErrorKind::shape,
            "render_diffuse: misaligned albedo/normal/environment tensors");
    DiffuseResult r{TensorF({3, H, W}), TensorF({3, H, W})};
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            // directions are stored in the pixel's normal frame, so N . w_j is the local z
            const float* e = env.data() + ((y * W + x) * C) * 3;
            double s[3] = {0, 0, 0};
            for (std::size_t j = 0; j < C; ++j) {
                const double cw = std::max(0.0, quad.directions[j].z) * quad.weights[j];
                for (int c = 0; c < 3; ++c) s[c] += e[j * 3 + static_cast<std::size_t>(c)] * cw;
            }
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t k = (c * H + y) * W + x;
                r.shading[k] = static_cast<float>(s[c]);
                r.diffuse[k] = static_cast<float>(albedo[k] / kPi * s[c]);
            }
        }
    }
    return r;
}

TensorF render_specular(const TensorF& roughness, const TensorF& normal, const TensorF& env, const TensorF& view,
                        const Quadrature& quad) {
    const std::size_t H = normal.dim(1), W = normal.dim(2), C = quad.size();
    require(env.shape() == Shape{H, W, C, 3} && view.shape() == normal.shape() && roughness.shape() == Shape{1, H, W},
            ErrorKind::shape, "render_specular: misaligned tensors");
    TensorF out({3, H, W});
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const Frame f = Frame::around(pixel_vec(normal, y, x));
            const Vec3 v = f.to_local(pixel_vec(view, y, x));
            const Vec3 s = specular_pixel(roughness[y * W + x], v, env.data() + ((y * W + x) * C) * 3, quad);
            out[(0 * H + y) * W + x] = static_cast<float>(s.x);
            out[(1 * H + y) * W + x] = static_cast<float>(s.y);
            out[(2 * H + y) * W + x] = static_cast<float>(s.z);
        }
    }
    return out;
}

void render(SceneTensors& scene, const Quadrature& quad) {
    DiffuseResult d = render_diffuse(scene.albedo, scene.normal, scene.env, quad);
    scene.shading = std::move(d.shading);
    scene.diffuse = std::move(d.diffuse);
    scene.specular = render_specular(scene.roughness, scene.normal, scene.env, scene.view, quad);
    scene.image = TensorF(scene.diffuse.shape());
    for (std::size_t i = 0; i < scene.image.numel(); ++i) {
        scene.image[i] = scene.diffuse[i] + scene.specular[i];
    }
}

Vec3 local_view(const SceneTensors& scene, std::size_t y, std::size_t x) {
    return Frame::around(pixel_vec(scene.normal, y, x)).to_local(pixel_vec(scene.view, y, x));
}

SceneTensors gen_scene(std::uint64_t seed, const SceneConfig& cfg) {
    require(cfg.height >= 2 && cfg.width >= 2, ErrorKind::invalid_argument, "scene resolution must be at least 2x2");
    require(cfg.min_anchors >= 1 && cfg.max_anchors <= 4 && cfg.min_anchors <= cfg.max_anchors,
            ErrorKind::invalid_argument, "anchor count must lie in [1, 4]");
    Rng rng = make_stream(seed, "scene");
    const std::size_t H = cfg.height, W = cfg.width, C = cfg.directions;
    const Quadrature quad = hemisphere_quadrature(C);

    SceneTensors s;
    s.seed = seed;
    s.normal = TensorF({3, H, W});
    s.depth = TensorF({1, H, W});
    s.albedo = TensorF({3, H, W});
    s.roughness = TensorF({1, H, W});
    s.env = TensorF({H, W, C, 3});
    s.view = TensorF({3, H, W});

    // Height field: a tilted plane plus a few Gaussian bumps, in pixel units.
    const double base = std::exp(uniform(rng, std::log(1.0), std::log(5.0)));
    const double tilt_x = uniform(rng, -0.03, 0.03), tilt_y = uniform(rng, -0.03, 0.03);
    struct Bump {
        double cx, cy, sigma, amp;
    };
    std::vector<Bump> bumps(static_cast<std::size_t>(uniform_int(rng, 1, 4)));
    for (Bump& b : bumps) {
        b = {uniform(rng, 0, static_cast<double>(W)), uniform(rng, 0, static_cast<double>(H)),
             uniform(rng, 1.5, 5.0), uniform(rng, -4.0, 4.0)};
    }
    auto height_at = [&](double x, double y) {
        double h = tilt_x * x + tilt_y * y;
        for (const Bump& b : bumps) {
            const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            h += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
        }
        return h;
    };
    // pixel footprint at the base depth converts height units to meters
    const double tan_half = std::tan(cfg.fov_degrees * kPi / 360.0);
    const double pixel_m = 2.0 * base * tan_half / static_cast<double>(H);

    // Piecewise-constant materials over Voronoi regions.
    struct Region {
        double cx, cy;
        std::array<double, 3> albedo;
        double roughness;
    };
    std::vector<Region> regions(static_cast<std::size_t>(uniform_int(rng, cfg.min_regions, cfg.max_regions)));
    for (Region& r : regions) {
        r.cx = uniform(rng, 0, static_cast<double>(W));
        r.cy = uniform(rng, 0, static_cast<double>(H));
        const double luminance = uniform(rng, 0.15, 0.9);
        for (double& a : r.albedo) a = std::clamp(luminance * uniform(rng, 0.6, 1.2), 0.02, 1.0);
        r.roughness = uniform(rng, 0.1, 1.0);
    }

    // Lighting anchors at the four image corners.
    const int anchor_count = uniform_int(rng, cfg.min_anchors, cfg.max_anchors);
    std::vector<Anchor> anchors;
    for (int i = 0; i < anchor_count; ++i) anchors.push_back(random_anchor(rng, cfg));
    std::array<std::size_t, 4> corner_anchor{};
    for (std::size_t k = 0; k < 4; ++k) corner_anchor[k] = k % static_cast<std::size_t>(anchor_count);
    std::shuffle(corner_anchor.begin(), corner_anchor.end(), rng);

    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            const double dhdx = (height_at(px + 0.5, py) - height_at(px - 0.5, py)) * 0.25;
            const double dhdy = (height_at(px, py + 0.5) - height_at(px, py - 0.5)) * 0.25;
            // image y grows downwards while world y grows upwards
            const Vec3 n = normalize({-dhdx, dhdy, 1.0});
            const double h = height_at(px, py);
            const double depth = std::clamp(base - h * pixel_m, cfg.depth_min * 1.05, cfg.depth_max * 0.95);

            const Vec3 ray = normalize({(2.0 * px / static_cast<double>(W) - 1.0) * tan_half *
                                            static_cast<double>(W) / static_cast<double>(H),
                                        (1.0 - 2.0 * py / static_cast<double>(H)) * tan_half, -1.0});
            const Vec3 v = -1.0 * ray;
            const std::size_t k = y * W + x;
            s.normal[0 * H * W + k] = static_cast<float>(n.x);
            s.normal[1 * H * W + k] = static_cast<float>(n.y);
            s.normal[2 * H * W + k] = static_cast<float>(n.z);
            s.view[0 * H * W + k] = static_cast<float>(v.x);
            s.view[1 * H * W + k] = static_cast<float>(v.y);
            s.view[2 * H * W + k] = static_cast<float>(v.z);
            s.depth[k] = static_cast<float>(depth);

            const Region* best = &regions[0];
            double best_d = 1e300;
            for (const Region& r : regions) {
                const double d = (px - r.cx) * (px - r.cx) + (py - r.cy) * (py - r.cy);
                if (d < best_d) {
                    best_d = d;
                    best = &r;
                }
            }
            for (std::size_t c = 0; c < 3; ++c) s.albedo[c * H * W + k] = static_cast<float>(best->albedo[c]);
            s.roughness[k] = static_cast<float>(best->roughness);

            // bilinear blend of the corner anchors, sampled over the normal's hemisphere
            const double u = W > 1 ? static_cast<double>(x) / static_cast<double>(W - 1) : 0.0;
            const double t = H > 1 ? static_cast<double>(y) / static_cast<double>(H - 1) : 0.0;
            const double wc[4] = {(1 - u) * (1 - t), u * (1 - t), (1 - u) * t, u * t};
            const Frame f = Frame::around(n);
            float* e = s.env.data() + k * C * 3;
            for (std::size_t j = 0; j < C; ++j) {
                const Vec3 w = f.to_world(quad.directions[j]);
                double rad[3] = {0, 0, 0};
                for (std::size_t q = 0; q < 4; ++q) {
                    const auto r = anchors[corner_anchor[q]].radiance(w);
                    for (std::size_t c = 0; c < 3; ++c) rad[c] += wc[q] * r[c];
                }
                for (std::size_t c = 0; c < 3; ++c) e[j * 3 + c] = static_cast<float>(rad[c]);
            }
        }
    }
    render(s, quad);
    return s;
}

void validate_scene(const SceneTensors& s) {
    const std::size_t H = s.height(), W = s.width();
    for (std::size_t k = 0; k < H * W; ++k) {
        const double n = std::sqrt(double(s.normal[k]) * s.normal[k] + double(s.normal[H * W + k]) * s.normal[H * W + k] +
                                   double(s.normal[2 * H * W + k]) * s.normal[2 * H * W + k]);
        require(std::abs(n - 1.0) <= 1e-5, ErrorKind::numeric, "normal is not unit length");
        require(s.depth[k] > 0.0f, ErrorKind::numeric, "depth must be positive");
        require(s.roughness[k] >= 0.0f && s.roughness[k] <= 1.0f, ErrorKind::numeric, "roughness outside [0,1]");
        for (std::size_t c = 0; c < 3; ++c) {
            const float a = s.albedo[c * H * W + k];
            require(a >= 0.0f && a <= 1.0f, ErrorKind::numeric, "albedo outside [0,1]");
            const std::size_t i = c * H * W + k;
            require(s.image[i] >= 0.0f && std::abs(s.image[i] - (s.diffuse[i] + s.specular[i])) <= 1e-5f * (1 + s.image[i]),
                    ErrorKind::numeric, "image is not diffuse + specular");
        }
    }
    for (float e : s.env.values()) {
        require(std::isfinite(e) && e >= 0.0f, ErrorKind::numeric, "environment radiance must be finite and >= 0");
    }
}

}  // namespace cwdiff
