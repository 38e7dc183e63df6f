#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "dualdiff/scene.hpp"
#include "dualdiff/tensor.hpp"

namespace dualdiff {

using Rgb = std::array<double, 3>;

struct RasterStyle {
    std::array<Rgb, kNumClasses> palette{{{0.0, 0.0, 0.0},
                                          {0.35, 0.35, 0.38},
                                          {0.78, 0.47, 0.30},
                                          {0.22, 0.62, 0.24},
                                          {0.92, 0.88, 0.20},
                                          {0.12, 0.32, 0.95},
                                          {0.95, 0.18, 0.22}}};
    Rgb horizon{0.86, 0.88, 0.92};
    Rgb zenith{0.38, 0.58, 0.90};
    Rgb nadir{0.48, 0.44, 0.40};
    double min_shade = 0.2;
};

/// Row-major RGB image, pixel (u, v) at ((v * width) + u) * 3.
struct Image {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<float> rgb;

    float at(std::int64_t u, std::int64_t v, int c) const {
        return rgb[static_cast<std::size_t>((v * width + u) * 3 + c)];
    }
};

struct FirstHit {
    std::uint8_t label = 0;  // 0 on a miss
    double depth = 0.0;      // ray parameter where the hit voxel is entered
    double chord = 0.0;      // length of the ray inside the hit voxel
};

/// Exact voxel traversal from the ray origin; the first non-empty voxel whose
/// entry depth is at most `far` is returned.
FirstHit trace_first_hit(const OccupancyGrid& grid, const Ray& ray, double far);

/// Visits voxels along the ray in order with their entry depths; the callback
/// returns false to stop.
void traverse_ray(const OccupancyGrid& grid, const Ray& ray, double far,
                  const std::function<bool(std::int64_t, std::int64_t, std::int64_t, double)>& visit);

Rgb shade(const RasterStyle& style, std::uint8_t label, double depth, double far);
Rgb horizon_color(const RasterStyle& style, const Vec3& direction);

/// First-hit rendering of camera `cam_index`; far = grid diagonal.
Image rasterize_reference(const Scene& scene, std::size_t cam_index, const RasterStyle& style = {});

/// Image as a [3, V, U] tensor scaled to [-1, 1].
Tensor image_to_latent(const Image& image, DType dtype);
/// Inverse of image_to_latent with clamping to [0, 1].
Image latent_to_image(const Tensor& latent);

namespace reference {

/// Brute-force marcher: samples every `step` along the ray from depth 0 and
/// returns the first non-empty query_grid label.
FirstHit first_hit_fine_step(const OccupancyGrid& grid, const Ray& ray, double far, double step);

}  // namespace reference

}  // namespace dualdiff
