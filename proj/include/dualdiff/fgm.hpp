#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/scene.hpp"

namespace dualdiff {

inline constexpr double kProjectionZEps = 1e-6;

/// Axis-aligned hull of a projected box in latent pixels, clipped to [0,U]x[0,V].
struct ProjectedBox {
    std::size_t source = 0;
    double u_min = 0, v_min = 0, u_max = 0, v_max = 0;

    double area() const { return (u_max - u_min) * (v_max - v_min); }
};

/// Corners with camera z <= kProjectionZEps are dropped. Returns nothing when
/// no corner survives or the clipped hull is empty.
std::optional<ProjectedBox> project_box(const BoundingBox3D& box, const Camera& cam, std::int64_t U,
                                        std::int64_t V, std::size_t source = 0);

/// Per-pixel weights, row-major [V, U]. Background is 1, covered pixels
/// 2 - a/(U*V) with a the smallest covering hull area.
struct ForegroundMask {
    std::int64_t U = 0, V = 0;
    std::vector<double> weights;

    double at(std::int64_t u, std::int64_t v) const { return weights[static_cast<std::size_t>(v * U + u)]; }
    Tensor as_tensor(DType dtype) const;  // [V, U]
};

/// A pixel is covered when its center lies in the half-open hull.
ForegroundMask build_mask(std::span<const ProjectedBox> boxes, std::int64_t U, std::int64_t V);

/// Mask from the scene's foreground boxes seen by one camera.
ForegroundMask scene_mask(const Scene& scene, std::size_t cam_index, std::int64_t U, std::int64_t V);

/// mean(m * (eps_pred - eps_true)^2) over [..., V, U] tensors; the mask is
/// broadcast over every leading axis.
ad::Var masked_mse(const ad::Var& eps_true, const ad::Var& eps_pred, const ForegroundMask& mask);

/// ASCII PGM of round(weight * 10000) with maxval 20000.
void write_mask_pgm(const std::filesystem::path& path, const ForegroundMask& mask);
/// Raw little-endian f32 weights, row-major [V, U].
void write_mask_f32(const std::filesystem::path& path, const ForegroundMask& mask);

}  // namespace dualdiff
