#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/nn.hpp"
#include "dualdiff/params.hpp"
#include "dualdiff/scene.hpp"

namespace dualdiff {

/// N equidistant depths from near to far along each ray.
struct SamplingPlan {
    std::int64_t N = 32;
    double near = 0.25;
    double far = 36.0;

    double depth(std::int64_t k) const {
        return near + static_cast<double>(k) * (far - near) / static_cast<double>(N - 1);
    }
};

// Throws std::invalid_argument unless N >= 2 and 0 < near < far.
void validate_plan(const SamplingPlan& plan);
/// N = 32, near = half a voxel, far = grid diagonal.
SamplingPlan default_plan(const OccupancyGrid& grid);

/// origin + direction * depth(k) for k in [0, N).
std::vector<Vec3> sample_ray(const Ray& ray, const SamplingPlan& plan);

enum class OrsFilter : std::uint8_t { full, foreground, background };
const char* ors_filter_name(OrsFilter f);

/// Per-pixel label columns, entry (v * U + u) * N + k.
struct OrsFeature {
    std::int64_t U = 0, V = 0, N = 0;
    std::vector<std::uint8_t> labels;
    SamplingPlan plan;
    std::size_t camera_index = 0;
    OrsFilter filter = OrsFilter::full;

    std::uint8_t at(std::int64_t u, std::int64_t v, std::int64_t k) const {
        return labels[static_cast<std::size_t>((v * U + u) * N + k)];
    }
};

/// Parallel over pixels; bit-identical to reference::render_ors.
OrsFeature render_ors(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan,
                      OrsFilter filter = OrsFilter::full);

/// Entry-wise merge of foreground and background features; throws if both
/// are non-zero anywhere.
OrsFeature merge_ors(const OrsFeature& fg, const OrsFeature& bg);

// Flat dump: "DORS", U, V, N as u32 little-endian, then the labels.
void write_dors(const std::filesystem::path& path, const OrsFeature& feature);
OrsFeature read_dors(const std::filesystem::path& path);
/// Most frequent non-empty class per pixel (ties to the lower id), 0 when the
/// column is empty, scaled to 8 bits.
std::vector<std::uint8_t> ors_class_image(const OrsFeature& feature, int num_classes);

/// Learned embedding of label columns: per-class vectors (class 0 pinned to
/// zero) concatenated over depth, then a linear projection to `width`.
struct OrsEmbedding {
    ad::Var class_rows;  // [num_classes - 1, c_emb], classes 1..C-1
    nn::Linear projection;
    std::int64_t num_classes = 0;
    std::int64_t c_emb = 0;
    std::int64_t samples = 0;

    /// [U*V, width] tokens in pixel order v * U + u.
    ad::Var operator()(const OrsFeature& feature) const;
};

OrsEmbedding make_ors_embedding(ParameterStore& store, const std::string& name, std::int64_t num_classes,
                                std::int64_t c_emb, std::int64_t samples, std::int64_t width);

namespace reference {

/// Naive loop: pixel_ray, sample_ray and query_grid on the filtered grid.
OrsFeature render_ors(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan, OrsFilter filter);

}  // namespace reference

}  // namespace dualdiff
