#include "dualdiff/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualdiff {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Parametric interval of the ray inside the grid box, clipped to [0, far].
bool clip_to_grid(const OccupancyGrid& grid, const Ray& ray, double far, double& t0, double& t1) {
    const Vec3 lo = grid.origin, hi = grid.upper();
    t0 = 0.0;
    t1 = far;
    for (int a = 0; a < 3; ++a) {
        const double o = ray.origin[a], d = ray.direction[a];
        if (d == 0.0) {
            if (o < lo[a] || o >= hi[a]) return false;
            continue;
        }
        double ta = (lo[a] - o) / d, tb = (hi[a] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t0 <= t1;
}

}  // namespace

void traverse_ray(const OccupancyGrid& grid, const Ray& ray, double far,
                  const std::function<bool(std::int64_t, std::int64_t, std::int64_t, double)>& visit) {
    double t_enter, t_end;
    if (!clip_to_grid(grid, ray, far, t_enter, t_end)) return;
    const std::array<std::int64_t, 3> dims{grid.H, grid.W, grid.D};
    const double e = grid.voxel_size;
    std::array<std::int64_t, 3> cell{}, step{};
    std::array<double, 3> t_max{}, t_delta{};
    for (int a = 0; a < 3; ++a) {
        const double p = ray.origin[a] + ray.direction[a] * t_enter;
        const double f = std::floor((p - grid.origin[a]) / e);
        cell[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::clamp(f, -1.0, 1e9)), 0, dims[a] - 1);
        const double d = ray.direction[a];
        if (d > 0.0) {
            step[a] = 1;
            t_max[a] = (grid.origin[a] + static_cast<double>(cell[a] + 1) * e - ray.origin[a]) / d;
            t_delta[a] = e / d;
        } else if (d < 0.0) {
            step[a] = -1;
            t_max[a] = (grid.origin[a] + static_cast<double>(cell[a]) * e - ray.origin[a]) / d;
            t_delta[a] = -e / d;
        } else {
            step[a] = 0;
            t_max[a] = kInf;
            t_delta[a] = kInf;
        }
    }
    while (t_enter <= far) {
        if (!visit(cell[0], cell[1], cell[2], t_enter)) return;
        int axis = 0;
        if (t_max[1] < t_max[axis]) axis = 1;
        if (t_max[2] < t_max[axis]) axis = 2;
        t_enter = std::max(t_enter, t_max[axis]);
        cell[axis] += step[axis];
        if (cell[axis] < 0 || cell[axis] >= dims[axis]) return;
        t_max[axis] += t_delta[axis];
    }
}

FirstHit trace_first_hit(const OccupancyGrid& grid, const Ray& ray, double far) {
    FirstHit hit;
    const double e = grid.voxel_size;
    traverse_ray(grid, ray, far, [&](std::int64_t i, std::int64_t j, std::int64_t k, double t) {
        const std::uint8_t label = grid.at(i, j, k);
        if (label == 0) return true;
        // Exit depth of this voxel along the ray.
        double t_exit = kInf;
        const std::array<std::int64_t, 3> c{i, j, k};
        for (int a = 0; a < 3; ++a) {
            const double d = ray.direction[a];
            if (d == 0.0) continue;
            const double face = grid.origin[a] + static_cast<double>(c[a] + (d > 0.0 ? 1 : 0)) * e;
            t_exit = std::min(t_exit, (face - ray.origin[a]) / d);
        }
        hit = {label, t, std::max(0.0, t_exit - t)};
        return false;
    });
    return hit;
}

Rgb shade(const RasterStyle& style, std::uint8_t label, double depth, double far) {
    const double f = std::clamp(1.0 - depth / far, style.min_shade, 1.0);
    const Rgb& c = style.palette[label];
    return {c[0] * f, c[1] * f, c[2] * f};
}

Rgb horizon_color(const RasterStyle& style, const Vec3& direction) {
    const double dz = std::clamp(direction[2], -1.0, 1.0);
    const Rgb& end = dz >= 0.0 ? style.zenith : style.nadir;
    const double a = std::abs(dz);
    return {style.horizon[0] + (end[0] - style.horizon[0]) * a, style.horizon[1] + (end[1] - style.horizon[1]) * a,
            style.horizon[2] + (end[2] - style.horizon[2]) * a};
}

Image rasterize_reference(const Scene& scene, std::size_t cam_index, const RasterStyle& style) {
    if (cam_index >= scene.cameras.size()) throw std::out_of_range("rasterize_reference: camera index out of range");
    const Camera& cam = scene.cameras[cam_index];
    const RayGenerator rays(cam);
    const double far = scene.grid.diagonal();
    Image img{cam.width, cam.height, std::vector<float>(static_cast<std::size_t>(cam.width * cam.height * 3))};
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < cam.height; ++v)
        for (std::int64_t u = 0; u < cam.width; ++u) {
            const Ray ray = rays(static_cast<double>(u), static_cast<double>(v));
            const FirstHit hit = trace_first_hit(scene.grid, ray, far);
            const Rgb c = hit.label ? shade(style, hit.label, hit.depth, far) : horizon_color(style, ray.direction);
            float* px = img.rgb.data() + (v * cam.width + u) * 3;
            for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<float>(c[static_cast<std::size_t>(ch)]);
        }
    return img;
}

Tensor image_to_latent(const Image& image, DType dtype) {
    Tensor t({3, image.height, image.width}, dtype);
    const std::int64_t plane = image.height * image.width;
    dispatch(dtype, [&]<class T>() {
        auto dst = t.data<T>();
        for (std::int64_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c)
                dst[static_cast<std::size_t>(c * plane + p)] =
                    static_cast<T>(2.0 * static_cast<double>(image.rgb[static_cast<std::size_t>(p * 3 + c)]) - 1.0);
    });
    return t;
}

Image latent_to_image(const Tensor& latent) {
    if (latent.rank() != 3 || latent.extent(0) != 3)
        throw ShapeError("latent_to_image: expected [3, V, U], got " + shape_str(latent.shape()));
    Image img{latent.extent(2), latent.extent(1), {}};
    const std::int64_t plane = img.width * img.height;
    img.rgb.resize(static_cast<std::size_t>(plane * 3));
    for (std::int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            img.rgb[static_cast<std::size_t>(p * 3 + c)] =
                static_cast<float>(std::clamp(0.5 * (latent.item(c * plane + p) + 1.0), 0.0, 1.0));
    return img;
}

namespace reference {

FirstHit first_hit_fine_step(const OccupancyGrid& grid, const Ray& ray, double far, double step) {
    for (std::int64_t n = 0;; ++n) {
        const double t = static_cast<double>(n) * step;
        if (t > far) return {};
        const std::uint8_t label = query_grid(grid, ray.origin + ray.direction * t);
        if (label) return {label, t, 0.0};
    }
}

}  // namespace reference

}  // namespace dualdiff
