#include "dualdiff/fgm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "dualdiff/scene_io.hpp"

namespace dualdiff {

std::optional<ProjectedBox> project_box(const BoundingBox3D& box, const Camera& cam, std::int64_t U,
                                        std::int64_t V, std::size_t source) {
    validate_camera(cam);
    const double su = static_cast<double>(U) / static_cast<double>(cam.width);
    const double sv = static_cast<double>(V) / static_cast<double>(cam.height);
    ProjectedBox out;
    out.source = source;
    out.u_min = out.v_min = std::numeric_limits<double>::infinity();
    out.u_max = out.v_max = -std::numeric_limits<double>::infinity();
    int kept = 0;
    for (const Vec3& p : box.corners) {
        double u = 0, v = 0;
        if (!project_point(cam, p, kProjectionZEps, u, v)) continue;
        ++kept;
        out.u_min = std::min(out.u_min, u * su);
        out.u_max = std::max(out.u_max, u * su);
        out.v_min = std::min(out.v_min, v * sv);
        out.v_max = std::max(out.v_max, v * sv);
    }
    if (kept == 0) return std::nullopt;
    out.u_min = std::clamp(out.u_min, 0.0, static_cast<double>(U));
    out.u_max = std::clamp(out.u_max, 0.0, static_cast<double>(U));
    out.v_min = std::clamp(out.v_min, 0.0, static_cast<double>(V));
    out.v_max = std::clamp(out.v_max, 0.0, static_cast<double>(V));
    if (!(out.u_max > out.u_min && out.v_max > out.v_min)) return std::nullopt;
    return out;
}

Tensor ForegroundMask::as_tensor(DType dtype) const { return Tensor::from({V, U}, weights, dtype); }

ForegroundMask build_mask(std::span<const ProjectedBox> boxes, std::int64_t U, std::int64_t V) {
    if (U < 1 || V < 1) throw std::invalid_argument("build_mask: empty latent");
    ForegroundMask m{U, V, std::vector<double>(static_cast<std::size_t>(U * V), 1.0)};
    std::vector<double> best(m.weights.size(), std::numeric_limits<double>::infinity());
    for (const ProjectedBox& b : boxes) {
        const double a = b.area();
        // Pixel u is covered iff u_min <= u + 0.5 < u_max.
        const auto u0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(b.u_min - 0.5)));
        const auto u1 = std::min<std::int64_t>(U, static_cast<std::int64_t>(std::ceil(b.u_max - 0.5)));
        const auto v0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(b.v_min - 0.5)));
        const auto v1 = std::min<std::int64_t>(V, static_cast<std::int64_t>(std::ceil(b.v_max - 0.5)));
        for (std::int64_t v = v0; v < v1; ++v)
            for (std::int64_t u = u0; u < u1; ++u) {
                double& cur = best[static_cast<std::size_t>(v * U + u)];
                cur = std::min(cur, a);
            }
    }
    const double total = static_cast<double>(U * V);
    for (std::size_t i = 0; i < best.size(); ++i)
        if (std::isfinite(best[i])) m.weights[i] = 2.0 - best[i] / total;
    return m;
}

ForegroundMask scene_mask(const Scene& scene, std::size_t cam_index, std::int64_t U, std::int64_t V) {
    if (cam_index >= scene.cameras.size()) throw std::out_of_range("scene_mask: camera index out of range");
    std::vector<ProjectedBox> projected;
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
        if (!scene.taxonomy.is_foreground(scene.boxes[i].category)) continue;
        if (auto p = project_box(scene.boxes[i], scene.cameras[cam_index], U, V, i)) projected.push_back(*p);
    }
    return build_mask(projected, U, V);
}

ad::Var masked_mse(const ad::Var& eps_true, const ad::Var& eps_pred, const ForegroundMask& mask) {
    const Shape& s = eps_pred.shape();
    if (eps_true.shape() != s || s.size() < 2 || s[s.size() - 2] != mask.V || s[s.size() - 1] != mask.U)
        throw ShapeError("masked_mse: eps " + shape_str(eps_true.shape()) + " / " + shape_str(s) + " vs mask [" +
                         std::to_string(mask.V) + ", " + std::to_string(mask.U) + "]");
    const ad::Var diff = ad::sub(eps_pred, eps_true);
    return ad::mean(ad::mul(ad::mul(diff, diff), ad::constant(mask.as_tensor(eps_pred.dtype()))));
}

void write_mask_pgm(const std::filesystem::path& path, const ForegroundMask& mask) {
    std::vector<std::uint16_t> px(mask.weights.size());
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<std::uint16_t>(std::lround(mask.weights[i] * 10000.0));
    write_pgm_ascii(path, mask.U, mask.V, 20000, px);
}

void write_mask_f32(const std::filesystem::path& path, const ForegroundMask& mask) {
    static_assert(std::endian::native == std::endian::little);
    std::vector<char> bytes(mask.weights.size() * 4);
    for (std::size_t i = 0; i < mask.weights.size(); ++i) {
        const auto f = static_cast<float>(mask.weights[i]);
        std::memcpy(bytes.data() + 4 * i, &f, 4);
    }
    write_file(path, bytes);
}

}  // namespace dualdiff
