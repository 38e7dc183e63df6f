#include "dualdiff/geometry.hpp"

#include <string>

namespace dualdiff {

double determinant(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Mat3 inverse(const Mat3& m) {
    const double det = determinant(m);
    if (!(std::abs(det) > 1e-12)) throw std::domain_error("inverse: singular 3x3 matrix");
    const double s = 1.0 / det;
    return {(m[4] * m[8] - m[5] * m[7]) * s, (m[2] * m[7] - m[1] * m[8]) * s, (m[1] * m[5] - m[2] * m[4]) * s,
            (m[5] * m[6] - m[3] * m[8]) * s, (m[0] * m[8] - m[2] * m[6]) * s, (m[2] * m[3] - m[0] * m[5]) * s,
            (m[3] * m[7] - m[4] * m[6]) * s, (m[1] * m[6] - m[0] * m[7]) * s, (m[0] * m[4] - m[1] * m[3]) * s};
}

void validate_camera(const Camera& cam) {
    const Mat3& K = cam.K;
    if (K[3] != 0.0 || K[6] != 0.0 || K[7] != 0.0 || K[8] != 1.0)
        throw CameraError("K: must be upper triangular with K[2,2] = 1");
    if (!(K[0] > 0.0) || !(K[4] > 0.0)) throw CameraError("K: focal lengths must be positive");
    const Mat3& R = cam.R;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += R[k * 3 + i] * R[k * 3 + j];
            if (std::abs(s - (i == j ? 1.0 : 0.0)) >= 1e-9) throw CameraError("R: not orthonormal");
        }
    if (std::abs(determinant(R) - 1.0) >= 1e-9) throw CameraError("R: determinant is not +1");
    for (double v : cam.t)
        if (!std::isfinite(v)) throw CameraError("t: non-finite component");
    if (cam.width < 1 || cam.height < 1) throw CameraError("image_size: extents must be positive");
}

Vec3 camera_center(const Camera& cam) { return mat_t_vec(cam.R, cam.t) * -1.0; }

Camera make_camera(const Vec3& position, double yaw, double pitch, double hfov, std::int64_t width,
                   std::int64_t height) {
    const Vec3 forward{std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), -std::sin(pitch)};
    const Vec3 right{std::sin(yaw), -std::cos(yaw), 0.0};
    const Vec3 down = cross(forward, right);
    Camera cam;
    cam.R = {right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2]};
    cam.t = mat_vec(cam.R, position) * -1.0;
    const double f = 0.5 * static_cast<double>(width) / std::tan(0.5 * hfov);
    cam.K = {f, 0.0, 0.5 * static_cast<double>(width), 0.0, f, 0.5 * static_cast<double>(height), 0.0, 0.0, 1.0};
    cam.width = width;
    cam.height = height;
    return cam;
}

Vec3 camera_direction(const Camera& cam, const Vec3& s_img) {
    return normalized(mat_t_vec(cam.R, mat_vec(inverse(cam.K), s_img)));
}

RayGenerator::RayGenerator(const Camera& cam) : cam_(cam), k_inv_(inverse(cam.K)), center_(camera_center(cam)) {}

Ray RayGenerator::operator()(double u, double v) const {
    const Vec3 s{u + 0.5, v + 0.5, 1.0};
    return {center_, normalized(mat_t_vec(cam_.R, mat_vec(k_inv_, s)))};
}

Ray pixel_ray(const Camera& cam, double u, double v) {
    if (!(u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 && v < static_cast<double>(cam.height)))
        throw std::out_of_range("pixel_ray: pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                                ") outside the image");
    return RayGenerator(cam)(u, v);
}

bool project_point(const Camera& cam, const Vec3& p_ego, double z_eps, double& u, double& v) {
    const Vec3 pc = mat_vec(cam.R, p_ego) + cam.t;
    if (!(pc[2] > z_eps)) return false;
    const Vec3 h = mat_vec(cam.K, pc);
    u = h[0] / h[2];
    v = h[1] / h[2];
    return true;
}

}  // namespace dualdiff
