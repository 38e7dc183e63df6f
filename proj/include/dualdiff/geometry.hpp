#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace dualdiff {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) { return a * (1.0 / norm(a)); }

inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}
inline Vec3 mat_t_vec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}
double determinant(const Mat3& m);
// Throws std::domain_error when |det| is below 1e-12.
Mat3 inverse(const Mat3& m);

class CameraError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Pinhole camera. R maps ego to camera axes (x right, y down, z forward) and
/// t completes the rigid transform x_cam = R x_ego + t.
struct Camera {
    Mat3 K{};
    Mat3 R{};
    Vec3 t{};
    std::int64_t width = 0;   // U
    std::int64_t height = 0;  // V
};

// Checks the intrinsic/extrinsic invariants; throws CameraError naming the field.
void validate_camera(const Camera& cam);

/// Ego-frame camera center -R^T t.
Vec3 camera_center(const Camera& cam);

/// Camera on a vertical mast at `position`, looking along `yaw` (radians from
/// ego +x towards +y) and tilted down by `pitch`. Horizontal field of view
/// `hfov` with the principal point at the image center.
Camera make_camera(const Vec3& position, double yaw, double pitch, double hfov, std::int64_t width,
                   std::int64_t height);

struct Ray {
    Vec3 origin;
    Vec3 direction;  // unit length
};

/// normalize(R^T K^-1 s) for a homogeneous image point s.
Vec3 camera_direction(const Camera& cam, const Vec3& s_img);

/// Ray through the center of pixel (u, v); pixel centers sit at half-integers,
/// so s_img = (u + 0.5, v + 0.5, 1). Continuous coordinates are accepted.
Ray pixel_ray(const Camera& cam, double u, double v);

/// Precomputed K^-1 and R^T for bulk ray generation. Produces results
/// bit-identical to pixel_ray.
class RayGenerator {
   public:
    explicit RayGenerator(const Camera& cam);
    Ray operator()(double u, double v) const;
    const Camera& camera() const { return cam_; }

   private:
    Camera cam_;
    Mat3 k_inv_;
    Vec3 center_;
};

/// Pinhole projection of an ego point; returns false when the camera-frame
/// depth is not above z_eps.
bool project_point(const Camera& cam, const Vec3& p_ego, double z_eps, double& u, double& v);

}  // namespace dualdiff
