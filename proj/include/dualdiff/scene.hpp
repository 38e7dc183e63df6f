#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualdiff/geometry.hpp"

namespace dualdiff {

enum Label : std::uint8_t {
    kEmpty = 0,
    kRoad = 1,
    kBuilding = 2,
    kVegetation = 3,
    kPole = 4,
    kVehicle = 5,
    kPedestrian = 6,
};
inline constexpr int kNumClasses = 7;

struct ClassTaxonomy {
    std::vector<std::string> names;
    std::vector<std::uint8_t> foreground;
    std::vector<std::uint8_t> background;

    int num_classes() const { return static_cast<int>(names.size()); }
    bool is_foreground(std::uint8_t label) const;
    bool is_background(std::uint8_t label) const;
};

/// Fixed taxonomy: foreground {vehicle, pedestrian}, everything else but
/// empty is background.
const ClassTaxonomy& default_taxonomy();
// Throws std::invalid_argument when the partition invariants fail.
void validate_taxonomy(const ClassTaxonomy& taxonomy);

/// Semantic voxel volume in the ego frame, index (i*W + j)*D + k.
struct OccupancyGrid {
    std::int64_t H = 0, W = 0, D = 0;
    Vec3 origin{};
    double voxel_size = 1.0;
    std::vector<std::uint8_t> labels;

    OccupancyGrid() = default;
    OccupancyGrid(std::int64_t h, std::int64_t w, std::int64_t d, Vec3 origin, double voxel_size);

    std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return static_cast<std::size_t>((i * W + j) * D + k);
    }
    std::uint8_t at(std::int64_t i, std::int64_t j, std::int64_t k) const { return labels[index(i, j, k)]; }
    std::uint8_t& at(std::int64_t i, std::int64_t j, std::int64_t k) { return labels[index(i, j, k)]; }
    Vec3 upper() const;
    Vec3 voxel_center(std::int64_t i, std::int64_t j, std::int64_t k) const;
    double diagonal() const;
};

/// Label at floor((p - origin) / voxel_size); 0 outside the grid.
std::uint8_t query_grid(const OccupancyGrid& grid, const Vec3& p);

/// Copy of the grid with labels outside `keep` replaced by 0.
OccupancyGrid filter_grid(const OccupancyGrid& grid, std::span<const std::uint8_t> keep);

/// Cuboid with corners in Gray-code sign order over (x, y, z) of the box frame:
/// (-,-,-) (-,-,+) (-,+,+) (-,+,-) (+,+,-) (+,+,+) (+,-,+) (+,-,-).
struct BoundingBox3D {
    std::uint8_t category = kVehicle;
    std::array<Vec3, 8> corners{};
};

inline constexpr std::array<std::array<int, 3>, 8> kCornerSigns{{{-1, -1, -1},
                                                                 {-1, -1, 1},
                                                                 {-1, 1, 1},
                                                                 {-1, 1, -1},
                                                                 {1, 1, -1},
                                                                 {1, 1, 1},
                                                                 {1, -1, 1},
                                                                 {1, -1, -1}}};

BoundingBox3D make_box(std::uint8_t category, const Vec3& center, const Vec3& size, double yaw);
// True when the corners form a rectangular cuboid within tol.
bool is_cuboid(const BoundingBox3D& box, double tol = 1e-6);
bool box_contains(const BoundingBox3D& box, const Vec3& p, double tol = 1e-9);

enum class MapCategory : std::uint8_t { crossing = 0, divider = 1, boundary = 2 };
inline constexpr int kNumMapCategories = 3;
const char* map_category_name(MapCategory c);
MapCategory parse_map_category(const std::string& name);

inline constexpr std::size_t kPolylinePoints = 8;

struct MapPolyline {
    MapCategory category = MapCategory::divider;
    std::array<Vec3, kPolylinePoints> points{};
};

/// Arc-length uniform resampling to 8 points; endpoints kept exactly.
std::array<Vec3, kPolylinePoints> resample_polyline(std::span<const Vec3> points);

/// Fixed prompt vocabulary; prompts are token id sequences.
const std::vector<std::string>& prompt_vocabulary();

struct Scene {
    OccupancyGrid grid;
    ClassTaxonomy taxonomy;
    std::vector<BoundingBox3D> boxes;
    std::vector<MapPolyline> map;
    std::vector<Camera> cameras;
    std::vector<std::int64_t> prompt;
    std::uint64_t seed = 0;
};

struct IntRange {
    int min = 0;
    int max = 0;
};

struct GeneratorSpec {
    std::int64_t H = 64, W = 32, D = 8;
    double voxel_size = 0.5;
    IntRange vehicles{0, 6};
    IntRange buildings{0, 6};
    IntRange pedestrians{0, 3};
    IntRange trees{0, 4};
    IntRange poles{0, 4};
    int cameras = 4;
    std::int64_t image_width = 32;
    std::int64_t image_height = 32;
    double camera_height = 1.6;
    double camera_pitch = 0.15;
    double camera_hfov = 1.5707963267948966;
    double road_half_width = 3.5;
};

class GeneratorError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Throws GeneratorError with a diagnostic for out-of-bounds or infeasible specs.
void validate_spec(const GeneratorSpec& spec);
/// Deterministic in (seed, spec).
Scene generate_scene(std::uint64_t seed, const GeneratorSpec& spec);

}  // namespace dualdiff
