#include "dualdiff/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dualdiff {

bool ClassTaxonomy::is_foreground(std::uint8_t label) const {
    return std::find(foreground.begin(), foreground.end(), label) != foreground.end();
}

bool ClassTaxonomy::is_background(std::uint8_t label) const {
    return std::find(background.begin(), background.end(), label) != background.end();
}

const ClassTaxonomy& default_taxonomy() {
    static const ClassTaxonomy taxonomy{
        {"empty", "road", "building", "vegetation", "pole", "vehicle", "pedestrian"},
        {kVehicle, kPedestrian},
        {kRoad, kBuilding, kVegetation, kPole},
    };
    return taxonomy;
}

void validate_taxonomy(const ClassTaxonomy& taxonomy) {
    const int n = taxonomy.num_classes();
    if (n < 2 || n > 256) throw std::invalid_argument("taxonomy: class count must be in [2, 256]");
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    auto mark = [&](std::span<const std::uint8_t> set, const char* which) {
        for (std::uint8_t c : set) {
            if (c == 0) throw std::invalid_argument(std::string("taxonomy: ") + which + " contains class 0");
            if (c >= n) throw std::invalid_argument(std::string("taxonomy: ") + which + " class out of range");
            if (seen[c]++) throw std::invalid_argument("taxonomy: class " + std::to_string(c) + " listed twice");
        }
    };
    mark(taxonomy.foreground, "foreground");
    mark(taxonomy.background, "background");
    for (int c = 1; c < n; ++c)
        if (!seen[static_cast<std::size_t>(c)])
            throw std::invalid_argument("taxonomy: class " + std::to_string(c) + " in neither set");
}

OccupancyGrid::OccupancyGrid(std::int64_t h, std::int64_t w, std::int64_t d, Vec3 o, double e)
    : H(h), W(w), D(d), origin(o), voxel_size(e) {
    if (h < 1 || w < 1 || d < 1) throw std::invalid_argument("OccupancyGrid: extents must be positive");
    if (!(e > 0.0)) throw std::invalid_argument("OccupancyGrid: voxel_size must be positive");
    labels.assign(static_cast<std::size_t>(h * w * d), 0);
}

Vec3 OccupancyGrid::upper() const {
    return {origin[0] + static_cast<double>(H) * voxel_size, origin[1] + static_cast<double>(W) * voxel_size,
            origin[2] + static_cast<double>(D) * voxel_size};
}

Vec3 OccupancyGrid::voxel_center(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return {origin[0] + (static_cast<double>(i) + 0.5) * voxel_size,
            origin[1] + (static_cast<double>(j) + 0.5) * voxel_size,
            origin[2] + (static_cast<double>(k) + 0.5) * voxel_size};
}

double OccupancyGrid::diagonal() const { return norm(upper() - origin); }

std::uint8_t query_grid(const OccupancyGrid& grid, const Vec3& p) {
    const double fi = std::floor((p[0] - grid.origin[0]) / grid.voxel_size);
    const double fj = std::floor((p[1] - grid.origin[1]) / grid.voxel_size);
    const double fk = std::floor((p[2] - grid.origin[2]) / grid.voxel_size);
    if (!(fi >= 0.0 && fi < static_cast<double>(grid.H))) return 0;
    if (!(fj >= 0.0 && fj < static_cast<double>(grid.W))) return 0;
    if (!(fk >= 0.0 && fk < static_cast<double>(grid.D))) return 0;
    return grid.at(static_cast<std::int64_t>(fi), static_cast<std::int64_t>(fj), static_cast<std::int64_t>(fk));
}

OccupancyGrid filter_grid(const OccupancyGrid& grid, std::span<const std::uint8_t> keep) {
    std::array<std::uint8_t, 256> lut{};
    for (std::uint8_t c : keep) lut[c] = c;
    OccupancyGrid out = grid;
    for (auto& l : out.labels) l = lut[l];
    return out;
}

BoundingBox3D make_box(std::uint8_t category, const Vec3& center, const Vec3& size, double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    BoundingBox3D box;
    box.category = category;
    for (std::size_t n = 0; n < 8; ++n) {
        const double lx = 0.5 * size[0] * kCornerSigns[n][0];
        const double ly = 0.5 * size[1] * kCornerSigns[n][1];
        const double lz = 0.5 * size[2] * kCornerSigns[n][2];
        box.corners[n] = {center[0] + c * lx - s * ly, center[1] + s * lx + c * ly, center[2] + lz};
    }
    return box;
}

namespace {

struct BoxFrame {
    Vec3 base;
    std::array<Vec3, 3> axes;  // edges from corner (-,-,-) along x, y, z
};

BoxFrame box_frame(const BoundingBox3D& box) {
    const Vec3& c0 = box.corners[0];
    return {c0, {box.corners[7] - c0, box.corners[3] - c0, box.corners[1] - c0}};
}

}  // namespace

bool is_cuboid(const BoundingBox3D& box, double tol) {
    const BoxFrame f = box_frame(box);
    for (const Vec3& a : f.axes)
        if (!(norm(a) > tol)) return false;
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b)
            if (std::abs(dot(f.axes[a], f.axes[b])) > tol * norm(f.axes[a]) * norm(f.axes[b])) return false;
    for (std::size_t n = 0; n < 8; ++n) {
        Vec3 expect = f.base;
        for (int a = 0; a < 3; ++a)
            if (kCornerSigns[n][a] > 0) expect = expect + f.axes[a];
        if (norm(expect - box.corners[n]) > tol) return false;
    }
    return true;
}

bool box_contains(const BoundingBox3D& box, const Vec3& p, double tol) {
    const BoxFrame f = box_frame(box);
    const Vec3 d = p - f.base;
    for (const Vec3& a : f.axes) {
        const double s = dot(d, a) / dot(a, a);
        if (s < -tol || s > 1.0 + tol) return false;
    }
    return true;
}

const char* map_category_name(MapCategory c) {
    switch (c) {
        case MapCategory::crossing: return "crossing";
        case MapCategory::divider: return "divider";
        case MapCategory::boundary: return "boundary";
    }
    return "?";
}

MapCategory parse_map_category(const std::string& name) {
    for (int c = 0; c < kNumMapCategories; ++c)
        if (name == map_category_name(static_cast<MapCategory>(c))) return static_cast<MapCategory>(c);
    throw std::invalid_argument("unknown map category '" + name + "'");
}

std::array<Vec3, kPolylinePoints> resample_polyline(std::span<const Vec3> points) {
    if (points.size() < 2) throw std::invalid_argument("resample_polyline: need at least 2 points");
    std::vector<double> cum(points.size(), 0.0);
    for (std::size_t i = 1; i < points.size(); ++i) cum[i] = cum[i - 1] + norm(points[i] - points[i - 1]);
    const double total = cum.back();
    if (!(total > 0.0)) throw std::invalid_argument("resample_polyline: all points identical");
    std::array<Vec3, kPolylinePoints> out;
    out.front() = points.front();
    out.back() = points.back();
    std::size_t seg = 0;
    for (std::size_t n = 1; n + 1 < kPolylinePoints; ++n) {
        const double s = total * static_cast<double>(n) / static_cast<double>(kPolylinePoints - 1);
        while (seg + 2 < points.size() && cum[seg + 1] < s) ++seg;
        const double len = cum[seg + 1] - cum[seg];
        const double a = len > 0.0 ? (s - cum[seg]) / len : 0.0;
        out[n] = points[seg] + (points[seg + 1] - points[seg]) * a;
    }
    return out;
}

const std::vector<std::string>& prompt_vocabulary() {
    static const std::vector<std::string> vocab{"a",     "street",    "scene",       "with",      "no",    "few",
                                                "many",  "cars",      "and",         "buildings", "trees", "poles",
                                                "pedestrians", "crosswalk", "day", "empty"};
    return vocab;
}

namespace {

constexpr std::int64_t kVehicleLength = 8;  // voxels along x
constexpr std::int64_t kVehicleWidth = 4;
constexpr std::int64_t kVehicleHeight = 3;
constexpr std::int64_t kSlotPitch = 10;
constexpr std::int64_t kEgoHalfLength = 6;

struct Layout {
    std::int64_t j_mid;       // first voxel with y >= 0
    std::int64_t road_half;   // road half width in voxels
    std::int64_t side_start;  // distance from j_mid where building strips begin
    std::vector<std::int64_t> slot_starts;
};

Layout layout_for(const GeneratorSpec& spec) {
    Layout l;
    l.j_mid = spec.W / 2;
    l.road_half = static_cast<std::int64_t>(std::llround(spec.road_half_width / spec.voxel_size));
    l.side_start = l.road_half + 3;
    const std::int64_t ego_lo = spec.H / 2 - kEgoHalfLength, ego_hi = spec.H / 2 + kEgoHalfLength;
    for (std::int64_t x = 0; x + kVehicleLength + 1 <= spec.H; x += kSlotPitch)
        if (x + kVehicleLength + 1 <= ego_lo || x >= ego_hi) l.slot_starts.push_back(x);
    return l;
}

std::int64_t road_capacity(const GeneratorSpec& spec) {
    const Layout l = layout_for(spec);
    if (l.road_half < kVehicleWidth + 2 || spec.D < kVehicleHeight + 1) return 0;
    return 2 * static_cast<std::int64_t>(l.slot_starts.size());
}

void check_range(const IntRange& r, int hi, const char* name) {
    if (r.min < 0 || r.max < r.min || r.max > hi)
        throw GeneratorError(std::string("spec.") + name + ": range [" + std::to_string(r.min) + ", " +
                             std::to_string(r.max) + "] outside [0, " + std::to_string(hi) + "]");
}

using Rng = std::mt19937_64;

int draw(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

void validate_spec(const GeneratorSpec& spec) {
    for (auto [v, name] : {std::pair{spec.H, "H"}, std::pair{spec.W, "W"}, std::pair{spec.D, "D"}})
        if (v < 1 || v > 64) throw GeneratorError(std::string("spec.") + name + ": grid extent must be in [1, 64]");
    if (spec.H < 16 || spec.W < 16 || spec.D < 4)
        throw GeneratorError("spec: grid must be at least 16 x 16 x 4 voxels to hold a street");
    if (!(spec.voxel_size > 0.0)) throw GeneratorError("spec.voxel_size: must be positive");
    check_range(spec.vehicles, 8, "vehicles");
    check_range(spec.buildings, 6, "buildings");
    check_range(spec.pedestrians, 8, "pedestrians");
    check_range(spec.trees, 8, "trees");
    check_range(spec.poles, 8, "poles");
    if (spec.cameras < 1 || spec.cameras > 6) throw GeneratorError("spec.cameras: must be in [1, 6]");
    if (spec.image_width < 1 || spec.image_height < 1) throw GeneratorError("spec.image: extents must be positive");
    if (!(spec.camera_hfov > 0.0 && spec.camera_hfov < std::numbers::pi))
        throw GeneratorError("spec.camera_hfov: must be in (0, pi)");
    const Layout l = layout_for(spec);
    if (l.road_half < 1 || l.j_mid + l.road_half > spec.W)
        throw GeneratorError("spec.road_half_width: road band does not fit the grid width");
    const std::int64_t capacity = road_capacity(spec);
    if (spec.vehicles.max > capacity)
        throw GeneratorError("spec.vehicles: up to " + std::to_string(spec.vehicles.max) +
                             " vehicles requested but the road holds " + std::to_string(capacity));
    if (spec.buildings.max > 0 && l.j_mid + l.side_start + 3 > spec.W)
        throw GeneratorError("spec.buildings: no room beside the road for buildings");
}

Scene generate_scene(std::uint64_t seed, const GeneratorSpec& spec) {
    validate_spec(spec);
    Rng rng(seed);
    const double e = spec.voxel_size;
    Scene scene;
    scene.seed = seed;
    scene.taxonomy = default_taxonomy();
    scene.grid = OccupancyGrid(spec.H, spec.W, spec.D,
                               {-0.5 * static_cast<double>(spec.H) * e, -0.5 * static_cast<double>(spec.W) * e, -e}, e);
    OccupancyGrid& g = scene.grid;
    const Layout l = layout_for(spec);

    const int n_vehicles = draw(rng, spec.vehicles.min, spec.vehicles.max);
    const int n_buildings = draw(rng, spec.buildings.min, spec.buildings.max);
    const int n_trees = draw(rng, spec.trees.min, spec.trees.max);
    const int n_poles = draw(rng, spec.poles.min, spec.poles.max);
    const int n_pedestrians = draw(rng, spec.pedestrians.min, spec.pedestrians.max);

    for (std::int64_t i = 0; i < g.H; ++i)
        for (std::int64_t j = 0; j < g.W; ++j)
            g.at(i, j, 0) = std::abs(j - l.j_mid + 0.5) < static_cast<double>(l.road_half) ? kRoad : kVegetation;

    auto fill = [&](std::int64_t i0, std::int64_t i1, std::int64_t j0, std::int64_t j1, std::int64_t k0,
                    std::int64_t k1, std::uint8_t label) {
        for (std::int64_t i = std::max<std::int64_t>(i0, 0); i < std::min(i1, g.H); ++i)
            for (std::int64_t j = std::max<std::int64_t>(j0, 0); j < std::min(j1, g.W); ++j)
                for (std::int64_t k = std::max<std::int64_t>(k0, 0); k < std::min(k1, g.D); ++k) g.at(i, j, k) = label;
    };
    auto is_free = [&](std::int64_t i0, std::int64_t i1, std::int64_t j0, std::int64_t j1, std::int64_t k0,
                       std::int64_t k1) {
        if (i0 < 0 || j0 < 0 || k0 < 0 || i1 > g.H || j1 > g.W || k1 > g.D) return false;
        for (std::int64_t i = i0; i < i1; ++i)
            for (std::int64_t j = j0; j < j1; ++j)
                for (std::int64_t k = k0; k < k1; ++k)
                    if (g.at(i, j, k) != kEmpty) return false;
        return true;
    };
    auto voxel_box = [&](std::uint8_t category, std::int64_t i0, std::int64_t i1, std::int64_t j0, std::int64_t j1,
                         std::int64_t k0, std::int64_t k1, double yaw) {
        const Vec3 lo = g.origin + Vec3{static_cast<double>(i0), static_cast<double>(j0), static_cast<double>(k0)} * e;
        const Vec3 size{static_cast<double>(i1 - i0) * e, static_cast<double>(j1 - j0) * e,
                        static_cast<double>(k1 - k0) * e};
        const bool quarter = std::abs(std::sin(yaw)) > 0.5;
        const Vec3 local = quarter ? Vec3{size[1], size[0], size[2]} : size;
        return make_box(category, lo + size * 0.5, local, yaw);
    };

    // Buildings sit against the outer edge of each side strip; three slots per side.
    if (n_buildings > 0) {
        std::vector<int> slots{0, 1, 2, 3, 4, 5};
        std::shuffle(slots.begin(), slots.end(), rng);
        const std::int64_t slot_len = g.H / 3;
        const std::int64_t depth_room = g.W - (l.j_mid + l.side_start);
        for (int b = 0; b < n_buildings; ++b) {
            const int side = slots[static_cast<std::size_t>(b)] / 3;
            const std::int64_t slot = slots[static_cast<std::size_t>(b)] % 3;
            const std::int64_t len = draw(rng, static_cast<int>(std::min<std::int64_t>(4, slot_len - 2)),
                                          static_cast<int>(std::min<std::int64_t>(14, slot_len - 2)));
            const std::int64_t x0 = slot * slot_len + draw(rng, 0, static_cast<int>(slot_len - len));
            const std::int64_t depth = draw(rng, static_cast<int>(std::min<std::int64_t>(3, depth_room)),
                                            static_cast<int>(std::min<std::int64_t>(6, depth_room)));
            const std::int64_t height = draw(rng, static_cast<int>(std::min<std::int64_t>(3, g.D - 1)),
                                             static_cast<int>(g.D - 1));
            if (side == 0)
                fill(x0, x0 + len, g.W - depth, g.W, 1, 1 + height, kBuilding);
            else
                fill(x0, x0 + len, 0, depth, 1, 1 + height, kBuilding);
        }
    }

    if (n_vehicles > 0) {
        std::vector<std::int64_t> slots(2 * l.slot_starts.size());
        for (std::size_t s = 0; s < slots.size(); ++s) slots[s] = static_cast<std::int64_t>(s);
        std::shuffle(slots.begin(), slots.end(), rng);
        std::sort(slots.begin(), slots.begin() + n_vehicles);
        for (int n = 0; n < n_vehicles; ++n) {
            const auto slot = slots[static_cast<std::size_t>(n)];
            const bool oncoming = slot % 2 == 1;
            const std::int64_t i0 = l.slot_starts[static_cast<std::size_t>(slot / 2)] + draw(rng, 0, 1);
            const std::int64_t j0 = oncoming ? l.j_mid + 2 : l.j_mid - 2 - kVehicleWidth;
            fill(i0, i0 + kVehicleLength, j0, j0 + kVehicleWidth, 1, 1 + kVehicleHeight, kVehicle);
            scene.boxes.push_back(voxel_box(kVehicle, i0, i0 + kVehicleLength, j0, j0 + kVehicleWidth, 1,
                                            1 + kVehicleHeight, oncoming ? std::numbers::pi : 0.0));
        }
    }

    // Trees and poles: first free spot from a bounded number of seeded attempts.
    const std::int64_t strip_lo = l.road_half, strip_hi = std::min(l.side_start + 3, g.W - l.j_mid);
    auto side_j = [&](bool left, std::int64_t offset) { return left ? l.j_mid + offset : l.j_mid - 1 - offset; };
    for (int t = 0; t < n_trees; ++t) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const bool left = draw(rng, 0, 1) == 1;
            const std::int64_t i = draw(rng, 1, static_cast<int>(g.H - 2));
            const std::int64_t j = side_j(left, draw(rng, static_cast<int>(strip_lo + 1), static_cast<int>(strip_hi - 1)));
            const std::int64_t trunk = std::min<std::int64_t>(2, g.D - 2);
            const std::int64_t crown_top = std::min<std::int64_t>(trunk + 3, g.D);
            if (!is_free(i, i + 1, j, j + 1, 1, 1 + trunk) || !is_free(i - 1, i + 2, j - 1, j + 2, 1 + trunk, crown_top))
                continue;
            fill(i, i + 1, j, j + 1, 1, 1 + trunk, kVegetation);
            fill(i - 1, i + 2, j - 1, j + 2, 1 + trunk, crown_top, kVegetation);
            break;
        }
    }
    for (int p = 0; p < n_poles; ++p) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const bool left = draw(rng, 0, 1) == 1;
            const std::int64_t i = draw(rng, 0, static_cast<int>(g.H - 1));
            const std::int64_t j = side_j(left, strip_lo);
            const std::int64_t top = std::min<std::int64_t>(7, g.D);
            if (!is_free(i, i + 1, j, j + 1, 1, top)) continue;
            fill(i, i + 1, j, j + 1, 1, top, kPole);
            break;
        }
    }
    for (int p = 0; p < n_pedestrians; ++p) {
        bool placed = false;
        for (int attempt = 0; attempt < 256 && !placed; ++attempt) {
            const bool left = draw(rng, 0, 1) == 1;
            const std::int64_t i = draw(rng, 0, static_cast<int>(g.H - 1));
            const std::int64_t j = side_j(left, draw(rng, static_cast<int>(strip_lo), static_cast<int>(strip_hi - 1)));
            const double yaw = 0.5 * std::numbers::pi * draw(rng, 0, 3);
            if (!is_free(i, i + 1, j, j + 1, 1, 4)) continue;
            fill(i, i + 1, j, j + 1, 1, 4, kPedestrian);
            scene.boxes.push_back(voxel_box(kPedestrian, i, i + 1, j, j + 1, 1, 4, yaw));
            placed = true;
        }
        if (!placed) throw GeneratorError("spec.pedestrians: no free sidewalk cell for a pedestrian");
    }

    const double x_lo = g.origin[0], x_hi = g.upper()[0];
    const double road_edge = static_cast<double>(l.road_half) * e;
    auto add_line = [&](MapCategory c, const Vec3& a, const Vec3& b) {
        const std::array<Vec3, 2> pts{a, b};
        scene.map.push_back({c, resample_polyline(pts)});
    };
    add_line(MapCategory::boundary, {x_lo, road_edge, 0.0}, {x_hi, road_edge, 0.0});
    add_line(MapCategory::boundary, {x_hi, -road_edge, 0.0}, {x_lo, -road_edge, 0.0});
    add_line(MapCategory::divider, {x_lo, 0.0, 0.0}, {x_hi, 0.0, 0.0});
    const bool crossing = draw(rng, 0, 1) == 1;
    if (crossing) {
        const double xc = x_lo + e * (0.5 + draw(rng, 1, static_cast<int>(g.H - 2)));
        add_line(MapCategory::crossing, {xc, -road_edge, 0.0}, {xc, road_edge, 0.0});
    }

    for (int c = 0; c < spec.cameras; ++c) {
        const double yaw = 2.0 * std::numbers::pi * c / spec.cameras;
        scene.cameras.push_back(make_camera({0.0, 0.0, spec.camera_height}, yaw, spec.camera_pitch, spec.camera_hfov,
                                            spec.image_width, spec.image_height));
    }

    // "a street scene with <few> cars and <no> buildings [and pedestrians] [and crosswalk]"
    auto token = [](const char* word) {
        const auto& v = prompt_vocabulary();
        return static_cast<std::int64_t>(std::find(v.begin(), v.end(), word) - v.begin());
    };
    auto amount = [](int n) { return n == 0 ? "no" : n <= 3 ? "few" : "many"; };
    for (const char* w : {"a", "street", "scene", "with"}) scene.prompt.push_back(token(w));
    for (const char* w : {amount(n_vehicles), "cars", "and", amount(n_buildings), "buildings"})
        scene.prompt.push_back(token(w));
    if (n_pedestrians > 0)
        for (const char* w : {"and", "pedestrians"}) scene.prompt.push_back(token(w));
    if (crossing)
        for (const char* w : {"and", "crosswalk"}) scene.prompt.push_back(token(w));
    return scene;
}

}  // namespace dualdiff
