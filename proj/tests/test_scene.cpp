#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dualdiff/geometry.hpp"
#include "dualdiff/raster.hpp"
#include "dualdiff/scene.hpp"
#include "dualdiff/scene_io.hpp"

using namespace dualdiff;

namespace {

Camera axis_camera(double f, double cx, double cy, std::int64_t w, std::int64_t h) {
    Camera cam;
    cam.K = {f, 0, cx, 0, f, cy, 0, 0, 1};
    cam.R = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    cam.t = {0, 0, 0};
    cam.width = w;
    cam.height = h;
    return cam;
}

GeneratorSpec exact_counts(int vehicles, int pedestrians) {
    GeneratorSpec spec;
    spec.vehicles = {vehicles, vehicles};
    spec.pedestrians = {pedestrians, pedestrians};
    return spec;
}

}  // namespace

TEST_CASE("principal-axis ray points forward") {
    Camera cam = axis_camera(1.0, 0.0, 0.0, 4, 4);
    const Vec3 r = camera_direction(cam, {0.0, 0.0, 1.0});
    CHECK(r == Vec3{0.0, 0.0, 1.0});
    // The same pixel on a level camera built in the ego convention looks along ego +x.
    Camera ego = make_camera({0, 0, 1.6}, 0.0, 0.0, std::numbers::pi / 2, 32, 32);
    const Vec3 fwd = camera_direction(ego, {16.0, 16.0, 1.0});
    CHECK(fwd[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(fwd[1]) < 1e-15);
    CHECK(std::abs(fwd[2]) < 1e-15);
}

TEST_CASE("pixel_ray applies K^-1 to the pixel center") {
    Camera cam = axis_camera(100.0, 112.0, 112.0, 224, 224);
    const Ray ray = pixel_ray(cam, 161.5, 111.5);
    // Independent arithmetic: s = (162, 112, 1); K^-1 s = ((162-112)/100, (112-112)/100, 1).
    const double dx = (162.0 - 112.0) / 100.0, dy = 0.0;
    const double n = std::sqrt(dx * dx + dy * dy + 1.0);
    CHECK(ray.direction[0] == doctest::Approx(dx / n).epsilon(1e-15));
    CHECK(ray.direction[1] == doctest::Approx(0.0));
    CHECK(ray.direction[2] == doctest::Approx(1.0 / n).epsilon(1e-15));
    CHECK_THROWS_AS(pixel_ray(cam, 224.0, 0.0), std::out_of_range);
    Camera singular = cam;
    singular.K[0] = 0.0;
    CHECK_THROWS_AS(pixel_ray(singular, 1.0, 1.0), std::domain_error);
}

TEST_CASE("rays are unit length for arbitrary cameras") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> ang(-3.0, 3.0), pos(-5.0, 5.0), frac(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Camera cam = make_camera({pos(rng), pos(rng), pos(rng)}, ang(rng), 0.3 * ang(rng), 0.5 + frac(rng) * 2.0, 40, 24);
        CHECK_NOTHROW(validate_camera(cam));
        const Ray ray = pixel_ray(cam, frac(rng) * 40.0, frac(rng) * 24.0);
        CHECK(std::abs(norm(ray.direction) - 1.0) < 1e-9);
    }
}

TEST_CASE("camera center is -R^T t") {
    Camera cam = make_camera({1.0, -2.0, 1.6}, 0.7, 0.1, 1.2, 16, 16);
    const Vec3 c = camera_center(cam);
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[1] == doctest::Approx(-2.0));
    CHECK(c[2] == doctest::Approx(1.6));
    Camera bad = cam;
    bad.R[0] *= 1.001;
    CHECK_THROWS_AS(validate_camera(bad), CameraError);
}

TEST_CASE("query_grid uses floor lookup with empty outside") {
    OccupancyGrid g(4, 4, 4, {0, 0, 0}, 1.0);
    g.at(0, 0, 0) = 2;
    g.at(0, 0, 2) = 3;
    CHECK(query_grid(g, {0, 0, 0}) == 2);
    CHECK(query_grid(g, {-0.001, 0, 0}) == 0);
    CHECK(query_grid(g, {4.0, 0, 0}) == 0);
    CHECK(query_grid(g, {0.5, 0.5, 2.0}) == 3);
    CHECK(query_grid(g, {100, 100, 100}) == 0);
}

TEST_CASE("taxonomy is a partition of the non-empty classes") {
    CHECK_NOTHROW(validate_taxonomy(default_taxonomy()));
    ClassTaxonomy bad = default_taxonomy();
    bad.background.push_back(kVehicle);
    CHECK_THROWS(validate_taxonomy(bad));
}

TEST_CASE("generator is deterministic") {
    GeneratorSpec spec;
    const std::string a = scene_to_json(generate_scene(7, spec));
    const std::string b = scene_to_json(generate_scene(7, spec));
    CHECK(a == b);
    CHECK(a != scene_to_json(generate_scene(8, spec)));
}

TEST_CASE("zero vehicles and pedestrians leave no foreground") {
    const Scene s = generate_scene(3, exact_counts(0, 0));
    CHECK(s.boxes.empty());
    for (std::uint8_t l : s.grid.labels) CHECK_FALSE(s.taxonomy.is_foreground(l));
}

TEST_CASE("every foreground voxel lies inside exactly one box") {
    for (std::uint64_t seed : {1u, 2u, 3u, 11u}) {
        const Scene s = generate_scene(seed, exact_counts(3, 2));
        REQUIRE(s.boxes.size() == 5);
        std::int64_t fg = 0;
        for (std::int64_t i = 0; i < s.grid.H; ++i)
            for (std::int64_t j = 0; j < s.grid.W; ++j)
                for (std::int64_t k = 0; k < s.grid.D; ++k) {
                    const std::uint8_t l = s.grid.at(i, j, k);
                    if (!s.taxonomy.is_foreground(l)) continue;
                    ++fg;
                    int inside = 0;
                    for (const auto& b : s.boxes)
                        if (box_contains(b, s.grid.voxel_center(i, j, k)) && b.category == l) ++inside;
                    CHECK(inside == 1);
                }
        CHECK(fg == 3 * 8 * 4 * 3 + 2 * 3);
        for (const auto& b : s.boxes) CHECK(is_cuboid(b));
    }
}

TEST_CASE("generated scenes satisfy structural invariants") {
    GeneratorSpec spec;
    spec.vehicles = {0, 8};
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const Scene s = generate_scene(seed, spec);
        for (std::uint8_t l : s.grid.labels) CHECK(l < s.taxonomy.num_classes());
        CHECK(s.map.size() >= 3);
        for (const auto& m : s.map)
            for (std::size_t p = 1; p < kPolylinePoints; ++p) CHECK(m.points[p] != m.points[p - 1]);
        // Taxonomy partition: merging the two filtered grids reconstructs the original.
        const OccupancyGrid fg = filter_grid(s.grid, s.taxonomy.foreground);
        const OccupancyGrid bg = filter_grid(s.grid, s.taxonomy.background);
        for (std::size_t n = 0; n < s.grid.labels.size(); ++n) {
            CHECK_FALSE((fg.labels[n] != 0 && bg.labels[n] != 0));
            CHECK((fg.labels[n] | bg.labels[n]) == s.grid.labels[n]);
        }
        CHECK(s.cameras.size() == 4);
        for (const auto& cam : s.cameras) CHECK_NOTHROW(validate_camera(cam));
        for (auto t : s.prompt) CHECK(t < static_cast<std::int64_t>(prompt_vocabulary().size()));
    }
}

TEST_CASE("infeasible specs are rejected with a diagnostic") {
    GeneratorSpec spec;
    spec.vehicles = {9, 9};
    CHECK_THROWS_AS(generate_scene(1, spec), GeneratorError);
    GeneratorSpec small;
    small.H = 20;
    small.vehicles = {3, 3};
    try {
        generate_scene(1, small);
        FAIL("expected GeneratorError");
    } catch (const GeneratorError& e) {
        CHECK(std::string(e.what()).find("road holds") != std::string::npos);
    }
    GeneratorSpec cams;
    cams.cameras = 7;
    CHECK_THROWS_AS(generate_scene(1, cams), GeneratorError);
}

TEST_CASE("resample_polyline: straight segment") {
    const std::vector<Vec3> pts{{0, 0, 0}, {7, 0, 0}};
    const auto out = resample_polyline(pts);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(out[i][0] == doctest::Approx(static_cast<double>(i)).epsilon(1e-15));
        CHECK(out[i][1] == 0.0);
    }
}

TEST_CASE("resample_polyline: arc-uniform input is a fixed point") {
    std::vector<Vec3> pts;
    for (int i = 0; i < 8; ++i) pts.push_back({std::cos(0.3 * i) * 2.0, std::sin(0.3 * i) * 2.0, 0.5});
    // Chord-uniform points on a circle are arc-uniform along the polyline itself.
    const auto out = resample_polyline(pts);
    for (std::size_t i = 0; i < 8; ++i)
        for (int a = 0; a < 3; ++a) CHECK(std::abs(out[i][a] - pts[i][a]) < 1e-9);
}

TEST_CASE("resample_polyline: L-shaped legs 3 and 5") {
    const std::vector<Vec3> pts{{0, 0, 0}, {3, 0, 0}, {3, 5, 0}};
    const auto out = resample_polyline(pts);
    // Oracle: arc position of a point on the L is x on the first leg, 3 + y on the second.
    for (std::size_t i = 0; i < 8; ++i) {
        const double s = out[i][1] == 0.0 ? out[i][0] : 3.0 + out[i][1];
        CHECK(std::abs(s - 8.0 * static_cast<double>(i) / 7.0) < 1e-12);
    }
    CHECK(out.front() == pts.front());
    CHECK(out.back() == pts.back());
    const std::vector<Vec3> same{{1, 1, 1}, {1, 1, 1}};
    CHECK_THROWS_AS(resample_polyline(same), std::invalid_argument);
}

TEST_CASE("rasterizing an empty grid yields the horizon gradient") {
    Scene s;
    s.grid = OccupancyGrid(8, 8, 8, {-2, -2, -2}, 0.5);
    s.cameras.push_back(make_camera({0, 0, 0}, 0.3, 0.2, 1.4, 16, 12));
    const RasterStyle style;
    const Image img = rasterize_reference(s, 0, style);
    const RayGenerator rays(s.cameras[0]);
    for (std::int64_t v = 0; v < 12; ++v)
        for (std::int64_t u = 0; u < 16; ++u) {
            const Rgb c = horizon_color(style, rays(static_cast<double>(u), static_cast<double>(v)).direction);
            for (int ch = 0; ch < 3; ++ch) CHECK(img.at(u, v, ch) == static_cast<float>(c[static_cast<std::size_t>(ch)]));
        }
}

TEST_CASE("a voxel on the principal axis renders centered on the principal point") {
    Scene s;
    s.grid = OccupancyGrid(9, 9, 9, {0, -2.25, -2.25}, 0.5);
    s.grid.at(6, 4, 4) = kVehicle;  // center (3.25, 0, 0)
    s.cameras.push_back(make_camera({0, 0, 0}, 0.0, 0.0, std::numbers::pi / 2, 32, 32));
    const Image img = rasterize_reference(s, 0);
    const RayGenerator rays(s.cameras[0]);
    double su = 0, sv = 0;
    int count = 0;
    for (std::int64_t v = 0; v < 32; ++v)
        for (std::int64_t u = 0; u < 32; ++u) {
            const FirstHit h = trace_first_hit(s.grid, rays(static_cast<double>(u), static_cast<double>(v)), 100.0);
            if (h.label != kVehicle) continue;
            su += static_cast<double>(u) + 0.5;
            sv += static_cast<double>(v) + 0.5;
            ++count;
        }
    REQUIRE(count > 0);
    CHECK(su / count == doctest::Approx(s.cameras[0].K[2]));
    CHECK(sv / count == doctest::Approx(s.cameras[0].K[5]));
    CHECK(img.at(16, 16, 2) > img.at(16, 16, 0));
}

TEST_CASE("traversal entry depths are non-decreasing") {
    const Scene s = generate_scene(5, GeneratorSpec{});
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> frac(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Camera& cam = s.cameras[static_cast<std::size_t>(trial) % s.cameras.size()];
        const Ray ray = pixel_ray(cam, frac(rng) * 32.0, frac(rng) * 32.0);
        double last = -1.0;
        bool ok = true;
        traverse_ray(s.grid, ray, s.grid.diagonal(), [&](std::int64_t, std::int64_t, std::int64_t, double t) {
            ok = ok && t >= last;
            last = t;
            return true;
        });
        CHECK(ok);
    }
}

// Documented tolerance of the rasterizer against the e/4 fine-step marcher: per pixel
// either the labels agree, the marcher's depth lies in [d, d + e/4] and the colors
// differ by at most (e/4)/far times the palette entry, or the exact hit is a grazing
// one whose chord through the voxel is shorter than e/4 (the marcher can step over it).
TEST_CASE("rasterizer matches the fine-step marcher within the documented tolerance") {
    const RasterStyle style;
    std::int64_t pixels = 0, agree = 0;
    for (std::uint64_t seed : {21u, 22u, 23u}) {
        GeneratorSpec spec;
        spec.vehicles = {4, 8};
        spec.pedestrians = {2, 3};
        const Scene s = generate_scene(seed, spec);
        const double far = s.grid.diagonal();
        const double step = s.grid.voxel_size / 4.0;
        for (std::size_t c = 0; c < s.cameras.size(); ++c) {
            const Image img = rasterize_reference(s, c, style);
            const RayGenerator rays(s.cameras[c]);
            for (std::int64_t v = 0; v < img.height; ++v)
                for (std::int64_t u = 0; u < img.width; ++u) {
                    const Ray ray = rays(static_cast<double>(u), static_cast<double>(v));
                    const FirstHit exact = trace_first_hit(s.grid, ray, far);
                    const FirstHit fine = reference::first_hit_fine_step(s.grid, ray, far, step);
                    ++pixels;
                    if (exact.label == fine.label) {
                        ++agree;
                        if (!fine.label) continue;
                        const bool depth_ok = fine.depth >= exact.depth - 1e-9 && fine.depth <= exact.depth + step + 1e-9;
                        CHECK((depth_ok || exact.chord < step));
                        const Rgb oracle = shade(style, fine.label, fine.depth, far);
                        for (int ch = 0; ch < 3; ++ch)
                            CHECK((std::abs(img.at(u, v, ch) - oracle[static_cast<std::size_t>(ch)]) <=
                                       step / far * style.palette[fine.label][static_cast<std::size_t>(ch)] + 1e-6 ||
                                   exact.chord < step));
                    } else {
                        CHECK(exact.chord < step);
                    }
                }
        }
    }
    CHECK(static_cast<double>(agree) / static_cast<double>(pixels) >= 0.98);
}

TEST_CASE("latent conversion round trips through [-1, 1]") {
    const Scene s = generate_scene(9, GeneratorSpec{});
    const Image img = rasterize_reference(s, 1);
    const Tensor z = image_to_latent(img, DType::f64);
    CHECK(z.shape() == Shape{3, 32, 32});
    const Image back = latent_to_image(z);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) CHECK(std::abs(back.rgb[i] - img.rgb[i]) < 1e-6f);
}

TEST_CASE("base64 known vectors") {
    auto enc = [](const std::string& s) {
        return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    };
    CHECK(enc("") == "");
    CHECK(enc("f") == "Zg==");
    CHECK(enc("fo") == "Zm8=");
    CHECK(enc("foo") == "Zm9v");
    CHECK(enc("foobar") == "Zm9vYmFy");
    const auto dec = base64_decode("Zm9vYmE=");
    CHECK(std::string(dec.begin(), dec.end()) == "fooba");
    CHECK_THROWS(base64_decode("Zm9"));
    CHECK_THROWS(base64_decode("Zm*v"));
}

TEST_CASE("scene JSON round trip is byte stable") {
    const Scene s = generate_scene(12, GeneratorSpec{});
    const std::string text = scene_to_json(s);
    const Scene back = scene_from_json(text);
    CHECK(scene_to_json(back) == text);
    CHECK(back.grid.labels == s.grid.labels);
}

TEST_CASE("malformed scene documents name the offending field") {
    const std::string text = scene_to_json(generate_scene(12, exact_counts(2, 0)));
    auto expect_field = [](const std::string& doc, const std::string& field) {
        try {
            scene_from_json(doc);
            FAIL("expected SceneFormatError");
        } catch (const SceneFormatError& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    auto replace = [&](const std::string& from, const std::string& to) {
        std::string d = text;
        const auto pos = d.find(from);
        REQUIRE(pos != std::string::npos);
        return d.replace(pos, from.size(), to);
    };
    expect_field(replace("\"labels_b64\"", "\"labels\""), "labels");
    expect_field(replace("\"voxel_size\": 0.5", "\"voxel_size\": -1"), "voxel_size");
    expect_field(replace("\"category\": 5", "\"category\": 2"), "boxes[0].category");
    expect_field("{not json", "JSON");
}
