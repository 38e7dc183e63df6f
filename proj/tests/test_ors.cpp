#include <doctest.h>

#include <filesystem>
#include <numbers>
#include <random>

#include "dualdiff/ors.hpp"
#include "dualdiff/scene.hpp"
#include "dualdiff/verify/gradcheck.hpp"

using namespace dualdiff;
namespace ad = dualdiff::ad;

namespace {

Scene random_scene(std::mt19937_64& rng) {
    GeneratorSpec spec;
    spec.vehicles = {0, 8};
    spec.image_width = std::uniform_int_distribution<int>(4, 40)(rng);
    spec.image_height = std::uniform_int_distribution<int>(4, 40)(rng);
    spec.cameras = std::uniform_int_distribution<int>(1, 6)(rng);
    return generate_scene(rng(), spec);
}

// Cameras anywhere in or around the grid, including outside it.
Camera random_camera(std::mt19937_64& rng, const OccupancyGrid& g, std::int64_t w, std::int64_t h) {
    std::uniform_real_distribution<double> frac(-0.3, 1.3), ang(-std::numbers::pi, std::numbers::pi);
    const Vec3 hi = g.upper();
    const Vec3 p{g.origin[0] + frac(rng) * (hi[0] - g.origin[0]), g.origin[1] + frac(rng) * (hi[1] - g.origin[1]),
                 g.origin[2] + frac(rng) * (hi[2] - g.origin[2])};
    return make_camera(p, ang(rng), 0.5 * ang(rng), 0.4 + std::abs(ang(rng)) * 0.8, w, h);
}

SamplingPlan random_plan(std::mt19937_64& rng, const OccupancyGrid& g) {
    std::uniform_real_distribution<double> frac(0.0, 1.0);
    SamplingPlan p;
    p.N = std::uniform_int_distribution<int>(2, 48)(rng);
    p.near = 0.01 + frac(rng) * 2.0;
    p.far = p.near + 0.1 + frac(rng) * 1.5 * g.diagonal();
    return p;
}

}  // namespace

TEST_CASE("sample_ray: axis-aligned arithmetic") {
    const Ray ray{{0.5, 0.5, 0.5}, {0, 0, 1}};
    const auto pts = sample_ray(ray, {3, 0.5, 2.5});
    REQUIRE(pts.size() == 3);
    CHECK(pts[0] == Vec3{0.5, 0.5, 1.0});
    CHECK(pts[1] == Vec3{0.5, 0.5, 2.0});
    CHECK(pts[2] == Vec3{0.5, 0.5, 3.0});
}

TEST_CASE("sample_ray: two samples epsilon apart") {
    const double eps = 1e-6;
    const auto pts = sample_ray({{0, 0, 0}, {1, 0, 0}}, {2, 3.0 - eps, 3.0});
    CHECK(std::abs((pts[1][0] - pts[0][0]) - eps) < 1e-12);
    CHECK_THROWS_AS(sample_ray({{0, 0, 0}, {1, 0, 0}}, {1, 1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(sample_ray({{0, 0, 0}, {1, 0, 0}}, {4, 2.0, 2.0}), std::invalid_argument);
}

TEST_CASE("sample_ray: spacing is constant on random rays") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 100; ++trial) {
        const Ray ray{{n(rng), n(rng), n(rng)}, normalized({n(rng), n(rng), n(rng)})};
        const SamplingPlan plan{17, 0.3, 12.0};
        const auto pts = sample_ray(ray, plan);
        const double expect = (plan.far - plan.near) / (plan.N - 1);
        for (std::size_t k = 1; k < pts.size(); ++k) CHECK(std::abs(norm(pts[k] - pts[k - 1]) - expect) < 1e-9);
        for (std::int64_t k = 1; k < plan.N; ++k) CHECK(plan.depth(k) > plan.depth(k - 1));
    }
}

TEST_CASE("query_grid on the sample_ray points") {
    OccupancyGrid g(4, 4, 4, {0, 0, 0}, 1.0);
    g.at(0, 0, 2) = 3;
    const auto pts = sample_ray({{0.5, 0.5, 0.5}, {0, 0, 1}}, {3, 0.5, 2.5});
    // Brute-force oracle: scan every voxel for the one whose cell holds the point.
    for (std::size_t n = 0; n < pts.size(); ++n) {
        std::uint8_t expect = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int k = 0; k < 4; ++k)
                    if (pts[n][0] >= i && pts[n][0] < i + 1 && pts[n][1] >= j && pts[n][1] < j + 1 &&
                        pts[n][2] >= k && pts[n][2] < k + 1)
                        expect = g.at(i, j, k);
        CHECK(query_grid(g, pts[n]) == expect);
    }
    CHECK(query_grid(g, pts[0]) == 0);
    CHECK(query_grid(g, pts[1]) == 3);
    CHECK(query_grid(g, pts[2]) == 0);
}

TEST_CASE("render_ors on an empty grid is all zero") {
    Scene s;
    s.taxonomy = default_taxonomy();
    s.grid = OccupancyGrid(16, 16, 8, {-4, -4, -1}, 0.5);
    s.cameras.push_back(make_camera({0, 0, 1}, 0.4, 0.1, 1.5, 12, 10));
    for (OrsFilter f : {OrsFilter::full, OrsFilter::foreground, OrsFilter::background}) {
        const OrsFeature feat = render_ors(s, 0, default_plan(s.grid), f);
        CHECK(feat.labels.size() == 12 * 10 * 32);
        CHECK(std::all_of(feat.labels.begin(), feat.labels.end(), [](std::uint8_t l) { return l == 0; }));
    }
}

TEST_CASE("render_ors is bit-identical to the naive oracle on random triples") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        Scene s = random_scene(rng);
        if (trial % 2 == 1) s.cameras[0] = random_camera(rng, s.grid, s.cameras[0].width, s.cameras[0].height);
        const auto cam = static_cast<std::size_t>(rng() % s.cameras.size());
        const SamplingPlan plan = trial % 3 == 0 ? default_plan(s.grid) : random_plan(rng, s.grid);
        const auto filter = static_cast<OrsFilter>(trial % 3);
        const OrsFeature fast = render_ors(s, cam, plan, filter);
        const OrsFeature slow = reference::render_ors(s, cam, plan, filter);
        CHECK(fast.labels == slow.labels);
    }
}

TEST_CASE("foreground and background features merge to the full feature") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const Scene s = random_scene(rng);
        const SamplingPlan plan = default_plan(s.grid);
        const OrsFeature full = render_ors(s, 0, plan, OrsFilter::full);
        const OrsFeature merged =
            merge_ors(render_ors(s, 0, plan, OrsFilter::foreground), render_ors(s, 0, plan, OrsFilter::background));
        CHECK(merged.labels == full.labels);
    }
}

TEST_CASE("rotating the camera 180 degrees about its axis reverses the image") {
    const Scene base = generate_scene(31, GeneratorSpec{});
    Scene rotated = base;
    Camera& cam = rotated.cameras[0];
    for (int c = 0; c < 6; ++c) cam.R[static_cast<std::size_t>(c)] = -cam.R[static_cast<std::size_t>(c)];
    cam.t[0] = -cam.t[0];
    cam.t[1] = -cam.t[1];
    const SamplingPlan plan = default_plan(base.grid);
    const OrsFeature a = render_ors(base, 0, plan);
    const OrsFeature b = render_ors(rotated, 0, plan);
    for (std::int64_t v = 0; v < a.V; ++v)
        for (std::int64_t u = 0; u < a.U; ++u)
            for (std::int64_t k = 0; k < a.N; ++k) CHECK(b.at(u, v, k) == a.at(a.U - 1 - u, a.V - 1 - v, k));
}

TEST_CASE("DORS dump round trips and the class image is black when empty") {
    const Scene s = generate_scene(4, GeneratorSpec{});
    const OrsFeature f = render_ors(s, 0, default_plan(s.grid));
    const auto path = std::filesystem::temp_directory_path() / "dualdiff_test.dors";
    write_dors(path, f);
    const OrsFeature back = read_dors(path);
    CHECK(back.labels == f.labels);
    CHECK(back.U == f.U);
    CHECK(back.N == f.N);
    std::filesystem::remove(path);
    OrsFeature empty = f;
    std::fill(empty.labels.begin(), empty.labels.end(), 0);
    const auto img = ors_class_image(empty, kNumClasses);
    CHECK(std::all_of(img.begin(), img.end(), [](std::uint8_t p) { return p == 0; }));
}

TEST_CASE("embed_ors: empty feature gives the projection bias everywhere") {
    ParameterStore store(DType::f64, 3);
    const OrsEmbedding emb = make_ors_embedding(store, "ors", kNumClasses, 4, 6, 5);
    OrsFeature f;
    f.U = 3;
    f.V = 2;
    f.N = 6;
    f.labels.assign(36, 0);
    const Tensor y = emb(f).value();
    CHECK(y.shape() == Shape{6, 5});
    for (std::int64_t p = 0; p < 6; ++p)
        for (std::int64_t c = 0; c < 5; ++c) CHECK(y.item(p * 5 + c) == emb.projection.bias.value().item(c));
}

TEST_CASE("embed_ors: identical columns give identical rows and unknown classes are rejected") {
    ParameterStore store(DType::f64, 4);
    const OrsEmbedding emb = make_ors_embedding(store, "ors", kNumClasses, 3, 4, 5);
    OrsFeature f;
    f.U = 2;
    f.V = 1;
    f.N = 4;
    f.labels = {1, 5, 0, 2, 1, 5, 0, 2};
    const Tensor y = emb(f).value();
    for (std::int64_t c = 0; c < 5; ++c) CHECK(y.item(c) == y.item(5 + c));
    f.labels[3] = 7;
    CHECK_THROWS_AS(emb(f), std::out_of_range);
}

TEST_CASE("embed_ors: gradients match finite differences") {
    ParameterStore store(DType::f64, 5);
    const OrsEmbedding emb = make_ors_embedding(store, "ors", kNumClasses, 3, 4, 5);
    OrsFeature f;
    f.U = 3;
    f.V = 2;
    f.N = 4;
    std::mt19937_64 rng(6);
    for (int i = 0; i < 24; ++i) f.labels.push_back(static_cast<std::uint8_t>(rng() % kNumClasses));
    const auto r = verify::gradcheck([&] { return verify::random_projection(emb(f), 9); },
                                     std::vector<ad::Var>{emb.class_rows, emb.projection.weight, emb.projection.bias});
    CHECK(r.max_rel_error < 1e-4);
}
