#include "dualdiff/ors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>

#include "dualdiff/scene_io.hpp"

namespace dualdiff {

void validate_plan(const SamplingPlan& plan) {
    if (plan.N < 2) throw std::invalid_argument("SamplingPlan: N must be at least 2");
    if (!(plan.near > 0.0 && plan.near < plan.far && std::isfinite(plan.far)))
        throw std::invalid_argument("SamplingPlan: need 0 < near < far");
}

SamplingPlan default_plan(const OccupancyGrid& grid) { return {32, 0.5 * grid.voxel_size, grid.diagonal()}; }

std::vector<Vec3> sample_ray(const Ray& ray, const SamplingPlan& plan) {
    validate_plan(plan);
    std::vector<Vec3> pts(static_cast<std::size_t>(plan.N));
    for (std::int64_t k = 0; k < plan.N; ++k) pts[static_cast<std::size_t>(k)] = ray.origin + ray.direction * plan.depth(k);
    return pts;
}

const char* ors_filter_name(OrsFilter f) {
    switch (f) {
        case OrsFilter::full: return "full";
        case OrsFilter::foreground: return "foreground";
        case OrsFilter::background: return "background";
    }
    return "?";
}

namespace {

std::array<std::uint8_t, 256> filter_lut(const ClassTaxonomy& taxonomy, OrsFilter filter) {
    std::array<std::uint8_t, 256> lut{};
    for (int c = 0; c < 256; ++c) {
        const auto l = static_cast<std::uint8_t>(c);
        const bool keep = filter == OrsFilter::full || (filter == OrsFilter::foreground && taxonomy.is_foreground(l)) ||
                          (filter == OrsFilter::background && taxonomy.is_background(l));
        lut[static_cast<std::size_t>(c)] = keep ? l : 0;
    }
    return lut;
}

OrsFeature blank_feature(const Camera& cam, const SamplingPlan& plan, std::size_t cam_index, OrsFilter filter) {
    OrsFeature f;
    f.U = cam.width;
    f.V = cam.height;
    f.N = plan.N;
    f.labels.assign(static_cast<std::size_t>(f.U * f.V * f.N), 0);
    f.plan = plan;
    f.camera_index = cam_index;
    f.filter = filter;
    return f;
}

const Camera& camera_at(const Scene& scene, std::size_t cam_index) {
    if (cam_index >= scene.cameras.size()) throw std::out_of_range("render_ors: camera index out of range");
    return scene.cameras[cam_index];
}

}  // namespace

OrsFeature render_ors(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan, OrsFilter filter) {
    validate_plan(plan);
    const Camera& cam = camera_at(scene, cam_index);
    const RayGenerator rays(cam);
    const OccupancyGrid& g = scene.grid;
    const auto lut = filter_lut(scene.taxonomy, filter);
    OrsFeature out = blank_feature(cam, plan, cam_index, filter);

    std::vector<double> depth(static_cast<std::size_t>(plan.N));
    for (std::int64_t k = 0; k < plan.N; ++k) depth[static_cast<std::size_t>(k)] = plan.depth(k);
    const double step = (plan.far - plan.near) / static_cast<double>(plan.N - 1);
    const Vec3 lo = g.origin, hi = g.upper();
    const std::array<double, 3> dims{static_cast<double>(g.H), static_cast<double>(g.W), static_cast<double>(g.D)};
    const std::uint8_t* labels = g.labels.data();

#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < cam.height; ++v) {
        for (std::int64_t u = 0; u < cam.width; ++u) {
            const Ray ray = rays(static_cast<double>(u), static_cast<double>(v));
            // Conservative slab clip: samples outside [t0, t1] (padded by one
            // sample on each side) are out of the grid and stay 0.
            double t0 = -1e300, t1 = 1e300;
            bool miss = false;
            for (int a = 0; a < 3 && !miss; ++a) {
                const double d = ray.direction[a];
                if (d == 0.0) {
                    miss = ray.origin[a] < lo[a] - 1e-9 || ray.origin[a] > hi[a] + 1e-9;
                    continue;
                }
                double ta = (lo[a] - ray.origin[a]) / d, tb = (hi[a] - ray.origin[a]) / d;
                if (ta > tb) std::swap(ta, tb);
                t0 = std::max(t0, ta);
                t1 = std::min(t1, tb);
            }
            if (miss || t0 > t1 + 1e-9) continue;
            const std::int64_t k_lo = std::max<std::int64_t>(
                0, static_cast<std::int64_t>(std::floor(std::max((t0 - plan.near) / step, -1.0))) - 1);
            const std::int64_t k_hi = std::min<std::int64_t>(
                plan.N - 1, static_cast<std::int64_t>(std::ceil(std::min((t1 - plan.near) / step, 1e15))) + 1);
            std::uint8_t* column = out.labels.data() + (v * cam.width + u) * plan.N;
            for (std::int64_t k = k_lo; k <= k_hi; ++k) {
                const double n = depth[static_cast<std::size_t>(k)];
                const Vec3 p = ray.origin + ray.direction * n;
                const double fi = std::floor((p[0] - lo[0]) / g.voxel_size);
                const double fj = std::floor((p[1] - lo[1]) / g.voxel_size);
                const double fk = std::floor((p[2] - lo[2]) / g.voxel_size);
                if (!(fi >= 0.0 && fi < dims[0] && fj >= 0.0 && fj < dims[1] && fk >= 0.0 && fk < dims[2])) continue;
                const auto idx = (static_cast<std::int64_t>(fi) * g.W + static_cast<std::int64_t>(fj)) * g.D +
                                 static_cast<std::int64_t>(fk);
                column[k] = lut[labels[idx]];
            }
        }
    }
    return out;
}

OrsFeature merge_ors(const OrsFeature& fg, const OrsFeature& bg) {
    if (fg.U != bg.U || fg.V != bg.V || fg.N != bg.N) throw std::invalid_argument("merge_ors: extent mismatch");
    OrsFeature out = fg;
    out.filter = OrsFilter::full;
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        if (fg.labels[i] && bg.labels[i]) throw std::logic_error("merge_ors: foreground and background overlap");
        out.labels[i] = fg.labels[i] ? fg.labels[i] : bg.labels[i];
    }
    return out;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t pos) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in[pos + b])) << (8 * b);
    return v;
}

}  // namespace

void write_dors(const std::filesystem::path& path, const OrsFeature& feature) {
    std::string out = "DORS";
    put_u32(out, static_cast<std::uint32_t>(feature.U));
    put_u32(out, static_cast<std::uint32_t>(feature.V));
    put_u32(out, static_cast<std::uint32_t>(feature.N));
    out.append(feature.labels.begin(), feature.labels.end());
    write_file(path, out);
}

OrsFeature read_dors(const std::filesystem::path& path) {
    const std::string in = read_file(path);
    if (in.size() < 16 || in.compare(0, 4, "DORS") != 0) throw std::runtime_error("read_dors: bad header");
    OrsFeature f;
    f.U = get_u32(in, 4);
    f.V = get_u32(in, 8);
    f.N = get_u32(in, 12);
    if (in.size() != 16 + static_cast<std::size_t>(f.U * f.V * f.N)) throw std::runtime_error("read_dors: bad size");
    f.labels.assign(in.begin() + 16, in.end());
    return f;
}

std::vector<std::uint8_t> ors_class_image(const OrsFeature& feature, int num_classes) {
    std::vector<std::uint8_t> img(static_cast<std::size_t>(feature.U * feature.V), 0);
    std::vector<int> counts(static_cast<std::size_t>(num_classes));
    for (std::int64_t p = 0; p < feature.U * feature.V; ++p) {
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int64_t k = 0; k < feature.N; ++k) ++counts[feature.labels[static_cast<std::size_t>(p * feature.N + k)]];
        int best = 0;
        for (int c = 1; c < num_classes; ++c)
            if (counts[static_cast<std::size_t>(c)] > (best ? counts[static_cast<std::size_t>(best)] : 0)) best = c;
        img[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best * 255 / std::max(1, num_classes - 1));
    }
    return img;
}

ad::Var OrsEmbedding::operator()(const OrsFeature& feature) const {
    if (feature.N != samples)
        throw ShapeError("embed_ors: feature has " + std::to_string(feature.N) + " samples, embedding expects " +
                         std::to_string(samples));
    const ad::Var zero_row = ad::constant(Tensor({1, c_emb}, class_rows.dtype()));
    const std::array<ad::Var, 2> rows{zero_row, class_rows};
    const ad::Var table = ad::concat(rows, 0);
    std::vector<std::int64_t> ids(feature.labels.begin(), feature.labels.end());
    const ad::Var flat = ad::embedding_lookup(table, ids);
    return projection(ad::reshape(flat, {feature.U * feature.V, feature.N * c_emb}));
}

OrsEmbedding make_ors_embedding(ParameterStore& store, const std::string& name, std::int64_t num_classes,
                                std::int64_t c_emb, std::int64_t samples, std::int64_t width) {
    OrsEmbedding e;
    e.num_classes = num_classes;
    e.c_emb = c_emb;
    e.samples = samples;
    e.class_rows = store.add(name + "/classes", normal_tensor({num_classes - 1, c_emb}, store.dtype(), store.rng(), 1.0));
    e.projection = nn::make_linear(store, name + "/proj", samples * c_emb, width);
    return e;
}

namespace reference {

OrsFeature render_ors(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan, OrsFilter filter) {
    validate_plan(plan);
    const Camera& cam = camera_at(scene, cam_index);
    OccupancyGrid grid = scene.grid;
    if (filter == OrsFilter::foreground) grid = filter_grid(scene.grid, scene.taxonomy.foreground);
    if (filter == OrsFilter::background) grid = filter_grid(scene.grid, scene.taxonomy.background);
    OrsFeature out = blank_feature(cam, plan, cam_index, filter);
    for (std::int64_t v = 0; v < cam.height; ++v)
        for (std::int64_t u = 0; u < cam.width; ++u) {
            const Ray ray = pixel_ray(cam, static_cast<double>(u), static_cast<double>(v));
            const std::vector<Vec3> pts = sample_ray(ray, plan);
            for (std::int64_t k = 0; k < plan.N; ++k)
                out.labels[static_cast<std::size_t>((v * cam.width + u) * plan.N + k)] =
                    query_grid(grid, pts[static_cast<std::size_t>(k)]);
        }
    return out;
}

}  // namespace reference

}  // namespace dualdiff
