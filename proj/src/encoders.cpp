#include "dualdiff/encoders.hpp"

#include <algorithm>
#include <cmath>

namespace dualdiff {

std::vector<double> fourier_embed(std::span<const double> x, const FourierConfig& cfg) {
    if (cfg.num_freqs < 0) throw std::invalid_argument("fourier_embed: negative frequency count");
    std::vector<double> out;
    out.reserve(x.size() * static_cast<std::size_t>(cfg.dim_per_scalar()));
    for (double v : x) {
        if (!std::isfinite(v)) throw NonFiniteError("fourier_embed: non-finite input");
        if (cfg.include_input) out.push_back(v);
        double f = 1.0;
        for (int l = 0; l < cfg.num_freqs; ++l, f *= 2.0) {
            out.push_back(std::sin(f * v));
            out.push_back(std::cos(f * v));
        }
    }
    return out;
}

Tensor fourier_rows(std::span<const double> x, std::int64_t rows, const FourierConfig& cfg, DType dtype) {
    if (rows < 1 || x.size() % static_cast<std::size_t>(rows) != 0)
        throw ShapeError("fourier_rows: " + std::to_string(x.size()) + " scalars do not split into " +
                         std::to_string(rows) + " rows");
    const std::vector<double> flat = fourier_embed(x, cfg);
    return Tensor::from({rows, static_cast<std::int64_t>(flat.size()) / rows}, flat, dtype);
}

const char* token_kind_name(TokenKind k) {
    switch (k) {
        case TokenKind::cam: return "cam";
        case TokenKind::text: return "text";
        case TokenKind::box: return "box";
        case TokenKind::map: return "map";
    }
    return "?";
}

bool TokenSeq::contains(TokenKind k) const { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); }

TokenSeq build_env(const TokenSeq& cam, const TokenSeq& text, const TokenSeq& spatial) {
    const std::array<ad::Var, 3> parts{cam.tokens, text.tokens, spatial.tokens};
    for (const auto& p : parts)
        if (p.shape().size() != 2 || p.shape()[1] != cam.tokens.shape()[1])
            throw ShapeError("build_env: token widths differ: " + shape_str(cam.tokens.shape()) + ", " +
                             shape_str(text.tokens.shape()) + ", " + shape_str(spatial.tokens.shape()));
    TokenSeq env{ad::concat(parts, 0), cam.kinds};
    env.kinds.insert(env.kinds.end(), text.kinds.begin(), text.kinds.end());
    env.kinds.insert(env.kinds.end(), spatial.kinds.begin(), spatial.kinds.end());
    return env;
}

SceneBounds bounds_of(const OccupancyGrid& grid) { return {grid.origin, grid.upper()}; }

TokenSeq EntityEncoder::encode(std::span<const std::int64_t> categories, std::span<const std::array<Vec3, 8>> points,
                               const SceneBounds& bounds) const {
    if (categories.size() != points.size()) throw ShapeError("encode_entities: category/geometry count mismatch");
    if (categories.empty()) return {null_token, {kind}};
    const auto n = static_cast<std::int64_t>(categories.size());
    std::vector<double> coords;
    coords.reserve(static_cast<std::size_t>(n) * 24);
    for (const auto& pts : points)
        for (const Vec3& p : pts)
            for (int a = 0; a < 3; ++a) coords.push_back(2.0 * (p[a] - bounds.lo[a]) / (bounds.hi[a] - bounds.lo[a]) - 1.0);
    const ad::Var geometry = ad::constant(fourier_rows(coords, n, fourier, table.dtype()));
    const std::array<ad::Var, 2> parts{ad::embedding_lookup(table, categories), geometry};
    return {head(ad::concat(parts, 1)), std::vector<TokenKind>(static_cast<std::size_t>(n), kind)};
}

TokenSeq encode_boxes(const EntityEncoder& enc, std::span<const BoundingBox3D> boxes, const SceneBounds& bounds) {
    std::vector<std::int64_t> cats;
    std::vector<std::array<Vec3, 8>> pts;
    for (const auto& b : boxes) {
        cats.push_back(b.category);
        pts.push_back(b.corners);
    }
    return enc.encode(cats, pts, bounds);
}

TokenSeq encode_map(const EntityEncoder& enc, std::span<const MapPolyline> lines, const SceneBounds& bounds) {
    std::vector<std::int64_t> cats;
    std::vector<std::array<Vec3, 8>> pts;
    for (const auto& l : lines) {
        cats.push_back(static_cast<std::int64_t>(l.category));
        pts.push_back(l.points);
    }
    return enc.encode(cats, pts, bounds);
}

std::vector<double> camera_scalars(const Camera& cam, double t_scale) {
    const double su = 1.0 / static_cast<double>(cam.width), sv = 1.0 / static_cast<double>(cam.height);
    std::vector<double> s{cam.K[0] * su, cam.K[1] * su, cam.K[2] * su, cam.K[3] * sv, cam.K[4] * sv,
                          cam.K[5] * sv, cam.K[6],      cam.K[7],      cam.K[8]};
    s.insert(s.end(), cam.R.begin(), cam.R.end());
    for (double v : cam.t) s.push_back(v / t_scale);
    return s;
}

TokenSeq CameraEncoder::encode(const Camera& cam) const {
    const auto scalars = camera_scalars(cam, t_scale);
    const ad::Var x = ad::constant(fourier_rows(scalars, 1, fourier, head.first.weight.dtype()));
    return {head(x), {TokenKind::cam}};
}

TokenSeq TextEncoder::encode(std::span<const std::int64_t> prompt) const {
    if (prompt.empty()) return {null_token, {TokenKind::text}};
    return {head(ad::embedding_lookup(table, prompt)), std::vector<TokenKind>(prompt.size(), TokenKind::text)};
}

SceneEncoders make_scene_encoders(ParameterStore& store, const std::string& prefix, const EncoderConfig& cfg,
                                  int num_classes, std::int64_t vocab, double t_scale) {
    const std::int64_t geo = 24 * cfg.fourier.dim_per_scalar();
    auto entity = [&](const std::string& name, TokenKind kind, std::int64_t categories) {
        EntityEncoder e;
        e.kind = kind;
        e.fourier = cfg.fourier;
        e.table = store.add(prefix + "/" + name + "/table",
                            normal_tensor({categories, cfg.c_txt}, store.dtype(), store.rng(), 1.0));
        e.null_token = store.add(prefix + "/" + name + "/null",
                                 normal_tensor({1, cfg.d}, store.dtype(), store.rng(), 0.5));
        e.head = nn::make_mlp(store, prefix + "/" + name + "/head", cfg.c_txt + geo, cfg.d, cfg.d);
        return e;
    };
    SceneEncoders enc;
    enc.box = entity("box", TokenKind::box, num_classes);
    enc.map = entity("map", TokenKind::map, kNumMapCategories);
    enc.cam.fourier = cfg.fourier;
    enc.cam.t_scale = t_scale;
    enc.cam.head = nn::make_mlp(store, prefix + "/cam/head", 21 * cfg.fourier.dim_per_scalar(), cfg.d, cfg.d);
    enc.cam.null_token = store.add(prefix + "/cam/null", normal_tensor({1, cfg.d}, store.dtype(), store.rng(), 0.5));
    enc.text.table = store.add(prefix + "/text/table",
                               normal_tensor({vocab, cfg.c_txt}, store.dtype(), store.rng(), 1.0), false);
    enc.text.null_token = store.add(prefix + "/text/null", normal_tensor({1, cfg.d}, store.dtype(), store.rng(), 0.5));
    enc.text.head = nn::make_mlp(store, prefix + "/text/head", cfg.c_txt, cfg.d, cfg.d);
    return enc;
}

}  // namespace dualdiff
