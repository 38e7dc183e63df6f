#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/nn.hpp"
#include "dualdiff/params.hpp"
#include "dualdiff/scene.hpp"

namespace dualdiff {

struct FourierConfig {
    int num_freqs = 8;
    bool include_input = true;

    std::int64_t dim_per_scalar() const { return 2 * num_freqs + (include_input ? 1 : 0); }
};

/// Per component: [x,] sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x).
/// Throws NonFiniteError on non-finite input.
std::vector<double> fourier_embed(std::span<const double> x, const FourierConfig& cfg);
/// Row-wise fourier_embed of a [rows, n] block, as a constant [rows, n * dim] tensor.
Tensor fourier_rows(std::span<const double> x, std::int64_t rows, const FourierConfig& cfg, DType dtype);

/// Where each condition token came from.
enum class TokenKind : std::uint8_t { cam, text, box, map };
const char* token_kind_name(TokenKind k);

struct TokenSeq {
    ad::Var tokens;  // [n, d]
    std::vector<TokenKind> kinds;

    std::int64_t size() const { return static_cast<std::int64_t>(kinds.size()); }
    bool contains(TokenKind k) const;
};

/// c_env = [c_cam, c_text, c_spatial] along the token axis.
TokenSeq build_env(const TokenSeq& cam, const TokenSeq& text, const TokenSeq& spatial);

struct EncoderConfig {
    std::int64_t d = 64;      // condition width
    std::int64_t c_txt = 32;  // category / text embedding width
    FourierConfig fourier;
};

/// Coordinates of boxes and map points are mapped to [-1, 1] by these bounds.
struct SceneBounds {
    Vec3 lo{};
    Vec3 hi{};
};
SceneBounds bounds_of(const OccupancyGrid& grid);

/// E_box / E_map: category embedding concatenated with the Fourier embedding
/// of the 24 normalized coordinates, then a two-layer perceptron.
struct EntityEncoder {
    TokenKind kind = TokenKind::box;
    ad::Var table;  // [categories, c_txt], trainable
    ad::Var null_token;  // [1, d]
    nn::Mlp head;
    FourierConfig fourier;

    // Rows of 8 points each; empty input yields the null token.
    TokenSeq encode(std::span<const std::int64_t> categories, std::span<const std::array<Vec3, 8>> points,
                    const SceneBounds& bounds) const;
};

TokenSeq encode_boxes(const EntityEncoder& enc, std::span<const BoundingBox3D> boxes, const SceneBounds& bounds);
TokenSeq encode_map(const EntityEncoder& enc, std::span<const MapPolyline> lines, const SceneBounds& bounds);

/// The 21 scalars fed to E_cam: K row-major with the first row divided by U
/// and the second by V, R row-major, t divided by `t_scale`.
std::vector<double> camera_scalars(const Camera& cam, double t_scale);

struct CameraEncoder {
    nn::Mlp head;
    ad::Var null_token;  // stands in for the camera when conditions are dropped
    FourierConfig fourier;
    double t_scale = 1.0;

    TokenSeq encode(const Camera& cam) const;
};

/// Frozen lookup table followed by the trainable E_text perceptron.
struct TextEncoder {
    ad::Var table;  // [vocab, c_txt], frozen
    ad::Var null_token;
    nn::Mlp head;

    TokenSeq encode(std::span<const std::int64_t> prompt) const;
};

struct SceneEncoders {
    EntityEncoder box;
    EntityEncoder map;
    CameraEncoder cam;
    TextEncoder text;
};

/// Parameters live under `prefix`/{box,map,cam,text}; the text table is
/// registered as non-trainable.
SceneEncoders make_scene_encoders(ParameterStore& store, const std::string& prefix, const EncoderConfig& cfg,
                                  int num_classes, std::int64_t vocab, double t_scale);

}  // namespace dualdiff
