#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/encoders.hpp"
#include "dualdiff/nn.hpp"
#include "dualdiff/params.hpp"

namespace dualdiff {

struct UNetConfig {
    std::int64_t in_channels = 3;
    std::int64_t base = 32;         // channels at full resolution; 2x at the two lower stages
    std::int64_t cond_width = 64;   // c_env token width
    std::int64_t time_width = 64;
    FourierConfig time_fourier{8, true};
};

/// Normalization over (C, H, W) of each item followed by a per-channel affine.
struct ChannelNorm {
    ad::Var gain;  // [C, 1, 1]
    ad::Var bias;  // [C, 1, 1]

    ad::Var operator()(const ad::Var& x) const;
};

struct ResBlock {
    ChannelNorm norm1;
    nn::Conv2d conv1;
    nn::Linear time;
    ChannelNorm norm2;
    nn::Conv2d conv2;
    nn::Conv2d skip;  // empty weight when in == out

    ad::Var operator()(const ad::Var& x, const ad::Var& temb) const;
};

/// Residual cross-attention of spatial positions over per-item condition tokens.
struct CrossAttention {
    nn::Linear q, k, v, o;

    ad::Var operator()(const ad::Var& h, std::span<const ad::Var> env) const;
};

/// Encoder half plus bottleneck; the branches carry a copy of this.
struct UNetEncoder {
    nn::Mlp time_mlp;
    nn::Conv2d conv_in;
    ResBlock enc1;
    nn::Conv2d down1;
    ResBlock enc2;
    nn::Conv2d down2;
    ResBlock mid1;
    CrossAttention attn;
    ResBlock mid2;
};

/// Activations at the three decoder taps: full resolution, half, bottleneck.
struct EncoderTaps {
    ad::Var s1, s2, mid;
    ad::Var temb;  // time embedding shared with the decoder
};
inline constexpr int kNumTaps = 3;

struct UNet {
    UNetConfig cfg;
    UNetEncoder enc;
    ResBlock dec2;
    ResBlock dec1;
    ChannelNorm norm_out;
    nn::Conv2d conv_out;
    ad::Var null_env;  // [1, cond_width], the base model's only condition token
};

UNetEncoder make_unet_encoder(ParameterStore& store, const std::string& prefix, const UNetConfig& cfg);
UNet make_unet(ParameterStore& store, const std::string& prefix, const UNetConfig& cfg);

/// Fourier features of t / T per item, [B, time_fourier.dim_per_scalar()].
Tensor timestep_features(std::span<const std::int64_t> t, std::int64_t T, const FourierConfig& cfg, DType dtype);

/// `hint` (may be empty) is added after conv_in. env holds one token block per item.
EncoderTaps encoder_forward(const UNetEncoder& enc, const ad::Var& z, const ad::Var& tfeat, std::span<const ad::Var> env,
                            const ad::Var& hint = {});

/// Residuals for one branch, aligned with EncoderTaps.
struct TapResiduals {
    ad::Var s1, s2, mid;
};

/// Epsilon prediction. Each decoder tap consumes skip + sum of the residuals
/// at that tap. Spatial extents must be divisible by 4.
ad::Var unet_forward(const UNet& net, const ad::Var& z, const ad::Var& tfeat, std::span<const ad::Var> env,
                     std::span<const TapResiduals> residuals = {});

/// The base model's conditioning: its null token once per item.
std::vector<ad::Var> null_env_batch(const UNet& net, std::int64_t batch);

}  // namespace dualdiff
