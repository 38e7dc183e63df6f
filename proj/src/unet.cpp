#include "dualdiff/unet.hpp"

#include <array>

namespace dualdiff {

namespace {

ChannelNorm make_norm(ParameterStore& store, const std::string& name, std::int64_t c) {
    return {store.add(name + "/gain", Tensor::filled({c, 1, 1}, store.dtype(), 1.0)),
            store.add(name + "/bias", Tensor({c, 1, 1}, store.dtype()))};
}

ResBlock make_resblock(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                       std::int64_t time_width) {
    ResBlock r;
    r.norm1 = make_norm(store, name + "/norm1", in);
    r.conv1 = nn::make_conv(store, name + "/conv1", in, out, 3);
    r.time = nn::make_linear(store, name + "/time", time_width, out);
    r.norm2 = make_norm(store, name + "/norm2", out);
    r.conv2 = nn::make_conv(store, name + "/conv2", out, out, 3);
    if (in != out) r.skip = nn::make_conv(store, name + "/skip", in, out, 1);
    return r;
}

CrossAttention make_cross_attention(ParameterStore& store, const std::string& name, std::int64_t c,
                                    std::int64_t cond) {
    return {nn::make_linear(store, name + "/q", c, c, false), nn::make_linear(store, name + "/k", cond, c, false),
            nn::make_linear(store, name + "/v", cond, c, false), nn::make_linear(store, name + "/o", c, c)};
}

ad::Var add_residuals(ad::Var skip, std::span<const TapResiduals> residuals, ad::Var TapResiduals::*tap) {
    for (const TapResiduals& r : residuals) {
        const ad::Var& x = r.*tap;
        if (x.shape() != skip.shape())
            throw ShapeError("unet_forward: residual " + shape_str(x.shape()) + " does not match tap " +
                             shape_str(skip.shape()));
        skip = ad::add(skip, x);
    }
    return skip;
}

}  // namespace

ad::Var ChannelNorm::operator()(const ad::Var& x) const {
    const Shape& s = x.shape();
    const ad::Var n = ad::reshape(ad::layer_norm(ad::reshape(x, {s[0], s[1] * s[2] * s[3]})), s);
    return ad::add(ad::mul(n, gain), bias);
}

ad::Var ResBlock::operator()(const ad::Var& x, const ad::Var& temb) const {
    ad::Var h = conv1(ad::silu(norm1(x)));
    const ad::Var e = time(ad::silu(temb));
    h = ad::add(h, ad::reshape(e, {e.shape()[0], e.shape()[1], 1, 1}));
    h = conv2(ad::silu(norm2(h)));
    return ad::add(skip.weight ? skip(x) : x, h);
}

ad::Var CrossAttention::operator()(const ad::Var& h, std::span<const ad::Var> env) const {
    const Shape& s = h.shape();
    const std::int64_t batch = s[0], c = s[1], hw = s[2] * s[3];
    if (static_cast<std::int64_t>(env.size()) != batch)
        throw ShapeError("cross_attention: " + std::to_string(env.size()) + " condition blocks for batch " +
                         std::to_string(batch));
    std::vector<ad::Var> items;
    items.reserve(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) {
        const ad::Var tokens = ad::transpose(ad::reshape(ad::slice(h, 0, b, b + 1), {c, hw}), 0, 1);
        const ad::Var& cond = env[static_cast<std::size_t>(b)];
        const ad::Var a = o(ad::scaled_dot_attention(q(ad::layer_norm(tokens)), k(cond), v(cond)));
        items.push_back(ad::reshape(ad::transpose(a, 0, 1), {1, c, s[2], s[3]}));
    }
    return ad::add(h, batch == 1 ? items[0] : ad::concat(items, 0));
}

UNetEncoder make_unet_encoder(ParameterStore& store, const std::string& prefix, const UNetConfig& cfg) {
    const std::int64_t c = cfg.base, c2 = 2 * cfg.base, tw = cfg.time_width;
    UNetEncoder e;
    e.time_mlp = nn::make_mlp(store, prefix + "/time", cfg.time_fourier.dim_per_scalar(), tw, tw);
    e.conv_in = nn::make_conv(store, prefix + "/conv_in", cfg.in_channels, c, 3);
    e.enc1 = make_resblock(store, prefix + "/enc1", c, c, tw);
    e.down1 = nn::make_conv(store, prefix + "/down1", c, c2, 3, 2, 1);
    e.enc2 = make_resblock(store, prefix + "/enc2", c2, c2, tw);
    e.down2 = nn::make_conv(store, prefix + "/down2", c2, c2, 3, 2, 1);
    e.mid1 = make_resblock(store, prefix + "/mid1", c2, c2, tw);
    e.attn = make_cross_attention(store, prefix + "/attn", c2, cfg.cond_width);
    e.mid2 = make_resblock(store, prefix + "/mid2", c2, c2, tw);
    return e;
}

UNet make_unet(ParameterStore& store, const std::string& prefix, const UNetConfig& cfg) {
    const std::int64_t c = cfg.base, c2 = 2 * cfg.base;
    UNet u;
    u.cfg = cfg;
    u.enc = make_unet_encoder(store, prefix + "/enc", cfg);
    u.dec2 = make_resblock(store, prefix + "/dec2", 2 * c2, c2, cfg.time_width);
    u.dec1 = make_resblock(store, prefix + "/dec1", c2 + c, c, cfg.time_width);
    u.norm_out = make_norm(store, prefix + "/norm_out", c);
    u.conv_out = nn::make_conv(store, prefix + "/conv_out", c, cfg.in_channels, 3);
    u.null_env = store.add(prefix + "/null_env", normal_tensor({1, cfg.cond_width}, store.dtype(), store.rng(), 0.5));
    return u;
}

Tensor timestep_features(std::span<const std::int64_t> t, std::int64_t T, const FourierConfig& cfg, DType dtype) {
    std::vector<double> x;
    for (std::int64_t v : t) {
        if (v < 0 || v > T) throw std::out_of_range("timestep_features: t outside [0, T]");
        x.push_back(static_cast<double>(v) / static_cast<double>(T));
    }
    return fourier_rows(x, static_cast<std::int64_t>(t.size()), cfg, dtype);
}

EncoderTaps encoder_forward(const UNetEncoder& enc, const ad::Var& z, const ad::Var& tfeat, std::span<const ad::Var> env,
                            const ad::Var& hint) {
    const Shape& s = z.shape();
    if (s.size() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0)
        throw ShapeError("unet: latent " + shape_str(s) + " must be [B, C, V, U] with V, U divisible by 4");
    const ad::Var temb = enc.time_mlp(tfeat);
    ad::Var h = enc.conv_in(z);
    if (hint) h = ad::add(h, hint);
    EncoderTaps taps;
    taps.temb = temb;
    taps.s1 = enc.enc1(h, temb);
    taps.s2 = enc.enc2(enc.down1(taps.s1), temb);
    h = enc.mid1(enc.down2(taps.s2), temb);
    taps.mid = enc.mid2(enc.attn(h, env), temb);
    return taps;
}

ad::Var unet_forward(const UNet& net, const ad::Var& z, const ad::Var& tfeat, std::span<const ad::Var> env,
                     std::span<const TapResiduals> residuals) {
    const EncoderTaps taps = encoder_forward(net.enc, z, tfeat, env);
    const ad::Var& temb = taps.temb;
    const ad::Var mid = add_residuals(taps.mid, residuals, &TapResiduals::mid);
    const std::array<ad::Var, 2> up2{ad::upsample_nearest(mid, 2), add_residuals(taps.s2, residuals, &TapResiduals::s2)};
    const ad::Var d2 = net.dec2(ad::concat(up2, 1), temb);
    const std::array<ad::Var, 2> up1{ad::upsample_nearest(d2, 2), add_residuals(taps.s1, residuals, &TapResiduals::s1)};
    const ad::Var d1 = net.dec1(ad::concat(up1, 1), temb);
    return net.conv_out(ad::silu(net.norm_out(d1)));
}

std::vector<ad::Var> null_env_batch(const UNet& net, std::int64_t batch) {
    return std::vector<ad::Var>(static_cast<std::size_t>(batch), net.null_env);
}

}  // namespace dualdiff
