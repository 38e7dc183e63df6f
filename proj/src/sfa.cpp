#include "dualdiff/sfa.hpp"

#include <vector>

namespace dualdiff {

const char* branch_name(Branch b) { return b == Branch::foreground ? "foreground" : "background"; }

namespace {

AttentionProj make_attention(ParameterStore& store, const std::string& name, std::int64_t d_q, std::int64_t d_kv,
                             std::int64_t width, std::int64_t heads) {
    AttentionProj a;
    a.heads = heads;
    a.q = nn::make_linear(store, name + "/q", d_q, width, false);
    a.k = nn::make_linear(store, name + "/k", d_kv, width, false);
    a.v = nn::make_linear(store, name + "/v", d_kv, width, false);
    a.o = nn::make_linear(store, name + "/o", width, d_q, false);
    return a;
}

void require_width(const ad::Var& x, std::int64_t width, const char* what) {
    if (x.shape().size() != 2 || x.shape()[1] != width)
        throw ShapeError(std::string(what) + ": expected [n, " + std::to_string(width) + "], got " +
                         shape_str(x.shape()));
}

}  // namespace

SfaParams make_sfa(ParameterStore& store, const std::string& prefix, const SfaConfig& cfg) {
    if (cfg.d_v < 1 || cfg.heads < 1 || cfg.d_v % cfg.heads != 0 || cfg.k_def < 1)
        throw std::invalid_argument("make_sfa: need d_v divisible by heads and k_def >= 1");
    SfaParams p;
    p.cfg = cfg;
    p.self_attn = make_attention(store, prefix + "/self", cfg.d_v, cfg.d_v, cfg.d_v, cfg.heads);
    p.spatial_adapter = nn::make_linear(store, prefix + "/adapter", cfg.d_cond, cfg.d_v);
    p.gated_attn = make_attention(store, prefix + "/gated", cfg.d_v, cfg.d_v, cfg.d_v, cfg.heads);
    p.gamma = store.add(prefix + "/gamma", Tensor({1}, store.dtype()));
    p.deform_q = nn::make_linear(store, prefix + "/deform/q", cfg.d_v, cfg.d_v, false);
    p.deform_v = nn::make_linear(store, prefix + "/deform/v", cfg.d_cond, cfg.d_v, false);
    p.offset_head = nn::make_zero_linear(store, prefix + "/deform/offset", cfg.d_v, cfg.k_def);
    p.weight_head = nn::make_zero_linear(store, prefix + "/deform/weight", cfg.d_v, cfg.k_def);
    p.deform_out = nn::make_zero_linear(store, prefix + "/deform/out", cfg.d_v, cfg.d_v);
    return p;
}

ad::Var attend(const AttentionProj& p, const ad::Var& q_src, const ad::Var& kv_src) {
    const ad::Var q = p.q(q_src), k = p.k(kv_src), v = p.v(kv_src);
    if (p.heads == 1) return p.o(ad::scaled_dot_attention(q, k, v));
    const std::int64_t width = q.shape()[1], hd = width / p.heads;
    std::vector<ad::Var> parts;
    for (std::int64_t h = 0; h < p.heads; ++h)
        parts.push_back(ad::scaled_dot_attention(ad::slice(q, 1, h * hd, (h + 1) * hd),
                                                 ad::slice(k, 1, h * hd, (h + 1) * hd),
                                                 ad::slice(v, 1, h * hd, (h + 1) * hd)));
    return p.o(ad::concat(parts, 1));
}

ad::Var self_attend(const ad::Var& v, const SfaParams& p) {
    require_width(v, p.cfg.d_v, "self_attend");
    return ad::add(v, attend(p.self_attn, v, v));
}

ad::Var gated_ground(const ad::Var& v1, const ad::Var& c_spatial, const SfaParams& p) {
    require_width(v1, p.cfg.d_v, "gated_ground");
    require_width(c_spatial, p.cfg.d_cond, "gated_ground spatial");
    if (c_spatial.shape()[0] < 1) throw ShapeError("gated_ground: empty spatial sequence");
    const std::array<ad::Var, 2> seq{v1, p.spatial_adapter(c_spatial)};
    const ad::Var grounded = attend(p.gated_attn, v1, ad::concat(seq, 0));
    return ad::add(v1, ad::mul(ad::tanh(p.gamma), grounded));
}

DeformSampling deform_sampling(const ad::Var& v2, std::int64_t n_txt, const SfaParams& p) {
    if (n_txt < 1) throw ShapeError("deform_fuse: need at least one text token");
    const ad::Var q = p.deform_q(v2);
    DeformSampling s;
    s.positions = ad::scale(ad::sigmoid(p.offset_head(q)), static_cast<double>(n_txt - 1));
    s.weights = ad::softmax(p.weight_head(q), 1);
    return s;
}

ad::Var deform_fuse(const ad::Var& v2, const ad::Var& c_text, const SfaParams& p) {
    require_width(v2, p.cfg.d_v, "deform_fuse");
    require_width(c_text, p.cfg.d_cond, "deform_fuse text");
    const std::int64_t n_txt = c_text.shape()[0], queries = v2.shape()[0], k = p.cfg.k_def;
    const DeformSampling s = deform_sampling(v2, n_txt, p);
    const ad::Var sampled = ad::linear_interp_1d(p.deform_v(c_text), s.positions);  // [Q, K, d]
    const ad::Var mixed = ad::sum(ad::mul(ad::reshape(s.weights, {queries, k, 1}), sampled), 1);
    return ad::add(v2, p.deform_out(mixed));
}

VisualTokens sfa_forward(const VisualTokens& v, const TokenSeq& c_spatial, const TokenSeq& c_text,
                         const SfaParams& p) {
    const TokenKind expect = v.provenance == Branch::foreground ? TokenKind::map : TokenKind::box;
    for (TokenKind k : c_spatial.kinds)
        if (k != expect)
            throw std::invalid_argument(std::string("sfa_forward: ") + branch_name(v.provenance) +
                                        " branch got " + token_kind_name(k) + " tokens as spatial condition");
    const ad::Var v1 = self_attend(v.tokens, p);
    const ad::Var v2 = gated_ground(v1, c_spatial.tokens, p);
    return {deform_fuse(v2, c_text.tokens, p), v.provenance};
}

}  // namespace dualdiff
