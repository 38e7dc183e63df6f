#pragma once

#include <cstdint>
#include <string>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/encoders.hpp"
#include "dualdiff/nn.hpp"
#include "dualdiff/params.hpp"

namespace dualdiff {

enum class Branch : std::uint8_t { foreground, background };
const char* branch_name(Branch b);

/// U*V visual tokens of one branch, [U*V, d_v].
struct VisualTokens {
    ad::Var tokens;
    Branch provenance = Branch::foreground;

    std::int64_t size() const { return tokens.shape()[0]; }
};

struct SfaConfig {
    std::int64_t d_v = 64;
    std::int64_t d_cond = 64;  // width of spatial and text tokens
    std::int64_t heads = 1;
    std::int64_t k_def = 4;
};

/// Query/key/value/output projections of one attention stage. No biases.
struct AttentionProj {
    nn::Linear q, k, v, o;
    std::int64_t heads = 1;
};

struct SfaParams {
    SfaConfig cfg;
    AttentionProj self_attn;
    nn::Linear spatial_adapter;  // d_cond -> d_v
    AttentionProj gated_attn;
    ad::Var gamma;  // [1], starts at 0
    nn::Linear deform_q;
    nn::Linear deform_v;       // d_cond -> d_v
    nn::Linear offset_head;    // d_v -> k_def, zero at init
    nn::Linear weight_head;    // d_v -> k_def, zero at init
    nn::Linear deform_out;     // d_v -> d_v, zero at init
};

SfaParams make_sfa(ParameterStore& store, const std::string& prefix, const SfaConfig& cfg);

/// Multi-head attention of q_src over kv_src; heads split the projected width.
ad::Var attend(const AttentionProj& p, const ad::Var& q_src, const ad::Var& kv_src);

/// v'1 = v + Attn(v).
ad::Var self_attend(const ad::Var& v, const SfaParams& p);

/// v'2 = v'1 + tanh(gamma) * Attn([v'1, adapter(c_spatial)]) at the visual positions.
ad::Var gated_ground(const ad::Var& v1, const ad::Var& c_spatial, const SfaParams& p);

struct DeformSampling {
    ad::Var positions;  // [Q, k_def] in [0, n_txt - 1]
    ad::Var weights;    // [Q, k_def], rows sum to 1
};
DeformSampling deform_sampling(const ad::Var& v2, std::int64_t n_txt, const SfaParams& p);

/// v* = v'2 + W_o sum_k w_k value(p_k), values linearly interpolated along the text axis.
ad::Var deform_fuse(const ad::Var& v2, const ad::Var& c_text, const SfaParams& p);

/// Full stack for one branch. The spatial tokens must be map tokens for the
/// foreground branch and box tokens for the background branch.
VisualTokens sfa_forward(const VisualTokens& v, const TokenSeq& c_spatial, const TokenSeq& c_text,
                         const SfaParams& p);

}  // namespace dualdiff
