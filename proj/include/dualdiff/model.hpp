#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dualdiff/encoders.hpp"
#include "dualdiff/ors.hpp"
#include "dualdiff/schedule.hpp"
#include "dualdiff/sfa.hpp"
#include "dualdiff/unet.hpp"

namespace dualdiff {

struct ModelConfig {
    UNetConfig unet;
    EncoderConfig encoders;
    SfaConfig sfa;
    std::int64_t ors_class_width = 4;  // per-sample class embedding width
    std::int64_t ors_samples = 32;
    double camera_t_scale = 16.0;  // camera translations are divided by this
    std::int64_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

// Throws std::invalid_argument when widths disagree between modules.
void validate_model_config(const ModelConfig& cfg);

/// ControlNet-style branch: a copy of the UNet encoder fed z_t plus an adapted
/// v*, with a zero-initialized 1x1 convolution per decoder tap.
struct BranchNet {
    Branch kind = Branch::background;
    UNetEncoder enc;
    nn::Conv2d adapter;  // d_v -> base channels
    nn::ZeroConv2d tap_s1, tap_s2, tap_mid;
};

BranchNet make_branch(ParameterStore& store, const std::string& prefix, Branch kind, const ModelConfig& cfg);

/// Fused tokens [U*V, d_v] per item become a [B, d_v, V, U] hint. Rejects
/// tokens whose provenance differs from the branch.
TapResiduals branch_forward(const BranchNet& branch, std::span<const VisualTokens> v_star, const ad::Var& z,
                            const ad::Var& tfeat, std::span<const ad::Var> env);

/// Raw conditions of one (scene, camera) pair. The null set keeps the ORS
/// extents with every label empty and drops every entity, the prompt and the
/// camera.
struct ConditionInputs {
    OrsFeature v_f;
    OrsFeature v_b;
    std::vector<BoundingBox3D> boxes;
    std::vector<MapPolyline> map;
    Camera camera;
    std::vector<std::int64_t> prompt;
    SceneBounds bounds;
    bool null = false;
};

ConditionInputs make_conditions(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan);
ConditionInputs null_conditions(const ConditionInputs& like);

struct DualDiffModel {
    ModelConfig cfg;
    ParameterStore store;
    NoiseSchedule schedule;
    UNet base;
    SceneEncoders enc;
    OrsEmbedding ors_bg, ors_fg;
    SfaParams sfa_bg, sfa_fg;
    BranchNet tau, mu;  // background, foreground

    DualDiffModel(const ModelConfig& config, DType dtype, std::uint64_t seed);
};

inline constexpr const char* kBasePrefix = "base/";

/// Copies the base encoder weights into both branch encoders.
void init_branches_from_base(DualDiffModel& model);

struct BranchOutputs {
    VisualTokens v_star_b, v_star_f;
    TokenSeq env_b, env_f;
};

/// Encoders, ORS embedding and SFA for one item.
BranchOutputs condition_item(const DualDiffModel& model, const ConditionInputs& cond);

/// eps_theta(z_t, t, c_env, tau(v*_b), mu(v*_f)); without branches, the base alone.
ad::Var predict_eps(const DualDiffModel& model, const ad::Var& z, std::span<const std::int64_t> t,
                    std::span<const ConditionInputs* const> conds, bool use_branches = true);

}  // namespace dualdiff
