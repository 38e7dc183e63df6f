#include "dualdiff/model.hpp"

#include <stdexcept>

namespace dualdiff {

void validate_model_config(const ModelConfig& cfg) {
    if (cfg.encoders.d != cfg.unet.cond_width)
        throw std::invalid_argument("model config: encoder width differs from the UNet condition width");
    if (cfg.sfa.d_cond != cfg.encoders.d)
        throw std::invalid_argument("model config: SFA condition width differs from the encoder width");
    if (cfg.ors_samples < 2 || cfg.ors_class_width < 1)
        throw std::invalid_argument("model config: need at least 2 ORS samples and a positive class width");
}

BranchNet make_branch(ParameterStore& store, const std::string& prefix, Branch kind, const ModelConfig& cfg) {
    const std::int64_t c = cfg.unet.base;
    BranchNet b;
    b.kind = kind;
    b.enc = make_unet_encoder(store, prefix + "/enc", cfg.unet);
    b.adapter = nn::make_conv(store, prefix + "/adapter", cfg.sfa.d_v, c, 3);
    b.tap_s1 = nn::make_zero_conv(store, prefix + "/tap_s1", c, c);
    b.tap_s2 = nn::make_zero_conv(store, prefix + "/tap_s2", 2 * c, 2 * c);
    b.tap_mid = nn::make_zero_conv(store, prefix + "/tap_mid", 2 * c, 2 * c);
    return b;
}

TapResiduals branch_forward(const BranchNet& branch, std::span<const VisualTokens> v_star, const ad::Var& z,
                            const ad::Var& tfeat, std::span<const ad::Var> env) {
    const Shape& s = z.shape();
    if (static_cast<std::int64_t>(v_star.size()) != s[0])
        throw ShapeError("branch_forward: " + std::to_string(v_star.size()) + " fused features for batch " +
                         std::to_string(s[0]));
    std::vector<ad::Var> hints;
    for (const VisualTokens& v : v_star) {
        if (v.provenance != branch.kind)
            throw std::invalid_argument(std::string("branch_forward: ") + branch_name(v.provenance) +
                                        " features fed to the " + branch_name(branch.kind) + " branch");
        if (v.size() != s[2] * s[3])
            throw ShapeError("branch_forward: " + std::to_string(v.size()) + " visual tokens for a " +
                             std::to_string(s[3]) + "x" + std::to_string(s[2]) + " latent");
        const std::int64_t d = v.tokens.shape()[1];
        hints.push_back(ad::reshape(ad::transpose(v.tokens, 0, 1), {1, d, s[2], s[3]}));
    }
    const ad::Var hint = branch.adapter(hints.size() == 1 ? hints[0] : ad::concat(hints, 0));
    const EncoderTaps taps = encoder_forward(branch.enc, z, tfeat, env, hint);
    return {branch.tap_s1(taps.s1), branch.tap_s2(taps.s2), branch.tap_mid(taps.mid)};
}

ConditionInputs make_conditions(const Scene& scene, std::size_t cam_index, const SamplingPlan& plan) {
    ConditionInputs c;
    c.v_f = render_ors(scene, cam_index, plan, OrsFilter::foreground);
    c.v_b = render_ors(scene, cam_index, plan, OrsFilter::background);
    c.boxes = scene.boxes;
    c.map = scene.map;
    c.camera = scene.cameras[cam_index];
    c.prompt = scene.prompt;
    c.bounds = bounds_of(scene.grid);
    return c;
}

ConditionInputs null_conditions(const ConditionInputs& like) {
    ConditionInputs c;
    c.v_f = like.v_f;
    c.v_b = like.v_b;
    std::fill(c.v_f.labels.begin(), c.v_f.labels.end(), 0);
    std::fill(c.v_b.labels.begin(), c.v_b.labels.end(), 0);
    c.camera = like.camera;
    c.bounds = like.bounds;
    c.null = true;
    return c;
}

DualDiffModel::DualDiffModel(const ModelConfig& config, DType dtype, std::uint64_t seed)
    : cfg(config), store(dtype, seed) {
    validate_model_config(cfg);
    schedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    base = make_unet(store, "base", cfg.unet);
    const auto vocab = static_cast<std::int64_t>(prompt_vocabulary().size());
    enc = make_scene_encoders(store, "enc", cfg.encoders, kNumClasses, vocab, cfg.camera_t_scale);
    ors_bg = make_ors_embedding(store, "ors_bg", kNumClasses, cfg.ors_class_width, cfg.ors_samples, cfg.sfa.d_v);
    ors_fg = make_ors_embedding(store, "ors_fg", kNumClasses, cfg.ors_class_width, cfg.ors_samples, cfg.sfa.d_v);
    sfa_bg = make_sfa(store, "sfa_bg", cfg.sfa);
    sfa_fg = make_sfa(store, "sfa_fg", cfg.sfa);
    tau = make_branch(store, "tau", Branch::background, cfg);
    mu = make_branch(store, "mu", Branch::foreground, cfg);
}

void init_branches_from_base(DualDiffModel& model) {
    const std::string from = std::string(kBasePrefix) + "enc/";
    for (Parameter* p : model.store.with_prefix(from)) {
        const std::string rest = p->name.substr(from.size());
        for (const char* branch : {"tau/enc/", "mu/enc/"})
            model.store.get(branch + rest).var.mutable_value() = p->var.value();
    }
}

BranchOutputs condition_item(const DualDiffModel& model, const ConditionInputs& cond) {
    const SceneEncoders& e = model.enc;
    const TokenSeq cam = cond.null ? TokenSeq{e.cam.null_token, {TokenKind::cam}} : e.cam.encode(cond.camera);
    const TokenSeq text = e.text.encode(cond.null ? std::span<const std::int64_t>{} : cond.prompt);
    const TokenSeq box = encode_boxes(e.box, cond.null ? std::span<const BoundingBox3D>{} : cond.boxes, cond.bounds);
    const TokenSeq map = encode_map(e.map, cond.null ? std::span<const MapPolyline>{} : cond.map, cond.bounds);
    BranchOutputs out;
    out.v_star_b = sfa_forward({model.ors_bg(cond.v_b), Branch::background}, box, text, model.sfa_bg);
    out.v_star_f = sfa_forward({model.ors_fg(cond.v_f), Branch::foreground}, map, text, model.sfa_fg);
    out.env_b = build_env(cam, text, box);
    out.env_f = build_env(cam, text, map);
    return out;
}

ad::Var predict_eps(const DualDiffModel& model, const ad::Var& z, std::span<const std::int64_t> t,
                    std::span<const ConditionInputs* const> conds, bool use_branches) {
    const std::int64_t batch = z.shape()[0];
    if (static_cast<std::int64_t>(t.size()) != batch)
        throw ShapeError("predict_eps: " + std::to_string(t.size()) + " timesteps for batch " + std::to_string(batch));
    const ad::Var tfeat = ad::constant(timestep_features(t, model.cfg.T, model.cfg.unet.time_fourier, z.dtype()));
    const std::vector<ad::Var> base_env = null_env_batch(model.base, batch);
    if (!use_branches) return unet_forward(model.base, z, tfeat, base_env);
    if (static_cast<std::int64_t>(conds.size()) != batch)
        throw ShapeError("predict_eps: " + std::to_string(conds.size()) + " condition sets for batch " +
                         std::to_string(batch));
    std::vector<VisualTokens> vb, vf;
    std::vector<ad::Var> env_b, env_f;
    for (const ConditionInputs* c : conds) {
        BranchOutputs o = condition_item(model, *c);
        vb.push_back(o.v_star_b);
        vf.push_back(o.v_star_f);
        env_b.push_back(o.env_b.tokens);
        env_f.push_back(o.env_f.tokens);
    }
    const std::array<TapResiduals, 2> residuals{branch_forward(model.tau, vb, z, tfeat, env_b),
                                                branch_forward(model.mu, vf, z, tfeat, env_f)};
    return unet_forward(model.base, z, tfeat, base_env, residuals);
}

}  // namespace dualdiff
