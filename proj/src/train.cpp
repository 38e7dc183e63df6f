#include "dualdiff/train.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "dualdiff/raster.hpp"

namespace dualdiff {

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::base_pretrain: return "base_pretrain";
        case Phase::branch_train: return "branch_train";
        case Phase::joint: return "joint";
    }
    return "?";
}

Phase parse_phase(const std::string& name) {
    for (Phase p : {Phase::base_pretrain, Phase::branch_train, Phase::joint})
        if (name == phase_name(p)) return p;
    throw std::invalid_argument("unknown phase '" + name + "'");
}

void validate_train_config(const TrainConfig& cfg) {
    if (!(cfg.p_drop >= 0.0 && cfg.p_drop < 1.0)) throw std::invalid_argument("train config: p_drop must lie in [0, 1)");
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (cfg.batch < 1) throw std::invalid_argument("train config: batch must be positive");
    if (cfg.steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
    if (!(cfg.sampler.guidance >= 0.0)) throw std::invalid_argument("train config: guidance must be >= 0");
}

void configure_phase(DualDiffModel& model, Phase phase) {
    model.store.set_trainable("", phase != Phase::base_pretrain);
    model.store.set_trainable(kBasePrefix, phase != Phase::branch_train);
    model.store.set_trainable("enc/text/table", false);
}

Dataset::Dataset(std::vector<Scene> scenes, DType dtype, std::int64_t ors_samples)
    : Dataset(std::move(scenes), dtype, [ors_samples](const OccupancyGrid& g) {
          SamplingPlan p = default_plan(g);
          p.N = ors_samples;
          return p;
      }) {}

Dataset::Dataset(std::vector<Scene> scenes, DType dtype, PlanFn plan)
    : scenes_(std::move(scenes)), dtype_(dtype), plan_(std::move(plan)) {
    for (std::size_t s = 0; s < scenes_.size(); ++s)
        for (std::size_t c = 0; c < scenes_[s].cameras.size(); ++c) index_.emplace_back(s, c);
}

const Example& Dataset::operator[](std::size_t i) {
    if (i >= index_.size()) throw std::out_of_range("dataset: example index out of range");
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second;
    const auto [s, c] = index_[i];
    const Scene& scene = scenes_[s];
    Example e;
    e.scene = s;
    e.camera = c;
    e.z0 = image_to_latent(rasterize_reference(scene, c), dtype_);
    e.mask = scene_mask(scene, c, scene.cameras[c].width, scene.cameras[c].height);
    e.cond = make_conditions(scene, c, plan_(scene.grid));
    return cache_.emplace(i, std::move(e)).first->second;
}

ad::Var batch_loss(const ad::Var& eps_true, const ad::Var& eps_pred, std::span<const ForegroundMask> masks) {
    const std::int64_t batch = eps_pred.shape()[0];
    if (static_cast<std::int64_t>(masks.size()) != batch) throw ShapeError("batch_loss: one mask per item required");
    ad::Var total;
    for (std::int64_t b = 0; b < batch; ++b) {
        const ad::Var l = masked_mse(ad::slice(eps_true, 0, b, b + 1), ad::slice(eps_pred, 0, b, b + 1),
                                     masks[static_cast<std::size_t>(b)]);
        total = total ? ad::add(total, l) : l;
    }
    return ad::scale(total, 1.0 / static_cast<double>(batch));
}

Trainer::Trainer(DualDiffModel& model, Dataset& data, const TrainConfig& cfg)
    : model_(model), data_(data), cfg_(cfg), adam_(AdamConfig{cfg.lr}) {
    validate_train_config(cfg_);
    if (data_.size() == 0) throw std::invalid_argument("trainer: empty dataset");
    configure_phase(model_, cfg_.phase);
}

StepResult Trainer::step() {
    const std::int64_t index = done_ + 1;
    // Per-step stream so a resumed run draws the same batches.
    std::seed_seq seq{cfg_.seed, static_cast<std::uint64_t>(index), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    std::uniform_int_distribution<std::int64_t> pick_t(1, model_.schedule.T);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    const DType dtype = model_.store.dtype();
    std::vector<const Example*> items;
    std::vector<std::int64_t> ts;
    std::vector<ConditionInputs> nulls;
    nulls.reserve(static_cast<std::size_t>(cfg_.batch));
    std::vector<const ConditionInputs*> conds;
    std::vector<ForegroundMask> masks;
    std::vector<Tensor> zt, eps;
    for (std::int64_t b = 0; b < cfg_.batch; ++b) {
        const Example& e = data_[pick(rng)];
        items.push_back(&e);
        ts.push_back(pick_t(rng));
        eps.push_back(normal_tensor(e.z0.shape(), dtype, rng, 1.0));
        zt.push_back(q_sample(e.z0, ts.back(), eps.back(), model_.schedule));
        if (coin(rng) < cfg_.p_drop) {
            nulls.push_back(null_conditions(e.cond));
            conds.push_back(&nulls.back());
        } else {
            conds.push_back(&e.cond);
        }
        masks.push_back(cfg_.use_mask ? e.mask : build_mask({}, e.mask.U, e.mask.V));
    }
    auto stack = [](const std::vector<Tensor>& parts) {
        std::vector<ad::Var> vars;
        for (const Tensor& p : parts) {
            Shape s{1};
            s.insert(s.end(), p.shape().begin(), p.shape().end());
            vars.push_back(ad::constant(p.reshaped(s)));
        }
        return ad::concat(vars, 0);
    };
    const ad::Var z = stack(zt), target = stack(eps);
    const bool branches = cfg_.phase != Phase::base_pretrain;
    const ad::Var loss = batch_loss(target, predict_eps(model_, z, ts, conds, branches), masks);

    StepResult r;
    r.step = index;
    r.loss = loss.value().item(0);
    done_ = index;
    if (!std::isfinite(r.loss)) return r;
    ad::backward(loss);
    auto params = model_.store.all();
    bool finite = true;
    for (const Parameter* p : params)
        if (p->trainable && p->var.has_grad() && !p->var.grad().all_finite()) finite = false;
    if (finite) {
        adam_.step(params);
        r.applied = true;
    }
    model_.store.zero_grad();
    return r;
}

}  // namespace dualdiff
