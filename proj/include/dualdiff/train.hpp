#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dualdiff/fgm.hpp"
#include "dualdiff/model.hpp"
#include "dualdiff/sampler.hpp"

namespace dualdiff {

enum class Phase : std::uint8_t { base_pretrain, branch_train, joint };
const char* phase_name(Phase p);
Phase parse_phase(const std::string& name);

struct TrainConfig {
    Phase phase = Phase::branch_train;
    double lr = 8e-5;
    std::int64_t batch = 4;
    std::int64_t steps = 0;
    double p_drop = 0.1;
    std::uint64_t seed = 0;
    bool use_mask = true;  // false trains with m = 1
    SamplerConfig sampler;
};

void validate_train_config(const TrainConfig& cfg);

/// Sets trainable flags for a phase. The frozen text table stays frozen.
void configure_phase(DualDiffModel& model, Phase phase);

/// One (scene, camera) training pair.
struct Example {
    std::size_t scene = 0;
    std::size_t camera = 0;
    Tensor z0;  // [C, V, U] reference rasterization in [-1, 1]
    ForegroundMask mask;
    ConditionInputs cond;
};

/// Every camera of every scene; examples are built on first use and cached.
class Dataset {
   public:
    using PlanFn = std::function<SamplingPlan(const OccupancyGrid&)>;

    /// ORS conditions use `plan` per scene grid.
    Dataset(std::vector<Scene> scenes, DType dtype, PlanFn plan);
    /// default_plan with `ors_samples` depths.
    Dataset(std::vector<Scene> scenes, DType dtype, std::int64_t ors_samples = 32);

    std::size_t size() const { return index_.size(); }
    const Example& operator[](std::size_t i);
    const std::vector<Scene>& scenes() const { return scenes_; }

   private:
    std::vector<Scene> scenes_;
    DType dtype_;
    PlanFn plan_;
    std::vector<std::pair<std::size_t, std::size_t>> index_;
    std::map<std::size_t, Example> cache_;
};

struct StepResult {
    std::int64_t step = 0;  // 1-based index of this step
    double loss = 0.0;
    bool applied = false;   // false when the loss was non-finite
};

class Trainer {
   public:
    Trainer(DualDiffModel& model, Dataset& data, const TrainConfig& cfg);

    StepResult step();
    std::int64_t steps_done() const { return done_; }
    // Restores the step counter, e.g. after loading optimizer state.
    void set_steps_done(std::int64_t n) { done_ = n; }
    Adam& optimizer() { return adam_; }

   private:
    DualDiffModel& model_;
    Dataset& data_;
    TrainConfig cfg_;
    Adam adam_;
    std::int64_t done_ = 0;
};

/// The masked objective for a batch: the mean of per-item masked_mse.
ad::Var batch_loss(const ad::Var& eps_true, const ad::Var& eps_pred, std::span<const ForegroundMask> masks);

}  // namespace dualdiff
