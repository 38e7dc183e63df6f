#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dualdiff/model.hpp"

namespace dualdiff {

enum class SamplerKind : std::uint8_t { ddpm, ddim };
const char* sampler_name(SamplerKind k);
SamplerKind parse_sampler(const std::string& name);

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim;
    std::int64_t steps = 20;  // DDIM only; DDPM walks every step
    double eta = 0.0;
    double guidance = 2.0;
    bool use_branches = true;  // false samples the base model alone
};

void validate_sampler(const SamplerConfig& cfg, std::int64_t T);

/// Evenly spaced descending DDIM timesteps ending at T / steps.
std::vector<std::int64_t> ddim_timesteps(std::int64_t T, std::int64_t steps);

/// (1 - s) eps_uncond + s eps_cond; s = 0 and s = 1 skip the unused pass.
/// The unconditional pass runs the branches on null conditions.
Tensor guided_eps(const DualDiffModel& model, const Tensor& z, std::int64_t t, const ConditionInputs& cond,
                  const SamplerConfig& cfg);

/// Seeded z_T followed by the reverse process; returns [1, C, V, U] clamped to [-1, 1].
Tensor sample(const DualDiffModel& model, const ConditionInputs& cond, const SamplerConfig& cfg, std::uint64_t seed);

}  // namespace dualdiff
