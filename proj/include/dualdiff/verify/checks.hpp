#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dualdiff/model.hpp"
#include "dualdiff/run_config.hpp"

namespace dualdiff::verify {

struct CheckResult {
    std::string name;
    bool passed = false;
    double metric = 0.0;
    std::string detail;
};

struct Check {
    std::string name;
    std::string suite;  // one of the VerifyToggles fields
    std::function<CheckResult()> run;
};

struct CheckOptions {
    VerifyToggles suites;
    std::uint64_t seed = 0;
    std::int64_t ors_triples = 20;
    std::int64_t decomposition_scenes = 10;
    double ors_time_limit = 0.0;  // seconds, 0 for none
    std::int64_t gate_inputs = 1000;
    std::int64_t moment_draws = 100000;
    std::int64_t model_entries = 4;  // probed entries per parameter tensor
    double model_step = 3e-4;  // central-difference step for the model groups
    std::int64_t zero_init_seeds = 2;
    bool full_size_zero_init = false;
    bool corrupt_gamma = false;  // negative control: gate check runs with gamma = 1
};

/// Model and scenes small enough for exhaustive oracles: 8x8 latents.
ModelConfig small_model_config();
GeneratorSpec small_generator_spec();
ConditionInputs small_conditions(std::uint64_t seed, const ModelConfig& cfg);

std::vector<Check> registered_checks(const CheckOptions& options);

/// "name PASS|FAIL metric" plus the detail when present.
std::string format_result(const CheckResult& r);

/// Runs every check, printing one line per check as it finishes. A check that
/// throws is reported as a failure.
std::vector<CheckResult> run_checks(std::span<const Check> checks, std::ostream& report);

}  // namespace dualdiff::verify
