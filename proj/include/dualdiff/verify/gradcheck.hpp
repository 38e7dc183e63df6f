#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "dualdiff/autodiff.hpp"

namespace dualdiff::verify {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_input;
    std::int64_t entries_checked = 0;
};

/// Central finite differences against the reverse sweep. loss_fn must rebuild
/// the graph from the current values of `inputs` on every call. The error per
/// input is ||analytic - numeric|| / max(||analytic||, ||numeric||) over the
/// probed entries. max_entries <= 0 probes every entry.
GradCheckResult gradcheck(const std::function<ad::Var()>& loss_fn, std::span<const ad::Var> inputs,
                          std::span<const std::string> names = {}, double step = 1e-5,
                          std::int64_t max_entries = 0, std::uint64_t seed = 0);

/// sum(y * w) for a fixed random w in [-1, 1]; turns any output into a scalar
/// whose gradient exercises every output entry.
ad::Var random_projection(const ad::Var& y, std::uint64_t seed);

}  // namespace dualdiff::verify
