#pragma once

#include <cstdint>
#include <vector>

#include "dualdiff/tensor.hpp"

namespace dualdiff {

/// Linear beta schedule. Index t runs over 1..T; alpha_bar(0) = 1 is the
/// clean-data endpoint.
struct NoiseSchedule {
    std::int64_t T = 0;
    std::vector<double> betas;      // [T + 1], betas[0] = 0
    std::vector<double> alpha_bar;  // [T + 1], alpha_bar[0] = 1

    double beta(std::int64_t t) const { return betas[static_cast<std::size_t>(t)]; }
    double alpha(std::int64_t t) const { return 1.0 - beta(t); }
    double abar(std::int64_t t) const { return alpha_bar[static_cast<std::size_t>(t)]; }
};

NoiseSchedule make_linear_schedule(std::int64_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps for 0 <= t <= T. t = 0 returns z0.
Tensor q_sample(const Tensor& z0, std::int64_t t, const Tensor& eps, const NoiseSchedule& schedule);

}  // namespace dualdiff
