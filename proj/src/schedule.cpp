#include "dualdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>


namespace dualdiff {

NoiseSchedule make_linear_schedule(std::int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be positive");
    if (!(beta_start > 0.0 && beta_end < 1.0 && (T == 1 || beta_start < beta_end)))
        throw std::invalid_argument("make_linear_schedule: need 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.assign(static_cast<std::size_t>(T + 1), 0.0);
    s.alpha_bar.assign(static_cast<std::size_t>(T + 1), 1.0);
    for (std::int64_t t = 1; t <= T; ++t) {
        const double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.betas[static_cast<std::size_t>(t)] = beta_start + f * (beta_end - beta_start);
        s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] * s.alpha(t);
    }
    return s;
}

Tensor q_sample(const Tensor& z0, std::int64_t t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t > schedule.T)
        throw std::out_of_range("q_sample: t = " + std::to_string(t) + " outside [0, " + std::to_string(schedule.T) + "]");
    if (z0.shape() != eps.shape() || z0.dtype() != eps.dtype())
        throw ShapeError("q_sample: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
    if (t == 0) return z0;
    const double a = std::sqrt(schedule.abar(t)), b = std::sqrt(1.0 - schedule.abar(t));
    Tensor out(z0.shape(), z0.dtype());
    dispatch(z0.dtype(), [&]<class T>() {
        auto x = z0.data<T>();
        auto e = eps.data<T>();
        auto y = out.data<T>();
        const T ca = static_cast<T>(a), cb = static_cast<T>(b);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = ca * x[i] + cb * e[i];
    });
    return out;
}

}  // namespace dualdiff
