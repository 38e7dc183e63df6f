#include "dualdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace dualdiff {

const char* sampler_name(SamplerKind k) { return k == SamplerKind::ddpm ? "ddpm" : "ddim"; }

SamplerKind parse_sampler(const std::string& name) {
    if (name == "ddpm") return SamplerKind::ddpm;
    if (name == "ddim") return SamplerKind::ddim;
    throw std::invalid_argument("unknown sampler '" + name + "'");
}

void validate_sampler(const SamplerConfig& cfg, std::int64_t T) {
    if (!(cfg.guidance >= 0.0)) throw std::invalid_argument("sampler: guidance scale must be >= 0");
    if (cfg.kind == SamplerKind::ddim && (cfg.steps < 1 || cfg.steps > T))
        throw std::invalid_argument("sampler: DDIM steps must lie in [1, T]");
    if (!(cfg.eta >= 0.0 && cfg.eta <= 1.0)) throw std::invalid_argument("sampler: eta must lie in [0, 1]");
}

std::vector<std::int64_t> ddim_timesteps(std::int64_t T, std::int64_t steps) {
    std::vector<std::int64_t> ts;
    for (std::int64_t i = steps; i >= 1; --i) ts.push_back(std::max<std::int64_t>(1, i * T / steps));
    return ts;
}

namespace {

Tensor eps_once(const DualDiffModel& model, const Tensor& z, std::int64_t t, const ConditionInputs& cond,
                bool use_branches) {
    const std::int64_t ts[1] = {t};
    const ConditionInputs* cs[1] = {&cond};
    return predict_eps(model, ad::constant(z), ts, cs, use_branches).value();
}

Tensor affine(const Tensor& a, double ca, const Tensor& b, double cb) {
    Tensor out(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto x = a.data<T>();
        auto y = b.data<T>();
        auto o = out.data<T>();
        const T p = static_cast<T>(ca), q = static_cast<T>(cb);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = p * x[i] + q * y[i];
    });
    return out;
}

}  // namespace

Tensor guided_eps(const DualDiffModel& model, const Tensor& z, std::int64_t t, const ConditionInputs& cond,
                  const SamplerConfig& cfg) {
    ad::NoGradGuard guard;
    if (!cfg.use_branches) return eps_once(model, z, t, cond, false);
    const double s = cfg.guidance;
    if (s == 1.0) return eps_once(model, z, t, cond, true);
    const Tensor uncond = eps_once(model, z, t, null_conditions(cond), true);
    if (s == 0.0) return uncond;
    return affine(uncond, 1.0 - s, eps_once(model, z, t, cond, true), s);
}

Tensor sample(const DualDiffModel& model, const ConditionInputs& cond, const SamplerConfig& cfg, std::uint64_t seed) {
    validate_sampler(cfg, model.schedule.T);
    const NoiseSchedule& sch = model.schedule;
    const std::int64_t c = model.cfg.unet.in_channels, v = cond.v_b.V, u = cond.v_b.U;
    std::mt19937_64 rng(seed);
    Tensor z = normal_tensor({1, c, v, u}, model.store.dtype(), rng, 1.0);

    std::vector<std::int64_t> ts;
    if (cfg.kind == SamplerKind::ddim) {
        ts = ddim_timesteps(sch.T, cfg.steps);
    } else {
        for (std::int64_t t = sch.T; t >= 1; --t) ts.push_back(t);
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const std::int64_t t = ts[i];
        const std::int64_t prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        const Tensor eps = guided_eps(model, z, t, cond, cfg);
        const double ab = sch.abar(t), ab_prev = sch.abar(prev);
        // Clamped estimate of z_0.
        Tensor x0 = affine(z, 1.0 / std::sqrt(ab), eps, -std::sqrt(1.0 - ab) / std::sqrt(ab));
        for (std::int64_t k = 0; k < x0.numel(); ++k) x0.set_item(k, std::clamp(x0.item(k), -1.0, 1.0));
        if (prev == 0) {
            z = x0;
            break;
        }
        double sigma = 0.0;
        if (cfg.kind == SamplerKind::ddim) {
            sigma = cfg.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
            // Noise direction consistent with the clamped x0.
            const Tensor e = affine(z, 1.0 / std::sqrt(1.0 - ab), x0, -std::sqrt(ab) / std::sqrt(1.0 - ab));
            z = affine(x0, std::sqrt(ab_prev), e, std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)));
        } else {
            // Posterior mean of q(z_{t-1} | z_t, x0) and its variance.
            const double beta = sch.beta(t);
            const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
            const double ct = std::sqrt(sch.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
            z = affine(x0, c0, z, ct);
            sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        }
        if (sigma > 0.0) z = affine(z, 1.0, normal_tensor(z.shape(), z.dtype(), rng, 1.0), sigma);
    }
    for (std::int64_t k = 0; k < z.numel(); ++k) z.set_item(k, std::clamp(z.item(k), -1.0, 1.0));
    return z;
}

}  // namespace dualdiff
