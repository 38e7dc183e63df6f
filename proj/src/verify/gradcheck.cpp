#include "dualdiff/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dualdiff/params.hpp"

namespace dualdiff::verify {

GradCheckResult gradcheck(const std::function<ad::Var()>& loss_fn, std::span<const ad::Var> inputs,
                          std::span<const std::string> names, double step, std::int64_t max_entries,
                          std::uint64_t seed) {
    for (ad::Var v : inputs) v.zero_grad();
    ad::backward(loss_fn());
    std::mt19937_64 rng(seed);
    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        ad::Var x = inputs[i];
        const std::int64_t n = x.value().numel();
        std::vector<std::int64_t> entries(static_cast<std::size_t>(n));
        std::iota(entries.begin(), entries.end(), 0);
        if (max_entries > 0 && n > max_entries) {
            std::shuffle(entries.begin(), entries.end(), rng);
            entries.resize(static_cast<std::size_t>(max_entries));
        }
        double diff2 = 0.0, an2 = 0.0, nu2 = 0.0;
        for (std::int64_t e : entries) {
            const double analytic = x.has_grad() ? x.grad().item(e) : 0.0;
            const double original = x.value().item(e);
            x.mutable_value().set_item(e, original + step);
            const double plus = loss_fn().value().item(0);
            x.mutable_value().set_item(e, original - step);
            const double minus = loss_fn().value().item(0);
            x.mutable_value().set_item(e, original);
            const double numeric = (plus - minus) / (2.0 * step);
            diff2 += (analytic - numeric) * (analytic - numeric);
            an2 += analytic * analytic;
            nu2 += numeric * numeric;
        }
        result.entries_checked += static_cast<std::int64_t>(entries.size());
        const double denom = std::sqrt(std::max(an2, nu2));
        const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
        if (rel >= result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_input = i < names.size() ? names[i] : "input" + std::to_string(i);
        }
    }
    return result;
}

ad::Var random_projection(const ad::Var& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(y, ad::constant(uniform_tensor(y.shape(), y.dtype(), rng, 1.0))));
}

}  // namespace dualdiff::verify
