#include "dualdiff/verify/checks.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

#include "dualdiff/fgm.hpp"
#include "dualdiff/ors.hpp"
#include "dualdiff/sampler.hpp"
#include "dualdiff/sfa.hpp"
#include "dualdiff/train.hpp"
#include "dualdiff/verify/gradcheck.hpp"

namespace dualdiff::verify {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

CheckResult result(std::string name, bool passed, double metric, std::string detail = {}) {
    return {std::move(name), passed, metric, std::move(detail)};
}

// Random scenes, cameras anywhere around the grid and random depth plans.
Scene random_scene(std::mt19937_64& rng) {
    GeneratorSpec spec;
    spec.vehicles = {0, 8};
    spec.image_width = std::uniform_int_distribution<int>(4, 40)(rng);
    spec.image_height = std::uniform_int_distribution<int>(4, 40)(rng);
    spec.cameras = std::uniform_int_distribution<int>(1, 6)(rng);
    return generate_scene(rng(), spec);
}

Camera random_camera(std::mt19937_64& rng, const OccupancyGrid& g, std::int64_t w, std::int64_t h) {
    std::uniform_real_distribution<double> frac(-0.3, 1.3), ang(-std::numbers::pi, std::numbers::pi);
    const Vec3 hi = g.upper();
    const Vec3 p{g.origin[0] + frac(rng) * (hi[0] - g.origin[0]), g.origin[1] + frac(rng) * (hi[1] - g.origin[1]),
                 g.origin[2] + frac(rng) * (hi[2] - g.origin[2])};
    return make_camera(p, ang(rng), 0.5 * ang(rng), 0.4 + std::abs(ang(rng)) * 0.8, w, h);
}

SamplingPlan random_plan(std::mt19937_64& rng, const OccupancyGrid& g) {
    std::uniform_real_distribution<double> frac(0.0, 1.0);
    SamplingPlan p;
    p.N = std::uniform_int_distribution<int>(2, 48)(rng);
    p.near = 0.01 + frac(rng) * 2.0;
    p.far = p.near + 0.1 + frac(rng) * 1.5 * g.diagonal();
    return p;
}

CheckResult ors_oracle(const CheckOptions& o) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(o.seed + 2024);
    std::int64_t mismatched = 0;
    for (std::int64_t trial = 0; trial < o.ors_triples; ++trial) {
        Scene s = random_scene(rng);
        if (trial % 2 == 1) s.cameras[0] = random_camera(rng, s.grid, s.cameras[0].width, s.cameras[0].height);
        const auto cam = static_cast<std::size_t>(rng() % s.cameras.size());
        const SamplingPlan plan = trial % 3 == 0 ? default_plan(s.grid) : random_plan(rng, s.grid);
        const auto filter = static_cast<OrsFilter>(trial % 3);
        if (render_ors(s, cam, plan, filter).labels != reference::render_ors(s, cam, plan, filter).labels) ++mismatched;
    }
    const double elapsed = seconds_since(t0);
    const bool in_time = o.ors_time_limit <= 0.0 || elapsed < o.ors_time_limit;
    std::ostringstream d;
    d << o.ors_triples << " triples, " << elapsed << " s";
    return result("ors_oracle_equivalence", mismatched == 0 && in_time, static_cast<double>(mismatched), d.str());
}

CheckResult ors_decomposition(const CheckOptions& o) {
    std::mt19937_64 rng(o.seed + 77);
    std::int64_t mismatched = 0;
    for (std::int64_t trial = 0; trial < o.decomposition_scenes; ++trial) {
        const Scene s = random_scene(rng);
        const auto cam = static_cast<std::size_t>(rng() % s.cameras.size());
        const SamplingPlan plan = default_plan(s.grid);
        const OrsFeature full = render_ors(s, cam, plan, OrsFilter::full);
        const OrsFeature merged = merge_ors(render_ors(s, cam, plan, OrsFilter::foreground),
                                            render_ors(s, cam, plan, OrsFilter::background));
        if (merged.labels != full.labels) ++mismatched;
    }
    std::ostringstream d;
    d << o.decomposition_scenes << " scenes";
    return result("ors_decomposition", mismatched == 0, static_cast<double>(mismatched), d.str());
}

ad::Var rand_var(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::variable(uniform_tensor(std::move(shape), DType::f64, rng, 1.0));
}

double op_error(const std::function<ad::Var()>& build, std::vector<ad::Var> inputs) {
    return gradcheck([&] { return random_projection(build(), 99); }, inputs).max_rel_error;
}

struct OpCase {
    const char* name;
    double error;
};

std::string worst_of(const std::vector<OpCase>& cases, double& worst) {
    std::string name;
    worst = 0.0;
    for (const OpCase& c : cases)
        if (c.error >= worst) {
            worst = c.error;
            name = c.name;
        }
    return name;
}

CheckResult grad_linear_ops() {
    auto a = rand_var({3, 4}, 20), b = rand_var({3, 4}, 21), row = rand_var({4}, 22);
    auto m = rand_var({4, 5}, 23), ba = rand_var({2, 3, 4}, 24), bb = rand_var({2, 4, 2}, 25);
    auto x = rand_var({2, 3, 6, 4}, 26), w = rand_var({5, 3, 3, 3}, 27), bias = rand_var({5}, 28);
    auto w1 = rand_var({5, 3, 1, 1}, 29), table = rand_var({6, 3}, 30), values = rand_var({5, 3}, 31);
    const std::vector<std::int64_t> ids{5, 0, 2, 5};
    const auto pos = ad::constant(Tensor::from({2, 3}, std::vector<double>{0.3, 1.7, 3.25, 2.5, 0.9, 3.6}, DType::f64));
    std::vector<ad::Var> parts{a, b};
    const std::vector<OpCase> cases{
        {"add", op_error([&] { return ad::add(a, b); }, {a, b})},
        {"sub_broadcast", op_error([&] { return ad::sub(a, row); }, {a, row})},
        {"mul", op_error([&] { return ad::mul(a, b); }, {a, b})},
        {"scale", op_error([&] { return ad::scale(a, -2.5); }, {a})},
        {"matmul", op_error([&] { return ad::matmul(a, m); }, {a, m})},
        {"matmul_batched", op_error([&] { return ad::matmul(ba, bb); }, {ba, bb})},
        {"reshape", op_error([&] { return ad::reshape(a, {2, 6}); }, {a})},
        {"transpose", op_error([&] { return ad::transpose(ba, 0, 2); }, {ba})},
        {"concat", op_error([&] { return ad::concat(parts, 1); }, {a, b})},
        {"slice", op_error([&] { return ad::slice(ba, 1, 1, 3); }, {ba})},
        {"broadcast_to", op_error([&] { return ad::broadcast_to(row, {2, 3, 4}); }, {row})},
        {"sum", op_error([&] { return ad::sum(a); }, {a})},
        {"sum_axis", op_error([&] { return ad::sum(ba, 1); }, {ba})},
        {"mean", op_error([&] { return ad::mean(a); }, {a})},
        {"conv2d", op_error([&] { return ad::conv2d(x, w, bias, {1, 1}); }, {x, w, bias})},
        {"conv2d_stride2", op_error([&] { return ad::conv2d(x, w, bias, {2, 1}); }, {x, w, bias})},
        {"conv2d_zero_init", op_error([&] { return ad::conv2d_zero_init(x, w1, bias); }, {x, w1, bias})},
        {"avg_pool2d", op_error([&] { return ad::avg_pool2d(x, 2); }, {x})},
        {"upsample_nearest", op_error([&] { return ad::upsample_nearest(x, 2); }, {x})},
        {"embedding_lookup", op_error([&] { return ad::embedding_lookup(table, ids); }, {table})},
        {"linear_interp_1d_values", op_error([&] { return ad::linear_interp_1d(values, pos); }, {values})},
    };
    double worst = 0.0;
    const std::string name = worst_of(cases, worst);
    return result("grad_linear_ops", worst < 1e-7, worst, std::to_string(cases.size()) + " ops, worst " + name);
}

CheckResult grad_nonlinear_ops() {
    auto a = rand_var({3, 5}, 40), q = rand_var({4, 3}, 41), k = rand_var({6, 3}, 42), v = rand_var({6, 2}, 43);
    auto values = rand_var({5, 3}, 44);
    Tensor p({4, 2}, DType::f64);
    for (std::int64_t i = 0; i < p.numel(); ++i)
        p.set_item(i, std::floor(static_cast<double>(i) * 0.5) + 0.2 + 0.6 * static_cast<double>(i % 2));
    auto positions = ad::variable(p);
    const std::vector<OpCase> cases{
        {"softmax", op_error([&] { return ad::softmax(a, 1); }, {a})},
        {"softmax_axis0", op_error([&] { return ad::softmax(a, 0); }, {a})},
        {"tanh", op_error([&] { return ad::tanh(a); }, {a})},
        {"sigmoid", op_error([&] { return ad::sigmoid(a); }, {a})},
        {"silu", op_error([&] { return ad::silu(a); }, {a})},
        {"layer_norm", op_error([&] { return ad::layer_norm(a); }, {a})},
        {"scaled_dot_attention", op_error([&] { return ad::scaled_dot_attention(q, k, v); }, {q, k, v})},
        {"linear_interp_1d", op_error([&] { return ad::linear_interp_1d(values, positions); }, {values, positions})},
    };
    double worst = 0.0;
    const std::string name = worst_of(cases, worst);
    return result("grad_nonlinear_ops", worst < 1e-4, worst, std::to_string(cases.size()) + " ops, worst " + name);
}

// Tap convolutions get random weights so gradients reach the branch encoders.
void activate_taps(DualDiffModel& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Parameter* p : m.store.all())
        if (p->name.find("/tap_") != std::string::npos)
            p->var.mutable_value() = normal_tensor(p->var.shape(), p->var.dtype(), rng, 0.3);
}

// One gradcheck per parameter group of a small f64 model.
CheckResult grad_model_group(const CheckOptions& o, const std::string& name, std::vector<std::string> prefixes) {
    const ModelConfig cfg = small_model_config();
    DualDiffModel m(cfg, DType::f64, o.seed + 19);
    activate_taps(m, o.seed + 20);
    // Nonzero gates so the grounding and deformable stages carry gradient.
    for (const char* g : {"sfa_bg/gamma", "sfa_fg/gamma"}) m.store.get(g).var.mutable_value().set_item(0, 0.7);
    const ConditionInputs cond = small_conditions(o.seed + 6, cfg);
    const ConditionInputs* c = &cond;
    std::mt19937_64 rng(o.seed + 21);
    const ad::Var z = ad::constant(normal_tensor({1, 3, 8, 8}, DType::f64, rng, 1.0));
    const std::vector<std::int64_t> t{123};
    auto loss = [&] { return random_projection(predict_eps(m, z, t, std::span(&c, 1)), 9); };
    std::vector<ad::Var> vars;
    std::vector<std::string> names;
    for (const std::string& prefix : prefixes)
        for (Parameter* p : m.store.with_prefix(prefix)) {
            if (!p->var.requires_grad()) continue;
            vars.push_back(p->var);
            names.push_back(p->name);
        }
    // Some attention projections carry gradients near 1e-6 at init; a step
    // wider than 1e-5 keeps the central difference clear of roundoff.
    const GradCheckResult r = gradcheck(loss, vars, names, o.model_step, o.model_entries, o.seed + 3);
    return result(name, r.max_rel_error < 1e-4, r.max_rel_error,
                  std::to_string(vars.size()) + " tensors, worst " + r.worst_input);
}

CheckResult gate_identity(const CheckOptions& o) {
    ParameterStore store(DType::f64, o.seed + 5);
    const SfaConfig cfg{8, 6, 2, 3};
    const SfaParams p = make_sfa(store, "sfa", cfg);
    if (o.corrupt_gamma) p.gamma.node()->value = Tensor::from({1}, std::vector<double>{1.0}, DType::f64);
    std::mt19937_64 rng(o.seed + 6);
    std::uniform_int_distribution<int> len(1, 12);
    std::uniform_real_distribution<double> scale_exp(-3.0, 3.0);
    std::int64_t differing = 0;
    for (std::int64_t i = 0; i < o.gate_inputs; ++i) {
        const double s = std::pow(10.0, scale_exp(rng));
        const ad::Var v1 = ad::constant(normal_tensor({len(rng), cfg.d_v}, DType::f64, rng, s));
        const ad::Var cs = ad::constant(normal_tensor({len(rng), cfg.d_cond}, DType::f64, rng, s));
        if (!gated_ground(v1, cs, p).value().identical(v1.value())) ++differing;
    }
    std::ostringstream d;
    d << o.gate_inputs << " inputs" << (o.corrupt_gamma ? ", gamma corrupted to 1" : "");
    return result("sfa_gate_identity", differing == 0, static_cast<double>(differing), d.str());
}

CheckResult mask_laws() {
    double worst = 0.0;
    bool ok = true;
    const ForegroundMask none = build_mask({}, 16, 16);
    for (double w : none.weights) ok = ok && w == 1.0;
    const std::vector<ProjectedBox> full{{0, 0.0, 0.0, 16.0, 16.0}};
    for (double w : build_mask(full, 16, 16).weights) ok = ok && w == 1.0;
    const std::vector<ProjectedBox> small{{0, 4.0, 4.0, 8.0, 8.0}};
    const ForegroundMask m = build_mask(small, 16, 16);
    for (std::int64_t v = 0; v < 16; ++v)
        for (std::int64_t u = 0; u < 16; ++u) {
            const bool in = u >= 4 && u < 8 && v >= 4 && v < 8;
            ok = ok && m.at(u, v) == (in ? 1.9375 : 1.0);
        }
    std::mt19937_64 rng(31);
    const ad::Var a = ad::constant(normal_tensor({2, 3, 16, 16}, DType::f64, rng, 1.0));
    const ad::Var b = ad::constant(normal_tensor({2, 3, 16, 16}, DType::f64, rng, 1.0));
    double plain = 0.0;
    for (std::int64_t i = 0; i < a.value().numel(); ++i) {
        const double d = a.value().item(i) - b.value().item(i);
        plain += d * d;
    }
    plain /= static_cast<double>(a.value().numel());
    worst = std::abs(masked_mse(a, b, none).value().item(0) - plain);
    return result("fgm_mask_laws", ok && worst < 1e-12, worst, "no-box, full-frame, 4x4 on 16x16, unit-mask mse");
}

CheckResult schedule_moments(const CheckOptions& o) {
    const NoiseSchedule s = make_linear_schedule();
    const double z = 0.7;
    const std::int64_t n = o.moment_draws;
    Tensor z0 = Tensor::filled({n}, DType::f64, z);
    std::mt19937_64 rng(o.seed + 1000);
    double worst = 0.0;
    for (std::int64_t t : {1, 500, 1000}) {
        const Tensor zt = q_sample(z0, t, normal_tensor({n}, DType::f64, rng, 1.0), s);
        double mean = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mean += zt.item(i);
        mean /= static_cast<double>(n);
        double var = 0.0, m4 = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = zt.item(i) - mean;
            var += d * d;
            m4 += d * d * d * d;
        }
        var /= static_cast<double>(n - 1);
        m4 /= static_cast<double>(n);
        const double want_var = 1.0 - s.abar(t);
        const double z_mean = std::abs(mean - std::sqrt(s.abar(t)) * z) / std::sqrt(want_var / static_cast<double>(n));
        const double z_var = std::abs(var - want_var) / std::sqrt((m4 - var * var) / static_cast<double>(n));
        worst = std::max({worst, z_mean, z_var});
    }
    return result("schedule_moments", worst < 3.0, worst, std::to_string(n) + " draws at t = 1, 500, 1000 (metric in SE)");
}

CheckResult schedule_sanity() {
    const NoiseSchedule s = make_linear_schedule();
    bool ok = s.abar(0) == 1.0 && s.abar(s.T) < 0.01;
    double worst = 0.0;
    for (std::int64_t t = 1; t <= s.T; ++t) {
        ok = ok && s.beta(t) > 0.0 && s.beta(t) < 1.0 && s.abar(t) < s.abar(t - 1);
        if (t > 1) ok = ok && s.beta(t) > s.beta(t - 1);
        const double a = std::sqrt(s.abar(t));
        worst = std::max(worst, std::abs(a * a + (1.0 - s.abar(t)) - 1.0));
    }
    return result("schedule_sanity", ok && worst < 1e-12, s.abar(s.T), "metric is abar_T");
}

CheckResult zero_init_equivalence(const CheckOptions& o) {
    const ModelConfig cfg = o.full_size_zero_init ? ModelConfig{} : small_model_config();
    DualDiffModel m(cfg, DType::f32, o.seed + 7);
    init_branches_from_base(m);
    ConditionInputs cond;
    if (o.full_size_zero_init) {
        const Scene scene = generate_scene(o.seed + 8, GeneratorSpec{});
        cond = make_conditions(scene, 0, default_plan(scene.grid));
    } else {
        cond = small_conditions(o.seed + 8, cfg);
    }
    std::int64_t differing = 0;
    for (std::int64_t k = 0; k < o.zero_init_seeds; ++k) {
        SamplerConfig sc;
        if (!o.full_size_zero_init) sc.steps = 5;
        const Tensor with = sample(m, cond, sc, o.seed + static_cast<std::uint64_t>(k));
        sc.use_branches = false;
        if (!with.identical(sample(m, cond, sc, o.seed + static_cast<std::uint64_t>(k)))) ++differing;
    }
    std::ostringstream d;
    d << o.zero_init_seeds << " seeds, " << (o.full_size_zero_init ? "default" : "small") << " model";
    return result("zero_init_equivalence", differing == 0, static_cast<double>(differing), d.str());
}

CheckResult guidance_algebra(const CheckOptions& o) {
    const ModelConfig cfg = small_model_config();
    DualDiffModel m(cfg, DType::f64, o.seed + 9);
    activate_taps(m, o.seed + 10);
    const ConditionInputs cond = small_conditions(o.seed + 3, cfg);
    std::mt19937_64 rng(o.seed + 12);
    const Tensor z = normal_tensor({1, 3, 8, 8}, DType::f64, rng, 1.0);
    SamplerConfig sc;
    auto at = [&](double s) {
        sc.guidance = s;
        return guided_eps(m, z, 300, cond, sc);
    };
    const Tensor e0 = at(0.0), eh = at(0.5), e1 = at(1.0);
    double worst = 0.0;
    for (std::int64_t i = 0; i < z.numel(); ++i)
        worst = std::max(worst, std::abs(2.0 * eh.item(i) - e0.item(i) - e1.item(i)));
    return result("guidance_algebra", worst < 1e-6, worst, "2 eps(0.5) - eps(0) vs eps(1)");
}

CheckResult frozen_base(const CheckOptions& o) {
    const ModelConfig cfg = small_model_config();
    std::vector<Scene> scenes;
    for (std::uint64_t i = 0; i < 2; ++i) scenes.push_back(generate_scene(o.seed + i, small_generator_spec()));
    Dataset data(scenes, DType::f32, cfg.ors_samples);
    DualDiffModel m(cfg, DType::f32, o.seed + 17);
    TrainConfig tc;
    tc.batch = 2;
    tc.lr = 1e-3;
    tc.phase = Phase::branch_train;
    const auto before = m.store.digest(kBasePrefix);
    Trainer tr(m, data, tc);
    for (int i = 0; i < 3; ++i) tr.step();
    const bool same = m.store.digest(kBasePrefix) == before;
    return result("frozen_base_contract", same, same ? 0.0 : 1.0, "3 branch_train steps");
}

}  // namespace

ModelConfig small_model_config() {
    ModelConfig c;
    c.unet.base = 4;
    c.unet.cond_width = 8;
    c.unet.time_width = 8;
    c.unet.time_fourier = {2, true};
    c.encoders = EncoderConfig{8, 4, {2, true}};
    c.sfa = SfaConfig{4, 8, 1, 2};
    c.ors_class_width = 2;
    c.ors_samples = 8;
    return c;
}

GeneratorSpec small_generator_spec() {
    GeneratorSpec s;
    s.image_width = 8;
    s.image_height = 8;
    s.cameras = 1;
    s.vehicles = {2, 2};
    s.pedestrians = {1, 1};
    return s;
}

ConditionInputs small_conditions(std::uint64_t seed, const ModelConfig& cfg) {
    const Scene scene = generate_scene(seed, small_generator_spec());
    SamplingPlan plan = default_plan(scene.grid);
    plan.N = cfg.ors_samples;
    return make_conditions(scene, 0, plan);
}

std::vector<Check> registered_checks(const CheckOptions& o) {
    std::vector<Check> all{
        {"ors_oracle_equivalence", "ors", [o] { return ors_oracle(o); }},
        {"ors_decomposition", "ors", [o] { return ors_decomposition(o); }},
        {"grad_linear_ops", "gradients", [] { return grad_linear_ops(); }},
        {"grad_nonlinear_ops", "gradients", [] { return grad_nonlinear_ops(); }},
        {"grad_encoders", "gradients", [o] { return grad_model_group(o, "grad_encoders", {"enc/"}); }},
        {"grad_sfa", "gradients",
         [o] { return grad_model_group(o, "grad_sfa", {"sfa_bg/", "sfa_fg/", "ors_bg/", "ors_fg/"}); }},
        {"grad_branches", "gradients", [o] { return grad_model_group(o, "grad_branches", {"tau/", "mu/"}); }},
        {"grad_unet", "gradients", [o] { return grad_model_group(o, "grad_unet", {"base/"}); }},
        {"sfa_gate_identity", "sfa", [o] { return gate_identity(o); }},
        {"fgm_mask_laws", "masks", [] { return mask_laws(); }},
        {"schedule_moments", "schedule", [o] { return schedule_moments(o); }},
        {"schedule_sanity", "schedule", [] { return schedule_sanity(); }},
        {"zero_init_equivalence", "model", [o] { return zero_init_equivalence(o); }},
        {"guidance_algebra", "model", [o] { return guidance_algebra(o); }},
        {"frozen_base_contract", "model", [o] { return frozen_base(o); }},
    };
    const VerifyToggles& t = o.suites;
    std::vector<Check> enabled;
    for (Check& c : all) {
        const bool on = (c.suite == "ors" && t.ors) || (c.suite == "gradients" && t.gradients) ||
                        (c.suite == "sfa" && t.sfa) || (c.suite == "masks" && t.masks) ||
                        (c.suite == "schedule" && t.schedule) || (c.suite == "model" && t.model);
        if (on) enabled.push_back(std::move(c));
    }
    return enabled;
}

std::string format_result(const CheckResult& r) {
    std::ostringstream s;
    s << r.name << ' ' << (r.passed ? "PASS" : "FAIL") << ' ' << r.metric;
    if (!r.detail.empty()) s << " # " << r.detail;
    return s.str();
}

std::vector<CheckResult> run_checks(std::span<const Check> checks, std::ostream& report) {
    std::vector<CheckResult> out;
    for (const Check& c : checks) {
        CheckResult r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = result(c.name, false, std::nan(""), std::string("threw: ") + e.what());
        }
        report << format_result(r) << '\n' << std::flush;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace dualdiff::verify
