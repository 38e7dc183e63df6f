#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "dualdiff/train.hpp"
#include "dualdiff/verify/gradcheck.hpp"

using namespace dualdiff;
namespace ad = dualdiff::ad;

namespace {

ModelConfig tiny_config() {
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

GeneratorSpec tiny_spec() {
    GeneratorSpec s;
    s.image_width = 8;
    s.image_height = 8;
    s.cameras = 1;
    s.vehicles = {2, 2};
    s.pedestrians = {1, 1};
    return s;
}

ConditionInputs tiny_conditions(std::uint64_t seed) {
    const Scene scene = generate_scene(seed, tiny_spec());
    SamplingPlan plan = default_plan(scene.grid);
    plan.N = 8;
    return make_conditions(scene, 0, plan);
}

Tensor random_normal(Shape s, DType dtype, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return normal_tensor(std::move(s), dtype, rng, 1.0);
}

// Gives every zero-initialized tap convolution random weights so the branches
// contribute.
void activate_taps(DualDiffModel& m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const char* b : {"tau/", "mu/"})
        for (Parameter* p : m.store.with_prefix(b))
            if (p->name.find("/tap_") != std::string::npos)
                p->var.mutable_value() = normal_tensor(p->var.shape(), p->var.dtype(), rng, 0.3);
}

}  // namespace

TEST_CASE("linear schedule invariants") {
    const NoiseSchedule s = make_linear_schedule();
    CHECK(s.T == 1000);
    CHECK(s.abar(0) == 1.0);
    for (std::int64_t t = 1; t <= s.T; ++t) {
        CHECK(s.beta(t) > 0.0);
        CHECK(s.beta(t) < 1.0);
        if (t > 1) CHECK(s.beta(t) > s.beta(t - 1));
        CHECK(s.abar(t) < s.abar(t - 1));
    }
    CHECK(s.abar(s.T) < 0.01);
    CHECK(s.beta(1) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta(s.T) == doctest::Approx(0.02).epsilon(1e-12));
    // Independent running product.
    double prod = 1.0;
    for (std::int64_t t = 1; t <= s.T; ++t) {
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * static_cast<double>(t - 1) / 999.0);
        CHECK(std::abs(s.abar(t) - prod) < 1e-12);
    }
}

TEST_CASE("q_sample endpoints and arithmetic") {
    const NoiseSchedule s = make_linear_schedule();
    const Tensor z0 = random_normal({2, 3, 4, 4}, DType::f64, 1);
    const Tensor eps = random_normal({2, 3, 4, 4}, DType::f64, 2);
    CHECK(q_sample(z0, 0, eps, s).identical(z0));
    const Tensor z1 = q_sample(z0, 1, eps, s);
    for (std::int64_t i = 0; i < z0.numel(); ++i)
        CHECK(std::abs(z1.item(i) - (std::sqrt(0.9999) * z0.item(i) + std::sqrt(0.0001) * eps.item(i))) < 1e-14);
    CHECK_THROWS(q_sample(z0, -1, eps, s));
    CHECK_THROWS(q_sample(z0, 1001, eps, s));
    CHECK_THROWS_AS(q_sample(z0, 5, random_normal({2, 3, 4, 5}, DType::f64, 3), s), ShapeError);
}

TEST_CASE("q_sample Monte-Carlo moments") {
    const NoiseSchedule s = make_linear_schedule();
    constexpr std::int64_t kDraws = 100000;
    const double z = 0.7;
    Tensor z0({kDraws}, DType::f64);
    for (std::int64_t i = 0; i < kDraws; ++i) z0.set_item(i, z);
    for (std::int64_t t : {1, 500, 1000}) {
        const Tensor zt = q_sample(z0, t, random_normal({kDraws}, DType::f64, static_cast<std::uint64_t>(t)), s);
        double mean = 0.0;
        for (std::int64_t i = 0; i < kDraws; ++i) mean += zt.item(i);
        mean /= kDraws;
        double var = 0.0, m4 = 0.0;
        for (std::int64_t i = 0; i < kDraws; ++i) {
            const double d = zt.item(i) - mean;
            var += d * d;
            m4 += d * d * d * d;
        }
        var /= kDraws - 1;
        m4 /= kDraws;
        const double want_var = 1.0 - s.abar(t);
        const double se_mean = std::sqrt(want_var / kDraws);
        const double se_var = std::sqrt((m4 - var * var) / kDraws);
        CHECK(std::abs(mean - std::sqrt(s.abar(t)) * z) < 3.0 * se_mean);
        CHECK(std::abs(var - want_var) < 3.0 * se_var);
    }
}

TEST_CASE("UNet restores spatial shape and treats zero residuals as identity") {
    ParameterStore store(DType::f32, 3);
    UNetConfig cfg;
    cfg.base = 4;
    cfg.cond_width = 8;
    cfg.time_width = 8;
    const UNet net = make_unet(store, "u", cfg);
    for (std::int64_t side : {16, 24, 32}) {
        const ad::Var z = ad::constant(random_normal({2, 3, side, side}, DType::f32, 4));
        const std::vector<std::int64_t> t{10, 900};
        const ad::Var tf = ad::constant(timestep_features(t, 1000, cfg.time_fourier, DType::f32));
        const auto env = null_env_batch(net, 2);
        const ad::Var out = unet_forward(net, z, tf, env);
        CHECK(out.shape() == z.shape());
        if (side == 16) {
            const TapResiduals zero{ad::constant(Tensor({2, 4, 16, 16}, DType::f32)),
                                    ad::constant(Tensor({2, 8, 8, 8}, DType::f32)),
                                    ad::constant(Tensor({2, 8, 4, 4}, DType::f32))};
            CHECK(unet_forward(net, z, tf, env, std::span(&zero, 1)).value().identical(out.value()));
            const TapResiduals bad{zero.s1, ad::constant(Tensor({2, 8, 4, 4}, DType::f32)), zero.mid};
            CHECK_THROWS_AS(unet_forward(net, z, tf, env, std::span(&bad, 1)), ShapeError);
        }
    }
}

TEST_CASE("branch taps start at zero and respond to one optimizer step") {
    DualDiffModel m(tiny_config(), DType::f64, 5);
    for (Parameter* p : m.store.all())
        if (p->name.find("/tap_") != std::string::npos)
            for (std::int64_t i = 0; i < p->var.value().numel(); ++i) CHECK(p->var.value().item(i) == 0.0);

    const ConditionInputs cond = tiny_conditions(1);
    const BranchOutputs o = condition_item(m, cond);
    const ad::Var z = ad::constant(random_normal({1, 3, 8, 8}, DType::f64, 6));
    const std::vector<std::int64_t> t{400};
    const ad::Var tf = ad::constant(timestep_features(t, 1000, m.cfg.unet.time_fourier, DType::f64));
    const std::vector<ad::Var> env_b{o.env_b.tokens}, env_f{o.env_f.tokens};
    auto all_zero = [](const TapResiduals& r) {
        for (const ad::Var& v : {r.s1, r.s2, r.mid})
            for (std::int64_t i = 0; i < v.value().numel(); ++i)
                if (v.value().item(i) != 0.0) return false;
        return true;
    };
    const TapResiduals r0 = branch_forward(m.tau, std::span(&o.v_star_b, 1), z, tf, env_b);
    CHECK(all_zero(r0));
    CHECK(all_zero(branch_forward(m.mu, std::span(&o.v_star_f, 1), z, tf, env_f)));

    // Provenance is enforced in both directions.
    CHECK_THROWS_AS(branch_forward(m.tau, std::span(&o.v_star_f, 1), z, tf, env_b), std::invalid_argument);
    CHECK_THROWS_AS(branch_forward(m.mu, std::span(&o.v_star_b, 1), z, tf, env_f), std::invalid_argument);

    m.store.zero_grad();
    ad::backward(ad::add(ad::add(verify::random_projection(r0.s1, 1), verify::random_projection(r0.s2, 2)),
                         verify::random_projection(r0.mid, 3)));
    Adam adam(AdamConfig{1e-2});
    adam.step(m.store.with_prefix("tau/tap_"));
    CHECK_FALSE(all_zero(branch_forward(m.tau, std::span(&o.v_star_b, 1), z, tf, env_b)));
}

TEST_CASE("fresh branches leave the base prediction and samples unchanged") {
    DualDiffModel m(tiny_config(), DType::f32, 7);
    const ConditionInputs cond = tiny_conditions(2);
    const ad::Var z = ad::constant(random_normal({1, 3, 8, 8}, DType::f32, 8));
    const std::vector<std::int64_t> t{250};
    const ConditionInputs* c = &cond;
    const Tensor with = predict_eps(m, z, t, std::span(&c, 1), true).value();
    CHECK(with.identical(predict_eps(m, z, t, {}, false).value()));

    SamplerConfig sc;
    sc.steps = 4;
    const Tensor a = sample(m, cond, sc, 11);
    sc.use_branches = false;
    CHECK(a.identical(sample(m, cond, sc, 11)));
    CHECK(a.shape() == Shape{1, 3, 8, 8});
}

TEST_CASE("guidance algebra") {
    DualDiffModel m(tiny_config(), DType::f64, 9);
    activate_taps(m, 10);
    const ConditionInputs cond = tiny_conditions(3);
    const ConditionInputs other = tiny_conditions(4);
    const Tensor z = random_normal({1, 3, 8, 8}, DType::f64, 12);
    SamplerConfig sc;
    auto eps_at = [&](double s, const ConditionInputs& c) {
        sc.guidance = s;
        return guided_eps(m, z, 300, c, sc);
    };
    const Tensor e0 = eps_at(0.0, cond), e_half = eps_at(0.5, cond), e1 = eps_at(1.0, cond), e2 = eps_at(2.0, cond);
    CHECK(e0.identical(eps_at(0.0, other)));
    CHECK_FALSE(e1.identical(eps_at(1.0, other)));
    CHECK_FALSE(e0.identical(e1));

    const ConditionInputs* c = &cond;
    const std::vector<std::int64_t> t{300};
    CHECK(e1.identical(predict_eps(m, ad::constant(z), t, std::span(&c, 1)).value()));
    double worst = 0.0, worst2 = 0.0;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
        worst = std::max(worst, std::abs(2.0 * e_half.item(i) - e0.item(i) - e1.item(i)));
        worst2 = std::max(worst2, std::abs(e2.item(i) - (2.0 * e1.item(i) - e0.item(i))));
    }
    CHECK(worst < 1e-6);
    CHECK(worst2 < 1e-6);

    sc.guidance = 0.0;
    sc.steps = 3;
    CHECK(sample(m, cond, sc, 5).identical(sample(m, other, sc, 5)));
}

TEST_CASE("samplers: timesteps, determinism and range") {
    CHECK(ddim_timesteps(1000, 4) == std::vector<std::int64_t>{1000, 750, 500, 250});
    CHECK(ddim_timesteps(1000, 20).front() == 1000);
    CHECK(ddim_timesteps(1000, 20).back() == 50);
    CHECK_THROWS(validate_sampler(SamplerConfig{SamplerKind::ddim, 0}, 1000));
    CHECK_THROWS(validate_sampler(SamplerConfig{SamplerKind::ddim, 1001}, 1000));
    SamplerConfig neg;
    neg.guidance = -0.5;
    CHECK_THROWS(validate_sampler(neg, 1000));
    CHECK(parse_sampler("ddpm") == SamplerKind::ddpm);
    CHECK_THROWS(parse_sampler("unipc"));

    ModelConfig mc = tiny_config();
    mc.T = 20;
    DualDiffModel m(mc, DType::f32, 13);
    activate_taps(m, 14);
    const ConditionInputs cond = tiny_conditions(5);
    SamplerConfig sc;
    sc.steps = 5;
    const Tensor a = sample(m, cond, sc, 21);
    CHECK(a.identical(sample(m, cond, sc, 21)));
    CHECK_FALSE(a.identical(sample(m, cond, sc, 22)));
    sc.kind = SamplerKind::ddpm;
    sc.eta = 1.0;
    const Tensor d = sample(m, cond, sc, 21);
    CHECK(d.identical(sample(m, cond, sc, 21)));
    for (const Tensor* x : {&a, &d})
        for (std::int64_t i = 0; i < x->numel(); ++i) {
            CHECK(x->item(i) >= -1.0);
            CHECK(x->item(i) <= 1.0);
        }
}

TEST_CASE("unit masks reduce the batch loss to plain MSE") {
    const Tensor e = random_normal({2, 3, 4, 4}, DType::f64, 15);
    const Tensor p = random_normal({2, 3, 4, 4}, DType::f64, 16);
    std::vector<ForegroundMask> masks(2, ForegroundMask{4, 4, std::vector<double>(16, 1.0)});
    double want = 0.0;
    for (std::int64_t i = 0; i < e.numel(); ++i) want += (e.item(i) - p.item(i)) * (e.item(i) - p.item(i));
    want /= static_cast<double>(e.numel());
    CHECK(std::abs(batch_loss(ad::constant(e), ad::constant(p), masks).value().item(0) - want) < 1e-12);
}

TEST_CASE("trainer respects phase freezing and aborts on non-finite loss") {
    std::vector<Scene> scenes;
    for (std::uint64_t i = 0; i < 3; ++i) scenes.push_back(generate_scene(i, tiny_spec()));
    Dataset data(scenes, DType::f32, 8);
    CHECK(data.size() == 3);
    CHECK(data[1].z0.shape() == Shape{3, 8, 8});

    DualDiffModel m(tiny_config(), DType::f32, 17);
    TrainConfig tc;
    tc.batch = 2;
    tc.lr = 1e-3;

    tc.phase = Phase::branch_train;
    configure_phase(m, tc.phase);
    const auto base_before = m.store.digest(kBasePrefix);
    const auto tau_before = m.store.digest("tau/");
    {
        Trainer tr(m, data, tc);
        for (int i = 0; i < 3; ++i) CHECK(tr.step().applied);
        CHECK(tr.steps_done() == 3);
    }
    CHECK(m.store.digest(kBasePrefix) == base_before);
    CHECK(m.store.digest("tau/") != tau_before);
    CHECK_FALSE(m.store.get("enc/text/table").trainable);

    tc.phase = Phase::base_pretrain;
    configure_phase(m, tc.phase);
    const auto branches_before = m.store.digest("tau/") ^ m.store.digest("mu/");
    {
        Trainer tr(m, data, tc);
        tr.step();
    }
    CHECK(m.store.digest(kBasePrefix) != base_before);
    CHECK((m.store.digest("tau/") ^ m.store.digest("mu/")) == branches_before);

    tc.phase = Phase::joint;
    configure_phase(m, tc.phase);
    CHECK(m.store.get("sfa_bg/gamma").trainable);
    CHECK(m.store.get(std::string(kBasePrefix) + "conv_out/weight").trainable);
    CHECK_FALSE(m.store.get("enc/text/table").trainable);

    m.store.get("base/conv_out/bias").var.mutable_value().set_item(0, std::numeric_limits<double>::quiet_NaN());
    const auto all_before = m.store.digest();
    Trainer tr(m, data, tc);
    const StepResult r = tr.step();
    CHECK_FALSE(r.applied);
    CHECK_FALSE(std::isfinite(r.loss));
    CHECK(m.store.digest() == all_before);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    CHECK_NOTHROW(validate_train_config(tc));
    tc.p_drop = 1.0;
    CHECK_THROWS(validate_train_config(tc));
    tc.p_drop = -0.1;
    CHECK_THROWS(validate_train_config(tc));
    tc = TrainConfig{};
    tc.sampler.guidance = -1.0;
    CHECK_THROWS(validate_train_config(tc));
    tc = TrainConfig{};
    tc.batch = 0;
    CHECK_THROWS(validate_train_config(tc));
    CHECK(parse_phase("joint") == Phase::joint);
    CHECK_THROWS(parse_phase("finetune"));
}

TEST_CASE("UNet and branch gradients match finite differences") {
    DualDiffModel m(tiny_config(), DType::f64, 19);
    activate_taps(m, 20);
    const ConditionInputs cond = tiny_conditions(6);
    const ConditionInputs* c = &cond;
    const ad::Var z = ad::constant(random_normal({1, 3, 8, 8}, DType::f64, 21));
    const std::vector<std::int64_t> t{123};
    auto loss = [&] { return verify::random_projection(predict_eps(m, z, t, std::span(&c, 1)), 9); };
    for (const char* prefix : {"base/", "tau/", "mu/", "ors_bg/", "ors_fg/", "sfa_bg/", "sfa_fg/", "enc/"}) {
        std::vector<ad::Var> vars;
        std::vector<std::string> names;
        for (Parameter* p : m.store.with_prefix(prefix)) {
            if (!p->var.requires_grad()) continue;
            vars.push_back(p->var);
            names.push_back(p->name);
        }
        // Some attention keys get gradients near 1e-6 at init; a wider step keeps
        // the central difference above roundoff.
        const auto r = verify::gradcheck(loss, vars, names, 3e-4, 4, 3);
        INFO(std::string(prefix) << " worst " << r.worst_input);
        CHECK(r.max_rel_error < 1e-4);
    }
}
