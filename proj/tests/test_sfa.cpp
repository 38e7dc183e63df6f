#include <doctest.h>

#include <cmath>
#include <random>

#include "dualdiff/sfa.hpp"
#include "dualdiff/verify/gradcheck.hpp"

using namespace dualdiff;
namespace ad = dualdiff::ad;

namespace {

const SfaConfig kCfg{8, 6, 2, 3};

ad::Var random_tokens(std::mt19937_64& rng, std::int64_t n, std::int64_t d) {
    return ad::constant(normal_tensor({n, d}, DType::f64, rng, 1.0));
}

// Overwrite every parameter (including the zero-initialized ones) with noise.
void randomize(ParameterStore& store, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Parameter* p : store.all()) p->var.mutable_value() = normal_tensor(p->var.shape(), DType::f64, rng, 0.4);
}

TokenSeq seq(const ad::Var& t, TokenKind kind) {
    return {t, std::vector<TokenKind>(static_cast<std::size_t>(t.shape()[0]), kind)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.item(i) - b.item(i)));
    return m;
}

}  // namespace

TEST_CASE("make_sfa initial state") {
    ParameterStore store(DType::f64, 1);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    CHECK(p.gamma.value().item(0) == 0.0);
    for (const ad::Var& z : {p.offset_head.weight, p.offset_head.bias, p.weight_head.weight, p.weight_head.bias,
                             p.deform_out.weight, p.deform_out.bias})
        for (std::int64_t i = 0; i < z.value().numel(); ++i) CHECK(z.value().item(i) == 0.0);
    CHECK_THROWS_AS(make_sfa(store, "bad", SfaConfig{9, 6, 2, 3}), std::invalid_argument);
}

TEST_CASE("self_attend on one token is v + W_o W_v v") {
    ParameterStore store(DType::f64, 2);
    const SfaParams p = make_sfa(store, "sfa", SfaConfig{8, 6, 1, 3});
    std::mt19937_64 rng(3);
    const ad::Var v = random_tokens(rng, 1, 8);
    const Tensor y = self_attend(v, p).value();
    const Tensor wv = p.self_attn.v.weight.value(), wo = p.self_attn.o.weight.value();
    for (std::int64_t c = 0; c < 8; ++c) {
        double expect = v.value().item(c);
        for (std::int64_t j = 0; j < 8; ++j) {
            double vj = 0.0;
            for (std::int64_t i = 0; i < 8; ++i) vj += v.value().item(i) * wv.item(i * 8 + j);
            expect += vj * wo.item(j * 8 + c);
        }
        CHECK(std::abs(y.item(c) - expect) < 1e-12);
    }
    CHECK_THROWS_AS(self_attend(random_tokens(rng, 2, 7), p), ShapeError);
}

TEST_CASE("self_attend is permutation equivariant") {
    ParameterStore store(DType::f64, 4);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    std::mt19937_64 rng(5);
    const ad::Var v = random_tokens(rng, 6, 8);
    const std::vector<std::int64_t> perm{3, 0, 5, 1, 4, 2};
    const ad::Var eye = ad::constant(Tensor::from({6, 6}, [&] {
        std::vector<double> e(36, 0.0);
        for (std::size_t r = 0; r < 6; ++r) e[r * 6 + static_cast<std::size_t>(perm[r])] = 1.0;
        return e;
    }(), DType::f64));
    const Tensor a = ad::matmul(eye, self_attend(v, p)).value();
    const Tensor b = self_attend(ad::matmul(eye, v), p).value();
    CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("gated_ground: zero gate is the identity, nonzero gate sees the spatial tokens") {
    ParameterStore store(DType::f64, 6);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const ad::Var v1 = random_tokens(rng, 5, 8);
        const ad::Var cs = random_tokens(rng, 1 + trial % 4, 6);
        CHECK(gated_ground(v1, cs, p).value().identical(v1.value()));
    }
    p.gamma.node()->value = Tensor::scalar(1.0, DType::f64).reshaped({1});
    const ad::Var v1 = random_tokens(rng, 5, 8);
    const ad::Var a = random_tokens(rng, 3, 6), b = random_tokens(rng, 3, 6);
    const Tensor ya = gated_ground(v1, a, p).value(), yb = gated_ground(v1, b, p).value();
    CHECK(ya.shape() == Shape{5, 8});
    CHECK(max_abs_diff(ya, yb) > 1e-6);
    const Shape none{0, 6};
    CHECK_THROWS(gated_ground(v1, ad::constant(Tensor(none, DType::f64)), p));
}

TEST_CASE("tanh gate stays below one for finite gamma") {
    // Below |gamma| ~ 19 the double result is strictly inside (-1, 1); beyond
    // that it rounds to exactly +-1.
    for (double g : {0.0, 0.5, 3.0, 10.0, 18.0, -18.0}) {
        const Tensor t = ad::tanh(ad::constant(Tensor::scalar(g, DType::f64))).value();
        CHECK(std::abs(t.item(0)) < 1.0);
    }
    CHECK(std::abs(ad::tanh(ad::constant(Tensor::scalar(1e6, DType::f64))).value().item(0)) <= 1.0);
}

TEST_CASE("deform_fuse: zero heads sample the midpoint with uniform weights") {
    ParameterStore store(DType::f64, 8);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    std::mt19937_64 rng(9);
    const ad::Var v2 = random_tokens(rng, 4, 8);
    const DeformSampling s = deform_sampling(v2, 5, p);
    for (std::int64_t i = 0; i < 12; ++i) {
        CHECK(s.positions.value().item(i) == 2.0);
        CHECK(std::abs(s.weights.value().item(i) - 1.0 / 3.0) < 1e-15);
    }
    CHECK(deform_fuse(v2, random_tokens(rng, 5, 6), p).value().identical(v2.value()));
}

TEST_CASE("deform_fuse: positions stay in range and weights sum to one") {
    ParameterStore store(DType::f64, 10);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    randomize(store, 11);
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t n_txt = 1 + trial % 7;
        const ad::Var v2 = ad::constant(normal_tensor({6, 8}, DType::f64, rng, 1.0 + 5.0 * (trial % 3)));
        const DeformSampling s = deform_sampling(v2, n_txt, p);
        for (std::int64_t q = 0; q < 6; ++q) {
            double total = 0.0;
            for (std::int64_t k = 0; k < 3; ++k) {
                const double pos = s.positions.value().item(q * 3 + k);
                CHECK(pos >= 0.0);
                CHECK(pos <= static_cast<double>(n_txt - 1));
                total += s.weights.value().item(q * 3 + k);
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
        CHECK(deform_fuse(v2, random_tokens(rng, n_txt, 6), p).shape() == Shape{6, 8});
    }
}

TEST_CASE("deform_fuse: one text token makes the offsets irrelevant") {
    ParameterStore store(DType::f64, 13);
    SfaParams p = make_sfa(store, "sfa", kCfg);
    randomize(store, 14);
    std::mt19937_64 rng(15);
    const ad::Var v2 = random_tokens(rng, 4, 8), text = random_tokens(rng, 1, 6);
    const Tensor a = deform_fuse(v2, text, p).value();
    p.offset_head.weight.mutable_value() = normal_tensor({8, 3}, DType::f64, rng, 3.0);
    CHECK(deform_fuse(v2, text, p).value().identical(a));
}

TEST_CASE("linear interpolation at p = 1.25") {
    const ad::Var values = ad::constant(Tensor::from({3, 2}, std::vector<double>{1, -1, 5, 2, 9, 10}, DType::f64));
    const ad::Var pos = ad::constant(Tensor::from({1, 1}, std::vector<double>{1.25}, DType::f64));
    const Tensor y = ad::linear_interp_1d(values, pos).value();
    CHECK(y.item(0) == doctest::Approx(0.75 * 5 + 0.25 * 9).epsilon(1e-15));
    CHECK(y.item(1) == doctest::Approx(0.75 * 2 + 0.25 * 10).epsilon(1e-15));
}

TEST_CASE("sfa_forward is v'1 at initialization and checks the spatial provenance") {
    ParameterStore store(DType::f64, 16);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    std::mt19937_64 rng(17);
    const ad::Var v = random_tokens(rng, 6, 8);
    const TokenSeq map = seq(random_tokens(rng, 3, 6), TokenKind::map);
    const TokenSeq box = seq(random_tokens(rng, 2, 6), TokenKind::box);
    const TokenSeq text = seq(random_tokens(rng, 4, 6), TokenKind::text);
    const VisualTokens fg = sfa_forward({v, Branch::foreground}, map, text, p);
    CHECK(fg.tokens.value().identical(self_attend(v, p).value()));
    CHECK(fg.size() == 6);
    CHECK(fg.provenance == Branch::foreground);
    CHECK(sfa_forward({v, Branch::background}, box, text, p).size() == 6);
    CHECK_THROWS_AS(sfa_forward({v, Branch::foreground}, box, text, p), std::invalid_argument);
    CHECK_THROWS_AS(sfa_forward({v, Branch::background}, map, text, p), std::invalid_argument);
}

TEST_CASE("sfa gradients match finite differences for every parameter") {
    ParameterStore store(DType::f64, 18);
    const SfaParams p = make_sfa(store, "sfa", kCfg);
    randomize(store, 19);
    std::mt19937_64 rng(20);
    const ad::Var v = random_tokens(rng, 5, 8);
    const TokenSeq map = seq(random_tokens(rng, 3, 6), TokenKind::map);
    const TokenSeq text = seq(random_tokens(rng, 4, 6), TokenKind::text);
    std::vector<ad::Var> params;
    std::vector<std::string> names;
    for (Parameter* q : store.all()) {
        params.push_back(q->var);
        names.push_back(q->name);
    }
    const auto r = verify::gradcheck(
        [&] { return verify::random_projection(sfa_forward({v, Branch::foreground}, map, text, p).tokens, 21); },
        params, names);
    INFO(r.worst_input);
    CHECK(r.max_rel_error < 1e-4);

    // End to end through gamma alone, starting from the zero gate.
    ParameterStore fresh(DType::f64, 22);
    const SfaParams q = make_sfa(fresh, "sfa", kCfg);
    const std::vector<ad::Var> gamma{q.gamma};
    const auto rg = verify::gradcheck(
        [&] { return verify::random_projection(sfa_forward({v, Branch::foreground}, map, text, q).tokens, 23); },
        gamma);
    CHECK(rg.max_rel_error < 1e-4);
}
