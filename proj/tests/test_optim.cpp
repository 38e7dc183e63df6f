#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "dualdiff/nn.hpp"
#include "dualdiff/params.hpp"

using namespace dualdiff;
namespace ad = dualdiff::ad;

namespace {

void set_grad(Parameter& p, double g) {
    p.var.zero_grad();
    ad::backward(ad::scale(ad::sum(p.var), g));
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    ParameterStore store(DType::f32, 1);
    store.add("w", uniform_tensor({8}, DType::f32, store.rng(), 1.0));
    Tensor before = store.get("w").var.value();
    set_grad(store.get("w"), 3.7);
    Adam adam({0.0});
    auto params = store.all();
    adam.step(params);
    CHECK(store.get("w").var.value().identical(before));
}

TEST_CASE("first adam step moves by lr * sign(grad)") {
    // Closed form: m1 = (1-b1) g, v1 = (1-b2) g^2, bias-corrected mhat = g,
    // vhat = g^2, so the step is lr * g / (|g| + eps).
    ParameterStore store(DType::f64, 1);
    store.add("w", Tensor::scalar(1.0, DType::f64));
    set_grad(store.get("w"), 1.0);
    Adam adam({8e-5});
    auto params = store.all();
    adam.step(params);
    const double expected = 1.0 - 8e-5 * 1.0 / (1.0 + 1e-8);
    CHECK(store.get("w").var.value().item(0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("identical parameters with identical gradients update identically") {
    ParameterStore store(DType::f32, 2);
    Tensor init = uniform_tensor({5}, DType::f32, store.rng(), 1.0);
    store.add("a", init);
    store.add("b", init);
    Adam adam({1e-2});
    for (int s = 0; s < 3; ++s) {
        set_grad(store.get("a"), 0.3 * (s + 1));
        set_grad(store.get("b"), 0.3 * (s + 1));
        auto params = store.all();
        adam.step(params);
    }
    CHECK(store.get("a").var.value().identical(store.get("b").var.value()));
}

TEST_CASE("checked mode rejects a NaN gradient without touching parameters") {
    ParameterStore store(DType::f64, 3);
    store.add("a", Tensor::scalar(1.0, DType::f64));
    store.add("b", Tensor::scalar(2.0, DType::f64));
    set_grad(store.get("a"), 1.0);
    store.get("b").var.node()->grad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN(), DType::f64);
    Adam adam({0.1});
    ad::set_checked(true);
    auto params = store.all();
    CHECK_THROWS_AS(adam.step(params), NonFiniteError);
    ad::set_checked(false);
    CHECK(store.get("a").var.value().item(0) == 1.0);
    CHECK(store.get("b").var.value().item(0) == 2.0);
    CHECK(adam.steps() == 0);
}

TEST_CASE("parameter names are unique") {
    ParameterStore store(DType::f32, 4);
    store.add("x", Tensor({1}, DType::f32));
    CHECK_THROWS_AS(store.add("x", Tensor({1}, DType::f32)), std::invalid_argument);
}

TEST_CASE("zero conv is exactly zero at construction") {
    ParameterStore store(DType::f32, 5);
    auto z = nn::make_zero_conv(store, "tap", 3, 4);
    for (double v : z.weight().value().to_vector()) CHECK(v == 0.0);
    for (double v : z.bias().value().to_vector()) CHECK(v == 0.0);
    std::mt19937_64 rng(1);
    auto y = z(ad::constant(uniform_tensor({1, 3, 4, 4}, DType::f32, rng, 1.0)));
    CHECK(y.op() == ad::Op::conv2d_zero_init);
    for (double v : y.value().to_vector()) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round trip preserves names, shapes and payloads") {
    ParameterStore store(DType::f32, 6);
    store.add("enc/w", uniform_tensor({3, 2, 2}, DType::f32, store.rng(), 1.0));
    store.add("enc/b", uniform_tensor({7}, DType::f32, store.rng(), 1.0));
    auto path = std::filesystem::temp_directory_path() / "dualdiff_test.dckp";
    auto records = export_parameters(store);
    records.push_back({"extra/f64", Tensor::scalar(0.125, DType::f64)});
    write_checkpoint(path, records);
    auto loaded = read_checkpoint(path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].name == records[i].name);
        CHECK(loaded[i].tensor.identical(records[i].tensor));
    }
    // Header layout: magic, version, count, then the first record's name length.
    std::ifstream in(path, std::ios::binary);
    char head[14];
    in.read(head, 14);
    CHECK(std::string(head, 4) == "DCKP");
    CHECK(head[4] == 1);
    CHECK(head[8] == 3);
    CHECK(head[12] == 5);

    ParameterStore other(DType::f32, 99);
    other.add("enc/w", Tensor({3, 2, 2}, DType::f32));
    other.add("enc/b", Tensor({7}, DType::f32));
    import_parameters(other, loaded);
    CHECK(other.digest() == store.digest());
    std::filesystem::remove(path);
}
