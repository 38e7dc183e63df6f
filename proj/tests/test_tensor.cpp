#include <doctest.h>

#include <random>

#include "dualdiff/kernels.hpp"
#include "dualdiff/params.hpp"
#include "dualdiff/reference.hpp"
#include "dualdiff/tensor.hpp"

using namespace dualdiff;

TEST_CASE("tensor shape invariants") {
    Tensor t({2, 3, 4}, DType::f64);
    CHECK(t.numel() == 24);
    CHECK(t.rank() == 3);
    CHECK(t.to_vector() == std::vector<double>(24, 0.0));
    CHECK_THROWS_AS(Tensor({2, 0}, DType::f32), ShapeError);
    CHECK_THROWS_AS(Tensor({}, DType::f32), ShapeError);
    CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1, 1}, DType::f32), ShapeError);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
}

TEST_CASE("reshape round trip is bit exact") {
    std::mt19937_64 rng(3);
    Tensor t = uniform_tensor({3, 4, 5}, DType::f32, rng, 1.0);
    CHECK(t.reshaped({60}).reshaped({3, 4, 5}).identical(t));
}

TEST_CASE("gemm matches the naive reference") {
    std::mt19937_64 rng(11);
    const std::int64_t m = 7, k = 13, n = 5;
    Tensor a = uniform_tensor({m, k}, DType::f64, rng, 1.0);
    Tensor b = uniform_tensor({k, n}, DType::f64, rng, 1.0);
    Tensor c({m, n}, DType::f64), r({m, n}, DType::f64);
    kernels::gemm(a.data<double>().data(), b.data<double>().data(), c.data<double>().data(), m, k, n, false,
                  false, false);
    reference::matmul(a.data<double>().data(), b.data<double>().data(), r.data<double>().data(), m, k, n);
    for (std::int64_t i = 0; i < m * n; ++i) CHECK(c.item(i) == doctest::Approx(r.item(i)).epsilon(1e-12));
}

TEST_CASE("conv2d kernel matches the direct reference") {
    std::mt19937_64 rng(5);
    for (auto [stride, pad, kernel] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 3}, std::tuple{1, 0, 1}}) {
        kernels::ConvGeometry g{2, 3, 9, 7, 4, kernel, kernel, stride, pad};
        Tensor x = uniform_tensor({2, 3, 9, 7}, DType::f64, rng, 1.0);
        Tensor w = uniform_tensor({4, 3, kernel, kernel}, DType::f64, rng, 1.0);
        Tensor b = uniform_tensor({4}, DType::f64, rng, 1.0);
        Tensor y({2, 4, g.out_height(), g.out_width()}, DType::f64);
        Tensor r = y;
        kernels::conv2d_forward(x.data<double>().data(), w.data<double>().data(), b.data<double>().data(),
                                y.data<double>().data(), g);
        reference::conv2d(x.data<double>().data(), w.data<double>().data(), b.data<double>().data(),
                          r.data<double>().data(), g);
        for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.item(i) == doctest::Approx(r.item(i)).epsilon(1e-12));
    }
}

TEST_CASE("pairwise sum is exact on integers and order fixed") {
    std::vector<double> v(1000);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    CHECK(kernels::pairwise_sum<double>(v) == 499500.0);
}

TEST_CASE("gemm result of an entry does not depend on its position") {
    std::mt19937_64 rng(17);
    for (auto [m, k, n] : {std::tuple{9, 7, 5}, std::tuple{33, 65, 17}, std::tuple{130, 600, 70}, std::tuple{1024, 96, 64}}) {
        for (DType dt : {DType::f32, DType::f64}) {
            Tensor a = uniform_tensor({m, k}, dt, rng, 1.0);
            Tensor b = uniform_tensor({k, n}, dt, rng, 1.0);
            // Duplicate row 0 of A into the last row and column 0 of B into the last column.
            for (std::int64_t p = 0; p < k; ++p) {
                a.set_item((m - 1) * k + p, a.item(p));
                b.set_item(p * n + n - 1, b.item(p * n));
            }
            Tensor c({m, n}, dt);
            dispatch(dt, [&]<class T>() {
                kernels::gemm(a.data<T>().data(), b.data<T>().data(), c.data<T>().data(), m, k, n, false, false, false);
            });
            for (std::int64_t j = 0; j < n; ++j) CHECK(c.item(j) == c.item((m - 1) * n + j));
            for (std::int64_t i = 0; i < m; ++i) CHECK(c.item(i * n) == c.item(i * n + n - 1));
        }
    }
}
