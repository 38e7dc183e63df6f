// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "dualdiff/kernels.hpp"
#include "dualdiff/ors.hpp"
#include "dualdiff/reference.hpp"
#include "dualdiff/scene.hpp"

using namespace dualdiff;

namespace {

std::vector<float> random_floats(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (float& x : v) x = d(rng);
    return v;
}

void BM_GemmFast(benchmark::State& state) {
    const std::int64_t n = state.range(0);
    const auto a = random_floats(static_cast<std::size_t>(n * n), 1), b = random_floats(static_cast<std::size_t>(n * n), 2);
    std::vector<float> c(static_cast<std::size_t>(n * n));
    for (auto _ : state) {
        kernels::gemm(a.data(), b.data(), c.data(), n, n, n, false, false, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_GemmFast)->Arg(64)->Arg(256)->Arg(512);

void BM_GemmReference(benchmark::State& state) {
    const std::int64_t n = state.range(0);
    const auto a = random_floats(static_cast<std::size_t>(n * n), 1), b = random_floats(static_cast<std::size_t>(n * n), 2);
    std::vector<float> c(static_cast<std::size_t>(n * n));
    for (auto _ : state) {
        reference::matmul(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_GemmReference)->Arg(64)->Arg(256)->Arg(512);

kernels::ConvGeometry conv_geometry(std::int64_t size) {
    kernels::ConvGeometry g;
    g.batch = 4;
    g.in_channels = 32;
    g.out_channels = 32;
    g.height = g.width = size;
    g.kernel_h = g.kernel_w = 3;
    g.pad = 1;
    return g;
}

void BM_ConvFast(benchmark::State& state) {
    const auto g = conv_geometry(state.range(0));
    const auto x = random_floats(static_cast<std::size_t>(g.batch * g.in_channels * g.height * g.width), 3);
    const auto w = random_floats(static_cast<std::size_t>(g.out_channels * g.patch_size()), 4);
    std::vector<float> y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_height() * g.out_width()));
    for (auto _ : state) {
        kernels::conv2d_forward(x.data(), w.data(), static_cast<const float*>(nullptr), y.data(), g);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_ConvFast)->Arg(16)->Arg(32);

void BM_ConvReference(benchmark::State& state) {
    const auto g = conv_geometry(state.range(0));
    const auto x = random_floats(static_cast<std::size_t>(g.batch * g.in_channels * g.height * g.width), 3);
    const auto w = random_floats(static_cast<std::size_t>(g.out_channels * g.patch_size()), 4);
    std::vector<float> y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_height() * g.out_width()));
    for (auto _ : state) {
        reference::conv2d(x.data(), w.data(), static_cast<const float*>(nullptr), y.data(), g);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_ConvReference)->Arg(16)->Arg(32);

void BM_OrsFast(benchmark::State& state) {
    const Scene scene = generate_scene(7, {});
    const SamplingPlan plan = default_plan(scene.grid);
    for (auto _ : state) benchmark::DoNotOptimize(render_ors(scene, 0, plan, OrsFilter::full));
}
BENCHMARK(BM_OrsFast);

void BM_OrsReference(benchmark::State& state) {
    const Scene scene = generate_scene(7, {});
    const SamplingPlan plan = default_plan(scene.grid);
    for (auto _ : state) benchmark::DoNotOptimize(reference::render_ors(scene, 0, plan, OrsFilter::full));
}
BENCHMARK(BM_OrsReference);

}  // namespace

BENCHMARK_MAIN();
