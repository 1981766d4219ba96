#include "tidmad/denoise.hpp"
#include "tidmad/random.hpp"

#include <benchmark/benchmark.h>

using namespace tidmad;

namespace {

std::vector<double> noise(std::size_t n)
{
    std::vector<double> x(n);
    CounterRng rng(2);
    for (auto& v : x) v = rng.uniform() - 0.5;
    return x;
}

void BM_MovingAverage(benchmark::State& state)
{
    const auto x = noise(1000000);
    const auto w = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(denoise::moving_average(x, w));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_MovingAverage)->Arg(10)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_SavitzkyGolay(benchmark::State& state)
{
    const auto x = noise(1000000);
    const auto w = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(denoise::savitzky_golay(x, w, 11));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_SavitzkyGolay)->Arg(101)->Arg(501)->Unit(benchmark::kMillisecond);

void BM_SavitzkyGolayCoefficients(benchmark::State& state)
{
    for (auto _ : state) benchmark::DoNotOptimize(denoise::savitzky_golay_coefficients(101, 11));
}
BENCHMARK(BM_SavitzkyGolayCoefficients);

}  // namespace

BENCHMARK_MAIN();
