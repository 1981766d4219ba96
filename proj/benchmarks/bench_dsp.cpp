#include "tidmad/dsp.hpp"
#include "tidmad/random.hpp"

#include <benchmark/benchmark.h>

using namespace tidmad;

namespace {

std::vector<double> noise(std::size_t n)
{
    std::vector<double> x(n);
    CounterRng rng(1);
    for (auto& v : x) v = rng.uniform() - 0.5;
    return x;
}

// One periodogram through a reused engine; 1e7 is the 1 s science segment.
void BM_Periodogram(benchmark::State& state)
{
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = noise(n);
    dsp::PeriodogramEngine engine(n);
    std::vector<double> out(engine.bins());
    for (auto _ : state) {
        std::copy(x.begin(), x.end(), engine.input().begin());
        engine.power(1.0e7, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Periodogram)->Arg(1 << 16)->Arg(100000)->Arg(1000000)->Arg(10000000)->Unit(benchmark::kMillisecond);

// Streaming average over segments of a fixed buffer (FFT + reduction only).
void BM_AveragePeriodograms(benchmark::State& state)
{
    const std::size_t n = 1000000;
    const auto x = noise(n);
    const auto workers = static_cast<unsigned>(state.range(0));
    for (auto _ : state) {
        auto p = dsp::average_periodograms(
            8, n, 1.0e6, [&](std::size_t, std::span<double> out) { std::copy(x.begin(), x.end(), out.begin()); },
            workers);
        benchmark::DoNotOptimize(p.values.data());
    }
    state.SetItemsProcessed(state.iterations() * 8 * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_AveragePeriodograms)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
