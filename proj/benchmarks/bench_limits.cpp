#include "tidmad/limits.hpp"

#include <benchmark/benchmark.h>

using namespace tidmad;
using namespace tidmad::limits;

namespace {

// A 0.1 Hz grid slice around f with Gamma(30) background.
PowerSpectrum slice(double f, std::size_t bins)
{
    PowerSpectrum p;
    p.df = 0.1;
    p.f0 = std::round((f - 0.1 * bins / 4) / p.df) * p.df;
    p.values.resize(bins);
    p.n_averaged = 30;
    pseudo_psd([](double) { return 1.0; }, PsdGrid::of(p), 30, 1, 0, 0, p.values);
    return p;
}

void BM_BuildTemplate(benchmark::State& state)
{
    const auto p = slice(1.0e6, 4000);
    for (auto _ : state) benchmark::DoNotOptimize(build_template(1.0e6, PsdGrid::of(p)));
}
BENCHMARK(BM_BuildTemplate);

void BM_WindowFit(benchmark::State& state)
{
    const double f = static_cast<double>(state.range(0));
    const auto p = slice(f, 60000);
    const auto t = build_template(f, PsdGrid::of(p));
    for (auto _ : state) benchmark::DoNotOptimize(fit_window(p, t));
}
BENCHMARK(BM_WindowFit)->Arg(100000)->Arg(1000000)->Arg(2000000);

void BM_UpperLimit(benchmark::State& state)
{
    const auto p = slice(1.0e6, 4000);
    const auto t = build_template(1.0e6, PsdGrid::of(p));
    for (auto _ : state) benchmark::DoNotOptimize(upper_limit(p, t));
}
BENCHMARK(BM_UpperLimit);

void BM_Scan(benchmark::State& state)
{
    const auto p = slice(1.0e6, 200000);
    const auto masses = log_mass_grid(1.0e6, 1.0e6 + 15000.0, 1000);
    LimitOptions opt;
    opt.workers = static_cast<unsigned>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(scan_masses(p, masses, opt));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(masses.size()));
}
BENCHMARK(BM_Scan)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
