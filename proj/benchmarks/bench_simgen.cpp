#include "tidmad/dsp.hpp"
#include "tidmad/simgen.hpp"

#include <benchmark/benchmark.h>

using namespace tidmad;

namespace {

sim::InjectionSchedule schedule()
{
    return sim::default_schedule(sim::InjectionMode::Standard, 1.0);
}

void BM_PairGenerator(benchmark::State& state)
{
    const std::size_t n = 1000000;
    sim::NoiseModel nm;
    sim::PairGenerator gen(schedule(), nm, 1.0e7, 10.0);
    std::vector<std::int8_t> a(n), b(n);
    std::uint64_t start = 0;
    for (auto _ : state) {
        gen.fill(start, n, a.data(), b.data());
        start = (start + n) % (gen.length() - n);
        benchmark::DoNotOptimize(a.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_PairGenerator)->Unit(benchmark::kMillisecond);

void BM_ScienceGenerator(benchmark::State& state)
{
    const std::size_t n = 1000000;
    sim::NoiseModel nm;
    sim::ScienceGenerator gen(nm, 1.0e7, 10.0);
    std::vector<double> x(n);
    for (auto _ : state) {
        gen.fill_millivolts(0, n, x.data());
        benchmark::DoNotOptimize(x.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_ScienceGenerator)->Unit(benchmark::kMillisecond);

// Generate -> PSD for one 10 s science segment, the limit pipeline's unit of work.
void BM_GenerateToPsd(benchmark::State& state)
{
    sim::NoiseModel nm;
    const double rate = 1.0e7;
    const std::size_t seg = 10000000;
    sim::ScienceGenerator gen(nm, rate, 10.0);
    const auto workers = static_cast<unsigned>(state.range(0));
    for (auto _ : state) {
        auto p = dsp::average_periodograms(
            1, seg, rate, [&](std::size_t, std::span<double> out) { gen.fill_millivolts(0, seg, out.data()); },
            workers);
        benchmark::DoNotOptimize(p.values.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(seg));
}
BENCHMARK(BM_GenerateToPsd)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime()->Iterations(3);

}  // namespace

namespace {

// Science data carrying a 64-component halo lineshape.
void BM_ScienceGeneratorPlanted(benchmark::State& state)
{
    const std::size_t n = 1000000;
    sim::NoiseModel nm;
    sim::PlantedSignal p;
    p.frequency_hz = 1.0e6;
    p.amplitude_mv = 1.0;
    p.lineshape = true;
    sim::ScienceGenerator gen(nm, 1.0e7, 10.0, p);
    std::vector<double> x(n);
    for (auto _ : state) {
        gen.fill_millivolts(0, n, x.data());
        benchmark::DoNotOptimize(x.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_ScienceGeneratorPlanted)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
