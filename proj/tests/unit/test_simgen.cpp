#include "support.hpp"

#include "tidmad/dsp.hpp"
#include "tidmad/score.hpp"
#include "tidmad/simgen.hpp"

#include <numeric>

using namespace tidmad;
using namespace tidmad::sim;

namespace {

NoiseModel quiet(std::uint64_t seed = 1)
{
    NoiseModel m;
    m.seed = seed;
    return m;
}

InjectionSchedule one_tone(double f, double amp_pp, double seconds)
{
    return InjectionSchedule{{{f, amp_pp, seconds}}};
}

}  // namespace

TEST_CASE("default schedule: 38 log-spaced tones from 1.1 kHz to 4.9 MHz")
{
    const auto s = default_schedule(InjectionMode::Standard);
    REQUIRE(s.entries.size() == 38);
    CHECK(s.entries.front().frequency_hz == 1100.0);
    CHECK(s.entries.back().frequency_hz == 4.9e6);
    for (std::size_t i = 1; i < s.entries.size(); ++i) CHECK(s.entries[i].frequency_hz > s.entries[i - 1].frequency_hz);
    const double r0 = s.entries[1].frequency_hz / s.entries[0].frequency_hz;
    const double r1 = s.entries[30].frequency_hz / s.entries[29].frequency_hz;
    CHECK(r0 == doctest::Approx(r1).epsilon(1e-3));
    CHECK(s.entries[5].amplitude_mv == kStandardAmplitudeMv);
    CHECK(default_schedule(InjectionMode::Weak).entries[0].amplitude_mv == kWeakAmplitudeMv);
    CHECK(s.total_duration() == doctest::Approx(38.0));
    CHECK_THROWS_AS(default_schedule(InjectionMode::Weak, 0.0), UsageError);
}

TEST_CASE("schedule validation")
{
    CHECK_THROWS_AS(InjectionSchedule{}.validate(1e7), UsageError);
    CHECK_THROWS_AS(one_tone(6e6, 10, 1).validate(1e7), UsageError);
    CHECK_THROWS_AS(one_tone(1e3, 0, 1).validate(1e7), UsageError);
    CHECK_THROWS_AS(one_tone(1e3, 10, 1.5e-8).validate(1e7), UsageError);
    CHECK_NOTHROW(one_tone(1e3, 10, 1).validate(1e7));
}

TEST_CASE("band-pass gain: unity mid-band, -3 dB at the corners")
{
    GainModel g;
    CHECK(g.power_gain(1e5) == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(g.power_gain(1e3) == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(g.power_gain(5e6) == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(g.power_gain(10.0) < 1e-3);
    GainModel u{GainModel::Kind::Unity};
    CHECK(u.power_gain(10.0) == 1.0);
}

TEST_CASE("any sample range regenerates bit-identically")
{
    const PairGenerator gen(one_tone(12345.0, 40.0, 1.0), quiet(9), 1e5, 1.0);
    const auto n = gen.length();
    std::vector<std::int8_t> sq(n), inj(n);
    gen.fill(0, n, sq.data(), inj.data());
    for (auto [start, count] : {std::pair<std::uint64_t, std::size_t>{0, 10}, {4090, 20}, {77777, 5000}, {n - 3, 3}}) {
        std::vector<std::int8_t> a(count), b(count);
        gen.fill(start, count, a.data(), b.data());
        CHECK(std::equal(a.begin(), a.end(), sq.begin() + static_cast<long>(start)));
        CHECK(std::equal(b.begin(), b.end(), inj.begin() + static_cast<long>(start)));
        std::vector<std::int8_t> only(count);
        gen.fill(start, count, only.data(), nullptr);
        CHECK(only == a);
    }
    CHECK_THROWS_AS(gen.fill(n - 1, 2, sq.data(), nullptr), UsageError);
    std::vector<std::int8_t> other(n);
    PairGenerator(one_tone(12345.0, 40.0, 1.0), quiet(10), 1e5, 1.0).fill(0, n, other.data(), nullptr);
    CHECK(other != sq);
}

TEST_CASE("injected channel carries the scheduled tone at its peak-to-peak amplitude")
{
    auto noise = quiet();
    noise.injected_sigma_mv = 0.0;
    const auto pair = synth_pair(one_tone(1000.0, 30.0, 1.0), noise, 1.0, 1e5);
    const auto [lo, hi] = std::minmax_element(pair.injected.samples.begin(), pair.injected.samples.end());
    CHECK(raw_to_millivolts(*hi) - raw_to_millivolts(*lo) == doctest::Approx(30.0).epsilon(0.02));
    const auto p = dsp::periodogram(pair.injected);
    const auto k = score::find_signal_bin(p.values);
    CHECK(p.frequency(k) == doctest::Approx(1000.0));
    CHECK(p.values[k] * p.df == doctest::Approx(15.0 * 15.0 / 2.0).epsilon(0.01));
}

TEST_CASE("SQUID tone is shaped by the band-pass")
{
    auto noise = quiet();
    noise.white_sigma_mv = 0.0;
    const double f = 1000.0;
    const auto pair = synth_pair(one_tone(f, 40.0, 1.0), noise, 1.0, 1e5);
    const auto p = dsp::periodogram(pair.squid);
    const auto k = static_cast<std::size_t>(f / p.df);
    CHECK(p.values[k] * p.df == doctest::Approx(0.5 * 20.0 * 20.0 / 2.0).epsilon(0.01));
}

TEST_CASE("schedule must cover the requested duration")
{
    CHECK_THROWS_AS(PairGenerator(one_tone(1e3, 10, 1.0), quiet(), 1e4, 2.0), UsageError);
    CHECK_THROWS_AS(PairGenerator(one_tone(1e3, 10, 1.0), quiet(), 1e4 + 0.5, 1.0), UsageError);
}

TEST_CASE("measured noise PSD matches the analytic expectation")
{
    auto noise = quiet(3);
    noise.white_sigma_mv = 2.0;
    noise.pink_amplitude_mv = 1.5;
    const double fs = 1e5;
    const ScienceGenerator gen(noise, fs, 20.0);
    const std::size_t seg = 100000;
    const auto psd = dsp::average_periodograms(20, seg, fs, [&](std::size_t i, std::span<double> out) {
        gen.fill_millivolts(i * seg, seg, out.data());
    });
    // Compare band averages at several frequencies.
    for (double f : {50.0, 500.0, 5000.0, 30000.0}) {
        CAPTURE(f);
        const auto k0 = static_cast<std::size_t>(f / psd.df);
        const std::size_t w = std::max<std::size_t>(20, k0 / 5);
        double m = 0, e = 0;
        for (std::size_t k = k0 - w / 2; k < k0 + w / 2; ++k) {
            m += psd.values[k];
            e += expected_noise_psd(noise, psd.frequency(k), fs);
        }
        CHECK(m / e == doctest::Approx(1.0).epsilon(0.06));
    }
}

TEST_CASE("white noise level is 2 sigma^2 / fs plus quantization")
{
    auto noise = quiet();
    noise.white_sigma_mv = 4.0;
    const double q = kMillivoltsPerCount;
    CHECK(expected_noise_psd(noise, 1e6, 1e7) == doctest::Approx(2.0 * (16.0 + q * q / 12.0) / 1e7));
}

TEST_CASE("planted tone and lineshape carry the requested power")
{
    const double f = 12345.0;
    auto in_bins = [&](const NoiseModel& noise, const PlantedSignal& p, double fs) {
        const auto s = synth_science(noise, 1.0, p, fs);
        const auto psd = dsp::periodogram(s);
        const auto k = static_cast<std::size_t>(f / psd.df);
        double pow = 0.0;
        for (std::size_t i = k; i < k + 3; ++i) pow += psd.values[i] * psd.df;
        return pow - 3.0 * expected_noise_psd(noise, f, fs) * psd.df;
    };
    auto noise = quiet(4);
    noise.white_sigma_mv = 1.0;
    noise.gain.kind = GainModel::Kind::Unity;
    CHECK(in_bins(noise, PlantedSignal{f, 8.0, false, {}}, 1e5) == doctest::Approx(4.0 * 4.0 / 2.0).epsilon(0.1));

    // The halo components beat coherently over one second, so a single
    // realization is exponentially distributed; check the ensemble mean.
    double mean = 0.0;
    constexpr int kSeeds = 40;
    for (int seed = 0; seed < kSeeds; ++seed) {
        auto n = quiet(100 + seed);
        n.white_sigma_mv = 1.0;
        n.gain.kind = GainModel::Kind::Unity;
        mean += in_bins(n, PlantedSignal{f, 8.0, true, {}}, 1e5) / kSeeds;
    }
    CHECK(mean == doctest::Approx(8.0).epsilon(0.5));
    CHECK_THROWS_AS(ScienceGenerator(noise, 1e6, 1.0, PlantedSignal{1e6, 1.0}), UsageError);
}

TEST_CASE("interference lines appear in the science PSD")
{
    auto noise = quiet(5);
    noise.lines.push_back({20000.0, 3.0});
    const auto s = synth_science(noise, 1.0, std::nullopt, 1e5);
    const auto psd = dsp::periodogram(s);
    CHECK(psd.frequency(score::find_signal_bin(psd.values)) == doctest::Approx(20000.0));
}

TEST_CASE("rail hits are counted")
{
    auto noise = quiet(6);
    noise.white_sigma_mv = 30.0;
    const ScienceGenerator gen(noise, 1e4, 1.0);
    std::vector<std::int8_t> out(gen.length());
    gen.fill(0, out.size(), out.data());
    CHECK(gen.saturated() > 1000);
}

TEST_CASE("samples_for and cycle_fraction")
{
    CHECK(samples_for(10.0, 1e7) == 100'000'000u);
    CHECK_THROWS_AS(samples_for(0.0, 1e7), UsageError);
    CHECK_THROWS_AS(samples_for(0.5e-7, 1e7), UsageError);
    // 1.25 Hz after 10^15 samples at 10 MHz: 1.25e8 cycles exactly.
    CHECK(static_cast<double>(cycle_fraction(1.25, 1'000'000'000'000'000ULL, 1e7)) == doctest::Approx(0.0));
    // 1000.5 Hz over 3.5 s is 3501.75 cycles.
    CHECK(static_cast<double>(cycle_fraction(1000.5, 10'000'000ULL * 3 + 5'000'000, 1e7)) == doctest::Approx(0.75));
}
