#include "support.hpp"

#include "tidmad/dsp.hpp"
#include "tidmad/parallel.hpp"

#include <complex>
#include <fstream>
#include <numbers>

using namespace tidmad;
using tidmad::test::rel_diff;
using tidmad::test::TempDir;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed, double sigma = 1.0)
{
    std::mt19937_64 g(seed);
    std::normal_distribution<double> d(0.0, sigma);
    std::vector<double> x(n);
    for (auto& v : x) v = d(g);
    return x;
}

// O(N^2) reference with exact twiddle indices (k n mod N) and long double sums.
std::vector<double> direct_psd(const std::vector<double>& x, double fs)
{
    const std::size_t n = x.size();
    std::vector<long double> c(n), s(n);
    for (std::size_t j = 0; j < n; ++j) {
        const long double a = 2.0L * std::numbers::pi_v<long double> * static_cast<long double>(j) / n;
        c[j] = std::cos(a);
        s[j] = std::sin(a);
    }
    std::vector<double> p(n / 2 + 1);
    for (std::size_t k = 0; k < p.size(); ++k) {
        long double re = 0, im = 0;
        std::size_t idx = 0;
        for (std::size_t t = 0; t < n; ++t) {
            re += x[t] * c[idx];
            im -= x[t] * s[idx];
            idx += k;
            if (idx >= n) idx -= n;
        }
        const bool single = k == 0 || (n % 2 == 0 && k == n / 2);
        p[k] = static_cast<double>((re * re + im * im) * (single ? 1.0L : 2.0L) / (fs * n));
    }
    return p;
}

}  // namespace

TEST_CASE("periodogram matches the direct Fourier sum")
{
    for (std::size_t n : {2u, 3u, 7u, 64u, 100u, 1000u, 1001u, 4096u}) {
        CAPTURE(n);
        const auto x = noise(n, static_cast<unsigned>(n));
        const auto p = dsp::periodogram(x, 250.0);
        const auto ref = direct_psd(x, 250.0);
        REQUIRE(p.size() == ref.size());
        CHECK(p.df == doctest::Approx(250.0 / n));
        double num = 0, den = 0;
        for (std::size_t k = 0; k < ref.size(); ++k) {
            num += (p.values[k] - ref[k]) * (p.values[k] - ref[k]);
            den += ref[k] * ref[k];
        }
        CHECK(std::sqrt(num / den) < 1e-12);
    }
}

TEST_CASE("Parseval: integrated PSD equals mean square")
{
    for (std::size_t n : {10u, 11u, 999u, 1024u, 3000u, 65537u}) {
        CAPTURE(n);
        const auto x = noise(n, 3 + static_cast<unsigned>(n), 2.5);
        const auto p = dsp::periodogram(x, 1e4);
        CHECK(rel_diff(dsp::integrated_power(p), dsp::mean_square(x)) < 1e-12);
    }
}

TEST_CASE("sinusoid power lands in its bin with amplitude^2/2")
{
    const std::size_t n = 10000;
    const double fs = 1e4, f = 1234.0, a = 3.0;
    std::vector<double> x(n);
    for (std::size_t t = 0; t < n; ++t) x[t] = a * std::sin(2 * std::numbers::pi * f * t / fs);
    const auto p = dsp::periodogram(x, fs);
    const auto k = static_cast<std::size_t>(f / p.df);
    CHECK(p.values[k] * p.df == doctest::Approx(a * a / 2).epsilon(1e-12));
    CHECK(p.values[k + 1] < 1e-20);
}

TEST_CASE("DC and Nyquist carry weight one")
{
    std::vector<double> dc(8, 1.0);
    const auto p = dsp::periodogram(dc, 8.0);
    CHECK(p.values[0] * p.df == doctest::Approx(1.0));
    std::vector<double> alt(8);
    for (int i = 0; i < 8; ++i) alt[i] = i % 2 ? -1.0 : 1.0;
    const auto q = dsp::periodogram(alt, 8.0);
    CHECK(q.values[4] * q.df == doctest::Approx(1.0));
    CHECK(dsp::psd_bin_scale(1, 8, 8.0) == 2.0 * dsp::psd_bin_scale(0, 8, 8.0));
}

TEST_CASE("raw series are converted to millivolts before the transform")
{
    SampleSeries s{{10, -10, 10, -10}, 4.0};
    const auto p = dsp::periodogram(s);
    CHECK(dsp::integrated_power(p) == doctest::Approx(std::pow(10 * kMillivoltsPerCount, 2)));
}

TEST_CASE("engine in-place power equals out-of-place power")
{
    const auto x = noise(5000, 9);
    dsp::PeriodogramEngine e(5000);
    std::copy(x.begin(), x.end(), e.input().begin());
    std::vector<double> out(e.bins());
    e.power(100.0, out);
    std::copy(x.begin(), x.end(), e.input().begin());
    const auto in_place = e.power_in_place(100.0);
    for (std::size_t k = 0; k < out.size(); ++k) CHECK(in_place[k] == out[k]);
    CHECK_THROWS_AS(dsp::PeriodogramEngine(1), UsageError);
    CHECK_THROWS_AS(e.periodogram(std::vector<double>(10), 1.0), UsageError);
}

TEST_CASE("accumulator averages and rejects mismatched grids")
{
    dsp::PsdAccumulator acc;
    acc.add(PowerSpectrum{{1.0, 2.0}, 0.5, 0.0, 1});
    acc.add(PowerSpectrum{{4.0, 5.0}, 0.5, 0.0, 2});
    const auto r = acc.result();
    CHECK(r.n_averaged == 3);
    CHECK(r.values[0] == doctest::Approx(3.0));
    CHECK(r.values[1] == doctest::Approx(4.0));
    CHECK_THROWS_AS(acc.add(PowerSpectrum{{1.0, 2.0}, 0.25, 0.0, 1}), DataError);
    CHECK_THROWS_AS(acc.add(PowerSpectrum{{1.0}, 0.5, 0.0, 1}), DataError);
    CHECK_THROWS_AS(dsp::PsdAccumulator{}.result(), UsageError);
}

TEST_CASE("streamed averaging equals batch averaging for any worker count")
{
    const std::size_t seg = 3000, n = 12;
    const auto x = noise(seg * n, 4);
    std::vector<PowerSpectrum> each;
    for (std::size_t i = 0; i < n; ++i)
        each.push_back(dsp::periodogram(std::span<const double>(x.data() + i * seg, seg), 1000.0));
    const auto batch = dsp::average_psds(each);
    auto fill = [&](std::size_t i, std::span<double> out) { std::copy_n(x.data() + i * seg, seg, out.begin()); };
    const auto one = dsp::average_periodograms(n, seg, 1000.0, fill, 1);
    const auto four = dsp::average_periodograms(n, seg, 1000.0, fill, 4);
    CHECK(one.n_averaged == n);
    CHECK(one.values == four.values);  // ordered reduction: bit-identical
    for (std::size_t k = 0; k < one.size(); ++k) CHECK(rel_diff(one.values[k], batch.values[k]) < 1e-13);
    CHECK_THROWS_AS(dsp::average_periodograms(0, seg, 1000.0, fill), UsageError);
}

TEST_CASE("fill errors propagate out of the parallel average")
{
    auto fill = [&](std::size_t i, std::span<double> out) {
        if (i == 5) throw DataError("segment 5 unreadable");
        std::fill(out.begin(), out.end(), 1.0);
    };
    CHECK_THROWS_AS(dsp::average_periodograms(10, 100, 10.0, fill, 3), DataError);
}

TEST_CASE("segment plan validation")
{
    const auto p = dsp::SegmentPlan::make(1e7, 10.0);
    CHECK(p.samples_per_segment == 100'000'000u);
    CHECK_THROWS_AS(dsp::SegmentPlan::make(1e7, 1e-7 * 1.5), UsageError);
    CHECK_THROWS_AS(dsp::SegmentPlan::make(0.0, 1.0), UsageError);
    CHECK_THROWS_AS(dsp::SegmentPlan::make(10.0, 1.0, 0), UsageError);
}

TEST_CASE("PSD files round trip and reject corruption")
{
    TempDir dir;
    PowerSpectrum p{{1.5, 2.5, 3.5}, 0.1, 0.0, 31};
    dsp::save_psd(dir / "a.psd", p);
    const auto q = dsp::load_psd(dir / "a.psd");
    CHECK(q.values == p.values);
    CHECK(q.df == p.df);
    CHECK(q.n_averaged == 31);
    std::filesystem::resize_file(dir / "a.psd", 36 + 8);
    CHECK_THROWS_AS(dsp::load_psd(dir / "a.psd"), DataError);
    { std::ofstream(dir / "b.psd") << "nonsense"; }
    CHECK_THROWS_AS(dsp::load_psd(dir / "b.psd"), DataError);

    dsp::write_psd_csv(dir / "p.csv", p, 0.05, 1.0);
    std::ifstream in(dir / "p.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "frequency_hz,power");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 2);
}
