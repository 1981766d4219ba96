#include "support.hpp"

#include "tidmad/denoise.hpp"

#include <cstdlib>
#include <numeric>

using namespace tidmad;
using namespace tidmad::denoise;
using tidmad::test::script;
using tidmad::test::TempDir;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed)
{
    std::mt19937_64 g(seed);
    std::normal_distribution<double> d(0.0, 3.0);
    std::vector<double> x(n);
    for (auto& v : x) v = d(g);
    return x;
}

std::vector<double> naive_ma(const std::vector<double>& x, std::size_t w)
{
    const long n = static_cast<long>(x.size());
    std::vector<double> y(x.size());
    for (long t = 0; t < n; ++t) {
        const long lo = std::max(0L, t - static_cast<long>(w / 2));
        const long hi = std::min(n, t + static_cast<long>((w + 1) / 2));
        double s = 0;
        for (long i = lo; i < hi; ++i) s += x[i];
        y[t] = s / static_cast<double>(hi - lo);
    }
    return y;
}

ExternalCommand py(const std::string& name, std::vector<std::string> extra = {})
{
    ExternalCommand c;
    c.argv = {TIDMAD_PYTHON, script(name)};
    c.argv.insert(c.argv.end(), extra.begin(), extra.end());
    c.timeout = std::chrono::seconds(60);
    return c;
}

}  // namespace

TEST_CASE("moving average matches the naive windowed mean")
{
    const auto x = noise(1000, 1);
    for (std::size_t w : {2u, 3u, 10u, 100u, 101u}) {
        CAPTURE(w);
        const auto y = moving_average(x, w);
        const auto r = naive_ma(x, w);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(r[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(moving_average(x, 1), UsageError);
    const auto c = moving_average(std::vector<double>(50, 2.5), 20);
    for (double v : c) CHECK(v == doctest::Approx(2.5));
}

TEST_CASE("Savitzky-Golay coefficients match the classical tables")
{
    const auto c5 = savitzky_golay_coefficients(5, 2);
    const double t5[] = {-3, 12, 17, 12, -3};
    for (int i = 0; i < 5; ++i) CHECK(c5[i] == doctest::Approx(t5[i] / 35.0).epsilon(1e-12));
    const auto c7 = savitzky_golay_coefficients(7, 3);  // odd order shares the even-order table
    const double t7[] = {-2, 3, 6, 7, 6, 3, -2};
    for (int i = 0; i < 7; ++i) CHECK(c7[i] == doctest::Approx(t7[i] / 21.0).epsilon(1e-12));
    const auto c9 = savitzky_golay_coefficients(9, 4);
    const double t9[] = {15, -55, 30, 135, 179, 135, 30, -55, 15};
    for (int i = 0; i < 9; ++i) CHECK(c9[i] == doctest::Approx(t9[i] / 429.0).epsilon(1e-12));
    const auto big = savitzky_golay_coefficients(101, 11);
    CHECK(std::accumulate(big.begin(), big.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("Savitzky-Golay impulse response is the coefficient table")
{
    std::vector<double> x(41, 0.0);
    x[20] = 1.0;
    const auto y = savitzky_golay(x, 17, 4);
    const auto c = savitzky_golay_coefficients(17, 4);
    for (int k = -8; k <= 8; ++k) CHECK(y[20 + k] == doctest::Approx(c[8 - k]).epsilon(1e-12));
    CHECK(y[0] == 0.0);
}

TEST_CASE("Savitzky-Golay reproduces polynomials up to its order")
{
    std::vector<double> x(300);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double t = static_cast<double>(i) / 100.0;
        x[i] = 1.0 - 2.0 * t + 0.5 * t * t * t;
    }
    const auto y = savitzky_golay(x, 35, 3);
    for (std::size_t i = 17; i + 17 < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-9));
}

TEST_CASE("mirror padding reflects without repeating the edge sample")
{
    // Symmetric about sample 0 after reflection: x[-k] = x[k].
    std::vector<double> x{5, 1, 2, 3, 4, 5, 6, 7};
    const auto c = savitzky_golay_coefficients(5, 2);
    const double y0 = c[0] * x[2] + c[1] * x[1] + c[2] * x[0] + c[3] * x[1] + c[4] * x[2];
    CHECK(savitzky_golay(x, 5, 2)[0] == doctest::Approx(y0));
}

TEST_CASE("invalid filter specs are rejected with guidance")
{
    try {
        savitzky_golay(noise(200, 2), 100, 11);
        FAIL("even window accepted");
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("99 or 101") != std::string::npos);
    }
    CHECK_THROWS_AS(savitzky_golay_coefficients(11, 11), UsageError);
    CHECK_THROWS_AS(savitzky_golay(noise(50, 2), 101, 11), UsageError);
    DenoiserSpec s;
    s.kind = DenoiserSpec::Kind::External;
    CHECK_THROWS_AS(s.validate(), UsageError);
    CHECK(parse_kind("ma") == DenoiserSpec::Kind::MovingAverage);
    CHECK(parse_kind("savitzky_golay") == DenoiserSpec::Kind::SavitzkyGolay);
    CHECK_THROWS_AS(parse_kind("wiener"), UsageError);
}

TEST_CASE("denoiser dispatch")
{
    SampleSeries raw{{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 100.0};
    DenoiserSpec none;
    none.kind = DenoiserSpec::Kind::None;
    const auto id = Denoiser(none).apply(raw);
    CHECK(id == raw.to_millivolts());
    DenoiserSpec ma;
    ma.kind = DenoiserSpec::Kind::MovingAverage;
    ma.window = 4;
    CHECK(Denoiser(ma).apply(raw) == moving_average(raw.to_millivolts(), 4));
    CHECK(ma.describe() == "moving_average(window=4)");
}

TEST_CASE("external identity denoiser returns the input exactly")
{
    SampleSeries raw;
    raw.sample_rate = 1000.0;
    for (int i = 0; i < 5000; ++i) raw.samples.push_back(static_cast<std::int8_t>((i * 37) % 255 - 127));
    const auto out = run_external(raw, py("identity.py"));
    CHECK(out.samples == raw.to_millivolts());
    FloatSeries f{noise(777, 5), 1000.0};
    for (auto& v : f.samples) v = static_cast<float>(v);  // exactly representable in float32
    CHECK(run_external(f, py("identity.py")).samples == f.samples);
}

TEST_CASE("external reference moving average agrees with the built-in filter")
{
    FloatSeries f{noise(20000, 6), 1000.0};
    for (auto& v : f.samples) v = static_cast<float>(v);
    const auto ext = run_external(f, py("moving_average.py", {"100"}));
    const auto mine = moving_average(f.samples, 100);
    for (std::size_t i = 0; i < mine.size(); ++i) CHECK(ext.samples[i] == doctest::Approx(mine[i]).epsilon(1e-6));
}

TEST_CASE("external protocol failures are classified")
{
    FloatSeries f{noise(100, 7), 1000.0};
    auto kind_of = [&](const ExternalCommand& c) {
        try {
            run_external(f, c);
        } catch (const ExternalError& e) {
            return e.kind;
        }
        FAIL("no error");
        return ExternalError::Kind::Protocol;
    };
    CHECK(kind_of(py("wrong_length.py")) == ExternalError::Kind::LengthMismatch);
    CHECK(kind_of(py("fail.py")) == ExternalError::Kind::ExitStatus);
    CHECK(kind_of(ExternalCommand{{"/nonexistent/denoiser"}}) == ExternalError::Kind::NotFound);
    auto slow = py("sleep.py");
    slow.timeout = std::chrono::milliseconds(500);
    const auto t0 = std::chrono::steady_clock::now();
    CHECK(kind_of(slow) == ExternalError::Kind::Timeout);
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(10));
}

TEST_CASE("scratch files go under TIDMAD_TMPDIR and are removed")
{
    TempDir dir;
    ::setenv("TIDMAD_TMPDIR", dir.path().c_str(), 1);
    CHECK(temp_root() == dir.path());
    FloatSeries f{std::vector<double>(64, 1.0), 1000.0};
    CHECK_NOTHROW(run_external(f, py("identity.py")));
    CHECK(std::filesystem::is_empty(dir.path()));
    ::unsetenv("TIDMAD_TMPDIR");
}
