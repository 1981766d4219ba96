#include "support.hpp"

#include "tidmad/model.hpp"
#include "tidmad/random.hpp"

#include <limits>
#include <set>

using namespace tidmad;

TEST_CASE("raw counts convert to millivolts at 40 mV per 128 counts")
{
    CHECK(raw_to_millivolts(0) == 0.0);
    CHECK(raw_to_millivolts(1) == 0.3125);
    CHECK(raw_to_millivolts(127) == doctest::Approx(39.6875));
    CHECK(raw_to_millivolts(-128) == -40.0);
}

TEST_CASE("quantization rounds half away from zero and clamps")
{
    CHECK(quantize_millivolts(0.0) == 0);
    CHECK(quantize_millivolts(0.15625) == 1);   // exactly half a count
    CHECK(quantize_millivolts(-0.15625) == -1);
    CHECK(quantize_millivolts(0.15) == 0);
    CHECK(quantize_millivolts(1e6) == 127);
    CHECK(quantize_millivolts(-1e6) == -128);
    CHECK(quantize_millivolts(std::numeric_limits<double>::quiet_NaN()) == -128);
    for (int c = -128; c <= 127; ++c)
        CHECK(quantize_millivolts(raw_to_millivolts(static_cast<std::int8_t>(c))) == c);
}

TEST_CASE("quantizer counts rail hits")
{
    Quantizer q;
    CHECK(q(39.0) == 125);
    CHECK(q.saturated() == 0);
    CHECK(q(41.0) == 127);
    CHECK(q(-41.0) == -128);
    CHECK(q.saturated() == 2);
    q.reset();
    CHECK(q.saturated() == 0);
}

TEST_CASE("series validation")
{
    SampleSeries s;
    CHECK_THROWS_AS(s.validate(), UsageError);
    s.samples = {1, 2, 3};
    CHECK_NOTHROW(s.validate());
    s.sample_rate = 0.0;
    CHECK_THROWS_AS(s.validate(), UsageError);

    FloatSeries f{{1.0, std::numeric_limits<double>::infinity()}, 10.0};
    CHECK_THROWS_AS(f.validate(), DataError);
    const auto conv = to_float_series(SampleSeries{{4, -4}, 5.0});
    CHECK(conv.samples == std::vector<double>{1.25, -1.25});
    CHECK(conv.sample_rate == 5.0);
}

TEST_CASE("physical constants and halo parameters")
{
    PhysicalConstants k;
    CHECK(k.flux_factor() == doctest::Approx(0.4 * 0.0217 * 0.0217 * 890.0 * 890.0));
    k.volume_cm3 = 0.0;
    CHECK_THROWS_AS(k.validate(), UsageError);
    HaloParams h;
    CHECK(h.sigma_v() == doctest::Approx(220.0 / std::sqrt(2.0)));
    h.v_obs_km_s = -1.0;
    CHECK_THROWS_AS(h.validate(), UsageError);
    CHECK(frequency_to_mass_ev(1.0e6) == doctest::Approx(4.135667696e-9));
}

TEST_CASE("power spectrum validation rejects negative bins")
{
    PowerSpectrum p{{1.0, -1.0}, 0.1, 0.0, 1};
    CHECK_THROWS_AS(p.validate(), DataError);
    p.values[1] = 0.0;
    CHECK_NOTHROW(p.validate());
    p.n_averaged = 0;
    CHECK_THROWS_AS(p.validate(), UsageError);
}

TEST_CASE("counter RNG is a pure function of key and counter")
{
    CounterRng a(42), b(42, 5);
    for (int i = 0; i < 5; ++i) a();
    for (int i = 0; i < 10; ++i) CHECK(a() == b());
    CounterRng c(43);
    CHECK(CounterRng(42)() != c());
    std::set<std::uint64_t> keys;
    for (std::uint64_t t = 0; t < 100; ++t) keys.insert(derive_key(7, t));
    CHECK(keys.size() == 100);
    double m = 0.0;
    CounterRng u(1);
    for (int i = 0; i < 100000; ++i) {
        const double x = u.uniform();
        REQUIRE(x > 0.0);
        REQUIRE(x < 1.0);
        m += x;
    }
    CHECK(m / 100000.0 == doctest::Approx(0.5).epsilon(0.01));
}
