#pragma once
//
// Core data types shared by every stage of the pipeline: raw digitizer
// series, real-valued (denoised) series, power spectra and the detector
// constants that convert flux power into an axion-photon coupling.
//
// Samples are kept as signed 8-bit ADC counts end to end.  Conversion to
// millivolts happens only when a stage needs physical units (periodograms,
// filters), using the digitizer scale of 40 mV per 128 counts.
//

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tidmad {

// Error taxonomy.  The CLI maps these onto exit codes 2 / 3 / 4.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kMillivoltsPerCount = 40.0 / 128.0;
inline constexpr double kCountsPerMillivolt = 128.0 / 40.0;
inline constexpr double kDefaultSampleRate = 1.0e7;

// Exact: 40/128 = 0.3125 is a binary fraction.
constexpr double raw_to_millivolts(std::int8_t raw) noexcept
{
    return static_cast<double>(raw) * kMillivoltsPerCount;
}

// round(v * 128/40), half away from zero, clamped to the int8 rails.
std::int8_t quantize_millivolts(double mv) noexcept;

// Stateful quantizer that counts how many samples hit a rail.
class Quantizer {
public:
    std::int8_t operator()(double mv) noexcept;
    std::uint64_t saturated() const noexcept { return saturated_; }
    void reset() noexcept { saturated_ = 0; }

private:
    std::uint64_t saturated_ = 0;
};

enum class ChannelRole : std::uint8_t { Squid, Injected };

const char* to_string(ChannelRole role) noexcept;

struct SampleSeries {
    std::vector<std::int8_t> samples;
    double sample_rate = kDefaultSampleRate;
    ChannelRole role = ChannelRole::Squid;
    std::uint64_t start_index = 0;

    std::size_t size() const noexcept { return samples.size(); }
    double duration() const noexcept { return static_cast<double>(samples.size()) / sample_rate; }
    std::vector<double> to_millivolts() const;

    // Throws UsageError when the series cannot enter a processing stage.
    void validate() const;
};

// Values in millivolts.  Produced by denoisers, whose output need not be
// integer-valued.
struct FloatSeries {
    std::vector<double> samples;
    double sample_rate = kDefaultSampleRate;

    std::size_t size() const noexcept { return samples.size(); }
    void validate() const;
};

FloatSeries to_float_series(const SampleSeries& s);

struct PhysicalConstants {
    double geometric_coupling = 0.0217;  // dimensionless
    double volume_cm3 = 890.0;
    double b_max_tesla = 1.0;
    double rho_dm_gev_cm3 = 0.4;

    void validate() const;

    // rho * G^2 * V^2 * B^2, the factor relating g^2 to flux power A.
    double flux_factor() const noexcept
    {
        return rho_dm_gev_cm3 * geometric_coupling * geometric_coupling * volume_cm3 * volume_cm3
               * b_max_tesla * b_max_tesla;
    }
};

// One-sided PSD on a uniform grid: bin i sits at f0 + i * df.
struct PowerSpectrum {
    std::vector<double> values;
    double df = 1.0;
    double f0 = 0.0;
    std::uint64_t n_averaged = 1;

    std::size_t size() const noexcept { return values.size(); }
    double frequency(std::size_t i) const noexcept { return f0 + static_cast<double>(i) * df; }
    void validate() const;
};

// Standard-halo-model velocity parameters (km/s).
struct HaloParams {
    double v0_km_s = 220.0;     // circular speed; dispersion sigma_v = v0 / sqrt(2)
    double v_obs_km_s = 232.0;  // lab speed through the halo

    void validate() const;
    double sigma_v() const noexcept;
};

inline constexpr double kSpeedOfLightKmS = 299792.458;

// Photon energy equivalent of an axion oscillating at f: m_a = h f.
inline constexpr double kPlanckEvSeconds = 4.135667696e-15;
constexpr double frequency_to_mass_ev(double hz) noexcept { return kPlanckEvSeconds * hz; }

}  // namespace tidmad
