#pragma once
//
// Seeded generator of detector-like datasets.
//
// A pair dataset holds two sample-aligned channels: the injected reference
// (a clean stepped sinusoid plus a small digitizer floor) and the SQUID
// readout (the same sinusoid shaped by the front-end band-pass, plus
// detector noise).  A science dataset is SQUID-only, optionally with a
// planted axion-like signal for closed-loop limit checks.
//
// All randomness is keyed by (seed, stream, block of 4096 samples), so any
// sample range can be generated independently and in parallel with
// bit-identical results.
//

#include "tidmad/model.hpp"

#include <atomic>
#include <complex>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace tidmad::sim {

inline constexpr std::size_t kBlockSamples = 4096;

// Amplitudes are peak-to-peak millivolts, the signal-generator convention.
struct InjectionEntry {
    double frequency_hz = 0.0;
    double amplitude_mv = 0.0;
    double duration_s = 1.0;
};

struct InjectionSchedule {
    std::vector<InjectionEntry> entries;

    double total_duration() const noexcept;
    void validate(double sample_rate) const;
};

enum class InjectionMode { Standard, Weak };

inline constexpr double kStandardAmplitudeMv = 50.0;
inline constexpr double kWeakAmplitudeMv = 10.0;
inline constexpr double kSweepStartHz = 1100.0;
inline constexpr double kSweepStopHz = 4.9e6;
inline constexpr int kSweepTones = 38;

// 38 log-spaced tones from 1.1 kHz to 4.9 MHz (rounded to whole Hz).
InjectionSchedule default_schedule(InjectionMode mode, double dwell_seconds = 1.0);

// Front-end transfer function applied to signal tones on the SQUID channel.
struct GainModel {
    enum class Kind { Unity, Bandpass } kind = Kind::Bandpass;
    double f_low_hz = 1.0e3;
    double f_high_hz = 5.0e6;

    // One high-pass pole at f_low times one low-pass pole at f_high.
    std::complex<double> response(double f) const noexcept;
    double power_gain(double f) const noexcept { return std::norm(response(f)); }
};

struct InterferenceLine {
    double frequency_hz = 0.0;
    double amplitude_mv = 0.0;  // peak
};

struct NoiseModel {
    double white_sigma_mv = 4.0;
    double pink_amplitude_mv = 0.0;  // rms of the 1/f component
    std::vector<InterferenceLine> lines;
    GainModel gain;
    double injected_sigma_mv = 0.25;  // digitizer floor on the injected channel
    std::uint64_t seed = 0;

    void validate(double sample_rate) const;
};

// Expected one-sided PSD (mV^2/Hz) of the SQUID noise at frequency f,
// including quantization; interference lines are not included.
double expected_noise_psd(const NoiseModel& noise, double f, double sample_rate) noexcept;

struct PlantedSignal {
    double frequency_hz = 0.0;
    double amplitude_mv = 0.0;  // peak-to-peak, like injection entries
    // Spread the power over a standard-halo lineshape instead of a pure tone.
    bool lineshape = false;
    HaloParams halo;
};

// Generates arbitrary sample ranges of a two-channel pair dataset.
class PairGenerator {
public:
    PairGenerator(InjectionSchedule schedule, NoiseModel noise, double sample_rate, double seconds);

    std::uint64_t length() const noexcept { return length_; }
    double sample_rate() const noexcept { return rate_; }

    // Either pointer may be null.  Thread-safe.
    void fill(std::uint64_t start, std::size_t count, std::int8_t* squid, std::int8_t* injected) const;
    std::uint64_t saturated() const noexcept;

private:
    void fill_block(std::uint64_t block, std::int8_t* squid, std::int8_t* injected) const;

    InjectionSchedule schedule_;
    NoiseModel noise_;
    double rate_;
    std::uint64_t length_;
    std::vector<std::uint64_t> entry_start_;  // first sample of each entry, plus the end
    std::shared_ptr<std::atomic<std::uint64_t>> saturated_;
};

class ScienceGenerator {
public:
    ScienceGenerator(NoiseModel noise, double sample_rate, double seconds, std::optional<PlantedSignal> planted = {});

    std::uint64_t length() const noexcept { return length_; }
    double sample_rate() const noexcept { return rate_; }

    void fill(std::uint64_t start, std::size_t count, std::int8_t* out) const;
    std::uint64_t saturated() const noexcept;
    // Generates int8 samples and converts to millivolts.
    void fill_millivolts(std::uint64_t start, std::size_t count, double* out) const;

private:
    void fill_block(std::uint64_t block, std::int8_t* out) const;

    struct Tone {
        double frequency_hz;
        double amplitude_mv;  // peak, after front-end gain
        double phase;
    };

    NoiseModel noise_;
    double rate_;
    std::uint64_t length_;
    std::vector<Tone> tones_;  // planted components and interference lines
    std::shared_ptr<std::atomic<std::uint64_t>> saturated_;
};

struct SeriesPair {
    SampleSeries injected;
    SampleSeries squid;
};

// In-memory helpers for moderate durations.
SeriesPair synth_pair(const InjectionSchedule& schedule, const NoiseModel& noise,
                      double seconds, double sample_rate = kDefaultSampleRate);
SampleSeries synth_science(const NoiseModel& noise, double seconds, std::optional<PlantedSignal> planted = {},
                           double sample_rate = kDefaultSampleRate);

// rate * seconds, which must be a positive whole number of samples.
std::uint64_t samples_for(double seconds, double sample_rate);

// Fractional part of f * n / fs in cycles, accurate for n up to ~1e15.
long double cycle_fraction(double f, std::uint64_t n, double sample_rate) noexcept;

}  // namespace tidmad::sim
