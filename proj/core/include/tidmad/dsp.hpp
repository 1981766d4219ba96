#pragma once
//
// Frequency-domain engine shared by both benchmarks.
//
// PSD convention (frozen, limits calibrate against it): for a segment of N
// samples in millivolts at rate fs,
//
//     PSD[k] = w_k * |X_k|^2 / (fs * N),   k = 0 .. N/2,   df = fs / N
//
// with w_k = 2 for interior bins and w_k = 1 for DC and (even N) Nyquist, so
// that sum_k PSD[k] * df equals the mean-square value of the segment.  No
// window is applied and no zero padding is ever used; lengths such as 10^7
// go through a mixed-radix real transform.
//

#include "tidmad/model.hpp"

#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace tidmad::dsp {

struct SegmentPlan {
    double segment_seconds = 1.0;
    std::uint64_t samples_per_segment = 10'000'000;
    unsigned stride = 1;

    // Throws UsageError unless rate * seconds is a positive integer.
    static SegmentPlan make(double sample_rate, double segment_seconds, unsigned stride = 1);
};

// Weight w_k / (fs * N) applied to |X_k|^2.
double psd_bin_scale(std::size_t k, std::size_t n, double sample_rate) noexcept;

// Owns an FFT-aligned in-place buffer for one transform length.  Not
// thread-safe; use one engine per worker.
class PeriodogramEngine {
public:
    explicit PeriodogramEngine(std::size_t n);
    ~PeriodogramEngine();
    PeriodogramEngine(const PeriodogramEngine&) = delete;
    PeriodogramEngine& operator=(const PeriodogramEngine&) = delete;

    std::size_t size() const noexcept { return n_; }
    std::size_t bins() const noexcept { return n_ / 2 + 1; }

    // Write the N input samples here, then call transform().
    std::span<double> input() noexcept { return {buffer_, n_}; }
    void transform();
    // Valid after transform(), until the next call to input().
    std::span<const std::complex<double>> spectrum() const noexcept;

    // transform() then PSD values into `out` (size bins()).
    void power(double sample_rate, std::span<double> out);
    PowerSpectrum periodogram(std::span<const double> mv, double sample_rate);

    // transform() then overwrite the buffer with PSD values in place; returns
    // a view of the first bins() entries.
    std::span<const double> power_in_place(double sample_rate);

private:
    std::size_t n_;
    double* buffer_;
    void* plan_;
};

PowerSpectrum periodogram(std::span<const double> mv, double sample_rate);
PowerSpectrum periodogram(const SampleSeries& s);
PowerSpectrum periodogram(const FloatSeries& s);

// Running n_averaged-weighted mean with a fixed summation order.
class PsdAccumulator {
public:
    void add(const PowerSpectrum& p);
    void add(std::span<const double> values, double df, double f0, std::uint64_t n_averaged = 1);
    bool empty() const noexcept { return count_ == 0; }
    std::uint64_t count() const noexcept { return count_; }
    PowerSpectrum result() const;

private:
    std::vector<double> sum_;
    double df_ = 0.0;
    double f0_ = 0.0;
    std::uint64_t count_ = 0;
};

PowerSpectrum average_psds(std::span<const PowerSpectrum> psds);

// Streaming average of periodograms of n_segments consecutive segments.
// `fill(i, out)` writes segment i (millivolts) into `out`; it is called
// concurrently from several workers and must be thread-safe.  Reduction is
// performed in segment order, so the result is bit-identical for any
// worker count.  Peak memory is one transform buffer per worker plus the
// accumulator.
using SegmentFill = std::function<void(std::size_t, std::span<double>)>;
PowerSpectrum average_periodograms(std::size_t n_segments, std::size_t segment_len, double sample_rate,
                                   const SegmentFill& fill, unsigned workers = 1,
                                   const std::function<void(std::size_t)>& on_segment_done = {});

double mean_square(std::span<const double> x) noexcept;
double integrated_power(const PowerSpectrum& p) noexcept;

// CSV with header "frequency_hz,power", bins within [fmin, fmax].
void write_psd_csv(const std::filesystem::path& path, const PowerSpectrum& p, double fmin = 0.0,
                   double fmax = 1.0e300);

// Compact binary form ("TPSD", f0, df, n_averaged, count, float64 values).
void save_psd(const std::filesystem::path& path, const PowerSpectrum& p);
PowerSpectrum load_psd(const std::filesystem::path& path);

}  // namespace tidmad::dsp
