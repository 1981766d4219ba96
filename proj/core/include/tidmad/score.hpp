#pragma once
//
// Denoising benchmark.
//
// Each one-second segment pair (SQUID or denoised, injected) is turned into
// two periodograms.  The injected PSD locates the signal bin nu0 (the
// largest peak relative to its two neighbours); each channel's SNR is the
// PSD summed over the 3-bin signal region divided by the PSD summed over 50
// bins on either side of it.  Injected SNRs are normalized by their maximum
// over the processed segments, and
//
//     Lambda = mean_i SNR_squid,i * SNR'_injected,i,   score = log_base(Lambda).
//
// The base is calibrated on raw data so that un-denoised SQUID data scores 1.
//

#include "tidmad/denoise.hpp"
#include "tidmad/model.hpp"
#include "tidmad/simgen.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tidmad::io {
class ContainerReader;
}

namespace tidmad::score {

inline constexpr int kSignalHalfWidth = 1;
inline constexpr int kNoiseBinsPerSide = 50;
inline constexpr std::size_t kCoarseStride = 10;

enum class Mode { Fine, Coarse };
const char* to_string(Mode m) noexcept;

struct SnrRecord {
    std::size_t segment_index = 0;
    double nu0 = 0.0;
    double snr_squid = 0.0;
    double snr_injected = 0.0;
    double snr_injected_norm = 0.0;
};

struct ScoreReport {
    std::vector<SnrRecord> records;
    double lambda = 0.0;
    double base = 0.0;
    double score = 0.0;
    Mode mode = Mode::Fine;
    int n_sig = kSignalHalfWidth;
    int n_bkg = kNoiseBinsPerSide;
    std::size_t total_segments = 0;  // segments available before mode selection

    std::size_t n_segments() const noexcept { return records.size(); }
};

// Index of the bin maximizing p[k] - (p[k-1] + p[k+1]) over interior bins,
// ties to the lowest index.  Requires p.size() >= 3.
std::size_t find_signal_bin(std::span<const double> p);
double find_signal_frequency(const PowerSpectrum& p);

// Ratio of the signal-region sum to the noise-region sum around bin k.
double snr_at_bin(std::span<const double> p, std::size_t k, int n_sig = kSignalHalfWidth,
                  int n_bkg = kNoiseBinsPerSide);
double snr(const PowerSpectrum& p, double nu0, int n_sig = kSignalHalfWidth, int n_bkg = kNoiseBinsPerSide);

double score_from_lambda(double lambda, double base);

// Segment indices a mode visits out of n: all, or 0, 10, 20, ...
std::vector<std::size_t> mode_indices(Mode mode, std::size_t n);

// ---------------------------------------------------------------------------
// Sources of aligned segment pairs, in millivolts.  load() must be
// thread-safe.

class SegmentPairSource {
public:
    virtual ~SegmentPairSource() = default;
    virtual std::size_t segment_count() const = 0;
    virtual std::size_t segment_length() const = 0;
    virtual double sample_rate() const = 0;
    virtual void load(std::size_t segment, std::span<double> squid, std::span<double> injected) const = 0;
};

// Generates segments on demand from a pair generator.
class GeneratorPairSource final : public SegmentPairSource {
public:
    GeneratorPairSource(const sim::PairGenerator& gen, double segment_seconds = 1.0);
    std::size_t segment_count() const override { return count_; }
    std::size_t segment_length() const override { return len_; }
    double sample_rate() const override { return gen_.sample_rate(); }
    void load(std::size_t segment, std::span<double> squid, std::span<double> injected) const override;

private:
    const sim::PairGenerator& gen_;
    std::size_t len_;
    std::size_t count_;
};

// Reads the SQUID-side and injected-side channels from containers (possibly
// the same file).  Channel lengths must match.
class ContainerPairSource final : public SegmentPairSource {
public:
    ContainerPairSource(const std::filesystem::path& squid_path, std::size_t squid_channel,
                        const std::filesystem::path& injected_path, std::size_t injected_channel,
                        double segment_seconds = 1.0);
    ~ContainerPairSource() override;
    std::size_t segment_count() const override { return count_; }
    std::size_t segment_length() const override { return len_; }
    double sample_rate() const override { return rate_; }
    std::uint64_t discarded_samples() const noexcept { return discarded_; }
    void load(std::size_t segment, std::span<double> squid, std::span<double> injected) const override;

private:
    std::unique_ptr<io::ContainerReader> squid_;
    std::unique_ptr<io::ContainerReader> injected_;
    std::size_t squid_ch_;
    std::size_t injected_ch_;
    double rate_;
    std::size_t len_;
    std::size_t count_;
    std::uint64_t discarded_;
};

// Whole series held in memory.
class MemoryPairSource final : public SegmentPairSource {
public:
    MemoryPairSource(std::vector<double> squid_mv, std::vector<double> injected_mv, double sample_rate,
                     double segment_seconds = 1.0);
    MemoryPairSource(const SampleSeries& squid, const SampleSeries& injected, double segment_seconds = 1.0);
    std::size_t segment_count() const override { return count_; }
    std::size_t segment_length() const override { return len_; }
    double sample_rate() const override { return rate_; }
    void load(std::size_t segment, std::span<double> squid, std::span<double> injected) const override;

private:
    std::vector<double> squid_;
    std::vector<double> injected_;
    double rate_;
    std::size_t len_;
    std::size_t count_;
};

// Applies a denoiser to the SQUID side of another source, segment by segment.
class DenoisedPairSource final : public SegmentPairSource {
public:
    DenoisedPairSource(const SegmentPairSource& inner, const denoise::Denoiser& denoiser);
    std::size_t segment_count() const override { return inner_.segment_count(); }
    std::size_t segment_length() const override { return inner_.segment_length(); }
    double sample_rate() const override { return inner_.sample_rate(); }
    void load(std::size_t segment, std::span<double> squid, std::span<double> injected) const override;

private:
    const SegmentPairSource& inner_;
    const denoise::Denoiser& denoiser_;
};

// ---------------------------------------------------------------------------

struct ScoreOptions {
    unsigned workers = 1;
    std::function<void(std::size_t done, std::size_t total)> progress;
};

// Per-segment records (raw SNRs, normalization not yet applied) for the
// given segment indices, in index order.
std::vector<SnrRecord> segment_records(const SegmentPairSource& src, std::span<const std::size_t> indices,
                                       const ScoreOptions& opt = {});

// Normalization, Lambda and score from raw records.
ScoreReport finalize_report(std::vector<SnrRecord> records, double base, Mode mode, std::size_t total_segments);

// Lambda of raw data; throws NumericalError unless it exceeds 1.
double base_from_lambda(double lambda);

ScoreReport score_dataset(const SegmentPairSource& src, double base, Mode mode, const ScoreOptions& opt = {});
double calibrate_base(const SegmentPairSource& raw, const ScoreOptions& opt = {});

// Fine and coarse reports computed from one pass over the data (the coarse
// subset is a subset of the fine one).  base <= 0 means calibrate on `src`.
struct FineCoarse {
    ScoreReport fine;
    ScoreReport coarse;
};
FineCoarse score_fine_and_coarse(const SegmentPairSource& src, double base, const ScoreOptions& opt = {});

// ---------------------------------------------------------------------------
// Gaussian-noise robustness study.  Cell (i, j) adds noise of standard
// deviation amplitudes[i] * sigmas[j] mV to the target channel and reports
// the fine score.  The same unit-normal realization is shared by all cells,
// so neighbouring cells differ only through the noise scale.

enum class NoiseTarget { Squid, Injected };

struct RobustnessGrid {
    std::vector<double> amplitudes;
    std::vector<double> sigmas_mv;
    std::vector<std::vector<double>> score;   // [amplitude][sigma]
    std::vector<std::vector<double>> lambda;  // [amplitude][sigma]
    double base = 0.0;
    NoiseTarget target = NoiseTarget::Squid;
    std::uint64_t seed = 0;
};

RobustnessGrid noise_robustness_grid(const SegmentPairSource& src, std::span<const double> amplitudes,
                                     std::span<const double> sigmas_mv, double base, std::uint64_t seed,
                                     NoiseTarget target = NoiseTarget::Squid, const ScoreOptions& opt = {});

// JSON: {mode, base, lambda, score, n_segments, total_segments, n_sig, n_bkg, records: [...]}.
std::string report_json(const ScoreReport& r);
void write_report_json(const std::filesystem::path& path, const ScoreReport& r);
std::string grid_json(const RobustnessGrid& g);

}  // namespace tidmad::score
