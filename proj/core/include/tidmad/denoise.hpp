#pragma once
//
// Denoisers applied to SQUID segments before scoring or limit setting: the
// two traditional smoothing filters and a process-boundary protocol for
// external (for example learned) models.
//
// External protocol: `command... <input.tsd> <output.tsd>`.  The input is a
// single-channel container; the command must exit 0 and leave an equal-length
// container (int8 or float32) at the output path.
//

#include "tidmad/model.hpp"

#include <chrono>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tidmad::denoise {

inline constexpr std::size_t kDefaultMaWindow = 100;
inline constexpr std::size_t kDefaultSgWindow = 101;
inline constexpr int kDefaultSgOrder = 11;

struct ExternalCommand {
    std::vector<std::string> argv;  // program and leading arguments
    std::chrono::milliseconds timeout{std::chrono::minutes(10)};
};

struct DenoiserSpec {
    enum class Kind { None, MovingAverage, SavitzkyGolay, External } kind = Kind::None;
    std::size_t window = kDefaultMaWindow;
    int order = kDefaultSgOrder;
    ExternalCommand external;

    void validate() const;
    std::string describe() const;
};

const char* to_string(DenoiserSpec::Kind k) noexcept;
DenoiserSpec::Kind parse_kind(const std::string& name);

// y[t] = mean of x[t - w/2 .. t + ceil(w/2) - 1], window shrunk at the edges.
std::vector<double> moving_average(std::span<const double> x, std::size_t window = kDefaultMaWindow);
FloatSeries moving_average(const FloatSeries& x, std::size_t window = kDefaultMaWindow);
FloatSeries moving_average(const SampleSeries& x, std::size_t window = kDefaultMaWindow);

// Centre-point smoothing weights for a (window, order) least-squares fit.
std::vector<double> savitzky_golay_coefficients(std::size_t window, int order);

// Edges are mirror-padded (reflection about the end sample, not repeating it).
std::vector<double> savitzky_golay(std::span<const double> x, std::size_t window = kDefaultSgWindow,
                                   int order = kDefaultSgOrder);
FloatSeries savitzky_golay(const FloatSeries& x, std::size_t window = kDefaultSgWindow, int order = kDefaultSgOrder);
FloatSeries savitzky_golay(const SampleSeries& x, std::size_t window = kDefaultSgWindow, int order = kDefaultSgOrder);

// Failure of the external protocol.  `kind` distinguishes the causes.
struct ExternalError : DataError {
    enum class Kind { NotFound, ExitStatus, LengthMismatch, Timeout, Protocol } kind;
    ExternalError(Kind k, const std::string& what) : DataError(what), kind(k) {}
};

// Temp files go under $TIDMAD_TMPDIR when set, else the system temp dir.
std::filesystem::path temp_root();

FloatSeries run_external(const SampleSeries& x, const ExternalCommand& cmd);
FloatSeries run_external(const FloatSeries& x, const ExternalCommand& cmd);

// Precomputes filter state once and applies it to many segments.  Thread-safe
// for concurrent apply() calls.
class Denoiser {
public:
    explicit Denoiser(DenoiserSpec spec);

    const DenoiserSpec& spec() const noexcept { return spec_; }
    bool is_identity() const noexcept { return spec_.kind == DenoiserSpec::Kind::None; }

    // Raw segment in, millivolts out.
    std::vector<double> apply(const SampleSeries& x) const;
    std::vector<double> apply(std::span<const double> mv, double sample_rate) const;

private:
    DenoiserSpec spec_;
    std::vector<double> sg_;
};

}  // namespace tidmad::denoise
