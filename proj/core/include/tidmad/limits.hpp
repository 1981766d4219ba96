#pragma once
//
// Axion limit analysis on an averaged science PSD.
//
// For each candidate mass (expressed as its Compton frequency f_a) a signal
// template w_i is built from the standard-halo speed distribution, mapped to
// frequency by nu = f_a (1 + v^2 / 2c^2) and integrated over each PSD bin.
// Inside a sliding window around the template the averaged PSD d_i is
// modelled as
//
//     mu_i = b + A * s_i,    s_i = kappa(f_a) * w_i / df,
//
// with flat background b, flux power A and calibration power gain kappa.  An
// average of n periodograms of Gaussian noise has d_i ~ Gamma(n, mu_i / n), so
//
//     lnL(A, b) = -n * sum_i [ ln mu_i + d_i / mu_i ]     (constants dropped).
//
// TS(A) = 2 [lnL(A_phys, b^(A_phys)) - lnL(A, b^(A))] for A above the
// physical best fit A_phys = max(A^, 0), and 0 below it; the one-sided 95%
// limit is where TS crosses 2.71.  g = sqrt(A / (rho G^2 V^2 B^2)).
//

#include "tidmad/model.hpp"
#include "tidmad/simgen.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tidmad::limits {

inline constexpr double kWindowFraction = 5.5e-6;
inline constexpr std::size_t kMinWindowBins = 30;
inline constexpr double kTsThreshold = 2.71;
inline constexpr std::uint64_t kMinAveraged = 30;
inline constexpr double kSupportSigmas = 5.0;  // template support ends at v_obs + 5 sigma_v

struct PsdGrid {
    double df = 0.1;
    double f0 = 0.0;
    std::size_t n_bins = 0;

    static PsdGrid of(const PowerSpectrum& p) { return {p.df, p.f0, p.size()}; }
    double frequency(std::size_t i) const noexcept { return f0 + static_cast<double>(i) * df; }
};

// Lab-frame speed CDF of the standard halo model (km/s).
double shm_speed_cdf(double v_km_s, const HaloParams& halo) noexcept;
// <v^2> / (2 c^2): mean fractional frequency offset of the lineshape.
double mean_fractional_offset(const HaloParams& halo) noexcept;

struct AxionTemplate {
    double f_a = 0.0;
    std::size_t first_bin = 0;
    std::vector<double> weights;  // on bins first_bin .. first_bin + size - 1
    HaloParams halo;

    std::size_t last_bin() const noexcept { return first_bin + weights.size() - 1; }
    double mean_frequency(const PsdGrid& grid) const noexcept;
};

AxionTemplate build_template(double f_a, const PsdGrid& grid, const HaloParams& halo = {});

// Frequency -> power gain between flux power and PSD power.
class Calibration {
public:
    Calibration();  // the simulator's default band-pass
    explicit Calibration(sim::GainModel gain);
    // Piecewise-linear table; frequencies strictly increasing, gains > 0.
    explicit Calibration(std::vector<std::pair<double, double>> table);
    // CSV "frequency_hz,gain" with a header line.
    static Calibration from_csv(const std::filesystem::path& path);

    double kappa(double f) const;

private:
    sim::GainModel gain_;
    std::vector<std::pair<double, double>> table_;
};

struct Window {
    std::size_t first = 0;
    std::size_t count = 0;
};

// Bins of the sliding window for a template: width max(5.5e-6 f_a, 30 df),
// centred on the template mean frequency.
Window window_for(const AxionTemplate& t, const PsdGrid& grid);

// Likelihood of one window.  Internally everything is rescaled to O(1)
// (data by its mean, template shape by its peak).
class WindowLikelihood {
public:
    WindowLikelihood(std::span<const double> data, std::span<const double> shape, std::uint64_t n_averaged);

    double ln_l(double a, double b) const;
    // Background maximizing lnL at fixed A.
    double profile_b(double a) const;
    double profile_ln_l(double a) const { return ln_l(a, profile_b(a)); }

    struct Fit {
        double a_hat;
        double b_hat;
        double ln_l_max;
        double sigma_a;  // from the Fisher information at the optimum
        int iterations;
    };
    Fit fit() const;

    std::size_t size() const noexcept { return d_.size(); }
    std::uint64_t n_averaged() const noexcept { return static_cast<std::uint64_t>(n_); }

private:
    double ln_l_scaled(double alpha, double beta) const;
    double profile_beta(double alpha, double start) const;

    std::vector<double> d_;  // data / c
    std::vector<double> u_;  // shape / smax
    double c_;               // data scale
    double smax_;            // shape scale
    double n_;
};

struct WindowFit {
    double a_hat = 0.0;
    double b_hat = 0.0;
    double ln_l_max = 0.0;
    double sigma_a = 0.0;
    Window window;
    std::uint64_t n_averaged = 1;
    int iterations = 0;
};

// The window data and signal shape used by fit_window.
struct WindowProblem {
    Window window;
    std::vector<double> shape;  // s_i = kappa * w_i / df over the window
};
WindowProblem window_problem(const AxionTemplate& t, const PsdGrid& grid, double kappa);

WindowFit fit_window(const PowerSpectrum& avg_psd, const AxionTemplate& t, const Calibration& cal = {});

// TS(A) as defined above, for the likelihood of an already-fitted window.
double test_statistic(const WindowLikelihood& like, const WindowLikelihood::Fit& fit, double a);
double test_statistic(const PowerSpectrum& avg_psd, const AxionTemplate& t, const WindowFit& fit, double a,
                      const Calibration& cal = {});

struct LimitPoint {
    double f_a = 0.0;
    double mass_ev = 0.0;
    double a_hat = 0.0;
    double b_hat = 0.0;
    double a_95 = 0.0;
    double g_95 = 0.0;
    double ts_at_zero = 0.0;  // 2 [lnL_max - lnL(0)] when A^ > 0, else 0
    bool flagged = false;
    std::string message;
    std::vector<std::pair<double, double>> ts_curve;  // sampled (A, TS)
};

double coupling_from_power(double a, const PhysicalConstants& k);

struct LimitOptions {
    HaloParams halo;
    Calibration calibration;
    PhysicalConstants constants;
    std::size_t ts_samples = 0;  // points of TS(A) kept per limit
    unsigned workers = 1;
    std::size_t chunk = 4096;  // masses per streaming chunk
    std::function<void(std::size_t done, std::size_t total)> progress;
};

// Limit from a window likelihood (used by scans and pseudo-experiments).
LimitPoint limit_from_likelihood(const WindowLikelihood& like, double f_a, const LimitOptions& opt);

LimitPoint upper_limit(const PowerSpectrum& avg_psd, const AxionTemplate& t, const LimitOptions& opt = {});

std::vector<double> log_mass_grid(double f_min, double f_max, std::size_t n);

using LimitCurve = std::vector<LimitPoint>;

// Masses are processed independently; points that fail are flagged and the
// scan continues.  Throws UsageError if the PSD is averaged fewer than 30
// times.
LimitCurve scan_masses(const PowerSpectrum& avg_psd, std::span<const double> masses, const LimitOptions& opt = {});
// Streaming form: `sink` receives points in mass order, one chunk at a time.
void scan_masses(const PowerSpectrum& avg_psd, std::span<const double> masses, const LimitOptions& opt,
                 const std::function<void(std::size_t index, const LimitPoint&)>& sink);

inline constexpr std::array<double, 5> kBandPercentiles{2.5, 16.0, 50.0, 84.0, 97.5};

struct BrazilBand {
    std::vector<double> masses;
    std::vector<std::array<double, 5>> g95;  // per mass: 2.5, 16, 50, 84, 97.5 percentiles
    std::vector<std::array<double, 5>> a95;
    std::size_t n_trials = 0;
    std::uint64_t n_averaged = 0;
    std::uint64_t seed = 0;
};

// Background-only pseudo-experiments generated directly in the PSD domain:
// bin i of trial t is Gamma(n, mu(f_i) / n), keyed by (seed, t, i), which is
// the exact law of an n-fold averaged periodogram of Gaussian noise.
BrazilBand brazil_band(const std::function<double(double)>& background, const PsdGrid& grid,
                       std::uint64_t n_averaged, std::span<const double> masses, std::size_t n_trials,
                       std::uint64_t seed, const LimitOptions& opt = {});

// One pseudo-dataset on the bins of `grid` within [first, first + count).
void pseudo_psd(const std::function<double(double)>& background, const PsdGrid& grid, std::uint64_t n_averaged,
                std::uint64_t seed, std::uint64_t trial, std::size_t first, std::span<double> out);

// Fraction of masses whose limit lies within the band's 2.5-97.5 range.
double band_containment(const LimitCurve& curve, const BrazilBand& band);

// CSV writers.
void write_limit_csv(const std::filesystem::path& path, const LimitCurve& curve);
void write_band_csv(const std::filesystem::path& path, const BrazilBand& band);
std::string limit_json(const LimitCurve& curve, const LimitOptions& opt);

}  // namespace tidmad::limits
