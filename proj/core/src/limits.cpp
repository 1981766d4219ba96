#include "tidmad/limits.hpp"

#include "tidmad/parallel.hpp"
#include "tidmad/random.hpp"

#include <boost/math/tools/toms748_solve.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <sstream>

namespace tidmad::limits {

double shm_speed_cdf(double v, const HaloParams& halo) noexcept
{
    if (!(v > 0.0)) return 0.0;
    const double sigma = halo.sigma_v();
    const double vo = halo.v_obs_km_s;
    const double s = std::sqrt(2.0) * sigma;
    const double em = std::exp(-(v - vo) * (v - vo) / (2.0 * sigma * sigma));
    const double ep = std::exp(-(v + vo) * (v + vo) / (2.0 * sigma * sigma));
    const double f = 0.5 * (std::erf((v - vo) / s) + std::erf((v + vo) / s))
                     - sigma / (vo * std::sqrt(2.0 * std::numbers::pi)) * (em - ep);
    return std::clamp(f, 0.0, 1.0);
}

double mean_fractional_offset(const HaloParams& halo) noexcept
{
    const double sigma = halo.sigma_v();
    const double v2 = halo.v_obs_km_s * halo.v_obs_km_s + 3.0 * sigma * sigma;
    return v2 / (2.0 * kSpeedOfLightKmS * kSpeedOfLightKmS);
}

double AxionTemplate::mean_frequency(const PsdGrid& grid) const noexcept
{
    double m = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) m += weights[i] * grid.frequency(first_bin + i);
    return m;
}

AxionTemplate build_template(double f_a, const PsdGrid& grid, const HaloParams& halo)
{
    halo.validate();
    if (!(grid.df > 0.0) || grid.n_bins == 0) throw UsageError("template: invalid PSD grid");
    if (!(f_a > 0.0) || !std::isfinite(f_a)) throw UsageError("template: mass frequency must be positive");
    const double pos = (f_a - grid.f0) / grid.df;
    if (pos < -0.5) {
        std::ostringstream os;
        os << std::setprecision(12) << "template: f_a = " << f_a << " Hz lies below the PSD grid start " << grid.f0 << " Hz";
        throw UsageError(os.str());
    }
    const double c = kSpeedOfLightKmS;
    const double v_max = halo.v_obs_km_s + kSupportSigmas * halo.sigma_v();
    const double nu_max = f_a * (1.0 + v_max * v_max / (2.0 * c * c));
    const auto first = static_cast<std::size_t>(std::floor(pos + 0.5));
    const auto last = static_cast<std::size_t>(std::floor((nu_max - grid.f0) / grid.df + 0.5));
    if (last >= grid.n_bins) {
        std::ostringstream os;
        os << std::setprecision(12) << "template: support of f_a = " << f_a << " Hz extends to " << nu_max
           << " Hz, beyond the PSD grid end " << grid.frequency(grid.n_bins - 1) << " Hz";
        throw UsageError(os.str());
    }
    auto speed = [&](double nu) {
        nu = std::min(nu, nu_max);
        return nu > f_a ? c * std::sqrt(2.0 * (nu / f_a - 1.0)) : 0.0;
    };
    AxionTemplate t;
    t.f_a = f_a;
    t.first_bin = first;
    t.halo = halo;
    t.weights.resize(last - first + 1);
    double total = 0.0;
    for (std::size_t i = first; i <= last; ++i) {
        const double lo = grid.frequency(i) - 0.5 * grid.df;
        const double hi = grid.frequency(i) + 0.5 * grid.df;
        const double w = shm_speed_cdf(speed(hi), halo) - shm_speed_cdf(speed(lo), halo);
        t.weights[i - first] = std::max(w, 0.0);
        total += t.weights[i - first];
    }
    if (!(total > 0.0)) throw NumericalError("template: lineshape has no weight on the grid");
    for (auto& w : t.weights) w /= total;
    return t;
}

// ---------------------------------------------------------------------------

Calibration::Calibration() = default;

Calibration::Calibration(sim::GainModel gain) : gain_(gain) {}

Calibration::Calibration(std::vector<std::pair<double, double>> table) : table_(std::move(table))
{
    if (table_.empty()) throw UsageError("calibration table is empty");
    for (std::size_t i = 0; i < table_.size(); ++i) {
        if (!(table_[i].second > 0.0)) throw UsageError("calibration gains must be positive");
        if (i > 0 && !(table_[i].first > table_[i - 1].first))
            throw UsageError("calibration frequencies must be strictly increasing");
    }
}

Calibration Calibration::from_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open calibration file '" + path.string() + "'");
    std::vector<std::pair<double, double>> table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        double f = 0.0, g = 0.0;
        if (!(ls >> f >> g)) {
            if (table.empty() && lineno == 1) continue;  // header
            throw DataError("calibration file '" + path.string() + "': malformed line " + std::to_string(lineno));
        }
        table.emplace_back(f, g);
    }
    return Calibration(std::move(table));
}

double Calibration::kappa(double f) const
{
    if (table_.empty()) return gain_.power_gain(f);
    if (f <= table_.front().first) return table_.front().second;
    if (f >= table_.back().first) return table_.back().second;
    const auto it = std::upper_bound(table_.begin(), table_.end(), f,
                                     [](double x, const std::pair<double, double>& p) { return x < p.first; });
    const auto& [f1, g1] = *(it - 1);
    const auto& [f2, g2] = *it;
    return g1 + (g2 - g1) * (f - f1) / (f2 - f1);
}

// ---------------------------------------------------------------------------

Window window_for(const AxionTemplate& t, const PsdGrid& grid)
{
    const double width = kWindowFraction * t.f_a / grid.df;
    const std::size_t count = std::max<std::size_t>(kMinWindowBins, static_cast<std::size_t>(std::llround(width)));
    const double centre = (t.mean_frequency(grid) - grid.f0) / grid.df;
    const double first = std::round(centre - 0.5 * static_cast<double>(count - 1));
    if (first < 0.0 || first + static_cast<double>(count) > static_cast<double>(grid.n_bins)) {
        std::ostringstream os;
        os << std::setprecision(12) << "window for f_a = " << t.f_a << " Hz (" << count
           << " bins) does not fit inside the PSD grid";
        throw UsageError(os.str());
    }
    return {static_cast<std::size_t>(first), count};
}

WindowProblem window_problem(const AxionTemplate& t, const PsdGrid& grid, double kappa)
{
    if (!(kappa > 0.0)) throw UsageError("calibration gain must be positive");
    WindowProblem p;
    p.window = window_for(t, grid);
    p.shape.assign(p.window.count, 0.0);
    for (std::size_t i = 0; i < t.weights.size(); ++i) {
        const std::size_t bin = t.first_bin + i;
        if (bin < p.window.first || bin >= p.window.first + p.window.count) continue;
        p.shape[bin - p.window.first] = kappa * t.weights[i] / grid.df;
    }
    return p;
}

// ---------------------------------------------------------------------------

WindowLikelihood::WindowLikelihood(std::span<const double> data, std::span<const double> shape, std::uint64_t n_averaged)
    : n_(static_cast<double>(n_averaged))
{
    if (data.empty()) throw UsageError("likelihood: empty window");
    if (data.size() != shape.size()) throw UsageError("likelihood: data and template windows differ in length");
    if (n_averaged < 1) throw UsageError("likelihood: n_averaged must be >= 1");
    double sum = 0.0;
    for (double d : data) {
        if (!(d >= 0.0) || !std::isfinite(d)) throw DataError("likelihood: negative or non-finite PSD bin");
        sum += d;
    }
    c_ = sum / static_cast<double>(data.size());
    if (!(c_ > 0.0)) throw NumericalError("likelihood: window PSD is identically zero");
    smax_ = 0.0;
    for (double s : shape) {
        if (!(s >= 0.0)) throw UsageError("likelihood: template weights must be non-negative");
        smax_ = std::max(smax_, s);
    }
    if (!(smax_ > 0.0)) throw UsageError("likelihood: template has no weight inside the window");
    d_.resize(data.size());
    u_.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        d_[i] = data[i] / c_;
        u_[i] = shape[i] / smax_;
    }
}

double WindowLikelihood::ln_l_scaled(double alpha, double beta) const
{
    double s = 0.0;
    for (std::size_t i = 0; i < d_.size(); ++i) {
        const double mu = beta + alpha * u_[i];
        if (!(mu > 0.0)) return -std::numeric_limits<double>::infinity();
        s += std::log(mu) + d_[i] / mu;
    }
    return -n_ * s;
}

double WindowLikelihood::ln_l(double a, double b) const
{
    const double shift = -n_ * static_cast<double>(d_.size()) * std::log(c_);
    return ln_l_scaled(a * smax_ / c_, b / c_) + shift;
}

double WindowLikelihood::profile_beta(double alpha, double start) const
{
    // Root of G(beta) = sum (mu - d) / mu^2, bracketed by the positivity
    // bound below and max(d - alpha u) above.
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < d_.size(); ++i) {
        lo = std::max(lo, -alpha * u_[i]);
        hi = std::max(hi, d_[i] - alpha * u_[i]);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    auto eval = [&](double beta, double& g, double& dg) {
        g = 0.0;
        dg = 0.0;
        for (std::size_t i = 0; i < d_.size(); ++i) {
            const double mu = beta + alpha * u_[i];
            const double inv = 1.0 / mu;
            g += (mu - d_[i]) * inv * inv;
            dg += (2.0 * d_[i] - mu) * inv * inv * inv;
        }
    };
    double g = 0.0, dg = 0.0;
    eval(hi, g, dg);
    if (g <= 0.0) return hi;  // every bin sits exactly at its data value
    double beta = (start > lo && start < hi) ? start : 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
        eval(beta, g, dg);
        if (g == 0.0) return beta;
        if (g < 0.0)
            lo = beta;
        else
            hi = beta;
        double next = (dg > 0.0) ? beta - g / dg : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - beta) <= 1e-15 * beta || hi - lo <= 1e-15 * hi) return next;
        beta = next;
    }
    return beta;
}

double WindowLikelihood::profile_b(double a) const
{
    const double alpha = a * smax_ / c_;
    return c_ * profile_beta(alpha, 1.0);
}

WindowLikelihood::Fit WindowLikelihood::fit() const
{
    double alpha = 0.0, beta = 1.0;  // beta = mean(d) in scaled units
    double cur = ln_l_scaled(alpha, beta);
    int it = 0;
    bool converged = false;
    double ia = 0.0, ib = 0.0, iab = 0.0;  // Fisher information (per n)
    for (; it < 200; ++it) {
        double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
        ia = ib = iab = 0.0;
        for (std::size_t i = 0; i < d_.size(); ++i) {
            const double mu = beta + alpha * u_[i];
            const double inv = 1.0 / mu;
            const double r = (mu - d_[i]) * inv * inv;
            const double q = (2.0 * d_[i] - mu) * inv * inv * inv;
            const double f = inv * inv;
            ga -= u_[i] * r;
            gb -= r;
            haa -= u_[i] * u_[i] * q;
            hab -= u_[i] * q;
            hbb -= q;
            ia += u_[i] * u_[i] * f;
            iab += u_[i] * f;
            ib += f;
        }
        // Newton when the Hessian is negative definite, Fisher scoring otherwise.
        double da = 0.0, db = 0.0;
        const double det = haa * hbb - hab * hab;
        if (haa < 0.0 && det > 0.0) {
            da = -(hbb * ga - hab * gb) / det;
            db = -(haa * gb - hab * ga) / det;
        } else {
            const double fdet = ia * ib - iab * iab;
            if (!(fdet > 0.0)) throw NumericalError("likelihood: singular Fisher information (template is flat in window)");
            da = (ib * ga - iab * gb) / fdet;
            db = (ia * gb - iab * ga) / fdet;
        }
        if (std::abs(da) <= 1e-13 * std::max(1.0, std::abs(alpha)) && std::abs(db) <= 1e-13 * beta) {
            converged = true;
            break;
        }
        double t = 1.0;
        double next = ln_l_scaled(alpha + da, beta + db);
        int halvings = 0;
        while (!(next >= cur - 1e-12 * std::abs(cur)) && halvings < 60) {
            t *= 0.5;
            next = ln_l_scaled(alpha + t * da, beta + t * db);
            ++halvings;
        }
        if (halvings == 60) {
            converged = true;  // no ascent direction left at working precision
            break;
        }
        alpha += t * da;
        beta += t * db;
        cur = next;
    }
    if (!converged) {
        std::ostringstream os;
        os << std::setprecision(10) << "likelihood fit did not converge after " << it << " iterations (last A = "
           << alpha * c_ / smax_ << ", b = " << beta * c_ << ")";
        throw NumericalError(os.str());
    }
    Fit f;
    f.a_hat = alpha * c_ / smax_;
    f.b_hat = beta * c_;
    f.ln_l_max = ln_l(f.a_hat, f.b_hat);
    const double fdet = ia * ib - iab * iab;
    const double var_alpha = fdet > 0.0 ? ib / (fdet * n_) : std::numeric_limits<double>::infinity();
    f.sigma_a = std::sqrt(var_alpha) * c_ / smax_;
    f.iterations = it;
    return f;
}

WindowFit fit_window(const PowerSpectrum& avg_psd, const AxionTemplate& t, const Calibration& cal)
{
    if (avg_psd.n_averaged < kMinAveraged) {
        std::ostringstream os;
        os << "fit_window needs an average of at least " << kMinAveraged << " periodograms, got " << avg_psd.n_averaged;
        throw UsageError(os.str());
    }
    const auto grid = PsdGrid::of(avg_psd);
    const auto prob = window_problem(t, grid, cal.kappa(t.f_a));
    const std::span<const double> data(avg_psd.values.data() + prob.window.first, prob.window.count);
    const WindowLikelihood like(data, prob.shape, avg_psd.n_averaged);
    WindowFit wf;
    try {
        const auto f = like.fit();
        wf.a_hat = f.a_hat;
        wf.b_hat = f.b_hat;
        wf.ln_l_max = f.ln_l_max;
        wf.sigma_a = f.sigma_a;
        wf.iterations = f.iterations;
    } catch (const NumericalError& e) {
        std::ostringstream os;
        os << e.what() << " in window [" << prob.window.first << ", " << prob.window.first + prob.window.count << ")";
        throw NumericalError(os.str());
    }
    wf.window = prob.window;
    wf.n_averaged = avg_psd.n_averaged;
    return wf;
}

double test_statistic(const WindowLikelihood& like, const WindowLikelihood::Fit& fit, double a)
{
    if (a < 0.0) throw UsageError("test statistic: A must be >= 0");
    const double a_phys = std::max(fit.a_hat, 0.0);
    if (a <= a_phys) return 0.0;
    const double ref = fit.a_hat > 0.0 ? fit.ln_l_max : like.profile_ln_l(0.0);
    return std::max(0.0, 2.0 * (ref - like.profile_ln_l(a)));
}

double test_statistic(const PowerSpectrum& avg_psd, const AxionTemplate& t, const WindowFit& fit, double a,
                      const Calibration& cal)
{
    const auto grid = PsdGrid::of(avg_psd);
    const auto prob = window_problem(t, grid, cal.kappa(t.f_a));
    const std::span<const double> data(avg_psd.values.data() + prob.window.first, prob.window.count);
    const WindowLikelihood like(data, prob.shape, avg_psd.n_averaged);
    return test_statistic(like, WindowLikelihood::Fit{fit.a_hat, fit.b_hat, fit.ln_l_max, fit.sigma_a, fit.iterations},
                          a);
}

double coupling_from_power(double a, const PhysicalConstants& k)
{
    if (!(a >= 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return std::sqrt(a / k.flux_factor());
}

LimitPoint limit_from_likelihood(const WindowLikelihood& like, double f_a, const LimitOptions& opt)
{
    LimitPoint p;
    p.f_a = f_a;
    p.mass_ev = frequency_to_mass_ev(f_a);
    const auto fit = like.fit();
    p.a_hat = fit.a_hat;
    p.b_hat = fit.b_hat;
    const double a_phys = std::max(fit.a_hat, 0.0);
    p.ts_at_zero = fit.a_hat > 0.0 ? std::max(0.0, 2.0 * (fit.ln_l_max - like.profile_ln_l(0.0))) : 0.0;

    auto excess = [&](double a) { return test_statistic(like, fit, a) - kTsThreshold; };
    double step = std::isfinite(fit.sigma_a) && fit.sigma_a > 0.0 ? 2.0 * fit.sigma_a : std::max(1e-300, a_phys);
    double hi = a_phys + step;
    int grow = 0;
    double f_hi = excess(hi);
    while (f_hi < 0.0 && grow < 80) {
        step *= 2.0;
        hi = a_phys + step;
        f_hi = excess(hi);
        ++grow;
    }
    if (f_hi < 0.0) {
        p.flagged = true;
        p.message = "TS never reached the threshold while growing the bracket";
        p.a_95 = p.g_95 = std::numeric_limits<double>::quiet_NaN();
        return p;
    }
    double lo = grow > 0 ? a_phys + 0.5 * step : a_phys;
    double f_lo = excess(lo);
    if (f_lo >= 0.0) {
        lo = a_phys;
        f_lo = -kTsThreshold;
    }
    std::uintmax_t iters = 200;
    const auto r = boost::math::tools::toms748_solve(excess, lo, hi, f_lo, f_hi,
                                                     boost::math::tools::eps_tolerance<double>(44), iters);
    p.a_95 = 0.5 * (r.first + r.second);
    p.g_95 = coupling_from_power(p.a_95, opt.constants);
    if (opt.ts_samples > 1) {
        const double top = std::max(1.5 * p.a_95, a_phys + 1e-300);
        for (std::size_t i = 0; i < opt.ts_samples; ++i) {
            const double a = a_phys + (top - a_phys) * static_cast<double>(i) / static_cast<double>(opt.ts_samples - 1);
            p.ts_curve.emplace_back(a, test_statistic(like, fit, a));
        }
    }
    return p;
}

LimitPoint upper_limit(const PowerSpectrum& avg_psd, const AxionTemplate& t, const LimitOptions& opt)
{
    if (avg_psd.n_averaged < kMinAveraged) {
        std::ostringstream os;
        os << "limits need an average of at least " << kMinAveraged << " periodograms, got " << avg_psd.n_averaged;
        throw UsageError(os.str());
    }
    const auto grid = PsdGrid::of(avg_psd);
    const auto prob = window_problem(t, grid, opt.calibration.kappa(t.f_a));
    const std::span<const double> data(avg_psd.values.data() + prob.window.first, prob.window.count);
    const WindowLikelihood like(data, prob.shape, avg_psd.n_averaged);
    return limit_from_likelihood(like, t.f_a, opt);
}

std::vector<double> log_mass_grid(double f_min, double f_max, std::size_t n)
{
    if (n == 0) return {};
    if (!(f_min > 0.0 && f_max >= f_min)) throw UsageError("mass grid: need 0 < f_min <= f_max");
    std::vector<double> g(n);
    if (n == 1) {
        g[0] = f_min;
        return g;
    }
    const double step = std::log(f_max / f_min) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) g[i] = f_min * std::exp(step * static_cast<double>(i));
    g.back() = f_max;
    return g;
}

// ---------------------------------------------------------------------------

namespace {

LimitPoint flagged_point(double f_a, const std::string& why)
{
    LimitPoint p;
    p.f_a = f_a;
    p.mass_ev = frequency_to_mass_ev(f_a);
    p.flagged = true;
    p.message = why;
    p.a_hat = p.b_hat = p.a_95 = p.g_95 = p.ts_at_zero = std::numeric_limits<double>::quiet_NaN();
    return p;
}

// Per-mass template and window, computed once per grid and reused across
// pseudo-experiments.
struct MassPlan {
    bool ok = false;
    std::string error;
    WindowProblem prob;
};

MassPlan plan_mass(double f_a, const PsdGrid& grid, const LimitOptions& opt)
{
    MassPlan m;
    try {
        const auto t = build_template(f_a, grid, opt.halo);
        m.prob = window_problem(t, grid, opt.calibration.kappa(f_a));
        m.ok = true;
    } catch (const std::exception& e) {
        m.error = e.what();
    }
    return m;
}

LimitPoint solve_mass(const MassPlan& m, double f_a, std::span<const double> data, std::uint64_t n,
                      const LimitOptions& opt)
{
    if (!m.ok) return flagged_point(f_a, m.error);
    try {
        const WindowLikelihood like(data, m.prob.shape, n);
        return limit_from_likelihood(like, f_a, opt);
    } catch (const std::exception& e) {
        return flagged_point(f_a, e.what());
    }
}

}  // namespace

void scan_masses(const PowerSpectrum& avg_psd, std::span<const double> masses, const LimitOptions& opt,
                 const std::function<void(std::size_t, const LimitPoint&)>& sink)
{
    if (masses.empty()) return;
    if (avg_psd.n_averaged < kMinAveraged) {
        std::ostringstream os;
        os << "limits need an average of at least " << kMinAveraged << " periodograms, got " << avg_psd.n_averaged;
        throw UsageError(os.str());
    }
    avg_psd.validate();
    const auto grid = PsdGrid::of(avg_psd);
    const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
    std::vector<LimitPoint> buf;
    for (std::size_t c0 = 0; c0 < masses.size(); c0 += chunk) {
        const std::size_t len = std::min(chunk, masses.size() - c0);
        buf.assign(len, {});
        parallel_for(len, opt.workers, [&](std::size_t k, unsigned) {
            const double f = masses[c0 + k];
            const auto m = plan_mass(f, grid, opt);
            const std::span<const double> data =
                m.ok ? std::span<const double>(avg_psd.values.data() + m.prob.window.first, m.prob.window.count)
                     : std::span<const double>();
            buf[k] = solve_mass(m, f, data, avg_psd.n_averaged, opt);
        });
        for (std::size_t k = 0; k < len; ++k) sink(c0 + k, buf[k]);
        if (opt.progress) opt.progress(c0 + len, masses.size());
    }
}

LimitCurve scan_masses(const PowerSpectrum& avg_psd, std::span<const double> masses, const LimitOptions& opt)
{
    LimitCurve curve(masses.size());
    scan_masses(avg_psd, masses, opt, [&](std::size_t i, const LimitPoint& p) { curve[i] = p; });
    return curve;
}

// ---------------------------------------------------------------------------

void pseudo_psd(const std::function<double(double)>& background, const PsdGrid& grid, std::uint64_t n_averaged,
                std::uint64_t seed, std::uint64_t trial, std::size_t first, std::span<double> out)
{
    const std::uint64_t key = derive_key(seed, tag(StreamTag::PseudoExperiment), trial);
    const double n = static_cast<double>(n_averaged);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t bin = first + i;
        const double mu = background(grid.frequency(bin));
        if (!(mu > 0.0)) throw UsageError("band: background PSD must be positive");
        CounterRng rng(derive_key(key, bin));
        boost::random::gamma_distribution<double> gamma(n, mu / n);
        out[i] = gamma(rng);
    }
}

namespace {

// Type-7 (linear interpolation) percentile of an ascending sample.
double percentile(const std::vector<double>& v, double pct)
{
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double h = (static_cast<double>(v.size()) - 1.0) * pct / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

BrazilBand brazil_band(const std::function<double(double)>& background, const PsdGrid& grid,
                       std::uint64_t n_averaged, std::span<const double> masses, std::size_t n_trials,
                       std::uint64_t seed, const LimitOptions& opt)
{
    if (n_trials < 100) throw UsageError("Brazil band needs at least 100 pseudo-experiments");
    if (n_averaged < kMinAveraged) {
        std::ostringstream os;
        os << "limits need an average of at least " << kMinAveraged << " periodograms, got " << n_averaged;
        throw UsageError(os.str());
    }
    const std::size_t nm = masses.size();
    std::vector<MassPlan> plans(nm);
    parallel_for(nm, opt.workers, [&](std::size_t k, unsigned) { plans[k] = plan_mass(masses[k], grid, opt); });

    // g95[trial * nm + mass]
    std::vector<double> a95(n_trials * nm, std::numeric_limits<double>::quiet_NaN());
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;
    LimitOptions inner = opt;
    inner.ts_samples = 0;
    parallel_for(n_trials, opt.workers, [&](std::size_t t, unsigned) {
        std::vector<double> data;
        for (std::size_t k = 0; k < nm; ++k) {
            const auto& m = plans[k];
            if (!m.ok) continue;
            data.resize(m.prob.window.count);
            pseudo_psd(background, grid, n_averaged, seed, t, m.prob.window.first, data);
            const auto p = solve_mass(m, masses[k], data, n_averaged, inner);
            a95[t * nm + k] = p.flagged ? std::numeric_limits<double>::quiet_NaN() : p.a_95;
        }
        if (opt.progress) {
            const auto d = ++done;
            std::lock_guard lock(progress_mutex);
            opt.progress(d, n_trials);
        }
    });

    BrazilBand band;
    band.masses.assign(masses.begin(), masses.end());
    band.n_trials = n_trials;
    band.n_averaged = n_averaged;
    band.seed = seed;
    band.a95.resize(nm);
    band.g95.resize(nm);
    std::vector<double> col;
    for (std::size_t k = 0; k < nm; ++k) {
        col.clear();
        for (std::size_t t = 0; t < n_trials; ++t)
            if (std::isfinite(a95[t * nm + k])) col.push_back(a95[t * nm + k]);
        std::sort(col.begin(), col.end());
        for (std::size_t q = 0; q < kBandPercentiles.size(); ++q) {
            band.a95[k][q] = percentile(col, kBandPercentiles[q]);
            band.g95[k][q] = coupling_from_power(band.a95[k][q], opt.constants);
        }
    }
    return band;
}

double band_containment(const LimitCurve& curve, const BrazilBand& band)
{
    if (curve.size() != band.masses.size()) throw UsageError("band and curve have different mass grids");
    std::size_t in = 0, total = 0;
    for (std::size_t k = 0; k < curve.size(); ++k) {
        const auto& p = curve[k];
        const auto& q = band.g95[k];
        if (p.flagged || !std::isfinite(q[0]) || !std::isfinite(q[4])) continue;
        ++total;
        if (p.g_95 >= q[0] && p.g_95 <= q[4]) ++in;
    }
    return total ? static_cast<double>(in) / static_cast<double>(total) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------

void write_limit_csv(const std::filesystem::path& path, const LimitCurve& curve)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write limit CSV '" + path.string() + "'");
    out << "mass_ev,frequency_hz,a95,g95,ts_at_zero,flagged\n" << std::setprecision(12);
    for (const auto& p : curve)
        out << p.mass_ev << ',' << p.f_a << ',' << p.a_95 << ',' << p.g_95 << ',' << p.ts_at_zero << ','
            << (p.flagged ? 1 : 0) << '\n';
    if (!out) throw DataError("error writing limit CSV '" + path.string() + "'");
}

void write_band_csv(const std::filesystem::path& path, const BrazilBand& band)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write band CSV '" + path.string() + "'");
    out << "mass_ev,frequency_hz,g95_p2.5,g95_p16,g95_p50,g95_p84,g95_p97.5\n" << std::setprecision(12);
    for (std::size_t k = 0; k < band.masses.size(); ++k) {
        out << frequency_to_mass_ev(band.masses[k]) << ',' << band.masses[k];
        for (double g : band.g95[k]) out << ',' << g;
        out << '\n';
    }
    if (!out) throw DataError("error writing band CSV '" + path.string() + "'");
}

std::string limit_json(const LimitCurve& curve, const LimitOptions& opt)
{
    nlohmann::ordered_json j;
    j["ts_threshold"] = kTsThreshold;
    j["halo"] = {{"v0_km_s", opt.halo.v0_km_s}, {"v_obs_km_s", opt.halo.v_obs_km_s}};
    j["constants"] = {{"geometric_coupling", opt.constants.geometric_coupling},
                      {"volume_cm3", opt.constants.volume_cm3},
                      {"b_max_tesla", opt.constants.b_max_tesla},
                      {"rho_dm_gev_cm3", opt.constants.rho_dm_gev_cm3}};
    j["coupling_convention"] = "g = sqrt(A / (rho * G^2 * V^2 * B^2)), A in mV^2 of calibrated flux power";
    auto& pts = j["points"] = nlohmann::ordered_json::array();
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(nullptr); };
    for (const auto& p : curve) {
        nlohmann::ordered_json e{{"mass_ev", p.mass_ev},     {"frequency_hz", p.f_a}, {"a_hat", num(p.a_hat)},
                                 {"b_hat", num(p.b_hat)},     {"a95", num(p.a_95)},    {"g95", num(p.g_95)},
                                 {"ts_at_zero", num(p.ts_at_zero)}, {"flagged", p.flagged}};
        if (p.flagged) e["message"] = p.message;
        if (!p.ts_curve.empty()) e["ts_curve"] = p.ts_curve;
        pts.push_back(std::move(e));
    }
    return j.dump(1);
}

}  // namespace tidmad::limits
