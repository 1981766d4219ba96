#include "tidmad/dsp.hpp"

#include "tidmad/parallel.hpp"

#include <fftw3.h>

#include <limits>

#include <cmath>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

namespace tidmad::dsp {

namespace {

std::mutex& planner_mutex()
{
    static std::mutex m;
    return m;
}

// FFTW plans are shared across engines of the same length; the planner
// itself is not thread-safe.  FFTW_ESTIMATE keeps plan choice (and so the
// floating-point result) independent of timing.
fftw_plan plan_for(std::size_t n, double* buffer)
{
    static std::map<std::size_t, fftw_plan> plans;
    std::lock_guard lock(planner_mutex());
    auto it = plans.find(n);
    if (it != plans.end()) return it->second;
    fftw_plan p = fftw_plan_dft_r2c_1d(static_cast<int>(n), buffer, reinterpret_cast<fftw_complex*>(buffer),
                                       FFTW_ESTIMATE);
    if (!p) throw NumericalError("FFTW could not plan a transform of length " + std::to_string(n));
    plans.emplace(n, p);
    return p;
}

}  // namespace

SegmentPlan SegmentPlan::make(double sample_rate, double segment_seconds, unsigned stride)
{
    if (!(sample_rate > 0.0) || !(segment_seconds > 0.0)) throw UsageError("segment plan: rate and duration must be positive");
    if (stride < 1) throw UsageError("segment plan: stride must be >= 1");
    const double n = sample_rate * segment_seconds;
    const double rounded = std::round(n);
    if (rounded < 2.0 || std::abs(n - rounded) > 1e-9 * n)
        throw UsageError("segment plan: rate x seconds must be a whole number of samples (>= 2)");
    return SegmentPlan{segment_seconds, static_cast<std::uint64_t>(rounded), stride};
}

double psd_bin_scale(std::size_t k, std::size_t n, double sample_rate) noexcept
{
    const bool single = (k == 0) || (n % 2 == 0 && k == n / 2);
    return (single ? 1.0 : 2.0) / (sample_rate * static_cast<double>(n));
}

PeriodogramEngine::PeriodogramEngine(std::size_t n) : n_(n)
{
    if (n < 2) throw UsageError("periodogram needs at least 2 samples");
    if (n > static_cast<std::size_t>(std::numeric_limits<int>::max()))
        throw UsageError("transform length exceeds the supported range");
    buffer_ = fftw_alloc_real(2 * (n / 2 + 1));
    if (!buffer_) throw std::bad_alloc();
    plan_ = plan_for(n, buffer_);
}

PeriodogramEngine::~PeriodogramEngine()
{
    fftw_free(buffer_);
}

void PeriodogramEngine::transform()
{
    fftw_execute_dft_r2c(static_cast<fftw_plan>(plan_), buffer_, reinterpret_cast<fftw_complex*>(buffer_));
}

std::span<const std::complex<double>> PeriodogramEngine::spectrum() const noexcept
{
    return {reinterpret_cast<const std::complex<double>*>(buffer_), bins()};
}

void PeriodogramEngine::power(double sample_rate, std::span<double> out)
{
    transform();
    const auto x = spectrum();
    const double interior = 2.0 / (sample_rate * static_cast<double>(n_));
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = std::norm(x[k]) * interior;
    out[0] = std::norm(x[0]) * psd_bin_scale(0, n_, sample_rate);
    if (n_ % 2 == 0) out[n_ / 2] = std::norm(x[n_ / 2]) * psd_bin_scale(n_ / 2, n_, sample_rate);
}

std::span<const double> PeriodogramEngine::power_in_place(double sample_rate)
{
    transform();
    // Bin k reads doubles 2k, 2k+1 and writes double k <= 2k, so a forward
    // sweep never clobbers unread data.
    const double interior = 2.0 / (sample_rate * static_cast<double>(n_));
    const std::size_t nb = bins();
    for (std::size_t k = 0; k < nb; ++k) {
        const double re = buffer_[2 * k];
        const double im = buffer_[2 * k + 1];
        buffer_[k] = (re * re + im * im) * interior;
    }
    buffer_[0] *= 0.5;
    if (n_ % 2 == 0) buffer_[n_ / 2] *= 0.5;
    return {buffer_, nb};
}

PowerSpectrum PeriodogramEngine::periodogram(std::span<const double> mv, double sample_rate)
{
    if (mv.size() != n_) throw UsageError("periodogram: segment length does not match engine");
    std::copy(mv.begin(), mv.end(), buffer_);
    PowerSpectrum p;
    p.values.resize(bins());
    p.df = sample_rate / static_cast<double>(n_);
    p.f0 = 0.0;
    p.n_averaged = 1;
    power(sample_rate, p.values);
    return p;
}

PowerSpectrum periodogram(std::span<const double> mv, double sample_rate)
{
    if (!(sample_rate > 0.0)) throw UsageError("periodogram: sample rate must be positive");
    PeriodogramEngine engine(mv.size());
    return engine.periodogram(mv, sample_rate);
}

PowerSpectrum periodogram(const SampleSeries& s)
{
    s.validate();
    const auto mv = s.to_millivolts();
    return periodogram(mv, s.sample_rate);
}

PowerSpectrum periodogram(const FloatSeries& s)
{
    s.validate();
    return periodogram(s.samples, s.sample_rate);
}

// ---------------------------------------------------------------------------

void PsdAccumulator::add(std::span<const double> values, double df, double f0, std::uint64_t n_averaged)
{
    if (n_averaged < 1) throw UsageError("PSD with n_averaged = 0");
    if (count_ == 0) {
        sum_.assign(values.size(), 0.0);
        df_ = df;
        f0_ = f0;
    } else if (values.size() != sum_.size() || df != df_ || f0 != f0_) {
        std::ostringstream os;
        os << std::setprecision(17) << "PSD grid mismatch: accumulator has (df=" << df_ << ", f0=" << f0_
           << ", bins=" << sum_.size() << "), input has (df=" << df << ", f0=" << f0 << ", bins=" << values.size()
           << ")";
        throw DataError(os.str());
    }
    if (n_averaged == 1) {
        for (std::size_t i = 0; i < values.size(); ++i) sum_[i] += values[i];
    } else {
        const double w = static_cast<double>(n_averaged);
        for (std::size_t i = 0; i < values.size(); ++i) sum_[i] += w * values[i];
    }
    count_ += n_averaged;
}

void PsdAccumulator::add(const PowerSpectrum& p)
{
    add(p.values, p.df, p.f0, p.n_averaged);
}

PowerSpectrum PsdAccumulator::result() const
{
    if (count_ == 0) throw UsageError("cannot average an empty PSD stream");
    PowerSpectrum p;
    p.df = df_;
    p.f0 = f0_;
    p.n_averaged = count_;
    p.values.resize(sum_.size());
    const double n = static_cast<double>(count_);
    for (std::size_t i = 0; i < sum_.size(); ++i) p.values[i] = sum_[i] / n;
    return p;
}

PowerSpectrum average_psds(std::span<const PowerSpectrum> psds)
{
    PsdAccumulator acc;
    for (const auto& p : psds) acc.add(p);
    return acc.result();
}

PowerSpectrum average_periodograms(std::size_t n_segments, std::size_t segment_len, double sample_rate,
                                   const SegmentFill& fill, unsigned workers,
                                   const std::function<void(std::size_t)>& on_segment_done)
{
    if (n_segments == 0) throw UsageError("cannot average zero segments");
    workers = static_cast<unsigned>(std::min<std::size_t>(resolve_workers(workers), n_segments));
    std::vector<std::unique_ptr<PeriodogramEngine>> engines(workers);
    PsdAccumulator acc;
    const double df = sample_rate / static_cast<double>(segment_len);

    std::mutex m;
    std::condition_variable cv;
    std::size_t next_to_add = 0;
    bool aborted = false;

    parallel_for(n_segments, workers, [&](std::size_t i, unsigned w) {
        {
            std::lock_guard lock(m);
            if (aborted) return;
        }
        try {
            if (!engines[w]) engines[w] = std::make_unique<PeriodogramEngine>(segment_len);
            auto& eng = *engines[w];
            fill(i, eng.input());
            const auto psd = eng.power_in_place(sample_rate);
            std::unique_lock lock(m);
            cv.wait(lock, [&] { return next_to_add == i || aborted; });
            if (aborted) return;
            acc.add(psd, df, 0.0, 1);
            ++next_to_add;
            lock.unlock();
            cv.notify_all();
            if (on_segment_done) on_segment_done(i);
        } catch (...) {
            {
                std::lock_guard lock(m);
                aborted = true;
            }
            cv.notify_all();
            throw;
        }
    });
    return acc.result();
}

double mean_square(std::span<const double> x) noexcept
{
    double s = 0.0;
    for (double v : x) s += v * v;
    return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

double integrated_power(const PowerSpectrum& p) noexcept
{
    double s = 0.0;
    for (double v : p.values) s += v;
    return s * p.df;
}

void write_psd_csv(const std::filesystem::path& path, const PowerSpectrum& p, double fmin, double fmax)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write PSD CSV '" + path.string() + "'");
    out << "frequency_hz,power\n" << std::setprecision(17);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double f = p.frequency(i);
        if (f < fmin || f > fmax) continue;
        out << f << ',' << p.values[i] << '\n';
    }
    if (!out) throw DataError("error writing PSD CSV '" + path.string() + "'");
}

void save_psd(const std::filesystem::path& path, const PowerSpectrum& p)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write PSD file '" + path.string() + "'");
    const std::uint64_t n = p.size();
    out.write("TPSD", 4);
    out.write(reinterpret_cast<const char*>(&p.f0), 8);
    out.write(reinterpret_cast<const char*>(&p.df), 8);
    out.write(reinterpret_cast<const char*>(&p.n_averaged), 8);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(p.values.data()), static_cast<std::streamsize>(8 * n));
    if (!out) throw DataError("error writing PSD file '" + path.string() + "'");
}

PowerSpectrum load_psd(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open PSD file '" + path.string() + "'");
    char magic[4];
    PowerSpectrum p;
    std::uint64_t n = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&p.f0), 8);
    in.read(reinterpret_cast<char*>(&p.df), 8);
    in.read(reinterpret_cast<char*>(&p.n_averaged), 8);
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in || std::memcmp(magic, "TPSD", 4) != 0) throw DataError("corrupt PSD file '" + path.string() + "'");
    const auto size = std::filesystem::file_size(path);
    if (size < 36 || (size - 36) / 8 != n || (size - 36) % 8 != 0)
        throw DataError("PSD file '" + path.string() + "' declares " + std::to_string(n) + " bins but holds "
                        + std::to_string(size < 36 ? 0 : (size - 36) / 8));
    p.values.resize(n);
    in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(8 * n));
    if (!in) throw DataError("truncated PSD file '" + path.string() + "'");
    return p;
}

}  // namespace tidmad::dsp
