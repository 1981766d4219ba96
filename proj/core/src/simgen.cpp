#include "tidmad/simgen.hpp"

#include "tidmad/random.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace tidmad::sim {

namespace {

constexpr int kPinkRows = 24;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Unit normal draws for one (stream, block) pair.
class BlockNormals {
public:
    BlockNormals(std::uint64_t seed, StreamTag stream, std::uint64_t block)
        : rng_(derive_key(seed, tag(stream), block))
    {}
    double operator()() { return dist_(rng_); }

private:
    CounterRng rng_;
    boost::random::normal_distribution<double> dist_{0.0, 1.0};
};

double keyed_normal(std::uint64_t key, std::uint64_t index)
{
    CounterRng rng(derive_key(key, index));
    boost::random::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

// Voss-McCartney pink noise: row j holds one Gaussian draw per run of 2^j
// samples.  Each held value is keyed by (row, n >> j), so any block can be
// produced without history.
void add_pink(std::uint64_t seed, StreamTag stream, double rms, std::uint64_t n0, std::size_t len, double* out)
{
    if (rms <= 0.0 || len == 0) return;
    const double s = rms / std::sqrt(static_cast<double>(kPinkRows));
    const std::uint64_t base = derive_key(seed, tag(stream));
    for (int j = 0; j < kPinkRows; ++j) {
        const std::uint64_t key = derive_key(base, static_cast<std::uint64_t>(j));
        std::uint64_t n = n0;
        const std::uint64_t end = n0 + len;
        while (n < end) {
            const std::uint64_t run = n >> j;
            const std::uint64_t run_end = std::min<std::uint64_t>(end, (run + 1) << j);
            const double v = s * keyed_normal(key, run);
            for (std::uint64_t m = n; m < run_end; ++m) out[m - n0] += v;
            n = run_end;
        }
    }
}

// Adds amp * Im(exp(i*(2 pi f (n - origin)/fs + phase)) * h) for n in
// [n0, n0 + len).  The phasor is anchored exactly at n0 and advanced by a
// rotation recurrence; drift over one block is a few ulps.
void add_tone(double f, double amp, double phase, std::complex<double> h, double fs, std::uint64_t origin,
              std::uint64_t n0, std::size_t len, double* out)
{
    const long double cyc = cycle_fraction(f, n0 - origin, fs);
    const double theta = static_cast<double>(2.0L * std::numbers::pi_v<long double> * cyc) + phase;
    std::complex<double> z(std::cos(theta), std::sin(theta));
    const double step = kTwoPi * f / fs;
    z *= h * amp;
    // Eight interleaved phasors, each advanced by 8 steps, so the rotation
    // is not one long serial dependency chain.
    constexpr std::size_t L = 8;
    double zr[L], zi[L];
    for (std::size_t j = 0; j < L; ++j) {
        const std::complex<double> zj = z * std::complex<double>(std::cos(step * j), std::sin(step * j));
        zr[j] = zj.real();
        zi[j] = zj.imag();
    }
    const double rr = std::cos(step * L), ri = std::sin(step * L);
    std::size_t k = 0;
    for (; k + L <= len; k += L) {
        for (std::size_t j = 0; j < L; ++j) {
            out[k + j] += zi[j];
            const double nr = zr[j] * rr - zi[j] * ri;
            zi[j] = zr[j] * ri + zi[j] * rr;
            zr[j] = nr;
        }
    }
    for (std::size_t j = 0; k < len; ++k, ++j) out[k] += zi[j];
}

std::uint64_t quantize_block(const double* mv, std::size_t len, std::int8_t* out)
{
    Quantizer q;
    for (std::size_t k = 0; k < len; ++k) out[k] = q(mv[k]);
    return q.saturated();
}

void check_rate(double rate)
{
    if (!(rate > 0.0) || std::round(rate) != rate) throw UsageError("generator: sample rate must be a positive whole number of Hz");
}

}  // namespace

long double cycle_fraction(double f, std::uint64_t n, double sample_rate) noexcept
{
    // n = q*fs + r, f = fi + ff:  f*n/fs = fi*q + ff*q + f*r/fs, and fi*q is
    // a whole number of cycles.
    const auto fs = static_cast<std::uint64_t>(sample_rate);
    if (fs == 0) return 0.0L;
    const std::uint64_t q = n / fs;
    const std::uint64_t r = n % fs;
    const long double fl = f;
    const long double ff = fl - std::floor(fl);
    long double c = ff * static_cast<long double>(q) + fl * static_cast<long double>(r) / static_cast<long double>(fs);
    c -= std::floor(c);
    return c;
}

std::uint64_t samples_for(double seconds, double sample_rate)
{
    if (!(seconds > 0.0) || !(sample_rate > 0.0)) throw UsageError("duration and sample rate must be positive");
    const double n = seconds * sample_rate;
    const double rounded = std::round(n);
    if (rounded < 1.0 || std::abs(n - rounded) > 1e-6) {
        std::ostringstream os;
        os << "duration " << seconds << " s at " << sample_rate << " Hz is not a whole number of samples";
        throw UsageError(os.str());
    }
    return static_cast<std::uint64_t>(rounded);
}

double InjectionSchedule::total_duration() const noexcept
{
    double t = 0.0;
    for (const auto& e : entries) t += e.duration_s;
    return t;
}

void InjectionSchedule::validate(double sample_rate) const
{
    if (entries.empty()) throw UsageError("injection schedule is empty");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        std::ostringstream os;
        os << "injection schedule entry " << i << ": ";
        if (!(e.frequency_hz > 0.0 && e.frequency_hz < sample_rate / 2.0))
            throw UsageError(os.str() + "frequency must lie in (0, Nyquist)");
        if (!(e.amplitude_mv > 0.0)) throw UsageError(os.str() + "amplitude must be positive");
        if (!(e.duration_s > 0.0)) throw UsageError(os.str() + "duration must be positive");
        samples_for(e.duration_s, sample_rate);
    }
}

InjectionSchedule default_schedule(InjectionMode mode, double dwell_seconds)
{
    if (!(dwell_seconds > 0.0)) throw UsageError("dwell must be positive");
    const double amp = mode == InjectionMode::Standard ? kStandardAmplitudeMv : kWeakAmplitudeMv;
    InjectionSchedule s;
    const double ratio = std::log(kSweepStopHz / kSweepStartHz) / (kSweepTones - 1);
    for (int i = 0; i < kSweepTones; ++i) {
        const double f = std::round(kSweepStartHz * std::exp(ratio * i));
        s.entries.push_back({f, amp, dwell_seconds});
    }
    s.entries.front().frequency_hz = kSweepStartHz;
    s.entries.back().frequency_hz = kSweepStopHz;
    return s;
}

std::complex<double> GainModel::response(double f) const noexcept
{
    if (kind == Kind::Unity) return {1.0, 0.0};
    const std::complex<double> jl(0.0, f / f_low_hz);
    const std::complex<double> jh(0.0, f / f_high_hz);
    return jl / (1.0 + jl) / (1.0 + jh);
}

void NoiseModel::validate(double sample_rate) const
{
    if (!(white_sigma_mv >= 0.0) || !std::isfinite(white_sigma_mv)) throw UsageError("noise: white sigma must be >= 0");
    if (!(pink_amplitude_mv >= 0.0) || !std::isfinite(pink_amplitude_mv)) throw UsageError("noise: pink amplitude must be >= 0");
    if (!(injected_sigma_mv >= 0.0) || !std::isfinite(injected_sigma_mv))
        throw UsageError("noise: injected digitizer sigma must be >= 0");
    if (gain.kind == GainModel::Kind::Bandpass && !(gain.f_low_hz > 0.0 && gain.f_high_hz > gain.f_low_hz))
        throw UsageError("noise: band-pass corners must satisfy 0 < f_low < f_high");
    for (const auto& l : lines) {
        if (!(l.frequency_hz > 0.0 && l.frequency_hz < sample_rate / 2.0))
            throw UsageError("noise: interference line frequency must lie in (0, Nyquist)");
        if (!std::isfinite(l.amplitude_mv)) throw UsageError("noise: interference line amplitude must be finite");
    }
}

double expected_noise_psd(const NoiseModel& noise, double f, double sample_rate) noexcept
{
    constexpr double q = kMillivoltsPerCount;
    double psd = 2.0 * (noise.white_sigma_mv * noise.white_sigma_mv + q * q / 12.0) / sample_rate;
    if (noise.pink_amplitude_mv > 0.0) {
        const double s2 = noise.pink_amplitude_mv * noise.pink_amplitude_mv / kPinkRows;
        const double x = std::numbers::pi * f / sample_rate;
        const double den = std::sin(x) * std::sin(x);
        for (int j = 0; j < kPinkRows; ++j) {
            const double len = std::ldexp(1.0, j);
            const double num = std::sin(x * len);
            psd += den > 0.0 ? 2.0 * s2 / (len * sample_rate) * num * num / den : 2.0 * s2 * len / sample_rate;
        }
    }
    return psd;
}

// ---------------------------------------------------------------------------

PairGenerator::PairGenerator(InjectionSchedule schedule, NoiseModel noise, double sample_rate, double seconds)
    : schedule_(std::move(schedule)), noise_(std::move(noise)), rate_(sample_rate),
      saturated_(std::make_shared<std::atomic<std::uint64_t>>(0))
{
    check_rate(rate_);
    schedule_.validate(rate_);
    noise_.validate(rate_);
    length_ = samples_for(seconds, rate_);
    std::uint64_t at = 0;
    for (const auto& e : schedule_.entries) {
        entry_start_.push_back(at);
        at += samples_for(e.duration_s, rate_);
    }
    entry_start_.push_back(at);
    if (at < length_) {
        std::ostringstream os;
        os << "injection schedule covers " << schedule_.total_duration() << " s but " << seconds
           << " s were requested";
        throw UsageError(os.str());
    }
}

std::uint64_t PairGenerator::saturated() const noexcept
{
    return saturated_->load();
}

void PairGenerator::fill_block(std::uint64_t block, std::int8_t* squid, std::int8_t* injected) const
{
    const std::uint64_t n0 = block * kBlockSamples;
    const std::size_t len = static_cast<std::size_t>(std::min<std::uint64_t>(kBlockSamples, length_ - n0));
    std::array<double, kBlockSamples> sq{};
    std::array<double, kBlockSamples> inj{};

    // Tone, split at schedule boundaries.
    auto it = std::upper_bound(entry_start_.begin(), entry_start_.end(), n0);
    std::size_t e = static_cast<std::size_t>(it - entry_start_.begin()) - 1;
    std::uint64_t n = n0;
    while (n < n0 + len) {
        const auto& entry = schedule_.entries[e];
        const std::uint64_t run_end = std::min<std::uint64_t>(n0 + len, entry_start_[e + 1]);
        const std::size_t off = static_cast<std::size_t>(n - n0);
        const std::size_t run = static_cast<std::size_t>(run_end - n);
        const double amp = entry.amplitude_mv / 2.0;
        if (injected) add_tone(entry.frequency_hz, amp, 0.0, {1.0, 0.0}, rate_, entry_start_[e], n, run, inj.data() + off);
        if (squid)
            add_tone(entry.frequency_hz, amp, 0.0, noise_.gain.response(entry.frequency_hz), rate_, entry_start_[e], n, run,
                     sq.data() + off);
        n = run_end;
        ++e;
    }

    std::uint64_t sat = 0;
    if (squid) {
        if (noise_.white_sigma_mv > 0.0) {
            BlockNormals z(noise_.seed, StreamTag::SquidWhite, block);
            for (std::size_t k = 0; k < len; ++k) sq[k] += noise_.white_sigma_mv * z();
        }
        add_pink(noise_.seed, StreamTag::SquidPink, noise_.pink_amplitude_mv, n0, len, sq.data());
        for (const auto& l : noise_.lines) add_tone(l.frequency_hz, l.amplitude_mv, 0.0, {1.0, 0.0}, rate_, 0, n0, len, sq.data());
        sat += quantize_block(sq.data(), len, squid);
    }
    if (injected) {
        if (noise_.injected_sigma_mv > 0.0) {
            BlockNormals z(noise_.seed, StreamTag::InjectedDigitizer, block);
            for (std::size_t k = 0; k < len; ++k) inj[k] += noise_.injected_sigma_mv * z();
        }
        sat += quantize_block(inj.data(), len, injected);
    }
    if (sat) saturated_->fetch_add(sat, std::memory_order_relaxed);
}

void PairGenerator::fill(std::uint64_t start, std::size_t count, std::int8_t* squid, std::int8_t* injected) const
{
    if (start + count > length_) throw UsageError("pair generator: range exceeds dataset length");
    std::array<std::int8_t, kBlockSamples> bs{};
    std::array<std::int8_t, kBlockSamples> bi{};
    std::uint64_t n = start;
    const std::uint64_t end = start + count;
    while (n < end) {
        const std::uint64_t block = n / kBlockSamples;
        const std::uint64_t b0 = block * kBlockSamples;
        const std::uint64_t upto = std::min<std::uint64_t>(end, b0 + kBlockSamples);
        fill_block(block, squid ? bs.data() : nullptr, injected ? bi.data() : nullptr);
        const std::size_t from = static_cast<std::size_t>(n - b0);
        const std::size_t cnt = static_cast<std::size_t>(upto - n);
        if (squid) std::copy_n(bs.data() + from, cnt, squid + (n - start));
        if (injected) std::copy_n(bi.data() + from, cnt, injected + (n - start));
        n = upto;
    }
}

// ---------------------------------------------------------------------------

namespace {

constexpr int kLineshapeTones = 64;

// Lab-frame speed under the standard halo: |v_gal - v_obs| with v_gal
// isotropic Gaussian of per-axis dispersion sigma_v.
double draw_halo_speed(CounterRng& rng, const HaloParams& halo)
{
    boost::random::normal_distribution<double> dist(0.0, halo.sigma_v());
    const double vx = dist(rng) - halo.v_obs_km_s;
    const double vy = dist(rng);
    const double vz = dist(rng);
    return std::sqrt(vx * vx + vy * vy + vz * vz);
}

}  // namespace

ScienceGenerator::ScienceGenerator(NoiseModel noise, double sample_rate, double seconds,
                                   std::optional<PlantedSignal> planted)
    : noise_(std::move(noise)), rate_(sample_rate), saturated_(std::make_shared<std::atomic<std::uint64_t>>(0))
{
    check_rate(rate_);
    noise_.validate(rate_);
    length_ = samples_for(seconds, rate_);
    if (planted) {
        const auto& p = *planted;
        if (!(p.frequency_hz > 0.0 && p.frequency_hz < rate_ / 2.0))
            throw UsageError("planted signal frequency must lie in (0, Nyquist)");
        if (!(p.amplitude_mv >= 0.0)) throw UsageError("planted signal amplitude must be >= 0");
        const double peak = p.amplitude_mv / 2.0;
        const auto h = noise_.gain.response(p.frequency_hz);
        if (!p.lineshape) {
            tones_.push_back({p.frequency_hz, peak * std::abs(h), std::arg(h)});
        } else {
            p.halo.validate();
            // Equal-power components at halo-drawn frequencies; total power
            // matches the pure tone.
            CounterRng rng(derive_key(noise_.seed, tag(StreamTag::PlantedLineshape)));
            const double each = peak * std::abs(h) / std::sqrt(static_cast<double>(kLineshapeTones));
            for (int i = 0; i < kLineshapeTones; ++i) {
                const double v = draw_halo_speed(rng, p.halo) / kSpeedOfLightKmS;
                const double f = p.frequency_hz * (1.0 + 0.5 * v * v);
                tones_.push_back({f, each, kTwoPi * rng.uniform()});
            }
        }
    }
    for (const auto& l : noise_.lines) tones_.push_back({l.frequency_hz, l.amplitude_mv, 0.0});
}

std::uint64_t ScienceGenerator::saturated() const noexcept
{
    return saturated_->load();
}

void ScienceGenerator::fill_block(std::uint64_t block, std::int8_t* out) const
{
    const std::uint64_t n0 = block * kBlockSamples;
    const std::size_t len = static_cast<std::size_t>(std::min<std::uint64_t>(kBlockSamples, length_ - n0));
    std::array<double, kBlockSamples> x;
    if (noise_.white_sigma_mv > 0.0) {
        BlockNormals z(noise_.seed, StreamTag::ScienceWhite, block);
        for (std::size_t k = 0; k < len; ++k) x[k] = noise_.white_sigma_mv * z();
    } else {
        std::fill_n(x.begin(), len, 0.0);
    }
    add_pink(noise_.seed, StreamTag::SciencePink, noise_.pink_amplitude_mv, n0, len, x.data());
    for (const auto& t : tones_) add_tone(t.frequency_hz, t.amplitude_mv, t.phase, {1.0, 0.0}, rate_, 0, n0, len, x.data());
    if (const auto sat = quantize_block(x.data(), len, out)) saturated_->fetch_add(sat, std::memory_order_relaxed);
}

void ScienceGenerator::fill(std::uint64_t start, std::size_t count, std::int8_t* out) const
{
    if (start + count > length_) throw UsageError("science generator: range exceeds dataset length");
    std::uint64_t n = start;
    const std::uint64_t end = start + count;
    std::array<std::int8_t, kBlockSamples> tmp;
    while (n < end) {
        const std::uint64_t block = n / kBlockSamples;
        const std::uint64_t b0 = block * kBlockSamples;
        const std::uint64_t upto = std::min<std::uint64_t>(end, b0 + kBlockSamples);
        if (n == b0 && upto == b0 + kBlockSamples) {
            fill_block(block, out + (n - start));
        } else {
            fill_block(block, tmp.data());
            std::copy_n(tmp.data() + (n - b0), upto - n, out + (n - start));
        }
        n = upto;
    }
}

void ScienceGenerator::fill_millivolts(std::uint64_t start, std::size_t count, double* out) const
{
    std::array<std::int8_t, kBlockSamples> tmp;
    for (std::size_t done = 0; done < count;) {
        const std::size_t c = std::min(kBlockSamples, count - done);
        fill(start + done, c, tmp.data());
        for (std::size_t k = 0; k < c; ++k) out[done + k] = raw_to_millivolts(tmp[k]);
        done += c;
    }
}

SeriesPair synth_pair(const InjectionSchedule& schedule, const NoiseModel& noise, double seconds, double sample_rate)
{
    PairGenerator gen(schedule, noise, sample_rate, seconds);
    SeriesPair out;
    out.squid.samples.resize(gen.length());
    out.injected.samples.resize(gen.length());
    gen.fill(0, gen.length(), out.squid.samples.data(), out.injected.samples.data());
    out.squid.sample_rate = out.injected.sample_rate = sample_rate;
    out.squid.role = ChannelRole::Squid;
    out.injected.role = ChannelRole::Injected;
    return out;
}

SampleSeries synth_science(const NoiseModel& noise, double seconds, std::optional<PlantedSignal> planted,
                           double sample_rate)
{
    ScienceGenerator gen(noise, sample_rate, seconds, std::move(planted));
    SampleSeries s;
    s.samples.resize(gen.length());
    gen.fill(0, gen.length(), s.samples.data());
    s.sample_rate = sample_rate;
    s.role = ChannelRole::Squid;
    return s;
}

}  // namespace tidmad::sim
