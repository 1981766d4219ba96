#include "tidmad/score.hpp"

#include "tidmad/dsp.hpp"
#include "tidmad/io.hpp"
#include "tidmad/parallel.hpp"
#include "tidmad/random.hpp"

#include <boost/random/normal_distribution.hpp>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

namespace tidmad::score {

const char* to_string(Mode m) noexcept
{
    return m == Mode::Fine ? "fine" : "coarse";
}

std::size_t find_signal_bin(std::span<const double> p)
{
    if (p.size() < 3) throw UsageError("signal search needs a PSD of at least 3 bins");
    std::size_t best = 1;
    double best_v = p[1] - (p[0] + p[2]);
    for (std::size_t k = 2; k + 1 < p.size(); ++k) {
        const double v = p[k] - (p[k - 1] + p[k + 1]);
        if (v > best_v) {
            best_v = v;
            best = k;
        }
    }
    return best;
}

double find_signal_frequency(const PowerSpectrum& p)
{
    return p.frequency(find_signal_bin(p.values));
}

double snr_at_bin(std::span<const double> p, std::size_t k, int n_sig, int n_bkg)
{
    if (n_sig < 0 || n_bkg < 1) throw UsageError("SNR: need n_sig >= 0 and n_bkg >= 1");
    const std::size_t reach = static_cast<std::size_t>(n_sig + n_bkg);
    if (k < reach || k + reach >= p.size()) {
        std::ostringstream os;
        os << "SNR window around bin " << k << " (needs +/-" << reach << " bins) is clipped by the spectrum edge (bins 0.."
           << (p.empty() ? 0 : p.size() - 1) << ")";
        throw DataError(os.str());
    }
    double sig = 0.0;
    for (std::size_t i = k - n_sig; i <= k + n_sig; ++i) sig += p[i];
    double bkg = 0.0;
    for (std::size_t i = k - reach; i < k - n_sig; ++i) bkg += p[i];
    for (std::size_t i = k + n_sig + 1; i <= k + reach; ++i) bkg += p[i];
    if (!(bkg > 0.0)) {
        std::ostringstream os;
        os << "degenerate noise region around bin " << k << " (noise sum is zero)";
        throw NumericalError(os.str());
    }
    return sig / bkg;
}

double snr(const PowerSpectrum& p, double nu0, int n_sig, int n_bkg)
{
    const double idx = (nu0 - p.f0) / p.df;
    const double k = std::round(idx);
    if (k < 0.0 || std::abs(idx - k) > 1e-6) throw UsageError("SNR: nu0 is not on the PSD grid");
    return snr_at_bin(p.values, static_cast<std::size_t>(k), n_sig, n_bkg);
}

double score_from_lambda(double lambda, double base)
{
    if (!(base > 1.0)) throw UsageError("score base must exceed 1");
    return std::log(lambda) / std::log(base);
}

std::vector<std::size_t> mode_indices(Mode mode, std::size_t n)
{
    std::vector<std::size_t> out;
    const std::size_t stride = mode == Mode::Fine ? 1 : kCoarseStride;
    for (std::size_t i = 0; i < n; i += stride) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t segment_samples(double rate, double seconds)
{
    return static_cast<std::size_t>(dsp::SegmentPlan::make(rate, seconds).samples_per_segment);
}

}  // namespace

GeneratorPairSource::GeneratorPairSource(const sim::PairGenerator& gen, double segment_seconds)
    : gen_(gen), len_(segment_samples(gen.sample_rate(), segment_seconds)), count_(gen.length() / len_)
{}

void GeneratorPairSource::load(std::size_t segment, std::span<double> squid, std::span<double> injected) const
{
    std::vector<std::int8_t> s(len_), j(len_);
    gen_.fill(static_cast<std::uint64_t>(segment) * len_, len_, s.data(), j.data());
    for (std::size_t k = 0; k < len_; ++k) {
        squid[k] = raw_to_millivolts(s[k]);
        injected[k] = raw_to_millivolts(j[k]);
    }
}

ContainerPairSource::ContainerPairSource(const std::filesystem::path& squid_path, std::size_t squid_channel,
                                         const std::filesystem::path& injected_path, std::size_t injected_channel,
                                         double segment_seconds)
    : squid_(std::make_unique<io::ContainerReader>(squid_path)),
      injected_(std::make_unique<io::ContainerReader>(injected_path)), squid_ch_(squid_channel),
      injected_ch_(injected_channel)
{
    rate_ = squid_->sample_rate();
    if (injected_->sample_rate() != rate_) throw DataError("squid and injected containers differ in sample rate");
    const auto ls = squid_->length(squid_ch_);
    const auto li = injected_->length(injected_ch_);
    if (ls != li) {
        std::ostringstream os;
        os << "channel length mismatch: squid side has " << ls << " samples, injected side has " << li;
        throw DataError(os.str());
    }
    len_ = segment_samples(rate_, segment_seconds);
    count_ = static_cast<std::size_t>(ls / len_);
    discarded_ = ls % len_;
}

ContainerPairSource::~ContainerPairSource() = default;

void ContainerPairSource::load(std::size_t segment, std::span<double> squid, std::span<double> injected) const
{
    const std::uint64_t off = static_cast<std::uint64_t>(segment) * len_;
    squid_->read_millivolts(squid_ch_, off, squid.first(len_));
    injected_->read_millivolts(injected_ch_, off, injected.first(len_));
}

MemoryPairSource::MemoryPairSource(std::vector<double> squid_mv, std::vector<double> injected_mv, double sample_rate,
                                   double segment_seconds)
    : squid_(std::move(squid_mv)), injected_(std::move(injected_mv)), rate_(sample_rate)
{
    if (squid_.size() != injected_.size()) {
        std::ostringstream os;
        os << "channel length mismatch: squid side has " << squid_.size() << " samples, injected side has "
           << injected_.size();
        throw DataError(os.str());
    }
    len_ = segment_samples(rate_, segment_seconds);
    count_ = squid_.size() / len_;
}

MemoryPairSource::MemoryPairSource(const SampleSeries& squid, const SampleSeries& injected, double segment_seconds)
    : MemoryPairSource(squid.to_millivolts(), injected.to_millivolts(), squid.sample_rate, segment_seconds)
{
    if (squid.sample_rate != injected.sample_rate) throw DataError("squid and injected series differ in sample rate");
}

void MemoryPairSource::load(std::size_t segment, std::span<double> squid, std::span<double> injected) const
{
    const std::size_t off = segment * len_;
    std::copy_n(squid_.begin() + static_cast<std::ptrdiff_t>(off), len_, squid.begin());
    std::copy_n(injected_.begin() + static_cast<std::ptrdiff_t>(off), len_, injected.begin());
}

DenoisedPairSource::DenoisedPairSource(const SegmentPairSource& inner, const denoise::Denoiser& denoiser)
    : inner_(inner), denoiser_(denoiser)
{}

void DenoisedPairSource::load(std::size_t segment, std::span<double> squid, std::span<double> injected) const
{
    inner_.load(segment, squid, injected);
    if (denoiser_.is_identity()) return;
    try {
        const auto y = denoiser_.apply(std::span<const double>(squid.data(), segment_length()), sample_rate());
        std::copy(y.begin(), y.end(), squid.begin());
    } catch (const std::exception& e) {
        std::ostringstream os;
        os << "segment " << segment << ": " << e.what();
        if (dynamic_cast<const UsageError*>(&e)) throw UsageError(os.str());
        if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(os.str());
        throw DataError(os.str());
    }
}

// ---------------------------------------------------------------------------

namespace {

struct PairEngines {
    std::unique_ptr<dsp::PeriodogramEngine> squid;
    std::unique_ptr<dsp::PeriodogramEngine> injected;
};

}  // namespace

std::vector<SnrRecord> segment_records(const SegmentPairSource& src, std::span<const std::size_t> indices,
                                       const ScoreOptions& opt)
{
    const std::size_t len = src.segment_length();
    const double fs = src.sample_rate();
    const unsigned workers = resolve_workers(opt.workers);
    std::vector<PairEngines> engines(workers);
    std::vector<SnrRecord> out(indices.size());
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;

    parallel_for(indices.size(), workers, [&](std::size_t n, unsigned w) {
        auto& e = engines[w];
        if (!e.squid) {
            e.squid = std::make_unique<dsp::PeriodogramEngine>(len);
            e.injected = std::make_unique<dsp::PeriodogramEngine>(len);
        }
        const std::size_t i = indices[n];
        src.load(i, e.squid->input(), e.injected->input());
        const auto pi = e.injected->power_in_place(fs);
        const auto ps = e.squid->power_in_place(fs);
        SnrRecord r;
        r.segment_index = i;
        const std::size_t k = find_signal_bin(pi);
        r.nu0 = static_cast<double>(k) * fs / static_cast<double>(len);
        try {
            r.snr_injected = snr_at_bin(pi, k);
            r.snr_squid = snr_at_bin(ps, k);
        } catch (const NumericalError& ex) {
            throw NumericalError("segment " + std::to_string(i) + ": " + ex.what());
        } catch (const DataError& ex) {
            throw DataError("segment " + std::to_string(i) + ": " + ex.what());
        }
        out[n] = r;
        if (opt.progress) {
            const auto d = ++done;
            std::lock_guard lock(progress_mutex);
            opt.progress(d, indices.size());
        }
    });
    return out;
}

ScoreReport finalize_report(std::vector<SnrRecord> records, double base, Mode mode, std::size_t total_segments)
{
    if (records.empty()) throw UsageError("cannot score an empty segment stream");
    double max_inj = 0.0;
    for (const auto& r : records) max_inj = std::max(max_inj, r.snr_injected);
    if (!(max_inj > 0.0)) throw NumericalError("injected SNR is zero in every segment");
    double sum = 0.0;
    for (auto& r : records) {
        r.snr_injected_norm = r.snr_injected / max_inj;
        sum += r.snr_squid * r.snr_injected_norm;
    }
    ScoreReport rep;
    rep.records = std::move(records);
    rep.lambda = sum / static_cast<double>(rep.records.size());
    rep.base = base;
    rep.mode = mode;
    rep.total_segments = total_segments;
    rep.score = score_from_lambda(rep.lambda, base);
    return rep;
}

double base_from_lambda(double lambda)
{
    if (!(lambda > 1.0)) {
        std::ostringstream os;
        os << "cannot calibrate: raw Lambda = " << lambda << " does not exceed 1, so no logarithm base makes the raw score 1";
        throw NumericalError(os.str());
    }
    return lambda;
}

ScoreReport score_dataset(const SegmentPairSource& src, double base, Mode mode, const ScoreOptions& opt)
{
    if (!(base > 1.0)) throw UsageError("score base must exceed 1");
    const auto idx = mode_indices(mode, src.segment_count());
    if (idx.empty()) throw UsageError("cannot score an empty segment stream");
    return finalize_report(segment_records(src, idx, opt), base, mode, src.segment_count());
}

double calibrate_base(const SegmentPairSource& raw, const ScoreOptions& opt)
{
    const auto idx = mode_indices(Mode::Fine, raw.segment_count());
    if (idx.empty()) throw UsageError("cannot calibrate on an empty dataset");
    auto recs = segment_records(raw, idx, opt);
    double max_inj = 0.0;
    for (const auto& r : recs) max_inj = std::max(max_inj, r.snr_injected);
    if (!(max_inj > 0.0)) throw NumericalError("injected SNR is zero in every segment");
    double sum = 0.0;
    for (const auto& r : recs) sum += r.snr_squid * (r.snr_injected / max_inj);
    return base_from_lambda(sum / static_cast<double>(recs.size()));
}

FineCoarse score_fine_and_coarse(const SegmentPairSource& src, double base, const ScoreOptions& opt)
{
    const auto idx = mode_indices(Mode::Fine, src.segment_count());
    if (idx.empty()) throw UsageError("cannot score an empty segment stream");
    auto recs = segment_records(src, idx, opt);
    std::vector<SnrRecord> coarse;
    for (const auto& r : recs)
        if (r.segment_index % kCoarseStride == 0) coarse.push_back(r);
    if (!(base > 0.0)) {
        // Calibrate on the fine pass itself.
        const auto tmp = finalize_report(recs, 2.0, Mode::Fine, idx.size());
        base = base_from_lambda(tmp.lambda);
    }
    FineCoarse fc;
    fc.fine = finalize_report(std::move(recs), base, Mode::Fine, idx.size());
    fc.coarse = finalize_report(std::move(coarse), base, Mode::Coarse, idx.size());
    return fc;
}

// ---------------------------------------------------------------------------

namespace {

void unit_normals(std::uint64_t seed, std::size_t segment, std::span<double> out)
{
    const std::uint64_t key = derive_key(seed, tag(StreamTag::RobustnessNoise), segment);
    boost::random::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t b0 = 0; b0 < out.size(); b0 += sim::kBlockSamples) {
        CounterRng rng(derive_key(key, b0 / sim::kBlockSamples));
        const std::size_t end = std::min(out.size(), b0 + sim::kBlockSamples);
        for (std::size_t k = b0; k < end; ++k) out[k] = dist(rng);
    }
}

struct GridEngines {
    std::unique_ptr<dsp::PeriodogramEngine> target, noise, other;
    std::vector<double> other_power;
    std::vector<double> scratch;
};

}  // namespace

RobustnessGrid noise_robustness_grid(const SegmentPairSource& src, std::span<const double> amplitudes,
                                     std::span<const double> sigmas_mv, double base, std::uint64_t seed,
                                     NoiseTarget target, const ScoreOptions& opt)
{
    if (amplitudes.empty() || sigmas_mv.empty()) throw UsageError("robustness grid: amplitude and sigma lists must be nonempty");
    for (double a : amplitudes)
        if (!(a >= 0.0)) throw UsageError("robustness grid: amplitudes must be >= 0");
    for (double s : sigmas_mv)
        if (!(s >= 0.0)) throw UsageError("robustness grid: sigmas must be >= 0");
    if (!(base > 1.0)) throw UsageError("score base must exceed 1");

    const std::size_t n_seg = src.segment_count();
    if (n_seg == 0) throw UsageError("robustness grid: empty dataset");
    const std::size_t len = src.segment_length();
    const double fs = src.sample_rate();
    const std::size_t na = amplitudes.size(), ns = sigmas_mv.size(), cells = na * ns;
    const std::size_t bins = len / 2 + 1;

    // records[cell][segment]
    std::vector<std::vector<SnrRecord>> records(cells, std::vector<SnrRecord>(n_seg));
    const unsigned workers = resolve_workers(opt.workers);
    std::vector<GridEngines> engines(workers);
    std::atomic<std::size_t> done{0};
    std::mutex progress_mutex;

    parallel_for(n_seg, workers, [&](std::size_t i, unsigned w) {
        auto& e = engines[w];
        if (!e.target) {
            e.target = std::make_unique<dsp::PeriodogramEngine>(len);
            e.noise = std::make_unique<dsp::PeriodogramEngine>(len);
            e.other = std::make_unique<dsp::PeriodogramEngine>(len);
            e.other_power.resize(bins);
            e.scratch.resize(bins);
        }
        if (target == NoiseTarget::Squid)
            src.load(i, e.target->input(), e.other->input());
        else
            src.load(i, e.other->input(), e.target->input());
        unit_normals(seed, i, e.noise->input());
        e.target->transform();
        e.noise->transform();
        e.other->power(fs, e.other_power);
        const auto x = e.target->spectrum();
        const auto z = e.noise->spectrum();

        for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t s = 0; s < ns; ++s) {
                const double scale = amplitudes[a] * sigmas_mv[s];
                const std::span<const double> tp(e.scratch);
                const std::span<const double> op(e.other_power);
                std::size_t k = 0;
                if (target == NoiseTarget::Squid) {
                    // nu0 comes from the untouched injected channel, so only
                    // the bins around it need the perturbed power.
                    k = find_signal_bin(op);
                    const std::size_t reach = kSignalHalfWidth + kNoiseBinsPerSide;
                    const std::size_t lo = k >= reach ? k - reach : 0;
                    const std::size_t hi = std::min(bins - 1, k + reach);
                    for (std::size_t b = lo; b <= hi; ++b)
                        e.scratch[b] = std::norm(x[b] + scale * z[b]) * dsp::psd_bin_scale(b, len, fs);
                } else {
                    for (std::size_t b = 0; b < bins; ++b)
                        e.scratch[b] = std::norm(x[b] + scale * z[b]) * dsp::psd_bin_scale(b, len, fs);
                    k = find_signal_bin(tp);
                }
                SnrRecord r;
                r.segment_index = i;
                r.nu0 = static_cast<double>(k) * fs / static_cast<double>(len);
                r.snr_squid = snr_at_bin(target == NoiseTarget::Squid ? tp : op, k);
                r.snr_injected = snr_at_bin(target == NoiseTarget::Squid ? op : tp, k);
                records[a * ns + s][i] = r;
            }
        }
        if (opt.progress) {
            const auto d = ++done;
            std::lock_guard lock(progress_mutex);
            opt.progress(d, n_seg);
        }
    });

    RobustnessGrid g;
    g.amplitudes.assign(amplitudes.begin(), amplitudes.end());
    g.sigmas_mv.assign(sigmas_mv.begin(), sigmas_mv.end());
    g.base = base;
    g.target = target;
    g.seed = seed;
    g.score.assign(na, std::vector<double>(ns));
    g.lambda.assign(na, std::vector<double>(ns));
    for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t s = 0; s < ns; ++s) {
            const auto rep = finalize_report(std::move(records[a * ns + s]), base, Mode::Fine, n_seg);
            g.score[a][s] = rep.score;
            g.lambda[a][s] = rep.lambda;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

std::string report_json(const ScoreReport& r)
{
    nlohmann::ordered_json j;
    j["mode"] = to_string(r.mode);
    j["base"] = r.base;
    j["lambda"] = r.lambda;
    j["score"] = r.score;
    j["n_segments"] = r.n_segments();
    j["total_segments"] = r.total_segments;
    j["n_sig"] = r.n_sig;
    j["n_bkg"] = r.n_bkg;
    auto& recs = j["records"] = nlohmann::ordered_json::array();
    for (const auto& s : r.records) {
        recs.push_back({{"segment_index", s.segment_index},
                        {"nu0", s.nu0},
                        {"snr_squid", s.snr_squid},
                        {"snr_injected", s.snr_injected},
                        {"snr_injected_norm", s.snr_injected_norm}});
    }
    return j.dump(2);
}

void write_report_json(const std::filesystem::path& path, const ScoreReport& r)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write score report '" + path.string() + "'");
    out << report_json(r) << '\n';
    if (!out) throw DataError("error writing score report '" + path.string() + "'");
}

std::string grid_json(const RobustnessGrid& g)
{
    nlohmann::ordered_json j;
    j["target"] = g.target == NoiseTarget::Squid ? "squid" : "injected";
    j["base"] = g.base;
    j["seed"] = g.seed;
    j["amplitudes"] = g.amplitudes;
    j["sigmas_mv"] = g.sigmas_mv;
    j["score"] = g.score;
    j["lambda"] = g.lambda;
    return j.dump(2);
}

}  // namespace tidmad::score
