#include "commands.hpp"

#include "config.hpp"

#include "tidmad/denoise.hpp"
#include "tidmad/dsp.hpp"
#include "tidmad/io.hpp"
#include "tidmad/limits.hpp"
#include "tidmad/parallel.hpp"
#include "tidmad/random.hpp"
#include "tidmad/score.hpp"
#include "tidmad/simgen.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>

namespace tidmad::cli {

namespace fs = std::filesystem;

namespace {

// Seed tags per output stream, so splits never share noise.
enum SeedTag : std::uint64_t { kTrain = 1, kValidation = 2, kScience = 3, kRobustness = 4, kBand = 5 };

struct Context {
    Json cfg;
    std::string hash;
    std::string command;
    bool force = false;
    bool quiet = false;
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;
};

// ---------------------------------------------------------------------------
// Progress lines on stderr, at most one per second plus a final one.

class Progress {
public:
    Progress(const Context& ctx, std::string stage, std::size_t total, double samples_per_unit,
             const char* unit = "samples")
        : err_(ctx.quiet ? nullptr : ctx.err), stage_(std::move(stage)), unit_(unit), total_(total),
          per_unit_(samples_per_unit), start_(Clock::now()), last_(start_)
    {}

    void update(std::size_t done)
    {
        if (!err_) return;
        std::lock_guard lock(mutex_);
        const auto now = Clock::now();
        if (done < total_ && now - last_ < std::chrono::seconds(1)) return;
        last_ = now;
        print(done, now);
        printed_ = done;
    }

    void finish()
    {
        if (!err_) return;
        std::lock_guard lock(mutex_);
        if (printed_ != total_) print(total_, Clock::now());
        printed_ = total_;
    }

private:
    using Clock = std::chrono::steady_clock;

    void print(std::size_t done, Clock::time_point now)
    {
        const double secs = std::chrono::duration<double>(now - start_).count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s: %zu/%zu (%.1f s, %.3g %s/s)", stage_.c_str(), done, total_, secs,
                      secs > 0.0 ? static_cast<double>(done) * per_unit_ / secs : 0.0, unit_);
        *err_ << buf << '\n' << std::flush;
    }

    std::ostream* err_;
    std::string stage_;
    const char* unit_;
    std::size_t total_;
    double per_unit_;
    Clock::time_point start_;
    Clock::time_point last_;
    std::size_t printed_ = static_cast<std::size_t>(-1);
    std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Output helpers.

fs::path output_dir(const Context& ctx)
{
    return ctx.cfg.at("paths").at("output_dir").get<std::string>();
}

fs::path data_dir(const Context& ctx)
{
    return ctx.cfg.at("paths").at("data_dir").get<std::string>();
}

void ensure_parent(const fs::path& p)
{
    const auto dir = p.parent_path();
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void check_writable(const Context& ctx, const fs::path& p)
{
    if (fs::exists(p) && !ctx.force)
        throw UsageError("'" + p.string() + "' already exists; pass --force to overwrite");
    ensure_parent(p);
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot write '" + p.string() + "'");
    f << text;
    if (text.empty() || text.back() != '\n') f << '\n';
    if (!f) throw DataError("error writing '" + p.string() + "'");
}

// Sidecar `<file>.prov.json`.  No timestamps, so reruns are byte-identical.
void write_provenance(const Context& ctx, const fs::path& file, const Json& seeds, const std::vector<fs::path>& inputs)
{
    Json p;
    p["tool"] = "tidmad";
    p["version"] = kToolVersion;
    p["command"] = ctx.command;
    p["output"] = file.filename().string();
    p["config_hash"] = ctx.hash;
    p["seeds"] = seeds;
    p["inputs"] = Json::array();
    for (const auto& i : inputs) p["inputs"].push_back(i.string());
    p["config"] = ctx.cfg;
    auto side = file;
    side += ".prov.json";
    write_text(side, p.dump(2));
}

Json base_seeds(const Context& ctx)
{
    return Json{{"seed", seed(ctx.cfg)}};
}

// Rethrows the current exception with context prepended, keeping its class.
[[noreturn]] void rethrow_with(const std::string& where)
{
    try {
        throw;
    } catch (const UsageError& e) {
        throw UsageError(where + ": " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(where + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    }
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------------------
// generate

struct SplitPlan {
    std::string name;
    fs::path file;
    double seconds;
    bool pair;
    std::uint64_t seed;
};

constexpr std::size_t kGenChunk = std::size_t{1} << 20;  // multiple of the 4096-sample RNG block

template <class FillFn>
void write_channels(const fs::path& path, std::uint64_t n, double rate, std::size_t n_channels, unsigned workers,
                    Progress& progress, FillFn&& fill)
{
    io::ContainerHeader h;
    h.format = io::SampleFormat::Int8;
    h.sample_rate_hz = static_cast<std::uint64_t>(rate);
    h.channel_lengths.assign(n_channels, n);
    io::ContainerWriter w(path, h);
    const std::size_t chunks = static_cast<std::size_t>((n + kGenChunk - 1) / kGenChunk);
    const unsigned nw = resolve_workers(workers);
    std::vector<std::vector<std::int8_t>> a(nw), b(nw);
    std::atomic<std::size_t> done{0};
    parallel_for(chunks, nw, [&](std::size_t c, unsigned worker) {
        const std::uint64_t start = static_cast<std::uint64_t>(c) * kGenChunk;
        const std::size_t count = static_cast<std::size_t>(std::min<std::uint64_t>(kGenChunk, n - start));
        auto& x = a[worker];
        auto& y = b[worker];
        x.resize(count);
        if (n_channels > 1) y.resize(count);
        fill(start, count, x.data(), n_channels > 1 ? y.data() : nullptr);
        w.write(0, start, std::span<const std::int8_t>(x.data(), count));
        if (n_channels > 1) w.write(1, start, std::span<const std::int8_t>(y.data(), count));
        progress.update(++done);
    });
    w.close();
    progress.finish();
}

int cmd_generate(Context& ctx)
{
    const auto& g = ctx.cfg.at("generate");
    const double rate = sample_rate(ctx.cfg);
    const std::uint64_t s = seed(ctx.cfg);
    const unsigned nw = workers(ctx.cfg);
    const fs::path dir = data_dir(ctx);

    std::vector<SplitPlan> splits{
        {"train", dir / "train.tsd", g.at("train_seconds").get<double>(), true, derive_key(s, kTrain)},
        {"validation", dir / "validation.tsd", g.at("validation_seconds").get<double>(), true,
         derive_key(s, kValidation)},
        {"science", dir / "science.tsd", g.at("science_seconds").get<double>(), false, derive_key(s, kScience)},
    };
    double total_samples = 0.0;
    for (const auto& sp : splits) {
        if (sp.seconds < 0.0) throw UsageError("generate." + sp.name + "_seconds must be >= 0");
        total_samples += rate * sp.seconds * (sp.pair ? 2.0 : 1.0);
    }
    const double limit_gs = ctx.cfg.at("big_data_gigasamples").get<double>();
    const bool big = ctx.cfg.at("big_data").get<bool>();
    const double gs = total_samples / 1e9;
    if (!big && gs > limit_gs) {
        std::ostringstream os;
        os << "requested datasets hold " << std::setprecision(4) << gs << " Gigasamples (" << gs << " GB), above the "
           << limit_gs << " Gigasample default limit; pass --big-data to generate them";
        throw UsageError(os.str());
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create data directory '" + dir.string() + "': " + ec.message());
    const auto space = fs::space(dir, ec);
    if (!ec && total_samples + 1e6 > static_cast<double>(space.available)) {
        std::ostringstream os;
        os << "not enough disk space in '" << dir.string() << "': need " << std::setprecision(4) << total_samples / 1e9
           << " GB, " << static_cast<double>(space.available) / 1e9 << " GB available";
        throw DataError(os.str());
    }
    const fs::path manifest_path = dir / "manifest.json";
    for (const auto& sp : splits)
        if (sp.seconds > 0.0) check_writable(ctx, sp.file);
    check_writable(ctx, manifest_path);

    std::optional<sim::PlantedSignal> planted;
    const auto& pl = g.at("planted");
    if (pl.at("amplitude_mv").get<double>() > 0.0) {
        sim::PlantedSignal p;
        p.frequency_hz = pl.at("frequency_hz").get<double>();
        p.amplitude_mv = pl.at("amplitude_mv").get<double>();
        p.lineshape = pl.at("lineshape").get<bool>();
        p.halo.v0_km_s = ctx.cfg.at("limit").at("halo").at("v0_km_s").get<double>();
        p.halo.v_obs_km_s = ctx.cfg.at("limit").at("halo").at("v_obs_km_s").get<double>();
        planted = p;
    }

    Json manifest;
    manifest["tool"] = "tidmad";
    manifest["version"] = kToolVersion;
    manifest["config_hash"] = ctx.hash;
    manifest["seed"] = s;
    manifest["sample_rate_hz"] = rate;
    manifest["files"] = Json::array();
    Json seeds = base_seeds(ctx);

    for (const auto& sp : splits) {
        if (sp.seconds <= 0.0) continue;
        const auto noise = noise_model(ctx.cfg, sp.seed);
        const std::uint64_t n = sim::samples_for(sp.seconds, rate);
        const std::size_t chunks = static_cast<std::size_t>((n + kGenChunk - 1) / kGenChunk);
        Progress progress(ctx, "generate " + sp.name, chunks, static_cast<double>(kGenChunk) * (sp.pair ? 2 : 1));
        std::uint64_t saturated = 0;
        if (sp.pair) {
            sim::PairGenerator gen(schedule(ctx.cfg, sp.seconds), noise, rate, sp.seconds);
            write_channels(sp.file, n, rate, 2, nw, progress,
                           [&](std::uint64_t start, std::size_t count, std::int8_t* sq, std::int8_t* inj) {
                               gen.fill(start, count, sq, inj);
                           });
            saturated = gen.saturated();
        } else {
            sim::ScienceGenerator gen(noise, rate, sp.seconds, planted);
            write_channels(sp.file, n, rate, 1, nw, progress,
                           [&](std::uint64_t start, std::size_t count, std::int8_t* sq, std::int8_t*) {
                               gen.fill(start, count, sq);
                           });
            saturated = gen.saturated();
        }
        if (saturated > 0 && !ctx.quiet)
            *ctx.err << "warning: " << saturated << " samples of " << sp.name << " hit the int8 rails\n";
        Json f{{"split", sp.name},
               {"file", sp.file.filename().string()},
               {"channels", sp.pair ? Json::array({"squid", "injected"}) : Json::array({"squid"})},
               {"seconds", sp.seconds},
               {"samples_per_channel", n},
               {"seed", sp.seed},
               {"saturated_samples", saturated}};
        if (!sp.pair && planted)
            f["planted"] = {{"frequency_hz", planted->frequency_hz},
                            {"amplitude_mv_pp", planted->amplitude_mv},
                            {"lineshape", planted->lineshape}};
        manifest["files"].push_back(f);
        seeds[sp.name] = sp.seed;
        Json split_seeds = base_seeds(ctx);
        split_seeds[sp.name] = sp.seed;
        write_provenance(ctx, sp.file, split_seeds, {});
        *ctx.out << "wrote " << sp.file.string() << " (" << n << " samples x " << (sp.pair ? 2 : 1) << " channels)\n";
    }
    write_text(manifest_path, manifest.dump(2));
    write_provenance(ctx, manifest_path, seeds, {});
    *ctx.out << "wrote " << manifest_path.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// denoise

int cmd_denoise(Context& ctx, const fs::path& input, std::size_t channel, fs::path output)
{
    if (input.empty()) throw UsageError("denoise needs --input");
    const auto spec = denoiser_spec(ctx.cfg);
    const denoise::Denoiser den(spec);
    io::ContainerReader reader(input);
    if (channel >= reader.header().n_channels())
        throw UsageError("'" + input.string() + "' has no channel " + std::to_string(channel));
    if (output.empty()) output = output_dir(ctx) / (input.stem().string() + "_denoised.tsd");
    if (fs::exists(output) && fs::equivalent(output, input)) throw UsageError("denoise output would overwrite its input");
    check_writable(ctx, output);

    const double rate = reader.sample_rate();
    const std::uint64_t len = reader.length(channel);
    const std::uint64_t seg = sim::samples_for(ctx.cfg.at("denoise").at("segment_seconds").get<double>(), rate);
    const std::size_t n_seg = static_cast<std::size_t>((len + seg - 1) / seg);
    const bool identity = den.is_identity();
    const auto fmt_in = reader.header().format;

    io::ContainerHeader h;
    h.format = identity ? fmt_in : io::SampleFormat::Real32;
    h.sample_rate_hz = reader.header().sample_rate_hz;
    h.channel_lengths = {len};
    io::ContainerWriter w(output, h);
    Progress progress(ctx, "denoise (" + spec.describe() + ")", n_seg, static_cast<double>(seg));
    std::atomic<std::size_t> done{0};
    std::atomic<bool> short_tail{false};
    // External commands are processes of their own; keep one at a time.
    const unsigned nw = spec.kind == denoise::DenoiserSpec::Kind::External ? 1u : workers(ctx.cfg);
    parallel_for(n_seg, nw, [&](std::size_t i, unsigned) {
        const std::uint64_t start = static_cast<std::uint64_t>(i) * seg;
        const std::size_t count = static_cast<std::size_t>(std::min<std::uint64_t>(seg, len - start));
        try {
            if (identity) {
                if (fmt_in == io::SampleFormat::Int8) {
                    std::vector<std::int8_t> buf(count);
                    reader.read(channel, start, buf);
                    w.write(0, start, std::span<const std::int8_t>(buf));
                } else {
                    std::vector<float> buf(count);
                    reader.read(channel, start, buf);
                    w.write(0, start, std::span<const float>(buf));
                }
            } else {
                std::vector<double> mv(count);
                reader.read_millivolts(channel, start, mv);
                std::vector<double> y;
                if (spec.kind == denoise::DenoiserSpec::Kind::SavitzkyGolay && count < spec.window) {
                    y = std::move(mv);  // too short to filter; passed through
                    short_tail = true;
                } else {
                    y = den.apply(mv, rate);
                }
                std::vector<float> f(y.begin(), y.end());
                w.write(0, start, std::span<const float>(f));
            }
        } catch (...) {
            rethrow_with("'" + input.string() + "' segment " + std::to_string(i));
        }
        progress.update(++done);
    });
    w.close();
    progress.finish();
    if (short_tail && !ctx.quiet)
        *ctx.err << "warning: final partial segment is shorter than the filter window and was copied unfiltered\n";
    Json seeds = base_seeds(ctx);
    write_provenance(ctx, output, seeds, {input});
    *ctx.out << "wrote " << output.string() << " (" << spec.describe() << ", " << n_seg << " segments)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
    fs::path input;
    fs::path squid;
    fs::path injected;
    long squid_channel = 0;
    long injected_channel = -1;  // -1: channel 1 of a pair file, else 0
    bool denoise = false;
    bool robustness = false;
};

std::size_t channel_count(const fs::path& p)
{
    return io::ContainerReader(p).header().n_channels();
}

void print_grid(std::ostream& out, const score::RobustnessGrid& g)
{
    out << "robustness grid (rows: amplitude, columns: sigma mV)\n" << std::setw(10) << "amp\\sigma";
    for (double s : g.sigmas_mv) out << std::setw(10) << s;
    out << '\n';
    for (std::size_t i = 0; i < g.amplitudes.size(); ++i) {
        out << std::setw(10) << g.amplitudes[i];
        for (double v : g.score[i]) out << std::setw(10) << fmt("%.4f", v);
        out << '\n';
    }
}

int cmd_score(Context& ctx, const ScoreArgs& a)
{
    if (a.input.empty() && (a.squid.empty() || a.injected.empty()))
        throw UsageError("score needs --input (a pair file), or both --squid and --injected");
    const fs::path squid_path = a.squid.empty() ? a.input : a.squid;
    const fs::path inj_path = a.injected.empty() ? a.input : a.injected;
    if (a.squid_channel < 0) throw UsageError("--squid-channel must be >= 0");
    const std::size_t inj_ch = a.injected_channel >= 0 ? static_cast<std::size_t>(a.injected_channel)
                                                       : (channel_count(inj_path) > 1 ? 1 : 0);
    const double seg_s = ctx.cfg.at("score").at("segment_seconds").get<double>();
    const auto& sc = ctx.cfg.at("score");

    score::ScoreOptions opt;
    opt.workers = workers(ctx.cfg);

    score::ContainerPairSource raw_src(squid_path, static_cast<std::size_t>(a.squid_channel), inj_path, inj_ch, seg_s);
    if (raw_src.discarded_samples() > 0 && !ctx.quiet)
        *ctx.err << "note: " << raw_src.discarded_samples() << " trailing samples do not fill a segment and are ignored\n";
    std::optional<denoise::Denoiser> den;
    std::optional<score::DenoisedPairSource> den_src;
    const score::SegmentPairSource* src = &raw_src;
    if (a.denoise) {
        den.emplace(denoiser_spec(ctx.cfg));
        den_src.emplace(raw_src, *den);
        src = &*den_src;
    }
    const double samples_per_segment = 2.0 * static_cast<double>(src->segment_length());

    double base = sc.at("base").get<double>();
    std::vector<fs::path> inputs{squid_path};
    if (inj_path != squid_path) inputs.push_back(inj_path);
    const bool squid_is_raw = !a.denoise && a.squid.empty();
    if (base <= 0.0 && !squid_is_raw) {
        // Calibrate on raw data: the pair file's own SQUID channel.
        if (a.input.empty())
            throw UsageError("score.base is unset and there is no raw --input pair to calibrate it on");
        score::ContainerPairSource cal(a.input, 0, a.input, channel_count(a.input) > 1 ? 1 : 0, seg_s);
        Progress p(ctx, "calibrate base", cal.segment_count(), 2.0 * static_cast<double>(cal.segment_length()));
        auto copt = opt;
        copt.progress = [&](std::size_t d, std::size_t) { p.update(d); };
        base = score::calibrate_base(cal, copt);
        p.finish();
        if (std::find(inputs.begin(), inputs.end(), a.input) == inputs.end()) inputs.push_back(a.input);
    }

    const fs::path fine_path = output_dir(ctx) / "score_fine.json";
    const fs::path coarse_path = output_dir(ctx) / "score_coarse.json";
    const fs::path grid_path = output_dir(ctx) / "robustness_grid.json";
    check_writable(ctx, fine_path);
    check_writable(ctx, coarse_path);
    if (a.robustness) check_writable(ctx, grid_path);

    Progress p(ctx, "score", src->segment_count(), samples_per_segment);
    auto sopt = opt;
    sopt.progress = [&](std::size_t d, std::size_t) { p.update(d); };
    const auto fc = score::score_fine_and_coarse(*src, base, sopt);
    p.finish();

    score::write_report_json(fine_path, fc.fine);
    score::write_report_json(coarse_path, fc.coarse);
    Json seeds = base_seeds(ctx);
    write_provenance(ctx, fine_path, seeds, inputs);
    write_provenance(ctx, coarse_path, seeds, inputs);

    auto& out = *ctx.out;
    out << "fine score:   " << fmt("%.4f", fc.fine.score) << "  (Lambda " << fmt("%.6g", fc.fine.lambda) << ", base "
        << fmt("%.6g", fc.fine.base) << ", " << fc.fine.n_segments() << " segments)\n";
    out << "coarse score: " << fmt("%.4f", fc.coarse.score) << "  (" << fc.coarse.n_segments() << " of "
        << fc.coarse.total_segments << " segments)\n";

    if (a.robustness) {
        const auto& r = sc.at("robustness");
        const auto amps = r.at("amplitudes").get<std::vector<double>>();
        const auto sigmas = r.at("sigmas_mv").get<std::vector<double>>();
        const auto target_name = r.at("target").get<std::string>();
        score::NoiseTarget target;
        if (target_name == "squid")
            target = score::NoiseTarget::Squid;
        else if (target_name == "injected")
            target = score::NoiseTarget::Injected;
        else
            throw UsageError("score.robustness.target must be 'squid' or 'injected'");
        const std::uint64_t rseed = derive_key(seed(ctx.cfg), kRobustness);
        const std::size_t cells = amps.size() * sigmas.size();
        Progress gp(ctx, "robustness grid", cells * src->segment_count(), samples_per_segment);
        auto gopt = opt;
        gopt.progress = [&](std::size_t d, std::size_t) { gp.update(d); };
        const auto grid = score::noise_robustness_grid(*src, amps, sigmas, fc.fine.base, rseed, target, gopt);
        gp.finish();
        write_text(grid_path, score::grid_json(grid));
        Json gseeds = base_seeds(ctx);
        gseeds["robustness"] = rseed;
        write_provenance(ctx, grid_path, gseeds, inputs);
        print_grid(out, grid);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// limit / band

Json band_json(const limits::BrazilBand& b, const std::string& background)
{
    Json j;
    j["n_trials"] = b.n_trials;
    j["n_averaged"] = b.n_averaged;
    j["seed"] = b.seed;
    j["background"] = background;
    j["percentiles"] = limits::kBandPercentiles;
    auto& pts = j["points"] = Json::array();
    auto num = [](double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); };
    for (std::size_t k = 0; k < b.masses.size(); ++k) {
        Json g = Json::array(), a = Json::array();
        for (int q = 0; q < 5; ++q) {
            g.push_back(num(b.g95[k][q]));
            a.push_back(num(b.a95[k][q]));
        }
        pts.push_back({{"mass_ev", frequency_to_mass_ev(b.masses[k])},
                       {"frequency_hz", b.masses[k]},
                       {"g95", g},
                       {"a95", a}});
    }
    return j;
}

// Background PSD model for pseudo-experiments.
std::function<double(double)> band_background(const Context& ctx, const std::optional<PowerSpectrum>& psd,
                                              double rate, std::string& name)
{
    name = ctx.cfg.at("limit").at("band_background").get<std::string>();
    if (name == "model") {
        const auto noise = noise_model(ctx.cfg, 0);
        return [noise, rate](double f) { return sim::expected_noise_psd(noise, f, rate); };
    }
    if (name == "data") {
        if (!psd) throw UsageError("limit.band_background 'data' needs a measured PSD (--psd or --input)");
        // +-50 bin running mean; an isolated candidate barely moves it.
        auto smooth = std::make_shared<std::vector<double>>(denoise::moving_average(psd->values, 101));
        const double f0 = psd->f0, df = psd->df;
        return [smooth, f0, df](double f) {
            const double x = std::round((f - f0) / df);
            const auto i = static_cast<std::size_t>(std::clamp(x, 0.0, static_cast<double>(smooth->size() - 1)));
            return (*smooth)[i];
        };
    }
    throw UsageError("limit.band_background must be 'model' or 'data'");
}

limits::BrazilBand run_band(Context& ctx, const limits::PsdGrid& grid, std::uint64_t n_avg,
                            const std::function<double(double)>& bg, const std::vector<double>& masses)
{
    const auto trials = ctx.cfg.at("limit").at("trials").get<long long>();
    if (trials < 100) throw UsageError("limit.trials must be >= 100 for a stable band");
    auto opt = limit_options(ctx.cfg);
    Progress p(ctx, "band", masses.size(), static_cast<double>(trials), "fits");
    opt.progress = [&](std::size_t d, std::size_t) { p.update(d); };
    auto band = limits::brazil_band(bg, grid, n_avg, masses, static_cast<std::size_t>(trials),
                                    derive_key(seed(ctx.cfg), kBand), opt);
    p.finish();
    return band;
}

void write_band(Context& ctx, const limits::BrazilBand& band, const std::string& bg_name,
                const std::vector<fs::path>& inputs)
{
    const fs::path csv = output_dir(ctx) / "band.csv";
    const fs::path js = output_dir(ctx) / "band.json";
    check_writable(ctx, csv);
    check_writable(ctx, js);
    limits::write_band_csv(csv, band);
    write_text(js, band_json(band, bg_name).dump(1));
    Json seeds = base_seeds(ctx);
    seeds["band"] = band.seed;
    write_provenance(ctx, csv, seeds, inputs);
    write_provenance(ctx, js, seeds, inputs);
    *ctx.out << "wrote " << csv.string() << " (" << band.masses.size() << " masses, " << band.n_trials
             << " pseudo-experiments, n_averaged " << band.n_averaged << ")\n";
}

std::uint64_t segment_samples(const Context& ctx, double rate)
{
    return sim::samples_for(ctx.cfg.at("limit").at("segment_seconds").get<double>(), rate);
}

std::string too_short(const fs::path& p, double seconds, std::uint64_t n_seg, double seg_s)
{
    std::ostringstream os;
    os << "limit setting needs at least " << limits::kMinAveraged << " averaged segments of " << seg_s << " s ("
       << static_cast<double>(limits::kMinAveraged) * seg_s << " s of science data); '" << p.string() << "' holds "
       << seconds << " s (" << n_seg << " segments)";
    return os.str();
}

PowerSpectrum science_psd(Context& ctx, const fs::path& input, std::size_t channel, bool apply_denoiser)
{
    io::ContainerReader reader(input);
    if (channel >= reader.header().n_channels())
        throw UsageError("'" + input.string() + "' has no channel " + std::to_string(channel));
    const double rate = reader.sample_rate();
    const std::uint64_t seg = segment_samples(ctx, rate);
    const std::uint64_t len = reader.length(channel);
    const std::uint64_t n_seg = len / seg;
    const double seg_s = ctx.cfg.at("limit").at("segment_seconds").get<double>();
    if (n_seg < limits::kMinAveraged)
        throw UsageError(too_short(input, static_cast<double>(len) / rate, n_seg, seg_s));
    if (len % seg != 0 && !ctx.quiet)
        *ctx.err << "note: " << len % seg << " trailing samples do not fill a segment and are ignored\n";
    std::optional<denoise::Denoiser> den;
    if (apply_denoiser) den.emplace(denoiser_spec(ctx.cfg));
    Progress p(ctx, "average PSD", static_cast<std::size_t>(n_seg), static_cast<double>(seg));
    const auto fill = [&](std::size_t i, std::span<double> out) {
        try {
            reader.read_millivolts(channel, static_cast<std::uint64_t>(i) * seg, out);
            if (den && !den->is_identity()) {
                const auto y = den->apply(out, rate);
                std::copy(y.begin(), y.end(), out.begin());
            }
        } catch (...) {
            rethrow_with("'" + input.string() + "' segment " + std::to_string(i));
        }
    };
    const unsigned nw = den && den->spec().kind == denoise::DenoiserSpec::Kind::External ? 1u : workers(ctx.cfg);
    std::atomic<std::size_t> done{0};
    auto psd = dsp::average_periodograms(static_cast<std::size_t>(n_seg), static_cast<std::size_t>(seg), rate, fill, nw,
                                         [&](std::size_t) { p.update(++done); });
    p.finish();
    return psd;
}

struct LimitArgs {
    fs::path input;
    long channel = 0;
    fs::path psd;
    std::optional<fs::path> save_psd;
    bool band = false;
    bool denoise = false;
};

int cmd_limit(Context& ctx, const LimitArgs& a)
{
    if (a.input.empty() == a.psd.empty()) throw UsageError("limit needs exactly one of --input or --psd");
    if (a.channel < 0) throw UsageError("--channel must be >= 0");
    const fs::path csv = output_dir(ctx) / "limit.csv";
    const fs::path js = output_dir(ctx) / "limit.json";
    check_writable(ctx, csv);
    check_writable(ctx, js);
    fs::path save;
    if (a.save_psd) {
        save = a.save_psd->empty() ? output_dir(ctx) / "science.psd" : *a.save_psd;
        check_writable(ctx, save);
    }

    PowerSpectrum psd;
    double rate = 0.0;
    std::vector<fs::path> inputs;
    if (!a.psd.empty()) {
        psd = dsp::load_psd(a.psd);
        if (psd.n_averaged < limits::kMinAveraged) {
            const double seg_s = 1.0 / psd.df;
            throw UsageError(too_short(a.psd, static_cast<double>(psd.n_averaged) * seg_s, psd.n_averaged, seg_s));
        }
        rate = 2.0 * psd.df * static_cast<double>(psd.size() - 1);
        inputs.push_back(a.psd);
    } else {
        psd = science_psd(ctx, a.input, static_cast<std::size_t>(a.channel), a.denoise);
        rate = io::ContainerReader(a.input).sample_rate();
        inputs.push_back(a.input);
    }
    if (!save.empty()) {
        dsp::save_psd(save, psd);
        write_provenance(ctx, save, base_seeds(ctx), inputs);
        *ctx.out << "wrote " << save.string() << '\n';
    }

    const auto masses = mass_grid(ctx.cfg);
    auto opt = limit_options(ctx.cfg);
    Progress p(ctx, "limit scan", masses.size(), 1.0, "masses");
    opt.progress = [&](std::size_t d, std::size_t) { p.update(d); };

    // Stream both files so long scans never hold the whole curve.
    std::ofstream fcsv(csv), fjs(js);
    if (!fcsv || !fjs) throw DataError("cannot write limit outputs in '" + output_dir(ctx).string() + "'");
    fcsv << "mass_ev,frequency_hz,a95,g95,ts_at_zero,flagged\n" << std::setprecision(12);
    {
        Json head = Json::parse(limits::limit_json({}, opt));
        std::string h = head.dump(1);
        // Reopen the empty "points" array for streaming.
        const auto pos = h.rfind("[]");
        fjs << h.substr(0, pos) << "[\n";
    }
    std::size_t flagged = 0, n_pts = 0;
    double max_ts = 0.0, max_ts_f = 0.0;
    std::vector<double> g_ok;
    auto num = [](double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); };
    limits::scan_masses(psd, masses, opt, [&](std::size_t, const limits::LimitPoint& pt) {
        fcsv << pt.mass_ev << ',' << pt.f_a << ',' << pt.a_95 << ',' << pt.g_95 << ',' << pt.ts_at_zero << ','
             << (pt.flagged ? 1 : 0) << '\n';
        Json e{{"mass_ev", pt.mass_ev},     {"frequency_hz", pt.f_a}, {"a_hat", num(pt.a_hat)},
               {"b_hat", num(pt.b_hat)},     {"a95", num(pt.a_95)},    {"g95", num(pt.g_95)},
               {"ts_at_zero", num(pt.ts_at_zero)}, {"flagged", pt.flagged}};
        if (pt.flagged) e["message"] = pt.message;
        fjs << (n_pts ? ",\n" : "") << e.dump();
        ++n_pts;
        if (pt.flagged) ++flagged;
        if (std::isfinite(pt.g_95) && !pt.flagged) g_ok.push_back(pt.g_95);
        if (pt.ts_at_zero > max_ts) {
            max_ts = pt.ts_at_zero;
            max_ts_f = pt.f_a;
        }
    });
    p.finish();
    fjs << "\n ]\n}\n";
    fcsv.close();
    fjs.close();
    if (!fcsv || !fjs) throw DataError("error writing limit outputs");
    write_provenance(ctx, csv, base_seeds(ctx), inputs);
    write_provenance(ctx, js, base_seeds(ctx), inputs);

    auto& out = *ctx.out;
    out << "wrote " << csv.string() << " (" << n_pts << " masses, " << flagged << " flagged, PSD averaged "
        << psd.n_averaged << " times)\n";
    if (!g_ok.empty()) {
        std::nth_element(g_ok.begin(), g_ok.begin() + static_cast<std::ptrdiff_t>(g_ok.size() / 2), g_ok.end());
        out << "median g95: " << fmt("%.4g", g_ok[g_ok.size() / 2]) << "\n";
    }
    out << "largest TS(0): " << fmt("%.3f", max_ts) << " at " << fmt("%.6f", max_ts_f) << " Hz\n";

    if (a.band) {
        std::string bg_name;
        const auto bg = band_background(ctx, psd, rate, bg_name);
        const auto band = run_band(ctx, limits::PsdGrid::of(psd), psd.n_averaged, bg, masses);
        write_band(ctx, band, bg_name, inputs);
    }
    return 0;
}

struct BandArgs {
    fs::path psd;
    fs::path input;
};

int cmd_band(Context& ctx, const BandArgs& a)
{
    std::optional<PowerSpectrum> psd;
    limits::PsdGrid grid;
    std::uint64_t n_avg = 0;
    double rate = sample_rate(ctx.cfg);
    std::vector<fs::path> inputs;
    const double seg_s = ctx.cfg.at("limit").at("segment_seconds").get<double>();
    if (!a.psd.empty() && !a.input.empty()) throw UsageError("band takes at most one of --psd or --input");
    if (!a.psd.empty()) {
        psd = dsp::load_psd(a.psd);
        grid = limits::PsdGrid::of(*psd);
        n_avg = psd->n_averaged;
        rate = 2.0 * psd->df * static_cast<double>(psd->size() - 1);
        inputs.push_back(a.psd);
    } else {
        if (!a.input.empty()) {
            io::ContainerReader r(a.input);
            rate = r.sample_rate();
            n_avg = r.length(0) / segment_samples(ctx, rate);
            inputs.push_back(a.input);
        } else {
            const auto n = ctx.cfg.at("limit").at("n_averaged").get<long long>();
            if (n <= 0) throw UsageError("band needs --psd, --input, or limit.n_averaged");
            n_avg = static_cast<std::uint64_t>(n);
        }
        const std::uint64_t seg = segment_samples(ctx, rate);
        grid = {rate / static_cast<double>(seg), 0.0, static_cast<std::size_t>(seg / 2 + 1)};
    }
    if (n_avg < limits::kMinAveraged)
        throw UsageError(too_short(a.psd.empty() ? a.input : a.psd, static_cast<double>(n_avg) * seg_s, n_avg, seg_s));
    std::string bg_name;
    const auto bg = band_background(ctx, psd, rate, bg_name);
    const auto band = run_band(ctx, grid, n_avg, bg, mass_grid(ctx.cfg));
    write_band(ctx, band, bg_name, inputs);
    return 0;
}

// ---------------------------------------------------------------------------
// export

Json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw DataError("cannot open '" + p.string() + "'");
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw DataError("'" + p.string() + "' is not valid JSON: " + e.what());
    }
}

std::string cell(const Json& v)
{
    if (v.is_null()) return "nan";
    std::ostringstream os;
    os << std::setprecision(12) << v.get<double>();
    return os.str();
}

struct ExportArgs {
    fs::path score_grid, score, limit, band, psd, output;
    std::string field = "score";
    double fmin = 0.0;
    double fmax = 1.0e300;
};

int cmd_export(Context& ctx, const ExportArgs& a)
{
    const int given = !a.score_grid.empty() + !a.score.empty() + !a.limit.empty() + !a.band.empty() + !a.psd.empty();
    if (given != 1) throw UsageError("export takes exactly one of --score-grid, --score, --limit, --band, --psd");
    if (a.output.empty()) throw UsageError("export needs --output");
    check_writable(ctx, a.output);
    fs::path input;
    if (!a.psd.empty()) {
        input = a.psd;
        dsp::write_psd_csv(a.output, dsp::load_psd(a.psd), a.fmin, a.fmax);
    } else {
        std::ostringstream os;
        try {
            if (!a.score_grid.empty()) {
                input = a.score_grid;
                const auto j = read_json(input);
                if (a.field != "score" && a.field != "lambda") throw UsageError("--field must be 'score' or 'lambda'");
                os << "amplitude";
                for (const auto& s : j.at("sigmas_mv")) os << ",sigma_" << cell(s);
                os << '\n';
                const auto& m = j.at(a.field);
                for (std::size_t i = 0; i < j.at("amplitudes").size(); ++i) {
                    os << cell(j.at("amplitudes")[i]);
                    for (const auto& v : m.at(i)) os << ',' << cell(v);
                    os << '\n';
                }
            } else if (!a.score.empty()) {
                input = a.score;
                const auto j = read_json(input);
                os << "segment_index,nu0,snr_squid,snr_injected,snr_injected_norm\n";
                for (const auto& r : j.at("records"))
                    os << r.at("segment_index").get<std::uint64_t>() << ',' << cell(r.at("nu0")) << ','
                       << cell(r.at("snr_squid")) << ',' << cell(r.at("snr_injected")) << ','
                       << cell(r.at("snr_injected_norm")) << '\n';
            } else if (!a.limit.empty()) {
                input = a.limit;
                const auto j = read_json(input);
                os << "mass_ev,g95\n";
                for (const auto& p : j.at("points")) os << cell(p.at("mass_ev")) << ',' << cell(p.at("g95")) << '\n';
            } else {
                input = a.band;
                const auto j = read_json(input);
                os << "mass_ev";
                for (const auto& q : j.at("percentiles")) os << ",g95_p" << cell(q);
                os << '\n';
                for (const auto& p : j.at("points")) {
                    os << cell(p.at("mass_ev"));
                    for (const auto& g : p.at("g95")) os << ',' << cell(g);
                    os << '\n';
                }
            }
        } catch (const Json::exception& e) {
            throw DataError("'" + input.string() + "' does not have the expected layout: " + e.what());
        }
        write_text(a.output, os.str());
    }
    write_provenance(ctx, a.output, base_seeds(ctx), {input});
    *ctx.out << "wrote " << a.output.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// Flag resolution.  Anything CLI11 does not recognize is taken as a config
// override: `--noise.white-sigma-mv 3`, `--white-sigma-mv=3`, or a suffix of
// a dotted path.  Bare names resolve against the subcommand's own sections
// first when they are ambiguous.

void collect_leaves(const Json& j, const std::string& prefix, std::vector<std::string>& out)
{
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object())
            collect_leaves(it.value(), path, out);
        else
            out.push_back(path);
    }
}

std::vector<std::string> preferred_sections(const std::string& sub)
{
    if (sub == "generate") return {"generate", "noise", "paths"};
    if (sub == "denoise") return {"denoise", "paths"};
    if (sub == "score") return {"score", "denoise", "paths"};
    if (sub == "limit" || sub == "band") return {"limit", "paths"};
    return {"paths"};
}

std::string resolve_key(const Json& cfg, const std::string& flag, const std::string& sub)
{
    std::string name = flag;
    for (auto& c : name)
        if (c == '-') c = '_';
    std::vector<std::string> leaves;
    collect_leaves(cfg, "", leaves);
    std::vector<std::string> hits;
    for (const auto& l : leaves)
        if (l == name || (l.size() > name.size() && l.compare(l.size() - name.size(), name.size(), name) == 0
                          && l[l.size() - name.size() - 1] == '.'))
            hits.push_back(l);
    if (hits.size() > 1) {
        // The first preferred section holding exactly one match wins.
        for (const auto& s : preferred_sections(sub)) {
            std::vector<std::string> in;
            for (const auto& h : hits)
                if (h.rfind(s + ".", 0) == 0) in.push_back(h);
            if (in.size() == 1) return in.front();
            if (in.size() > 1) break;
        }
        std::string list;
        for (const auto& h : hits) list += (list.empty() ? "" : ", ") + h;
        throw UsageError("option '--" + flag + "' is ambiguous (" + list + "); use the dotted key");
    }
    if (hits.empty()) throw UsageError("unknown option '--" + flag + "'");
    return hits.front();
}

void apply_extras(Json& cfg, const std::vector<std::string>& extras, const std::string& sub)
{
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& tok = extras[i];
        if (tok.rfind("--", 0) != 0 || tok.size() <= 2) throw UsageError("unexpected argument '" + tok + "'");
        std::string name = tok.substr(2), value;
        const auto eq = name.find('=');
        if (eq != std::string::npos) {
            value = name.substr(eq + 1);
            name = name.substr(0, eq);
        } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
            value = extras[++i];
        } else {
            value = "true";
        }
        set_config_value(cfg, resolve_key(cfg, name, sub), value);
    }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Detector-like dataset generation, denoising benchmark and axion limit tools", "tidmad"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);
    app.allow_extras();

    std::string config_path;
    std::vector<std::string> sets;
    std::optional<long long> seed_flag, workers_flag;
    std::string data_dir_flag, output_dir_flag;
    bool force = false, quiet = false, big = false;

    auto add_common = [&](CLI::App* a) {
        a->add_option("--config", config_path, "JSON config file (keys override the defaults)");
        a->add_option("--set", sets, "Override a config key: --set noise.white_sigma_mv=3")->allow_extra_args(false);
        a->add_option("--seed", seed_flag, "Master seed");
        a->add_option("--workers", workers_flag, "Worker threads (0 = all cores)");
        a->add_option("--data-dir", data_dir_flag, "Dataset directory");
        a->add_option("--output-dir", output_dir_flag, "Directory for results");
        a->add_flag("--force", force, "Overwrite existing outputs");
        a->add_flag("--quiet,-q", quiet, "No progress output");
    };
    add_common(&app);

    auto* gen = app.add_subcommand("generate", "Write train/validation pair datasets and a science run");
    add_common(gen);
    gen->add_flag("--big-data", big, "Allow datasets above the size guard");

    auto* den = app.add_subcommand("denoise", "Apply the configured denoiser segment by segment");
    add_common(den);
    fs::path den_in, den_out;
    long den_ch = 0;
    den->add_option("--input,-i", den_in, "Input container")->required();
    den->add_option("--channel", den_ch, "Channel to denoise (default 0, the SQUID)");
    den->add_option("--output,-o", den_out, "Output container (default <output_dir>/<stem>_denoised.tsd)");

    auto* sc = app.add_subcommand("score", "Denoising score (fine and coarse)");
    add_common(sc);
    ScoreArgs sa;
    sc->add_option("--input,-i", sa.input, "Pair container (channel 0 SQUID, channel 1 injected)");
    sc->add_option("--squid", sa.squid, "SQUID-side container (for example a denoised file)");
    sc->add_option("--squid-channel", sa.squid_channel, "Channel in --squid");
    sc->add_option("--injected", sa.injected, "Injected-side container");
    sc->add_option("--injected-channel", sa.injected_channel, "Channel in --injected");
    sc->add_flag("--denoise", sa.denoise, "Apply the configured denoiser on the fly");
    sc->add_flag("--robustness-grid", sa.robustness, "Also compute the Gaussian-noise robustness grid");

    auto* lim = app.add_subcommand("limit", "Axion upper limits from a science run");
    add_common(lim);
    LimitArgs la;
    std::string save_psd;
    lim->add_option("--input,-i", la.input, "Science container");
    lim->add_option("--channel", la.channel, "Channel (default 0)");
    lim->add_option("--psd", la.psd, "Use a saved averaged PSD instead of --input");
    auto* save_opt = lim->add_option("--save-psd", save_psd, "Save the averaged PSD (default <output_dir>/science.psd)")
                         ->expected(0, 1);
    lim->add_flag("--band", la.band, "Also compute the background-only band");
    lim->add_flag("--denoise", la.denoise, "Denoise each segment before averaging");

    auto* band = app.add_subcommand("band", "Background-only expected-limit band");
    add_common(band);
    BandArgs ba;
    band->add_option("--psd", ba.psd, "Saved PSD (sets the grid and averaging count)");
    band->add_option("--input,-i", ba.input, "Science container (sets the averaging count)");

    auto* ex = app.add_subcommand("export", "Convert results to plain CSV for plotting");
    add_common(ex);
    ExportArgs ea;
    ex->add_option("--score-grid", ea.score_grid, "robustness_grid.json -> matrix CSV");
    ex->add_option("--score", ea.score, "score_*.json -> per-segment CSV");
    ex->add_option("--limit", ea.limit, "limit.json -> mass_ev,g95");
    ex->add_option("--band", ea.band, "band.json -> quantile CSV");
    ex->add_option("--psd", ea.psd, "saved PSD -> frequency_hz,power");
    ex->add_option("--output,-o", ea.output, "CSV to write")->required();
    ex->add_option("--field", ea.field, "Grid field: score or lambda");
    ex->add_option("--fmin", ea.fmin, "PSD export lower frequency");
    ex->add_option("--fmax", ea.fmax, "PSD export upper frequency");

    for (auto* s : app.get_subcommands({})) s->allow_extras();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context ctx;
    ctx.out = &out;
    ctx.err = &err;
    ctx.force = force;
    ctx.quiet = quiet;
    ctx.cfg = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
        set_config_value(ctx.cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    auto extras = app.remaining();
    const auto sub_extras = sub->remaining();
    extras.insert(extras.end(), sub_extras.begin(), sub_extras.end());
    apply_extras(ctx.cfg, extras, sub->get_name());
    if (seed_flag) ctx.cfg["seed"] = *seed_flag;
    if (workers_flag) ctx.cfg["workers"] = *workers_flag;
    if (!data_dir_flag.empty()) ctx.cfg["paths"]["data_dir"] = data_dir_flag;
    if (!output_dir_flag.empty()) ctx.cfg["paths"]["output_dir"] = output_dir_flag;
    if (big) ctx.cfg["big_data"] = true;
    seed(ctx.cfg);  // validate early
    workers(ctx.cfg);
    ctx.hash = config_hash(ctx.cfg);
    for (std::size_t i = 0; i < args.size(); ++i) ctx.command += (i ? " " : "") + args[i];

    const auto& name = sub->get_name();
    if (name == "generate") return cmd_generate(ctx);
    if (name == "denoise") {
        if (den_ch < 0) throw UsageError("--channel must be >= 0");
        return cmd_denoise(ctx, den_in, static_cast<std::size_t>(den_ch), den_out);
    }
    if (name == "score") return cmd_score(ctx, sa);
    if (name == "limit") {
        if (save_opt->count() > 0) la.save_psd = fs::path(save_psd);
        return cmd_limit(ctx, la);
    }
    if (name == "band") return cmd_band(ctx, ba);
    return cmd_export(ctx, ea);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    try {
        return dispatch(args, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 4;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 3;
    } catch (const std::bad_alloc&) {
        err << "data error: out of memory\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 3;
    }
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err)
{
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace tidmad::cli
