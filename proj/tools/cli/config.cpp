#include "config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tidmad::cli {

Json default_config()
{
    return Json::parse(R"({
  "seed": 1,
  "workers": 0,
  "sample_rate": 10000000,
  "big_data": false,
  "big_data_gigasamples": 100,
  "paths": { "data_dir": "data", "output_dir": "out" },
  "generate": {
    "train_seconds": 20,
    "validation_seconds": 20,
    "science_seconds": 300,
    "injection_mode": "standard",
    "dwell_seconds": 1.0,
    "schedule": [],
    "planted": { "frequency_hz": 0, "amplitude_mv": 0, "lineshape": false }
  },
  "noise": {
    "white_sigma_mv": 4.0,
    "pink_amplitude_mv": 0.0,
    "injected_sigma_mv": 0.25,
    "lines": [],
    "gain": { "kind": "bandpass", "f_low_hz": 1000.0, "f_high_hz": 5000000.0 }
  },
  "denoise": {
    "kind": "none",
    "window": 0,
    "order": 11,
    "command": [],
    "timeout_s": 600,
    "segment_seconds": 1
  },
  "score": {
    "base": 0,
    "segment_seconds": 1,
    "robustness": {
      "amplitudes": [0, 0.5, 1.0, 1.5, 2.0],
      "sigmas_mv": [1.0, 2.0, 3.0, 4.0, 5.0],
      "target": "squid"
    }
  },
  "limit": {
    "segment_seconds": 10,
    "f_min_hz": 100000.0,
    "f_max_hz": 2000000.0,
    "n_masses": 10000,
    "halo": { "v0_km_s": 220.0, "v_obs_km_s": 232.0 },
    "constants": { "geometric_coupling": 0.0217, "volume_cm3": 890.0, "b_max_tesla": 1.0, "rho_dm_gev_cm3": 0.4 },
    "calibration_file": "",
    "trials": 200,
    "band_background": "model",
    "n_averaged": 0,
    "chunk": 4096
  }
})");
}

namespace {

bool compatible(const Json& a, const Json& b)
{
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

}  // namespace

void merge_config(Json& base, const Json& overlay, const std::string& where)
{
    if (!overlay.is_object()) throw UsageError("config " + where + ": expected an object");
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!base.contains(it.key())) throw UsageError("unknown config key '" + path + "'");
        auto& slot = base[it.key()];
        if (slot.is_object()) {
            merge_config(slot, it.value(), path);
        } else {
            if (!compatible(slot, it.value()))
                throw UsageError("config key '" + path + "' expects a " + std::string(slot.type_name()) + ", got "
                                 + it.value().type_name());
            slot = it.value();
        }
    }
}

void set_config_value(Json& cfg, const std::string& path, const std::string& value)
{
    Json overlay = Json::object();
    Json* node = &overlay;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
        for (auto& ch : part)
            if (ch == '-') ch = '_';
        if (part.empty()) throw UsageError("malformed config path '" + path + "'");
        parts.push_back(part);
    }
    if (parts.empty()) throw UsageError("empty config path");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]] = Json::object());
    Json v;
    try {
        v = Json::parse(value);
    } catch (const Json::parse_error&) {
        v = value;
    }
    // A bare word for a string-valued key stays a string even if it parses.
    const Json* target = &cfg;
    for (const auto& p : parts) {
        if (!target->is_object() || !target->contains(p)) {
            std::string joined;
            for (const auto& q : parts) joined += (joined.empty() ? "" : ".") + q;
            throw UsageError("unknown config key '" + joined + "'");
        }
        target = &(*target)[p];
    }
    if (target->is_string() && !v.is_string()) v = value;
    (*node)[parts.back()] = v;
    merge_config(cfg, overlay, "");
}

Json load_config(const std::optional<std::filesystem::path>& file)
{
    Json cfg = default_config();
    if (file) {
        std::ifstream in(*file);
        if (!in) throw UsageError("cannot open config file '" + file->string() + "'");
        Json user;
        try {
            user = Json::parse(in);
        } catch (const Json::parse_error& e) {
            throw UsageError("config file '" + file->string() + "' is not valid JSON: " + e.what());
        }
        merge_config(cfg, user, "");
    }
    return cfg;
}

std::string config_hash(const Json& cfg)
{
    const std::string s = cfg.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::uint64_t seed(const Json& cfg)
{
    const auto& s = cfg.at("seed");
    if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw UsageError("seed must be a non-negative integer");
    return s.get<std::uint64_t>();
}

double sample_rate(const Json& cfg)
{
    const double r = cfg.at("sample_rate").get<double>();
    if (!(r > 0.0) || std::round(r) != r) throw UsageError("sample_rate must be a positive whole number of Hz");
    return r;
}

unsigned workers(const Json& cfg)
{
    const auto w = cfg.at("workers").get<long long>();
    if (w < 0) throw UsageError("workers must be >= 0 (0 = all cores)");
    return static_cast<unsigned>(w);
}

sim::NoiseModel noise_model(const Json& cfg, std::uint64_t seed_value)
{
    const auto& n = cfg.at("noise");
    sim::NoiseModel m;
    m.white_sigma_mv = n.at("white_sigma_mv").get<double>();
    m.pink_amplitude_mv = n.at("pink_amplitude_mv").get<double>();
    m.injected_sigma_mv = n.at("injected_sigma_mv").get<double>();
    for (const auto& l : n.at("lines"))
        m.lines.push_back({l.at("frequency_hz").get<double>(), l.at("amplitude_mv").get<double>()});
    const auto& g = n.at("gain");
    const auto kind = g.at("kind").get<std::string>();
    if (kind == "unity")
        m.gain.kind = sim::GainModel::Kind::Unity;
    else if (kind == "bandpass")
        m.gain.kind = sim::GainModel::Kind::Bandpass;
    else
        throw UsageError("noise.gain.kind must be 'unity' or 'bandpass'");
    m.gain.f_low_hz = g.at("f_low_hz").get<double>();
    m.gain.f_high_hz = g.at("f_high_hz").get<double>();
    m.seed = seed_value;
    return m;
}

sim::InjectionSchedule schedule(const Json& cfg, double seconds)
{
    const auto& g = cfg.at("generate");
    sim::InjectionSchedule base;
    if (!g.at("schedule").empty()) {
        for (const auto& e : g.at("schedule"))
            base.entries.push_back({e.at("frequency_hz").get<double>(), e.at("amplitude_mv").get<double>(),
                                    e.value("duration_s", 1.0)});
    } else {
        const auto mode = g.at("injection_mode").get<std::string>();
        if (mode != "standard" && mode != "weak") throw UsageError("generate.injection_mode must be 'standard' or 'weak'");
        base = sim::default_schedule(mode == "standard" ? sim::InjectionMode::Standard : sim::InjectionMode::Weak,
                                     g.at("dwell_seconds").get<double>());
    }
    if (base.entries.empty()) throw UsageError("generate.schedule is empty");
    // Repeat the sweep until it covers the requested duration.
    sim::InjectionSchedule out;
    double t = 0.0;
    for (std::size_t i = 0; t < seconds - 1e-9; ++i) {
        const auto& e = base.entries[i % base.entries.size()];
        out.entries.push_back(e);
        t += e.duration_s;
    }
    return out;
}

denoise::DenoiserSpec denoiser_spec(const Json& cfg)
{
    const auto& d = cfg.at("denoise");
    denoise::DenoiserSpec s;
    s.kind = denoise::parse_kind(d.at("kind").get<std::string>());
    // 0 picks the filter's own default (100 for the moving average, 101 for
    // Savitzky-Golay, which needs an odd window).
    const auto w = d.at("window").get<long long>();
    if (w < 0 || w == 1) throw UsageError("denoise.window must be 0 (default) or >= 2");
    if (w > 0)
        s.window = static_cast<std::size_t>(w);
    else
        s.window = s.kind == denoise::DenoiserSpec::Kind::SavitzkyGolay ? denoise::kDefaultSgWindow
                                                                         : denoise::kDefaultMaWindow;
    s.order = d.at("order").get<int>();
    for (const auto& a : d.at("command")) s.external.argv.push_back(a.get<std::string>());
    const double t = d.at("timeout_s").get<double>();
    if (!(t > 0.0)) throw UsageError("denoise.timeout_s must be positive");
    s.external.timeout = std::chrono::milliseconds(static_cast<long long>(std::llround(t * 1000.0)));
    s.validate();
    return s;
}

limits::LimitOptions limit_options(const Json& cfg)
{
    const auto& l = cfg.at("limit");
    limits::LimitOptions o;
    o.halo.v0_km_s = l.at("halo").at("v0_km_s").get<double>();
    o.halo.v_obs_km_s = l.at("halo").at("v_obs_km_s").get<double>();
    o.halo.validate();
    const auto& k = l.at("constants");
    o.constants.geometric_coupling = k.at("geometric_coupling").get<double>();
    o.constants.volume_cm3 = k.at("volume_cm3").get<double>();
    o.constants.b_max_tesla = k.at("b_max_tesla").get<double>();
    o.constants.rho_dm_gev_cm3 = k.at("rho_dm_gev_cm3").get<double>();
    o.constants.validate();
    const auto cal = l.at("calibration_file").get<std::string>();
    if (!cal.empty())
        o.calibration = limits::Calibration::from_csv(cal);
    else
        o.calibration = limits::Calibration(noise_model(cfg, 0).gain);
    o.workers = workers(cfg);
    const auto chunk = l.at("chunk").get<long long>();
    if (chunk < 1) throw UsageError("limit.chunk must be >= 1");
    o.chunk = static_cast<std::size_t>(chunk);
    return o;
}

std::vector<double> mass_grid(const Json& cfg)
{
    const auto& l = cfg.at("limit");
    const auto n = l.at("n_masses").get<long long>();
    if (n < 0) throw UsageError("limit.n_masses must be >= 0");
    return limits::log_mass_grid(l.at("f_min_hz").get<double>(), l.at("f_max_hz").get<double>(),
                                 static_cast<std::size_t>(n));
}

}  // namespace tidmad::cli
