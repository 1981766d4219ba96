#pragma once
//
// Pipeline configuration: one JSON document with defaults for every key.
// Command-line overrides address keys by dotted path; dashes in flag names
// map to underscores (`--noise.white-sigma-mv 3` sets noise.white_sigma_mv).
//

#include "tidmad/denoise.hpp"
#include "tidmad/limits.hpp"
#include "tidmad/simgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace tidmad::cli {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

Json default_config();

// Merge `overlay` into `base`; unknown keys are rejected with their path.
void merge_config(Json& base, const Json& overlay, const std::string& where);

// `path` is dotted ("noise.white_sigma_mv"); the value text is parsed as
// JSON when possible, otherwise taken as a string.
void set_config_value(Json& cfg, const std::string& path, const std::string& value);

Json load_config(const std::optional<std::filesystem::path>& file);

// Stable 64-bit FNV-1a hash of the canonical dump, as 16 hex digits.
std::string config_hash(const Json& cfg);

// Typed views.
sim::NoiseModel noise_model(const Json& cfg, std::uint64_t seed);
sim::InjectionSchedule schedule(const Json& cfg, double seconds);
denoise::DenoiserSpec denoiser_spec(const Json& cfg);
limits::LimitOptions limit_options(const Json& cfg);
std::vector<double> mass_grid(const Json& cfg);
unsigned workers(const Json& cfg);
double sample_rate(const Json& cfg);
std::uint64_t seed(const Json& cfg);

}  // namespace tidmad::cli
