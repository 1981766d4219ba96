#include "tidmad/model.hpp"

#include <cmath>
#include <sstream>

namespace tidmad {

std::int8_t quantize_millivolts(double mv) noexcept
{
    const double scaled = std::round(mv * kCountsPerMillivolt);  // half away from zero
    if (!(scaled > -128.0)) return -128;  // also catches NaN
    if (scaled > 127.0) return 127;
    return static_cast<std::int8_t>(scaled);
}

std::int8_t Quantizer::operator()(double mv) noexcept
{
    const double scaled = std::round(mv * kCountsPerMillivolt);
    if (scaled > 127.0) {
        ++saturated_;
        return 127;
    }
    if (!(scaled >= -128.0)) {
        ++saturated_;
        return -128;
    }
    return static_cast<std::int8_t>(scaled);
}

const char* to_string(ChannelRole role) noexcept
{
    return role == ChannelRole::Squid ? "squid" : "injected";
}

std::vector<double> SampleSeries::to_millivolts() const
{
    std::vector<double> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = raw_to_millivolts(samples[i]);
    return out;
}

void SampleSeries::validate() const
{
    if (!(sample_rate > 0.0)) throw UsageError("sample series: sample_rate must be positive");
    if (samples.empty()) throw UsageError("sample series: empty series");
}

void FloatSeries::validate() const
{
    if (!(sample_rate > 0.0)) throw UsageError("float series: sample_rate must be positive");
    if (samples.empty()) throw UsageError("float series: empty series");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!std::isfinite(samples[i])) {
            std::ostringstream os;
            os << "float series: non-finite value at index " << i;
            throw DataError(os.str());
        }
    }
}

FloatSeries to_float_series(const SampleSeries& s)
{
    return FloatSeries{s.to_millivolts(), s.sample_rate};
}

void PhysicalConstants::validate() const
{
    if (!(geometric_coupling > 0.0 && volume_cm3 > 0.0 && b_max_tesla > 0.0 && rho_dm_gev_cm3 > 0.0))
        throw UsageError("physical constants must all be strictly positive");
}

void HaloParams::validate() const
{
    if (!(v0_km_s > 0.0 && v_obs_km_s > 0.0)) throw UsageError("halo parameters must be strictly positive");
}

double HaloParams::sigma_v() const noexcept
{
    return v0_km_s / std::sqrt(2.0);
}

void PowerSpectrum::validate() const
{
    if (!(df > 0.0)) throw UsageError("power spectrum: df must be positive");
    if (n_averaged < 1) throw UsageError("power spectrum: n_averaged must be >= 1");
    for (double v : values)
        if (!(v >= 0.0)) throw DataError("power spectrum: negative or non-finite bin");
}

}  // namespace tidmad
