#pragma once
// Counter-based random streams.  Every draw is a pure function of
// (key, counter), so a stream can be restarted at any block boundary and
// generation parallelizes without changing the output.

#include <cstdint>
#include <limits>

namespace tidmad {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t tag) noexcept
{
    return splitmix64(key ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t a, std::uint64_t b) noexcept
{
    return derive_key(derive_key(key, a), b);
}

// UniformRandomBitGenerator over splitmix64(key + counter * golden).
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
        : key_(key), counter_(counter)
    {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    constexpr result_type operator()() noexcept
    {
        return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * counter_++);
    }

    // Uniform in (0, 1), never exactly 0 or 1.
    double uniform() noexcept
    {
        return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

// Stream tags, so independent consumers of one seed never share draws.
enum class StreamTag : std::uint64_t {
    SquidWhite = 1,
    SquidPink = 2,
    InjectedDigitizer = 3,
    SquidDigitizer = 4,
    ScienceWhite = 5,
    SciencePink = 6,
    PlantedLineshape = 7,
    RobustnessNoise = 8,
    PseudoExperiment = 9,
    MonteCarloWindow = 10,
};

constexpr std::uint64_t tag(StreamTag t) noexcept { return static_cast<std::uint64_t>(t); }

}  // namespace tidmad
