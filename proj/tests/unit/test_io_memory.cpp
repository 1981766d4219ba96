// Peak heap use while streaming must depend on the segment length only.
#include "support.hpp"

#include "tidmad/dsp.hpp"
#include "tidmad/io.hpp"

#include <atomic>
#include <cstdlib>
#include <new>

namespace {

std::atomic<long long> g_live{0};
std::atomic<long long> g_peak{0};

void note(long long delta)
{
    const long long now = g_live.fetch_add(delta) + delta;
    long long p = g_peak.load();
    while (now > p && !g_peak.compare_exchange_weak(p, now)) {}
}

struct Header {
    std::size_t size;
    std::size_t pad;
};

}  // namespace

void* operator new(std::size_t n)
{
    auto* h = static_cast<Header*>(std::malloc(n + sizeof(Header)));
    if (!h) throw std::bad_alloc();
    h->size = n;
    note(static_cast<long long>(n));
    return h + 1;
}

void operator delete(void* p) noexcept
{
    if (!p) return;
    auto* h = static_cast<Header*>(p) - 1;
    note(-static_cast<long long>(h->size));
    std::free(h);
}

void operator delete(void* p, std::size_t) noexcept
{
    operator delete(p);
}

using namespace tidmad;
using tidmad::test::TempDir;

namespace {

void write_file(const std::filesystem::path& p, std::uint64_t n)
{
    io::ContainerHeader h;
    h.sample_rate_hz = 1'000'000;
    h.channel_lengths = {n};
    io::ContainerWriter w(p, h);
    std::vector<std::int8_t> buf(1 << 20);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<std::int8_t>((i * 31) % 200 - 100);
    for (std::uint64_t off = 0; off < n; off += buf.size()) {
        const auto c = static_cast<std::size_t>(std::min<std::uint64_t>(buf.size(), n - off));
        w.write(0, off, std::span<const std::int8_t>(buf.data(), c));
    }
    w.close();
}

long long stream_peak(const std::filesystem::path& p, std::uint64_t seg)
{
    const long long base = g_live.load();
    g_peak = base;
    auto st = io::read_segments(p, 0, seg);
    std::vector<double> mv;
    double sum = 0.0;
    while (st.next_millivolts(mv)) sum += mv[0];
    CHECK(std::isfinite(sum));
    return g_peak.load() - base;
}

long long psd_peak(const std::filesystem::path& p, std::uint64_t seg)
{
    io::ContainerReader r(p);
    const auto n = r.length(0) / seg;
    const long long base = g_live.load();
    g_peak = base;
    const auto psd = dsp::average_periodograms(
        static_cast<std::size_t>(n), static_cast<std::size_t>(seg), r.sample_rate(),
        [&](std::size_t i, std::span<double> out) { r.read_millivolts(0, i * seg, out); }, 1);
    CHECK(psd.n_averaged == n);
    return g_peak.load() - base;
}

}  // namespace

TEST_CASE("segment streaming holds one segment regardless of file length")
{
    TempDir dir;
    const std::uint64_t seg = 1 << 16;
    write_file(dir / "short.tsd", 8 * seg);
    write_file(dir / "long.tsd", 128 * seg);
    const auto a = stream_peak(dir / "short.tsd", seg);
    const auto b = stream_peak(dir / "long.tsd", seg);
    MESSAGE("stream peak bytes: short " << a << ", long " << b);
    CHECK(b <= a + 4096);
    CHECK(b < static_cast<long long>(2 * 8 * seg));
}

TEST_CASE("PSD averaging memory does not grow with the number of segments")
{
    TempDir dir;
    const std::uint64_t seg = 1 << 15;
    write_file(dir / "short.tsd", 4 * seg);
    write_file(dir / "long.tsd", 64 * seg);
    const auto a = psd_peak(dir / "short.tsd", seg);
    const auto b = psd_peak(dir / "long.tsd", seg);
    MESSAGE("psd peak bytes: short " << a << ", long " << b);
    CHECK(b <= a + 4096);
    // transform buffer + accumulator + result + per-segment spectra: a few segments' worth
    CHECK(b < static_cast<long long>(8 * 8 * seg));
}
