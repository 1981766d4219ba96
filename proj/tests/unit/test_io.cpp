#include "support.hpp"

#include "tidmad/io.hpp"

#include <fstream>
#include <numeric>

using namespace tidmad;
using tidmad::test::TempDir;

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::filesystem::path& p, const std::vector<std::uint8_t>& b)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

SampleSeries ramp(std::size_t n, int offset)
{
    SampleSeries s;
    s.sample_rate = 1000.0;
    s.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.samples[i] = static_cast<std::int8_t>(static_cast<int>((i * 7 + offset) % 256) - 128);
    return s;
}

}  // namespace

TEST_CASE("header layout is little-endian and packed")
{
    io::ContainerHeader h;
    h.format = io::SampleFormat::Real32;
    h.sample_rate_hz = 0x0102030405060708ULL;
    h.channel_lengths = {3, 5};
    const auto b = h.encode();
    REQUIRE(b.size() == 32);
    CHECK(std::string(b.begin(), b.begin() + 4) == "TIDM");
    CHECK(b[4] == 1);
    CHECK(b[5] == 0);
    CHECK(b[6] == 1);
    CHECK(b[7] == 2);
    CHECK(b[8] == 0x08);
    CHECK(b[15] == 0x01);
    CHECK(b[16] == 3);
    CHECK(b[24] == 5);
    CHECK(h.payload_offset(0) == 32);
    CHECK(h.payload_offset(1) == 32 + 12);
    CHECK(h.total_bytes() == 32 + 32);
    const auto back = io::ContainerHeader::decode(b, "mem");
    CHECK(back.channel_lengths == h.channel_lengths);
    CHECK(back.sample_rate_hz == h.sample_rate_hz);
    CHECK(back.format == h.format);
}

TEST_CASE("int8 two-channel round trip")
{
    TempDir dir;
    const auto a = ramp(1000, 0), b = ramp(1000, 3);
    const std::vector<SampleSeries> ch{a, b};
    io::write_container(dir / "x.tsd", ch);
    CHECK(std::filesystem::file_size(dir / "x.tsd") == 32 + 2000);
    io::ContainerReader r(dir / "x.tsd");
    CHECK(r.header().n_channels() == 2);
    CHECK(r.sample_rate() == 1000.0);
    const auto s0 = std::get<SampleSeries>(r.read_all(0));
    const auto s1 = std::get<SampleSeries>(r.read_all(1));
    CHECK(s0.samples == a.samples);
    CHECK(s1.samples == b.samples);
    CHECK(s1.role == ChannelRole::Injected);
    std::vector<double> mv(10);
    r.read_millivolts(1, 100, mv);
    for (std::size_t i = 0; i < 10; ++i) CHECK(mv[i] == raw_to_millivolts(b.samples[100 + i]));
    CHECK_THROWS_AS(r.read_millivolts(1, 995, mv), UsageError);
    CHECK_THROWS_AS(r.read_all(2), UsageError);
}

TEST_CASE("float32 round trip and format checks")
{
    TempDir dir;
    FloatSeries f;
    f.sample_rate = 250.0;
    for (int i = 0; i < 100000; ++i) f.samples.push_back(0.25 * i - 3.5);
    io::write_container(dir / "f.tsd", std::vector<FloatSeries>{f});
    io::ContainerReader r(dir / "f.tsd");
    CHECK(r.header().format == io::SampleFormat::Real32);
    const auto back = std::get<FloatSeries>(r.read_all(0));
    CHECK(back.samples == f.samples);
    std::vector<std::int8_t> raw(4);
    CHECK_THROWS_AS(r.read(0, 0, std::span<std::int8_t>(raw)), UsageError);
}

TEST_CASE("channel count and rate validation on write")
{
    TempDir dir;
    CHECK_THROWS_AS(io::write_container(dir / "a.tsd", std::vector<SampleSeries>{}), UsageError);
    auto a = ramp(10, 0), b = ramp(10, 1);
    b.sample_rate = 2000.0;
    CHECK_THROWS_AS(io::write_container(dir / "b.tsd", std::vector<SampleSeries>{a, b}), UsageError);
    a.sample_rate = 1000.5;
    CHECK_THROWS_AS(io::write_container(dir / "c.tsd", std::vector<SampleSeries>{a}), UsageError);
}

TEST_CASE("positional writer accepts chunks in any order")
{
    TempDir dir;
    io::ContainerHeader h;
    h.sample_rate_hz = 100;
    h.channel_lengths = {8};
    {
        io::ContainerWriter w(dir / "p.tsd", h);
        const std::int8_t hi[4] = {5, 6, 7, 8}, lo[4] = {1, 2, 3, 4};
        w.write(0, 4, std::span<const std::int8_t>(hi));
        w.write(0, 0, std::span<const std::int8_t>(lo));
        CHECK_THROWS_AS(w.write(0, 6, std::span<const std::int8_t>(hi)), UsageError);
        const float fl[1] = {1.0f};
        CHECK_THROWS_AS(w.write(0, 0, std::span<const float>(fl)), UsageError);
        w.close();
    }
    const auto s = std::get<SampleSeries>(io::read_container_channel(dir / "p.tsd", 0));
    CHECK(s.samples == std::vector<std::int8_t>{1, 2, 3, 4, 5, 6, 7, 8});
}

TEST_CASE("corrupt files are rejected with specific messages")
{
    TempDir dir;
    io::write_container(dir / "ok.tsd", std::vector<SampleSeries>{ramp(64, 0)});
    const auto good = slurp(dir / "ok.tsd");

    auto expect = [&](std::vector<std::uint8_t> bytes, const std::string& needle) {
        dump(dir / "bad.tsd", bytes);
        try {
            io::ContainerReader r(dir / "bad.tsd");
            FAIL("no error for " << needle);
        } catch (const DataError& e) {
            CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
        }
    };
    auto b = good;
    b[0] = 'X';
    expect(b, "magic");
    b = good;
    b[4] = 9;
    expect(b, "version");
    b = good;
    b[6] = 7;
    expect(b, "format");
    b = good;
    b[7] = 3;
    expect(b, "channel count");
    b = good;
    b.resize(b.size() - 10);
    expect(b, "missing 10 bytes");
    b = good;
    b.push_back(0);
    expect(b, "trailing");
    expect({'T', 'I'}, "shorter");
    CHECK_THROWS_AS(io::ContainerReader(dir / "absent.tsd"), DataError);
}

TEST_CASE("segment stream drops and counts the partial tail")
{
    TempDir dir;
    const auto s = ramp(1050, 0);
    io::write_container(dir / "s.tsd", std::vector<SampleSeries>{s});
    auto st = io::read_segments(dir / "s.tsd", 0, 100);
    CHECK(st.segment_count() == 10);
    CHECK(st.discarded_samples() == 50);
    io::AnySeries seg;
    std::size_t k = 0;
    while (st.next(seg)) {
        const auto& x = std::get<SampleSeries>(seg);
        CHECK(x.start_index == k * 100);
        CHECK(std::equal(x.samples.begin(), x.samples.end(), s.samples.begin() + static_cast<long>(k * 100)));
        ++k;
    }
    CHECK(k == 10);
    CHECK_FALSE(st.next().has_value());
    CHECK_THROWS_AS(io::read_segments(dir / "s.tsd", 0, 0), UsageError);

    auto mv_stream = io::read_segments(dir / "s.tsd", 0, 1000);
    std::vector<double> mv;
    CHECK(mv_stream.next_millivolts(mv));
    CHECK(mv[3] == raw_to_millivolts(s.samples[3]));
    CHECK_FALSE(mv_stream.next_millivolts(mv));
}
