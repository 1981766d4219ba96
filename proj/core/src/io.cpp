#include "tidmad/io.hpp"

#include <bit>
#include <cerrno>
#include <cstring>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace tidmad::io {

namespace {

std::string errno_message(const std::string& what, const std::filesystem::path& path)
{
    std::ostringstream os;
    os << what << " '" << path.string() << "': " << std::strerror(errno);
    return os.str();
}

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes)
{
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes)
{
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t rate_to_hz(double rate)
{
    if (!(rate > 0.0) || rate != static_cast<double>(static_cast<std::uint64_t>(rate)))
        throw UsageError("container sample rate must be a positive whole number of Hz");
    return static_cast<std::uint64_t>(rate);
}

}  // namespace

std::size_t bytes_per_sample(SampleFormat f) noexcept
{
    return f == SampleFormat::Int8 ? 1 : 4;
}

std::uint64_t ContainerHeader::payload_offset(std::size_t channel) const
{
    if (channel >= channel_lengths.size()) throw UsageError("channel index out of range");
    std::uint64_t off = header_bytes();
    for (std::size_t c = 0; c < channel; ++c) off += channel_lengths[c] * bytes_per_sample(format);
    return off;
}

std::uint64_t ContainerHeader::total_bytes() const noexcept
{
    std::uint64_t total = header_bytes();
    for (auto n : channel_lengths) total += n * bytes_per_sample(format);
    return total;
}

void ContainerHeader::validate() const
{
    if (channel_lengths.empty() || channel_lengths.size() > 2) {
        std::ostringstream os;
        os << "container supports 1 or 2 channels, got " << channel_lengths.size();
        throw UsageError(os.str());
    }
    if (format != SampleFormat::Int8 && format != SampleFormat::Real32)
        throw UsageError("unknown sample format");
    if (sample_rate_hz == 0) throw UsageError("container sample rate must be positive");
}

std::vector<std::uint8_t> ContainerHeader::encode() const
{
    validate();
    std::vector<std::uint8_t> out;
    out.reserve(header_bytes());
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put_le(out, kVersion, 2);
    put_le(out, static_cast<std::uint8_t>(format), 1);
    put_le(out, channel_lengths.size(), 1);
    put_le(out, sample_rate_hz, 8);
    for (auto n : channel_lengths) put_le(out, n, 8);
    return out;
}

ContainerHeader ContainerHeader::decode(std::span<const std::uint8_t> bytes, const std::string& where)
{
    auto corrupt = [&](const std::string& why) {
        return DataError("corrupt container header in '" + where + "': " + why);
    };
    if (bytes.size() < 16) throw corrupt("file shorter than the fixed header");
    if (std::memcmp(bytes.data(), kMagic.data(), 4) != 0) throw corrupt("bad magic");
    const auto version = get_le(bytes.data() + 4, 2);
    if (version != kVersion) throw corrupt("unsupported version " + std::to_string(version));
    const auto fmt = bytes[6];
    if (fmt > 1) throw corrupt("unknown sample format " + std::to_string(fmt));
    const auto n = bytes[7];
    if (n < 1 || n > 2) throw corrupt("channel count " + std::to_string(n) + " not in {1, 2}");
    ContainerHeader h;
    h.format = static_cast<SampleFormat>(fmt);
    h.sample_rate_hz = get_le(bytes.data() + 8, 8);
    if (h.sample_rate_hz == 0) throw corrupt("zero sample rate");
    if (bytes.size() < 16 + 8u * n) throw corrupt("file shorter than the channel table");
    for (unsigned c = 0; c < n; ++c) h.channel_lengths.push_back(get_le(bytes.data() + 16 + 8 * c, 8));
    return h;
}

// ---------------------------------------------------------------------------

ContainerWriter::ContainerWriter(const std::filesystem::path& path, ContainerHeader header)
    : path_(path), header_(std::move(header))
{
    header_.validate();
    fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) throw DataError(errno_message("cannot create container", path_));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw DataError(errno_message("container is being written by another process", path_));
    }
    const auto bytes = header_.encode();
    write_bytes(0, bytes.data(), bytes.size());
    if (::ftruncate(fd_, static_cast<off_t>(header_.total_bytes())) != 0)
        throw DataError(errno_message("cannot size container", path_));
}

ContainerWriter::~ContainerWriter()
{
    if (fd_ >= 0) ::close(fd_);
}

void ContainerWriter::close()
{
    if (fd_ < 0) return;
    const int fd = fd_;
    fd_ = -1;
    if (::close(fd) != 0) throw DataError(errno_message("error closing container", path_));
}

void ContainerWriter::write_bytes(std::uint64_t pos, const void* data, std::size_t n)
{
    if (fd_ < 0) throw UsageError("container writer already closed");
    auto p = static_cast<const char*>(data);
    while (n > 0) {
        const ssize_t w = ::pwrite(fd_, p, n, static_cast<off_t>(pos));
        if (w < 0) {
            if (errno == EINTR) continue;
            throw DataError(errno_message("write failed on container", path_));
        }
        p += w;
        pos += static_cast<std::uint64_t>(w);
        n -= static_cast<std::size_t>(w);
    }
}

void ContainerWriter::check_range(std::size_t channel, std::uint64_t offset, std::size_t count, SampleFormat f) const
{
    if (f != header_.format) throw UsageError("sample format does not match container header");
    if (channel >= header_.n_channels()) throw UsageError("channel index out of range");
    if (offset + count > header_.channel_lengths[channel])
        throw UsageError("write past the declared channel length");
}

void ContainerWriter::write(std::size_t channel, std::uint64_t offset, std::span<const std::int8_t> samples)
{
    check_range(channel, offset, samples.size(), SampleFormat::Int8);
    write_bytes(header_.payload_offset(channel) + offset, samples.data(), samples.size());
}

void ContainerWriter::write(std::size_t channel, std::uint64_t offset, std::span<const float> samples)
{
    check_range(channel, offset, samples.size(), SampleFormat::Real32);
    write_bytes(header_.payload_offset(channel) + 4 * offset, samples.data(), 4 * samples.size());
}

void write_container(const std::filesystem::path& path, std::span<const SampleSeries> channels)
{
    ContainerHeader h;
    h.format = SampleFormat::Int8;
    if (channels.empty() || channels.size() > 2) {
        std::ostringstream os;
        os << "container supports 1 or 2 channels, got " << channels.size();
        throw UsageError(os.str());
    }
    h.sample_rate_hz = rate_to_hz(channels.front().sample_rate);
    for (const auto& c : channels) {
        if (c.sample_rate != channels.front().sample_rate)
            throw UsageError("all channels must share one sample rate");
        h.channel_lengths.push_back(c.size());
    }
    ContainerWriter w(path, h);
    for (std::size_t c = 0; c < channels.size(); ++c) w.write(c, 0, std::span<const std::int8_t>(channels[c].samples));
    w.close();
}

void write_container(const std::filesystem::path& path, std::span<const FloatSeries> channels)
{
    ContainerHeader h;
    h.format = SampleFormat::Real32;
    if (channels.empty() || channels.size() > 2) {
        std::ostringstream os;
        os << "container supports 1 or 2 channels, got " << channels.size();
        throw UsageError(os.str());
    }
    h.sample_rate_hz = rate_to_hz(channels.front().sample_rate);
    for (const auto& c : channels) {
        if (c.sample_rate != channels.front().sample_rate)
            throw UsageError("all channels must share one sample rate");
        h.channel_lengths.push_back(c.size());
    }
    ContainerWriter w(path, h);
    constexpr std::size_t kChunk = 1 << 16;
    std::vector<float> buf;
    for (std::size_t c = 0; c < channels.size(); ++c) {
        const auto& s = channels[c].samples;
        for (std::size_t i = 0; i < s.size(); i += kChunk) {
            const std::size_t n = std::min(kChunk, s.size() - i);
            buf.resize(n);
            for (std::size_t k = 0; k < n; ++k) buf[k] = static_cast<float>(s[i + k]);
            w.write(c, i, std::span<const float>(buf));
        }
    }
    w.close();
}

// ---------------------------------------------------------------------------

ContainerReader::ContainerReader(const std::filesystem::path& path) : path_(path)
{
    fd_ = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw DataError(errno_message("cannot open container", path_));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw DataError(errno_message("cannot stat container", path_));
    const auto file_size = static_cast<std::uint64_t>(st.st_size);

    std::vector<std::uint8_t> head(std::min<std::uint64_t>(file_size, 32));
    read_bytes(0, head.data(), head.size());
    header_ = ContainerHeader::decode(head, path_.string());

    const auto expected = header_.total_bytes();
    if (file_size < expected) {
        std::ostringstream os;
        os << "truncated container '" << path_.string() << "': expected " << expected << " bytes, found "
           << file_size << " (missing " << (expected - file_size) << " bytes)";
        throw DataError(os.str());
    }
    if (file_size > expected) {
        std::ostringstream os;
        os << "container '" << path_.string() << "' has " << (file_size - expected)
           << " trailing bytes beyond the declared payload (expected " << expected << ")";
        throw DataError(os.str());
    }
}

ContainerReader::ContainerReader(ContainerReader&& other) noexcept
    : path_(std::move(other.path_)), header_(std::move(other.header_)), fd_(other.fd_)
{
    other.fd_ = -1;
}

ContainerReader::~ContainerReader()
{
    if (fd_ >= 0) ::close(fd_);
}

std::uint64_t ContainerReader::length(std::size_t channel) const
{
    if (channel >= header_.n_channels()) throw UsageError("channel index out of range");
    return header_.channel_lengths[channel];
}

void ContainerReader::read_bytes(std::uint64_t pos, void* data, std::size_t n) const
{
    auto p = static_cast<char*>(data);
    while (n > 0) {
        const ssize_t r = ::pread(fd_, p, n, static_cast<off_t>(pos));
        if (r < 0) {
            if (errno == EINTR) continue;
            throw DataError(errno_message("read failed on container", path_));
        }
        if (r == 0) {
            std::ostringstream os;
            os << "unexpected end of container '" << path_.string() << "' (" << n << " bytes missing)";
            throw DataError(os.str());
        }
        p += r;
        pos += static_cast<std::uint64_t>(r);
        n -= static_cast<std::size_t>(r);
    }
}

void ContainerReader::check_range(std::size_t channel, std::uint64_t offset, std::size_t count) const
{
    if (offset + count > length(channel)) throw UsageError("read past the end of the channel");
}

void ContainerReader::read(std::size_t channel, std::uint64_t offset, std::span<std::int8_t> out) const
{
    if (header_.format != SampleFormat::Int8) throw UsageError("container holds float32 samples, not int8");
    check_range(channel, offset, out.size());
    read_bytes(header_.payload_offset(channel) + offset, out.data(), out.size());
}

void ContainerReader::read(std::size_t channel, std::uint64_t offset, std::span<float> out) const
{
    if (header_.format != SampleFormat::Real32) throw UsageError("container holds int8 samples, not float32");
    check_range(channel, offset, out.size());
    read_bytes(header_.payload_offset(channel) + 4 * offset, out.data(), 4 * out.size());
}

void ContainerReader::read_millivolts(std::size_t channel, std::uint64_t offset, std::span<double> out) const
{
    constexpr std::size_t kChunk = 1 << 16;
    if (header_.format == SampleFormat::Int8) {
        std::int8_t buf[kChunk];
        for (std::size_t i = 0; i < out.size(); i += kChunk) {
            const std::size_t n = std::min(kChunk, out.size() - i);
            read(channel, offset + i, std::span<std::int8_t>(buf, n));
            for (std::size_t k = 0; k < n; ++k) out[i + k] = raw_to_millivolts(buf[k]);
        }
    } else {
        std::vector<float> buf(std::min(kChunk, out.size()));
        for (std::size_t i = 0; i < out.size(); i += kChunk) {
            const std::size_t n = std::min(kChunk, out.size() - i);
            read(channel, offset + i, std::span<float>(buf.data(), n));
            for (std::size_t k = 0; k < n; ++k) out[i + k] = static_cast<double>(buf[k]);
        }
    }
}

AnySeries ContainerReader::read_all(std::size_t channel) const
{
    const auto n = length(channel);
    if (header_.format == SampleFormat::Int8) {
        SampleSeries s;
        s.sample_rate = sample_rate();
        s.role = channel == 1 ? ChannelRole::Injected : ChannelRole::Squid;
        s.samples.resize(n);
        read(channel, 0, std::span<std::int8_t>(s.samples));
        return s;
    }
    FloatSeries s;
    s.sample_rate = sample_rate();
    std::vector<float> buf(n);
    read(channel, 0, std::span<float>(buf));
    s.samples.assign(buf.begin(), buf.end());
    return s;
}

AnySeries read_container_channel(const std::filesystem::path& path, std::size_t channel)
{
    return ContainerReader(path).read_all(channel);
}

// ---------------------------------------------------------------------------

SegmentStream::SegmentStream(const std::filesystem::path& path, std::size_t channel, std::uint64_t segment_len)
    : reader_(path), channel_(channel), segment_len_(segment_len)
{
    if (segment_len_ == 0) throw UsageError("segment length must be positive");
    const auto n = reader_.length(channel_);
    n_segments_ = n / segment_len_;
    discarded_ = n - n_segments_ * segment_len_;
}

bool SegmentStream::next(AnySeries& out)
{
    if (cursor_ >= n_segments_) return false;
    const std::uint64_t start = cursor_ * segment_len_;
    if (reader_.header().format == SampleFormat::Int8) {
        if (!std::holds_alternative<SampleSeries>(out)) out = SampleSeries{};
        auto& s = std::get<SampleSeries>(out);
        s.sample_rate = reader_.sample_rate();
        s.role = channel_ == 1 ? ChannelRole::Injected : ChannelRole::Squid;
        s.start_index = start;
        s.samples.resize(segment_len_);
        reader_.read(channel_, start, std::span<std::int8_t>(s.samples));
    } else {
        if (!std::holds_alternative<FloatSeries>(out)) out = FloatSeries{};
        auto& s = std::get<FloatSeries>(out);
        s.sample_rate = reader_.sample_rate();
        s.samples.resize(segment_len_);
        reader_.read_millivolts(channel_, start, std::span<double>(s.samples));
    }
    ++cursor_;
    return true;
}

std::optional<AnySeries> SegmentStream::next()
{
    AnySeries s;
    if (!next(s)) return std::nullopt;
    return s;
}

bool SegmentStream::next_millivolts(std::vector<double>& out)
{
    if (cursor_ >= n_segments_) return false;
    out.resize(segment_len_);
    reader_.read_millivolts(channel_, cursor_ * segment_len_, std::span<double>(out));
    ++cursor_;
    return true;
}

SegmentStream read_segments(const std::filesystem::path& path, std::size_t channel, std::uint64_t segment_len)
{
    return SegmentStream(path, channel, segment_len);
}

}  // namespace tidmad::io
