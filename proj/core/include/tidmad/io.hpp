#pragma once
//
// Native `.tsd` container for ultra-long 1- or 2-channel time series.
//
// Byte layout (all integers little-endian, no padding):
//
//   offset  size        field
//   0       4           magic "TIDM"
//   4       2           version (= 1)
//   6       1           sample format: 0 = int8 ADC counts, 1 = float32 millivolts
//   7       1           channel count (1 or 2)
//   8       8           sample rate, Hz
//   16      8 * n       per-channel sample counts
//   16+8n   ...         channel payloads, channel 0 first, contiguous
//
// Two-channel files follow the digitizer convention: channel 0 is the SQUID
// readout, channel 1 the injected reference.
//
// Converting a third-party HDF5 release: map dataset "ch1" (int8) to
// channel 0 and "ch2" (int8) to channel 1, sample rate 10 MHz.
//

#include "tidmad/model.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace tidmad::io {

enum class SampleFormat : std::uint8_t { Int8 = 0, Real32 = 1 };

inline constexpr std::array<char, 4> kMagic{'T', 'I', 'D', 'M'};
inline constexpr std::uint16_t kVersion = 1;

std::size_t bytes_per_sample(SampleFormat f) noexcept;

struct ContainerHeader {
    SampleFormat format = SampleFormat::Int8;
    std::uint64_t sample_rate_hz = 10'000'000;
    std::vector<std::uint64_t> channel_lengths;

    std::size_t n_channels() const noexcept { return channel_lengths.size(); }
    std::uint64_t header_bytes() const noexcept { return 16 + 8 * channel_lengths.size(); }
    std::uint64_t payload_offset(std::size_t channel) const;
    std::uint64_t total_bytes() const noexcept;

    void validate() const;
    std::vector<std::uint8_t> encode() const;
    // `where` names the source in error messages.
    static ContainerHeader decode(std::span<const std::uint8_t> bytes, const std::string& where);
};

using AnySeries = std::variant<SampleSeries, FloatSeries>;

// Positional writer.  The file is created at full size up front so channels
// may be filled in any order (and from several threads).
class ContainerWriter {
public:
    ContainerWriter(const std::filesystem::path& path, ContainerHeader header);
    ~ContainerWriter();
    ContainerWriter(const ContainerWriter&) = delete;
    ContainerWriter& operator=(const ContainerWriter&) = delete;

    const ContainerHeader& header() const noexcept { return header_; }

    void write(std::size_t channel, std::uint64_t offset, std::span<const std::int8_t> samples);
    void write(std::size_t channel, std::uint64_t offset, std::span<const float> samples);
    void close();

private:
    void write_bytes(std::uint64_t pos, const void* data, std::size_t n);
    void check_range(std::size_t channel, std::uint64_t offset, std::size_t count, SampleFormat f) const;

    std::filesystem::path path_;
    ContainerHeader header_;
    int fd_ = -1;
};

// Channels must share one format and sample rate.
void write_container(const std::filesystem::path& path, std::span<const SampleSeries> channels);
void write_container(const std::filesystem::path& path, std::span<const FloatSeries> channels);

// Thread-safe random-access reader (pread); the header and file size are
// validated on open.
class ContainerReader {
public:
    explicit ContainerReader(const std::filesystem::path& path);
    ~ContainerReader();
    ContainerReader(const ContainerReader&) = delete;
    ContainerReader& operator=(const ContainerReader&) = delete;
    ContainerReader(ContainerReader&&) noexcept;

    const ContainerHeader& header() const noexcept { return header_; }
    const std::filesystem::path& path() const noexcept { return path_; }
    std::uint64_t length(std::size_t channel) const;
    double sample_rate() const noexcept { return static_cast<double>(header_.sample_rate_hz); }

    void read(std::size_t channel, std::uint64_t offset, std::span<std::int8_t> out) const;
    void read(std::size_t channel, std::uint64_t offset, std::span<float> out) const;
    // Either format, converted to millivolts.
    void read_millivolts(std::size_t channel, std::uint64_t offset, std::span<double> out) const;

    AnySeries read_all(std::size_t channel) const;

private:
    void read_bytes(std::uint64_t pos, void* data, std::size_t n) const;
    void check_range(std::size_t channel, std::uint64_t offset, std::size_t count) const;

    std::filesystem::path path_;
    ContainerHeader header_;
    int fd_ = -1;
};

AnySeries read_container_channel(const std::filesystem::path& path, std::size_t channel);

// Consecutive non-overlapping segments of one channel.  A trailing partial
// segment is dropped and counted in discarded_samples().  Holds a single
// segment buffer regardless of file size.
class SegmentStream {
public:
    SegmentStream(const std::filesystem::path& path, std::size_t channel, std::uint64_t segment_len);

    std::uint64_t segment_count() const noexcept { return n_segments_; }
    std::uint64_t discarded_samples() const noexcept { return discarded_; }
    std::uint64_t segment_length() const noexcept { return segment_len_; }
    SampleFormat format() const noexcept { return reader_.header().format; }
    double sample_rate() const noexcept { return reader_.sample_rate(); }

    // Fills `out` with the next segment, reusing its storage when the
    // alternative matches.  Returns false at end of stream.
    bool next(AnySeries& out);
    std::optional<AnySeries> next();
    // Same, converted to millivolts.
    bool next_millivolts(std::vector<double>& out);

private:
    ContainerReader reader_;
    std::size_t channel_;
    std::uint64_t segment_len_;
    std::uint64_t n_segments_;
    std::uint64_t discarded_;
    std::uint64_t cursor_ = 0;
};

SegmentStream read_segments(const std::filesystem::path& path, std::size_t channel, std::uint64_t segment_len);

}  // namespace tidmad::io
