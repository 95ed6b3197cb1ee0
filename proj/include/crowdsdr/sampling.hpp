#pragma once

// Receive data path of the device: CORDIC-style quantization, 3-byte sample
// compression, 244-byte packetization, the rotating-buffer capture pipeline
// with its pause counter, and timeline reconstruction on the far side.

#include <array>
#include <complex>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdsdr::sampling {

inline constexpr std::uint32_t kMagnitudeMax = (1u << 17) - 1;
inline constexpr int kAngleUnits = 1024;  // one full turn
inline constexpr std::size_t kPacketBytes = 244;
inline constexpr std::size_t kSamplesPerPacket = 81;       // magnitude+angle mode
inline constexpr std::size_t kAnglesPerPhasePacket = 192;  // angle-only mode, 48 groups of 4
inline constexpr double kPauseClockHz = 16e6;
inline constexpr std::int64_t kBufferSwitchTicks = 352;  // 22 µs buffer rotation
inline constexpr double kMaxFsMagnitude = 64000.0;
inline constexpr double kMaxFsPhase = 104000.0;

class SamplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct IQSample {
    std::uint32_t magnitude = 0;  // 17-bit linear
    std::int16_t angle = 0;       // signed 10-bit, 2π/1024 per unit

    bool operator==(const IQSample&) const = default;
};

using CompressedSample = std::array<std::uint8_t, 3>;
using PacketBytes = std::array<std::uint8_t, kPacketBytes>;

enum class CaptureMode { Magnitude, Phase };

std::string to_string(CaptureMode m);
CaptureMode capture_mode_from_string(const std::string& s);
std::size_t samples_per_packet(CaptureMode m);
double max_sample_rate(CaptureMode m);

IQSample quantize(std::complex<double> sample, double full_scale);
std::int16_t wrap_angle(int units);

/// Layout: bits 23..10 = magnitude >> 3, bits 9..0 = angle (two's
/// complement), big-endian.
CompressedSample compress(IQSample s);
IQSample decompress(std::span<const std::uint8_t, 3> bytes);

struct SamplePacket {
    std::uint8_t seq = 0;
    CaptureMode mode = CaptureMode::Magnitude;
    std::vector<IQSample> samples;
};

/// Magnitude mode: byte 0 = seq, then 81 compressed samples.
/// Phase mode: byte 0 = 0x80 | seq(7 bits), then 48 groups of four 10-bit
/// angles in 5 bytes each, 3 trailing zero bytes. Magnitudes decode as 0.
PacketBytes packetize(std::span<const IQSample> samples, std::uint8_t seq,
                      CaptureMode mode = CaptureMode::Magnitude);
SamplePacket depacketize(std::span<const std::uint8_t> bytes, CaptureMode mode = CaptureMode::Magnitude);

struct PauseRecord {
    std::uint64_t after_sample_index = 0;  // samples emitted before the pause
    std::uint64_t ticks = 0;               // 16 MHz counter value

    bool operator==(const PauseRecord&) const = default;
};

/// Device-to-gateway backhaul: sustained drain rate plus an exponential
/// per-packet delay.
struct LinkModel {
    std::string preset = "le-2m";
    double rate_bps = 1.3e6;
    double jitter_mean_s = 0.0;
    std::uint64_t seed = 0;

    /// Named presets: le-1m, le-2m, ideal, pocket, backpack, interferers-N (N = 0..4).
    static LinkModel from_preset(const std::string& name, std::uint64_t seed = 0);
    void validate() const;
};

struct PipelineResult {
    std::vector<PacketBytes> packets;
    std::vector<PauseRecord> pauses;
    std::uint64_t offered = 0;
    std::uint64_t emitted = 0;
    std::uint64_t discarded = 0;
    std::uint64_t padded = 0;  // zero samples used to complete the last packet
};

/// Incremental discrete-event model of the rotating-buffer capture path.
/// Samples are offered at j/fs; a full buffer becomes sendable 22 µs later
/// and drains over the link one packet at a time. With no buffer free,
/// capture pauses, offered samples are discarded, and the 16 MHz counter
/// runs from the first discarded sample until capture resumes.
class CapturePipeline {
public:
    CapturePipeline(double fs_hz, LinkModel link, CaptureMode mode = CaptureMode::Magnitude,
                    std::size_t n_buffers = 3);

    void offer(const IQSample& s);
    /// Pads and queues the partial buffer, drains the link, returns totals.
    PipelineResult finish();

    std::uint64_t offered() const { return offered_; }
    bool paused() const { return paused_; }

private:
    struct Queued {
        PacketBytes bytes;
        std::int64_t ready_tick;
        std::int64_t service_ticks;
    };

    std::int64_t arrival_tick(std::uint64_t j) const;
    std::int64_t draw_service_ticks();
    void advance_link(std::int64_t now);
    void queue_filling(std::int64_t now);

    double fs_;
    LinkModel link_;
    CaptureMode mode_;
    std::size_t n_buffers_;
    std::size_t capacity_;
    std::uint64_t rng_state_;

    bool filling_ = true;
    std::vector<IQSample> fill_;
    std::vector<Queued> queue_;  // FIFO, front is on the link next
    std::int64_t link_free_tick_ = 0;
    std::uint8_t seq_ = 0;
    bool paused_ = false;
    std::int64_t pause_start_tick_ = 0;

    std::uint64_t offered_ = 0;
    PipelineResult result_;
};

PipelineResult run_capture_pipeline(std::span<const IQSample> source, double fs_hz, const LinkModel& link,
                                    CaptureMode mode = CaptureMode::Magnitude, std::size_t n_buffers = 3);

/// Sample positions in 16 MHz ticks relative to the first sample.
std::vector<std::int64_t> reconstruct_ticks(std::size_t n_samples, std::span<const PauseRecord> pauses,
                                            double fs_hz);

struct TimedSample {
    double t = 0.0;
    IQSample sample;
};

/// Decodes packets in order (optionally truncated to `sample_count`) and
/// timestamps sample i at t0 + i/fs + Σ pause ticks/16e6 for pauses with
/// after_sample_index <= i.
std::vector<TimedSample> reconstruct_timeline(std::span<const PacketBytes> packets,
                                              std::span<const PauseRecord> pauses, double fs_hz, double t0,
                                              CaptureMode mode = CaptureMode::Magnitude,
                                              std::optional<std::size_t> sample_count = std::nullopt);

}  // namespace crowdsdr::sampling
