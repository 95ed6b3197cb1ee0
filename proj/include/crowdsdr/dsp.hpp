#pragma once

// Server-side processing of uploaded IQ captures: FM discrimination over the
// 10-bit angle circle, 2-FSK frame sync and iterative symbol-timing
// recovery, and cross-correlation alignment of captures from several
// devices.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdsdr/sampling.hpp"

namespace crowdsdr::dsp {

struct Capture {
    std::string device_id;
    double t0 = 0.0;  // device-clock time of samples[0]
    double fs_hz = 0.0;
    double freq_hz = 0.0;
    std::vector<sampling::IQSample> samples;  // uniform grid at fs_hz
};

/// Puts reconstructed samples onto a uniform grid. Slots lost to capture
/// pauses are filled with zero-magnitude samples that repeat the previous
/// angle, so the discriminator reads 0 Hz across the gap.
Capture capture_from_timeline(std::string device_id, std::span<const sampling::TimedSample> timeline,
                              double fs_hz, double freq_hz);

/// 16-bit integer magnitude/angle pairs: magnitude zero-extended, angle
/// wrapped onto the signed 10-bit circle.
std::vector<sampling::IQSample> samples_from_int16(std::span<const std::uint16_t> magnitude,
                                                   std::span<const std::int16_t> angle);

/// Instantaneous frequency in Hz. Element i is the frequency between samples
/// i and i+1 (n-1 values for n samples).
std::vector<double> discriminate(const Capture& c);

struct FrameConfig {
    int preamble_bytes = 4;  // 0xAA each
    std::vector<std::uint8_t> sync_word{0xD3, 0x91};

    void validate() const;
    std::size_t header_bits() const { return 8 * (static_cast<std::size_t>(preamble_bytes) + sync_word.size()); }
};

std::uint16_t crc16_ccitt(std::span<const std::uint8_t> data, std::uint16_t init = 0xFFFF);

/// preamble | sync | length | payload | CRC-16/CCITT(length+payload), big-endian.
std::vector<std::uint8_t> build_frame(std::span<const std::uint8_t> payload, const FrameConfig& cfg = {});

struct CoarseParams {
    double fs_hz = 64000.0;
    double symbol_rate_hz = 5000.0;
    double deviation_hz = 2000.0;
    double max_rate_error = 0.01;  // searched symbol-rate mismatch, fractional
    double min_score = 0.6;
};

struct FrameDetection {
    double start = 0.0;  // sample-index position of the first preamble symbol edge
    double samples_per_symbol = 0.0;
    double freq_offset_hz = 0.0;
    double deviation_hz = 0.0;
    double score = 0.0;  // normalized correlation with the preamble+sync template
};

std::optional<FrameDetection> detect_frame(std::span<const double> freq, const FrameConfig& cfg,
                                           const CoarseParams& coarse);

struct DemodDiagnostics {
    FrameDetection detection;
    double start = 0.0;
    double samples_per_symbol = 0.0;
    double freq_offset_hz = 0.0;
    int iterations = 0;
    double last_correction_symbols = 0.0;
};

struct DemodResult {
    std::vector<std::uint8_t> payload;
    DemodDiagnostics diag;
};

class DemodError : public std::runtime_error {
public:
    enum class Kind { NoFrame, Crc };

    DemodError(Kind kind, const std::string& what, std::vector<std::uint8_t> raw = {}, DemodDiagnostics diag = {})
        : std::runtime_error(what), kind_(kind), raw_(std::move(raw)), diag_(diag) {}

    Kind kind() const { return kind_; }
    const std::vector<std::uint8_t>& raw_bytes() const { return raw_; }
    const DemodDiagnostics& diagnostics() const { return diag_; }

private:
    Kind kind_;
    std::vector<std::uint8_t> raw_;
    DemodDiagnostics diag_;
};

DemodResult demodulate_fsk(const Capture& c, const FrameConfig& cfg, const CoarseParams& coarse);

struct AlignResult {
    std::size_t reference = 0;
    std::vector<double> lags;   // samples on the shared timestamp timeline; 0 for the reference
    std::vector<double> peaks;  // normalized correlation at the chosen lag
    std::vector<bool> reliable;
};

class AlignError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Lag of each capture relative to `captures[reference]`: positive when the
/// waveform appears later on the timestamp timeline. Searches ±window samples
/// around the timestamp-implied alignment.
AlignResult align_captures(std::span<const Capture> captures, std::size_t window, std::size_t reference = 0,
                           double min_peak = 0.5);

}  // namespace crowdsdr::dsp
