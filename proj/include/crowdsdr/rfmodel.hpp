#pragma once

// Simulated RF: log-distance channel with per-link shadowing, transmitter
// descriptions, and complex-baseband waveform synthesis. Baseband amplitudes
// are in sqrt(mW), so |s|^2 is instantaneous power in mW.

#include <complex>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "crowdsdr/geo.hpp"

namespace crowdsdr::rf {

using Baseband = std::vector<std::complex<double>>;

inline constexpr double kSpeedOfLight = 299'792'458.0;
inline constexpr double kMinTunableHz = 137e6;
inline constexpr double kMaxTunableHz = 950e6;
inline constexpr double kNoNoise = -std::numeric_limits<double>::infinity();

class RfError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Free-space loss at distance d0 for carrier `freq_hz`: 20·log10(4π·d0/λ).
double free_space_pl0_db(double freq_hz, double d0_m = 1.0);

struct ChannelModel {
    double pl0_db = free_space_pl0_db(910e6);
    double d0_m = 1.0;
    double exponent_n = 3.0;
    double shadowing_sigma_db = 0.0;
    double noise_floor_dbm = -100.0;
    double min_rx_dbm = -150.0;  // received_power never reports below this
    std::uint64_t seed = 0;

    void validate() const;
};

/// Stable 64-bit key for a (transmitter, receiver) pair.
std::uint64_t link_key(std::string_view tx_id, std::string_view rx_id);

/// Shadowing for one link: N(0, σ²) drawn once from (seed, link_id).
double shadowing_db(const ChannelModel& ch, std::uint64_t link_id);

double path_loss_db(double d_m, const ChannelModel& ch, std::uint64_t link_id);

struct FskParams {
    double symbol_rate_hz = 5000.0;
    double deviation_hz = 2000.0;
    int preamble_len_bytes = 4;
    std::vector<std::uint8_t> sync_word{0xD3, 0x91};

    double samples_per_symbol(double fs_hz) const { return fs_hz / symbol_rate_hz; }
    /// Throws RfError unless symbol_rate > 0, deviation < rx_bandwidth/2 and
    /// the sync word is 2..4 bytes.
    void validate(double rx_bandwidth_hz) const;
};

struct CwWave {};

struct FskWave {
    std::vector<std::uint8_t> frame;  // already framed bytes
    FskParams params;
    double clock_skew = 0.0;  // fractional symbol-clock error of the transmitter
};

using Waveform = std::variant<CwWave, FskWave>;

struct Transmitter {
    std::string id;
    geo::GeoPoint position;
    double power_dbm = 0.0;
    double freq_hz = 910e6;
    Waveform waveform = CwWave{};
    double antenna_gain_dbi = 0.0;
};

struct IsmBand {
    double lo_hz;
    double hi_hz;
};

/// Sub-GHz ISM allocations the firmware permits transmission in.
std::vector<IsmBand> default_ism_bands();

bool in_tunable_range(double freq_hz);
bool in_ism_band(double freq_hz, std::span<const IsmBand> bands);

/// Received power in dBm. Distance below d0 (including coincident endpoints)
/// is clamped to d0.
double received_power_dbm(const Transmitter& tx, geo::GeoPoint rx_pos, double rx_gain_dbi,
                          const ChannelModel& ch, std::uint64_t link_id);
double received_power_at_distance(double d_m, double tx_power_dbm, double gains_dbi,
                                  const ChannelModel& ch, std::uint64_t link_id);

/// Continuous-phase 2-FSK phase trajectory with rectangular pulses, evaluated
/// in continuous time so receivers can sample it on their own clocks.
class CpfskTrack {
public:
    CpfskTrack(std::span<const std::uint8_t> frame, const FskParams& p, double clock_skew = 0.0);

    double duration_s() const;
    std::size_t bit_count() const { return bits_.size(); }
    /// Baseband phase (radians) at time t since the first symbol; held at the
    /// final value past the end.
    double phase_at(double t) const;
    /// Instantaneous frequency (Hz) at t; 0 outside the burst.
    double freq_at(double t) const;

private:
    std::vector<std::int8_t> bits_;  // ±1 per bit, MSB first
    std::vector<double> phase_start_;
    double symbol_rate_;
    double deviation_;
};

Baseband synth_cw(double freq_offset_hz, double fs_hz, std::size_t n_samples, double amplitude);

/// Unit-magnitude CPFSK baseband for an already framed byte sequence.
Baseband synth_fsk(std::span<const std::uint8_t> frame, const FskParams& p, double fs_hz,
                   double clock_skew = 0.0);

/// Scales a unit-power stream to `target_power_dbm` and adds complex white
/// Gaussian noise of power `noise_floor_dbm`. kNoNoise disables the noise.
Baseband add_noise(Baseband stream, double target_power_dbm, double noise_floor_dbm,
                   std::uint64_t seed);

double dbm_to_mw(double dbm);
double mw_to_dbm(double mw);
double mean_power_mw(std::span<const std::complex<double>> s);

/// SplitMix64 finalizer; used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace crowdsdr::rf
