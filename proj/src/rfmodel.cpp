#include "crowdsdr/rfmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace crowdsdr::rf {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double free_space_pl0_db(double freq_hz, double d0_m) {
    const double lambda = kSpeedOfLight / freq_hz;
    return 20.0 * std::log10(4.0 * std::numbers::pi * d0_m / lambda);
}

void ChannelModel::validate() const {
    if (!(d0_m > 0.0)) throw RfError("channel: d0_m must be positive");
    if (!(exponent_n >= 1.0)) throw RfError("channel: exponent_n must be >= 1");
    if (!(shadowing_sigma_db >= 0.0)) throw RfError("channel: shadowing_sigma_db must be >= 0");
}

std::uint64_t link_key(std::string_view tx_id, std::string_view rx_id) {
    // FNV-1a over "tx\0rx"
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto feed = [&h](std::string_view s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ULL;
        }
    };
    feed(tx_id);
    h ^= 0;
    h *= 0x100000001B3ULL;
    feed(rx_id);
    return h;
}

double shadowing_db(const ChannelModel& ch, std::uint64_t link_id) {
    if (ch.shadowing_sigma_db == 0.0) return 0.0;
    std::mt19937_64 rng(mix_seed(ch.seed, link_id));
    std::normal_distribution<double> n(0.0, ch.shadowing_sigma_db);
    return n(rng);
}

double path_loss_db(double d_m, const ChannelModel& ch, std::uint64_t link_id) {
    if (!(d_m > 0.0)) throw RfError("path_loss: distance must be positive");
    return ch.pl0_db + 10.0 * ch.exponent_n * std::log10(d_m / ch.d0_m) + shadowing_db(ch, link_id);
}

void FskParams::validate(double rx_bandwidth_hz) const {
    if (!(symbol_rate_hz > 0.0)) throw RfError("fsk: symbol rate must be positive");
    if (!(deviation_hz > 0.0) || !(deviation_hz < rx_bandwidth_hz / 2.0))
        throw RfError("fsk: deviation must be below half the receiver bandwidth");
    if (sync_word.size() < 2 || sync_word.size() > 4) throw RfError("fsk: sync word must be 2..4 bytes");
    if (preamble_len_bytes < 0) throw RfError("fsk: negative preamble length");
}

std::vector<IsmBand> default_ism_bands() {
    return {{433.05e6, 434.79e6}, {863e6, 870e6}, {902e6, 928e6}};
}

bool in_tunable_range(double freq_hz) { return freq_hz >= kMinTunableHz && freq_hz <= kMaxTunableHz; }

bool in_ism_band(double freq_hz, std::span<const IsmBand> bands) {
    return std::any_of(bands.begin(), bands.end(),
                       [&](const IsmBand& b) { return freq_hz >= b.lo_hz && freq_hz <= b.hi_hz; });
}

double received_power_at_distance(double d_m, double tx_power_dbm, double gains_dbi,
                                  const ChannelModel& ch, std::uint64_t link_id) {
    const double d = std::max(d_m, ch.d0_m);
    return std::max(tx_power_dbm + gains_dbi - path_loss_db(d, ch, link_id), ch.min_rx_dbm);
}

double received_power_dbm(const Transmitter& tx, geo::GeoPoint rx_pos, double rx_gain_dbi,
                          const ChannelModel& ch, std::uint64_t link_id) {
    return received_power_at_distance(geo::distance_m(tx.position, rx_pos), tx.power_dbm,
                                      tx.antenna_gain_dbi + rx_gain_dbi, ch, link_id);
}

CpfskTrack::CpfskTrack(std::span<const std::uint8_t> frame, const FskParams& p, double clock_skew)
    : symbol_rate_(p.symbol_rate_hz * (1.0 + clock_skew)), deviation_(p.deviation_hz) {
    if (!(symbol_rate_ > 0.0)) throw RfError("fsk: symbol rate must be positive");
    bits_.reserve(frame.size() * 8);
    for (std::uint8_t byte : frame)
        for (int b = 7; b >= 0; --b) bits_.push_back(((byte >> b) & 1) ? 1 : -1);
    phase_start_.resize(bits_.size() + 1);
    double ph = 0.0;
    const double per_symbol = kTwoPi * deviation_ / symbol_rate_;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        phase_start_[i] = ph;
        ph = std::remainder(ph + bits_[i] * per_symbol, kTwoPi);
    }
    phase_start_[bits_.size()] = ph;
}

double CpfskTrack::duration_s() const { return static_cast<double>(bits_.size()) / symbol_rate_; }

double CpfskTrack::phase_at(double t) const {
    if (bits_.empty() || t <= 0.0) return 0.0;
    const double pos = t * symbol_rate_;
    if (pos >= static_cast<double>(bits_.size())) return phase_start_.back();
    const auto i = static_cast<std::size_t>(pos);
    const double into = (pos - static_cast<double>(i)) / symbol_rate_;
    return phase_start_[i] + kTwoPi * deviation_ * bits_[i] * into;
}

double CpfskTrack::freq_at(double t) const {
    if (bits_.empty() || t < 0.0) return 0.0;
    const double pos = t * symbol_rate_;
    if (pos >= static_cast<double>(bits_.size())) return 0.0;
    return deviation_ * bits_[static_cast<std::size_t>(pos)];
}

Baseband synth_cw(double freq_offset_hz, double fs_hz, std::size_t n_samples, double amplitude) {
    if (!(fs_hz > 0.0)) throw RfError("synth_cw: fs must be positive");
    if (std::abs(freq_offset_hz) >= fs_hz / 2.0) throw RfError("synth_cw: offset aliases (|offset| >= fs/2)");
    Baseband out(n_samples);
    const double step = kTwoPi * freq_offset_hz / fs_hz;
    for (std::size_t k = 0; k < n_samples; ++k)
        out[k] = std::polar(amplitude, std::remainder(step * static_cast<double>(k), kTwoPi));
    return out;
}

Baseband synth_fsk(std::span<const std::uint8_t> frame, const FskParams& p, double fs_hz, double clock_skew) {
    if (!(fs_hz > 0.0)) throw RfError("synth_fsk: fs must be positive");
    const CpfskTrack track(frame, p, clock_skew);
    const auto n = static_cast<std::size_t>(std::ceil(track.duration_s() * fs_hz));
    Baseband out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = std::polar(1.0, track.phase_at(static_cast<double>(k) / fs_hz));
    return out;
}

double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }
double mw_to_dbm(double mw) { return 10.0 * std::log10(mw); }

double mean_power_mw(std::span<const std::complex<double>> s) {
    if (s.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& v : s) acc += std::norm(v);
    return acc / static_cast<double>(s.size());
}

Baseband add_noise(Baseband stream, double target_power_dbm, double noise_floor_dbm, std::uint64_t seed) {
    const double scale = std::sqrt(dbm_to_mw(target_power_dbm));
    for (auto& v : stream) v *= scale;
    if (noise_floor_dbm == kNoNoise) return stream;
    std::mt19937_64 rng(mix_seed(seed, 0x6e6f697365ULL));
    std::normal_distribution<double> n(0.0, std::sqrt(dbm_to_mw(noise_floor_dbm) / 2.0));
    for (auto& v : stream) v += std::complex<double>(n(rng), n(rng));
    return stream;
}

}  // namespace crowdsdr::rf
