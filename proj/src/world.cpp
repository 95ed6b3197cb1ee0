#include "crowdsdr/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace crowdsdr::rf {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

std::complex<double> evaluate(std::span<const SignalComponent> comps, double t) {
    std::complex<double> acc{};
    for (const auto& c : comps) {
        if (t < c.t_start || t >= c.t_end) continue;
        const double rel = t - c.t_start;
        double ph = c.phase0 + std::remainder(kTwoPi * c.freq_offset_hz * rel, kTwoPi);
        if (c.track) ph += c.track->phase_at(rel);
        acc += std::polar(c.amplitude, ph);
    }
    return acc;
}

World::World(ChannelModel ch, std::vector<IsmBand> bands) : channel_(ch), bands_(std::move(bands)) {
    channel_.validate();
}

std::uint64_t World::start(Transmitter tx, double t_start, double t_end) {
    Transmission t;
    t.id = next_id_++;
    t.t_start = t_start;
    t.t_end = t_end;
    if (const auto* fsk = std::get_if<FskWave>(&tx.waveform)) {
        t.track = std::make_shared<const CpfskTrack>(fsk->frame, fsk->params, fsk->clock_skew);
        t.t_end = std::min(t_end, t_start + t.track->duration_s());
    }
    t.tx = std::move(tx);
    txs_.push_back(std::move(t));
    return txs_.back().id;
}

void World::stop(std::uint64_t id, double t) {
    for (auto& tx : txs_)
        if (tx.id == id) tx.t_end = std::min(tx.t_end, std::max(t, tx.t_start));
}

const Transmission* World::find(std::uint64_t id) const {
    auto it = std::find_if(txs_.begin(), txs_.end(), [&](const Transmission& t) { return t.id == id; });
    return it == txs_.end() ? nullptr : &*it;
}

std::vector<SignalComponent> World::components(std::string_view rx_id, geo::GeoPoint rx_pos, double rx_gain_dbi,
                                               double tuned_hz, double bandwidth_hz, double t0,
                                               double t1) const {
    std::vector<SignalComponent> out;
    for (const auto& t : txs_) {
        if (t.t_end <= t0 || t.t_start >= t1) continue;
        if (t.tx.id == rx_id) continue;
        const double offset = t.tx.freq_hz - tuned_hz;
        if (std::abs(offset) >= bandwidth_hz / 2.0) continue;
        const auto link = link_key(t.tx.id, rx_id);
        const double p_dbm = received_power_dbm(t.tx, rx_pos, rx_gain_dbi, channel_, link);
        SignalComponent c;
        c.amplitude = std::sqrt(dbm_to_mw(p_dbm));
        c.freq_offset_hz = offset;
        c.phase0 = static_cast<double>(mix_seed(mix_seed(channel_.seed, t.id), link) >> 11) * 0x1.0p-53 * kTwoPi;
        c.t_start = t.t_start;
        c.t_end = t.t_end;
        c.track = t.track;
        out.push_back(c);
    }
    return out;
}

}  // namespace crowdsdr::rf
