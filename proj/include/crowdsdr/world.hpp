#pragma once

// The shared RF environment: a channel model plus the set of transmissions
// that devices have keyed up, each with an activity interval in simulation
// time. Devices sample it to build their receive streams.

#include <complex>
#include <cstdint>
#include <memory>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "crowdsdr/rfmodel.hpp"

namespace crowdsdr::rf {

inline constexpr double kForever = std::numeric_limits<double>::infinity();

struct Transmission {
    std::uint64_t id = 0;
    Transmitter tx;
    double t_start = 0.0;
    double t_end = kForever;
    std::shared_ptr<const CpfskTrack> track;  // set for FSK waveforms
};

/// One transmission as seen by a particular receiver over a short block.
struct SignalComponent {
    double amplitude = 0.0;  // sqrt(mW)
    double freq_offset_hz = 0.0;
    double phase0 = 0.0;
    double t_start = 0.0;
    double t_end = kForever;
    std::shared_ptr<const CpfskTrack> track;
};

std::complex<double> evaluate(std::span<const SignalComponent> comps, double t);

class World {
public:
    explicit World(ChannelModel ch = {}, std::vector<IsmBand> bands = default_ism_bands());

    const ChannelModel& channel() const { return channel_; }
    std::span<const IsmBand> ism_bands() const { return bands_; }

    /// Keys up a transmitter. FSK bursts end on their own; CW runs until
    /// `t_end` or stop().
    std::uint64_t start(Transmitter tx, double t_start, double t_end = kForever);
    void stop(std::uint64_t id, double t);
    const Transmission* find(std::uint64_t id) const;
    std::span<const Transmission> transmissions() const { return txs_; }

    /// Components overlapping [t0, t1) that fall inside the receiver's
    /// passband (|offset| < bandwidth/2).
    std::vector<SignalComponent> components(std::string_view rx_id, geo::GeoPoint rx_pos, double rx_gain_dbi,
                                            double tuned_hz, double bandwidth_hz, double t0, double t1) const;

private:
    ChannelModel channel_;
    std::vector<IsmBand> bands_;
    std::vector<Transmission> txs_;
    std::uint64_t next_id_ = 1;
};

}  // namespace crowdsdr::rf
