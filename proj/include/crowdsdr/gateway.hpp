#pragma once

// Phone-side relay between one device and the server: GPS annotation from a
// mobility trace, live vs logging delivery, min-RTT clock sync over the
// serial link, and upload of logged records.

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "crowdsdr/command.hpp"
#include "crowdsdr/device.hpp"
#include "crowdsdr/measurement.hpp"

namespace crowdsdr::gw {

struct Waypoint {
    double t = 0.0;
    geo::GeoPoint pos;
};

/// Piecewise-linear track; clamps before the first and after the last point.
class MobilityTrace {
public:
    MobilityTrace() = default;
    explicit MobilityTrace(std::vector<Waypoint> points);
    static MobilityTrace stationary(geo::GeoPoint p) { return MobilityTrace({{0.0, p}}); }

    geo::GeoPoint position(double t) const;
    const std::vector<Waypoint>& points() const { return points_; }

private:
    std::vector<Waypoint> points_;
};

struct Interval {
    double t0 = 0.0;
    double t1 = 0.0;
};

/// Cellular/WiFi availability: up except during the listed intervals.
struct UplinkTrace {
    std::vector<Interval> down;

    bool up(double t) const;
    /// Earliest time >= t at which the uplink is up.
    double next_up(double t) const;
};

enum class GatewayMode { Live, Logging };

/// Serial (Bluetooth) command latency, one-way, with exponential jitter.
struct SerialDelay {
    double up_s = 0.004;    // gateway to device
    double down_s = 0.004;  // device to gateway
    double jitter_mean_s = 0.002;
};

struct GatewayConfig {
    std::string device_id;
    MobilityTrace mobility;
    UplinkTrace uplink;
    GatewayMode mode = GatewayMode::Live;
    double fix_noise_m = 0.0;
    SerialDelay serial;
    std::uint64_t seed = 0;
    bool reachable = true;
};

class SyncFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClockSyncResult {
    std::vector<double> rtts;
    std::size_t chosen = 0;
    double rtt_min = 0.0;
    double applied_offset_s = 0.0;  // change of the device clock
    double t_done = 0.0;
};

struct DeviceLine {
    std::string line;
};
struct ClockSyncAction {};
struct UploadAction {
    double t_start = 0.0;
};
using GatewayAction = std::variant<DeviceLine, ClockSyncAction, UploadAction>;

/// Maps a server command to the ordered device commands / gateway actions.
/// Throws CommandError for unknown kinds or bad parameters.
std::vector<GatewayAction> translate_server_command(const ServerCommand& cmd);

struct CommandOutcome {
    bool ok = true;
    std::string reason;
    std::vector<device::Response> responses;
};

struct UploadResult {
    std::size_t count = 0;
    double t_done = 0.0;
};

struct SessionStats {
    std::uint64_t produced = 0;
    std::uint64_t forwarded = 0;
    std::uint64_t dropped = 0;
    std::uint64_t logged = 0;
    std::uint64_t uploaded = 0;
    std::uint64_t pauses = 0;
    std::uint64_t discarded_samples = 0;
};

class GatewaySession {
public:
    GatewaySession(GatewayConfig cfg, device::DeviceConfig dev);

    const std::string& device_id() const { return cfg_.device_id; }
    const GatewayConfig& config() const { return cfg_; }
    device::Device& device() { return device_; }
    const device::Device& device() const { return device_; }
    GatewayMode mode() const { return cfg_.mode; }
    void set_mode(GatewayMode m) { cfg_.mode = m; }

    /// GPS fix at true time t.
    geo::GeoPoint fix(double t) const;

    /// Sends one raw line to the device at true time t.
    std::vector<device::Response> send_device(const std::string& line, double t, rf::World& world);

    /// Runs the device to t_end and routes its outputs.
    void step(double t_end, rf::World& world);

    CommandOutcome handle_server_command(const ServerCommand& cmd, double t, rf::World& world);

    ClockSyncResult clock_sync(double t, rf::World& world, std::size_t max_attempts = 10);

    UploadResult upload_from(double t_start, double t_now);

    /// Buffered handoff to the uplink: records ready to send at t_now, in
    /// emission order. Nothing leaves while the uplink is down.
    std::vector<meas::Measurement> drain_outbox(double t_now);
    std::size_t outbox_size() const { return outbox_.size(); }

    const std::vector<meas::Measurement>& log() const { return log_; }
    const SessionStats& stats() const { return stats_; }
    const std::vector<device::ReceivedText>& received() const { return received_; }
    const std::vector<device::LockReport>& locks() const { return locks_; }

private:
    void route(std::vector<device::Output> outs);
    double serial_delay(double base);

    GatewayConfig cfg_;
    device::Device device_;
    std::mt19937_64 rng_;
    std::vector<meas::Measurement> log_;
    std::deque<meas::Measurement> outbox_;
    std::vector<device::ReceivedText> received_;
    std::vector<device::LockReport> locks_;
    SessionStats stats_;
    std::uint32_t clock_seq_ = 0;
};

}  // namespace crowdsdr::gw
