#pragma once

// Command-and-control core: client registry, command dispatch to gateway
// sinks, measurement ingestion, scripting, and trigger-based clock offsets.
// Transport-agnostic; net.hpp puts it on TCP and HTTP.

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "crowdsdr/command.hpp"
#include "crowdsdr/measurement.hpp"
#include "crowdsdr/store.hpp"

namespace crowdsdr::server {

struct ClientRecord {
    std::string device_id;
    double last_seen_ts = 0.0;
    std::optional<geo::GeoPoint> last_position;
    bool connected = false;
    nlohmann::json caps = nlohmann::json::object();
    std::uint64_t session = 0;
};

nlohmann::json to_json(const ClientRecord& c);

/// Delivers one command to a gateway; false when the gateway is unreachable.
using CommandSink = std::function<bool(const ServerCommand&)>;

class ClientRegistry {
public:
    /// hello payload {device_id, caps}. Replaces any live session for the
    /// same id (its sink is dropped). Returns the new session number.
    std::uint64_t register_client(const nlohmann::json& hello, CommandSink sink, double now = 0.0);
    /// Marks the session disconnected if it is still the current one.
    void disconnect(const std::string& device_id, std::uint64_t session);
    void touch(const meas::Measurement& m);
    std::vector<ClientRecord> list() const;
    std::vector<std::string> connected_ids() const;
    std::size_t size() const;
    /// Current sink, or empty when not connected.
    CommandSink sink(const std::string& device_id) const;

private:
    mutable std::mutex mu_;
    std::map<std::string, ClientRecord> clients_;
    std::map<std::string, CommandSink> sinks_;
    std::uint64_t next_session_ = 1;
};

struct Receipt {
    std::string device_id;
    bool ok = false;
    std::string reason;
};

struct DispatchResult {
    std::uint64_t cmd_id = 0;
    std::vector<Receipt> receipts;
    std::size_t acked() const;
    std::size_t failed() const;
};

nlohmann::json to_json(const DispatchResult& r);

struct ScriptEntry {
    double t = 0.0;
    ServerCommand cmd;
};

/// Stop-all then Transmit from devices[i] and ReportRSSI from the rest,
/// for each i in turn, `dwell_s` apart; a final Stop closes the last epoch.
struct RoundRobin {
    double t_start = 0.0;
    std::vector<std::string> devices;
    double dwell_s = 10.0;
    double freq_hz = 910e6;
    double power_dbm = 20.0;
    double rssi_rate_hz = 1.0;
    bool lock = false;
};

std::vector<ScriptEntry> expand_round_robin(const RoundRobin& rr);

struct ScriptReport {
    struct Line {
        double t = 0.0;
        std::string kind;
        DispatchResult result;
        std::string error;
    };
    std::vector<Line> lines;
    std::size_t failures = 0;
};

nlohmann::json to_json(const ScriptReport& r);

class Server {
public:
    Server() = default;
    explicit Server(std::filesystem::path log_path) : store_(std::move(log_path)) {}

    ClientRegistry& registry() { return registry_; }
    const ClientRegistry& registry() const { return registry_; }
    MeasurementStore& store() { return store_; }
    const MeasurementStore& store() const { return store_; }

    /// Validates and stores; SchemaError propagates for invalid records.
    IngestResult ingest(const meas::Measurement& m);
    IngestResult ingest_json(const nlohmann::json& j);
    std::vector<meas::Measurement> query(const QueryFilter& f) const { return store_.query(f); }

    /// One message per target; "all" expands to every connected client.
    /// Throws CommandError on an empty target set or invalid command.
    DispatchResult dispatch(ServerCommand cmd);

    /// Runs entries in order, calling advance(t) before each time step.
    /// Entries must be sorted by time.
    ScriptReport run_script(const std::vector<ScriptEntry>& script, const std::function<void(double)>& advance);

private:
    MeasurementStore store_;
    ClientRegistry registry_;
    std::mutex cmd_mu_;
    std::uint64_t next_cmd_ = 1;
};

/// offset_i = t_i - t_ref for the first trigger record of each device
/// (propagation delay neglected).
std::map<std::string, double> estimate_clock_offsets(const std::vector<meas::Measurement>& triggers,
                                                     const std::string& reference);

}  // namespace crowdsdr::server
