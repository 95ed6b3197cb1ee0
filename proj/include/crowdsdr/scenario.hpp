#pragma once

// Scenario files and the virtual-time fleet simulation that runs them.
// Schema: docs/scenario.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdsdr/gateway.hpp"
#include "crowdsdr/server.hpp"

namespace crowdsdr::scenario {

class ScenarioError : public std::invalid_argument {
public:
    explicit ScenarioError(std::vector<std::string> problems);
    const std::vector<std::string>& problems() const { return problems_; }

private:
    std::vector<std::string> problems_;
};

struct DeviceSpec {
    gw::GatewayConfig gateway;
    device::DeviceConfig device;
};

struct StaticTransmitter {
    rf::Transmitter tx;
    double t_start = 0.0;
    double t_end = rf::kForever;
};

struct ScenarioConfig {
    std::uint64_t seed = 0;
    double duration_s = 0.0;
    double step_s = 1.0;
    rf::ChannelModel channel;
    geo::GeoPoint origin;
    std::vector<DeviceSpec> devices;  // sorted by id
    std::vector<StaticTransmitter> transmitters;
    std::vector<server::ScriptEntry> script;  // expanded, time-ordered
    std::vector<server::RoundRobin> round_robins;
};

/// Collects every problem before throwing ScenarioError.
ScenarioConfig parse_scenario(const nlohmann::json& j);
ScenarioConfig load_scenario(const std::filesystem::path& p);

struct SimOptions {
    std::optional<std::filesystem::path> out_dir;
    std::optional<std::string> connect_host;  // forward records to a running server
    int connect_port = 0;
    bool realtime = false;
};

struct PathLossPair {
    std::string tx;
    std::string rx;
    double distance_m = 0.0;
    double rssi_dbm = 0.0;
};

struct SimResult {
    std::vector<meas::Measurement> records;  // server contents, time-ordered
    std::string log;                          // NDJSON of `records`
    nlohmann::json summary;
    std::vector<PathLossPair> pairs;
    server::ScriptReport report;
};

SimResult simulate(const ScenarioConfig& cfg, const SimOptions& opts = {});

}  // namespace crowdsdr::scenario
