#pragma once

// High-level commands the server relays to gateways.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace crowdsdr {

class CommandError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// kind is one of: report_rssi, triggered_capture, continuous_capture,
/// clock, stop, transmit, upload, debug. Targets may contain "all".
struct ServerCommand {
    std::uint64_t id = 0;
    std::string kind;
    nlohmann::json params = nlohmann::json::object();
    std::vector<std::string> targets;

    /// Checks kind and per-kind parameters (not targets).
    void validate() const;
    nlohmann::json to_json() const;
    static ServerCommand from_json(const nlohmann::json& j);
};

const std::vector<std::string_view>& server_command_kinds();

}  // namespace crowdsdr
