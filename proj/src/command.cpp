#include "crowdsdr/command.hpp"

#include <algorithm>
#include <cmath>

namespace crowdsdr {

using nlohmann::json;

const std::vector<std::string_view>& server_command_kinds() {
    static const std::vector<std::string_view> kinds{"report_rssi", "triggered_capture", "continuous_capture",
                                                     "clock",       "stop",              "transmit",
                                                     "upload",      "debug"};
    return kinds;
}

namespace {

double require_number(const json& p, const char* key) {
    if (!p.contains(key) || !p[key].is_number()) throw CommandError(std::string("params.") + key + ": expected number");
    const double v = p[key].get<double>();
    if (!std::isfinite(v)) throw CommandError(std::string("params.") + key + ": not finite");
    return v;
}

void optional_number(const json& p, const char* key) {
    if (p.contains(key)) require_number(p, key);
}

void positive(const json& p, const char* key) {
    if (!(require_number(p, key) > 0.0)) throw CommandError(std::string("params.") + key + ": must be positive");
}

}  // namespace

void ServerCommand::validate() const {
    const auto& kinds = server_command_kinds();
    if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end())
        throw CommandError("kind: unknown command '" + kind + "'");
    if (!params.is_object()) throw CommandError("params: expected object");
    const auto& p = params;
    if (kind == "report_rssi") {
        positive(p, "freq_hz");
        optional_number(p, "rate_hz");
        optional_number(p, "count");
        if (p.contains("source") && p["source"] != "direct" && p["source"] != "calculated")
            throw CommandError("params.source: expected direct or calculated");
    } else if (kind == "triggered_capture") {
        positive(p, "freq_hz");
        positive(p, "fs_hz");
        require_number(p, "threshold_dbm");
        optional_number(p, "count");
        optional_number(p, "pretrigger");
    } else if (kind == "continuous_capture") {
        positive(p, "freq_hz");
        positive(p, "fs_hz");
        optional_number(p, "count");
        if (p.contains("mode") && p["mode"] != "magnitude" && p["mode"] != "phase")
            throw CommandError("params.mode: expected magnitude or phase");
    } else if (kind == "transmit") {
        require_number(p, "freq_hz");
        require_number(p, "power_dbm");
        if (p.contains("text") && !p["text"].is_string()) throw CommandError("params.text: expected string");
    } else if (kind == "upload") {
        optional_number(p, "t_start");
    } else if (kind == "debug") {
        if (!p.contains("raw") || !p["raw"].is_string()) throw CommandError("params.raw: expected string");
    }
}

json ServerCommand::to_json() const {
    return json{{"cmd_id", id}, {"kind", kind}, {"params", params}, {"targets", targets}};
}

ServerCommand ServerCommand::from_json(const json& j) {
    if (!j.is_object()) throw CommandError("command: expected object");
    ServerCommand c;
    if (j.contains("cmd_id")) {
        if (!j["cmd_id"].is_number_unsigned()) throw CommandError("cmd_id: expected non-negative integer");
        c.id = j["cmd_id"].get<std::uint64_t>();
    }
    if (!j.contains("kind") || !j["kind"].is_string()) throw CommandError("kind: expected string");
    c.kind = j["kind"].get<std::string>();
    if (j.contains("params")) c.params = j["params"];
    if (j.contains("targets")) {
        if (!j["targets"].is_array()) throw CommandError("targets: expected array");
        for (const auto& t : j["targets"]) {
            if (!t.is_string()) throw CommandError("targets[]: expected string");
            c.targets.push_back(t.get<std::string>());
        }
    }
    c.validate();
    return c;
}

}  // namespace crowdsdr
