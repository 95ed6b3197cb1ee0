#include "crowdsdr/server.hpp"

#include <algorithm>
#include <stdexcept>

namespace crowdsdr::server {

using nlohmann::json;

json to_json(const ClientRecord& c) {
    json j{{"device_id", c.device_id}, {"last_seen_ts", c.last_seen_ts}, {"connected", c.connected}, {"caps", c.caps}};
    if (c.last_position)
        j["last_position"] = {{"lat", c.last_position->lat}, {"lon", c.last_position->lon}};
    else
        j["last_position"] = nullptr;
    return j;
}

std::uint64_t ClientRegistry::register_client(const json& hello, CommandSink sink, double now) {
    if (!hello.is_object() || !hello.contains("device_id") || !hello["device_id"].is_string())
        throw std::invalid_argument("hello: device_id missing");
    const auto id = hello["device_id"].get<std::string>();
    if (id.empty()) throw std::invalid_argument("hello: device_id empty");
    std::lock_guard lk(mu_);
    auto& rec = clients_[id];
    rec.device_id = id;
    rec.connected = true;
    rec.session = next_session_++;
    rec.last_seen_ts = std::max(rec.last_seen_ts, now);
    if (hello.contains("caps")) rec.caps = hello["caps"];
    sinks_[id] = std::move(sink);
    return rec.session;
}

void ClientRegistry::disconnect(const std::string& device_id, std::uint64_t session) {
    std::lock_guard lk(mu_);
    auto it = clients_.find(device_id);
    if (it == clients_.end() || it->second.session != session) return;
    it->second.connected = false;
    sinks_.erase(device_id);
}

void ClientRegistry::touch(const meas::Measurement& m) {
    std::lock_guard lk(mu_);
    auto it = clients_.find(m.device_id);
    if (it == clients_.end()) return;
    if (m.ts >= it->second.last_seen_ts) {
        it->second.last_seen_ts = m.ts;
        it->second.last_position = geo::GeoPoint{m.lat, m.lon};
    }
}

std::vector<ClientRecord> ClientRegistry::list() const {
    std::lock_guard lk(mu_);
    std::vector<ClientRecord> out;
    for (const auto& [id, rec] : clients_)
        if (rec.connected) out.push_back(rec);
    return out;
}

std::vector<std::string> ClientRegistry::connected_ids() const {
    std::lock_guard lk(mu_);
    std::vector<std::string> out;
    for (const auto& [id, rec] : clients_)
        if (rec.connected) out.push_back(id);
    return out;
}

std::size_t ClientRegistry::size() const {
    std::lock_guard lk(mu_);
    return static_cast<std::size_t>(
        std::count_if(clients_.begin(), clients_.end(), [](const auto& kv) { return kv.second.connected; }));
}

CommandSink ClientRegistry::sink(const std::string& device_id) const {
    std::lock_guard lk(mu_);
    auto it = sinks_.find(device_id);
    return it == sinks_.end() ? CommandSink{} : it->second;
}

std::size_t DispatchResult::acked() const {
    return static_cast<std::size_t>(std::count_if(receipts.begin(), receipts.end(), [](auto& r) { return r.ok; }));
}

std::size_t DispatchResult::failed() const { return receipts.size() - acked(); }

json to_json(const DispatchResult& r) {
    json rs = json::array();
    for (const auto& x : r.receipts) rs.push_back({{"device_id", x.device_id}, {"ok", x.ok}, {"reason", x.reason}});
    return json{{"cmd_id", r.cmd_id}, {"acked", r.acked()}, {"failed", r.failed()}, {"receipts", rs}};
}

IngestResult Server::ingest(const meas::Measurement& m) {
    if (m.device_id.empty()) throw meas::SchemaError("device_id: empty");
    if (!geo::valid({m.lat, m.lon})) throw meas::SchemaError("lat/lon: out of range");
    auto r = store_.ingest(m);
    registry_.touch(m);
    return r;
}

IngestResult Server::ingest_json(const json& j) { return ingest(meas::from_json(j)); }

DispatchResult Server::dispatch(ServerCommand cmd) {
    cmd.validate();
    std::vector<std::string> targets;
    for (const auto& t : cmd.targets) {
        if (t == "all") {
            for (auto& id : registry_.connected_ids()) targets.push_back(std::move(id));
        } else {
            targets.push_back(t);
        }
    }
    std::sort(targets.begin(), targets.end());
    targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
    if (targets.empty()) throw CommandError("targets: empty");
    {
        std::lock_guard lk(cmd_mu_);
        cmd.id = next_cmd_++;
    }
    cmd.targets = targets;
    DispatchResult res;
    res.cmd_id = cmd.id;
    for (const auto& t : targets) {
        Receipt r{t, false, {}};
        auto sink = registry_.sink(t);
        if (!sink) {
            r.reason = "not connected";
        } else {
            ServerCommand one = cmd;
            one.targets = {t};
            r.ok = sink(one);
            if (!r.ok) r.reason = "delivery failed";
        }
        res.receipts.push_back(std::move(r));
    }
    return res;
}

std::vector<ScriptEntry> expand_round_robin(const RoundRobin& rr) {
    if (rr.devices.size() < 2) throw std::invalid_argument("round_robin: need at least 2 devices");
    if (!(rr.dwell_s > 0.0)) throw std::invalid_argument("round_robin: dwell must be positive");
    std::vector<ScriptEntry> out;
    for (std::size_t i = 0; i < rr.devices.size(); ++i) {
        const double t = rr.t_start + static_cast<double>(i) * rr.dwell_s;
        out.push_back({t, {0, "stop", json::object(), rr.devices}});
        out.push_back({t, {0, "transmit", {{"freq_hz", rr.freq_hz}, {"power_dbm", rr.power_dbm}}, {rr.devices[i]}}});
        std::vector<std::string> others;
        for (std::size_t k = 0; k < rr.devices.size(); ++k)
            if (k != i) others.push_back(rr.devices[k]);
        json p{{"freq_hz", rr.freq_hz}, {"rate_hz", rr.rssi_rate_hz}};
        if (rr.lock) p["lock"] = true;
        out.push_back({t, {0, "report_rssi", p, others}});
    }
    out.push_back({rr.t_start + static_cast<double>(rr.devices.size()) * rr.dwell_s,
                   {0, "stop", json::object(), rr.devices}});
    return out;
}

json to_json(const ScriptReport& r) {
    json lines = json::array();
    for (const auto& l : r.lines) {
        json j{{"t", l.t}, {"kind", l.kind}, {"result", to_json(l.result)}};
        if (!l.error.empty()) j["error"] = l.error;
        lines.push_back(std::move(j));
    }
    return json{{"lines", lines}, {"failures", r.failures}};
}

ScriptReport Server::run_script(const std::vector<ScriptEntry>& script, const std::function<void(double)>& advance) {
    for (std::size_t i = 1; i < script.size(); ++i)
        if (script[i].t < script[i - 1].t) throw std::invalid_argument("script: times must be non-decreasing");
    ScriptReport rep;
    for (const auto& e : script) {
        if (advance) advance(e.t);
        ScriptReport::Line line;
        line.t = e.t;
        line.kind = e.cmd.kind;
        try {
            line.result = dispatch(e.cmd);
            rep.failures += line.result.failed();
        } catch (const std::exception& ex) {
            line.error = ex.what();
            ++rep.failures;
        }
        rep.lines.push_back(std::move(line));
    }
    return rep;
}

std::map<std::string, double> estimate_clock_offsets(const std::vector<meas::Measurement>& triggers,
                                                     const std::string& reference) {
    std::map<std::string, double> first;
    for (const auto& m : triggers) {
        if (m.kind != meas::Kind::Trigger) continue;
        auto it = first.find(m.device_id);
        if (it == first.end() || m.ts < it->second) first[m.device_id] = m.ts;
    }
    if (first.size() < 2) throw std::invalid_argument("clock offsets: need triggers from at least 2 devices");
    auto ref = first.find(reference);
    if (ref == first.end()) throw std::invalid_argument("clock offsets: reference '" + reference + "' has no trigger");
    std::map<std::string, double> out;
    for (const auto& [id, t] : first) out[id] = t - ref->second;
    return out;
}

}  // namespace crowdsdr::server
