#include "crowdsdr/scenario.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "crowdsdr/net.hpp"

namespace crowdsdr::scenario {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : "; ") + x;
    return s;
}

class Reader {
public:
    std::vector<std::string> problems;

    void fail(const std::string& path, const std::string& what) { problems.push_back(path + ": " + what); }

    std::optional<double> number(const json& obj, const std::string& key, const std::string& path, bool required) {
        if (!obj.is_object() || !obj.contains(key)) {
            if (required) fail(path + "." + key, "missing");
            return std::nullopt;
        }
        const auto& v = obj[key];
        if (!v.is_number() || !std::isfinite(v.get<double>())) {
            fail(path + "." + key, "expected number");
            return std::nullopt;
        }
        return v.get<double>();
    }

    double number_or(const json& obj, const std::string& key, const std::string& path, double def) {
        return number(obj, key, path, false).value_or(def);
    }

    std::optional<std::string> string(const json& obj, const std::string& key, const std::string& path,
                                      bool required) {
        if (!obj.is_object() || !obj.contains(key)) {
            if (required) fail(path + "." + key, "missing");
            return std::nullopt;
        }
        if (!obj[key].is_string()) {
            fail(path + "." + key, "expected string");
            return std::nullopt;
        }
        return obj[key].get<std::string>();
    }

    // {lat, lon} or {x, y} meters relative to the origin
    std::optional<geo::GeoPoint> position(const json& obj, const std::string& path, geo::GeoPoint origin) {
        if (obj.contains("lat") || obj.contains("lon")) {
            auto lat = number(obj, "lat", path, true);
            auto lon = number(obj, "lon", path, true);
            if (!lat || !lon) return std::nullopt;
            if (!geo::valid({*lat, *lon})) {
                fail(path, "lat/lon out of range");
                return std::nullopt;
            }
            return geo::GeoPoint{*lat, *lon};
        }
        auto x = number(obj, "x", path, true);
        auto y = number(obj, "y", path, true);
        if (!x || !y) return std::nullopt;
        return geo::from_local_xy({*x, *y}, origin);
    }
};

}  // namespace

ScenarioError::ScenarioError(std::vector<std::string> problems)
    : std::invalid_argument("invalid scenario: " + join(problems)), problems_(std::move(problems)) {}

ScenarioConfig parse_scenario(const json& j) {
    Reader rd;
    ScenarioConfig cfg;
    if (!j.is_object()) throw ScenarioError({"$: expected object"});
    if (!j.contains("schema") || j["schema"] != 1) rd.fail("$.schema", "expected 1");
    if (j.contains("seed")) {
        if (j["seed"].is_number_unsigned())
            cfg.seed = j["seed"].get<std::uint64_t>();
        else
            rd.fail("$.seed", "expected non-negative integer");
    }
    cfg.duration_s = rd.number(j, "duration_s", "$", true).value_or(0.0);
    if (!(cfg.duration_s > 0.0)) rd.fail("$.duration_s", "must be positive");
    cfg.step_s = rd.number_or(j, "step_s", "$", 1.0);
    if (!(cfg.step_s > 0.0)) rd.fail("$.step_s", "must be positive");

    if (j.contains("channel")) {
        const auto& c = j["channel"];
        auto& ch = cfg.channel;
        if (c.contains("freq_hz") && !c.contains("pl0_db"))
            ch.pl0_db = rf::free_space_pl0_db(rd.number_or(c, "freq_hz", "$.channel", 910e6),
                                              rd.number_or(c, "d0_m", "$.channel", 1.0));
        ch.pl0_db = rd.number_or(c, "pl0_db", "$.channel", ch.pl0_db);
        ch.d0_m = rd.number_or(c, "d0_m", "$.channel", ch.d0_m);
        ch.exponent_n = rd.number_or(c, "exponent_n", "$.channel", ch.exponent_n);
        ch.shadowing_sigma_db = rd.number_or(c, "shadowing_sigma_db", "$.channel", ch.shadowing_sigma_db);
        ch.noise_floor_dbm = rd.number_or(c, "noise_floor_dbm", "$.channel", ch.noise_floor_dbm);
        ch.min_rx_dbm = rd.number_or(c, "min_rx_dbm", "$.channel", ch.min_rx_dbm);
    }
    cfg.channel.seed = cfg.seed;
    try {
        cfg.channel.validate();
    } catch (const std::exception& e) {
        rd.fail("$.channel", e.what());
    }
    if (j.contains("origin")) {
        if (auto o = rd.position(j["origin"], "$.origin", {})) cfg.origin = *o;
    }

    std::set<std::string> ids;
    if (!j.contains("devices") || !j["devices"].is_array()) {
        rd.fail("$.devices", "expected array");
    } else {
        for (std::size_t i = 0; i < j["devices"].size(); ++i) {
            const auto& d = j["devices"][i];
            const std::string path = "$.devices[" + std::to_string(i) + "]";
            DeviceSpec spec;
            auto id = rd.string(d, "device_id", path, true);
            if (id) {
                if (id->empty() || !ids.insert(*id).second) rd.fail(path + ".device_id", "empty or duplicate");
                spec.gateway.device_id = *id;
            }
            std::vector<gw::Waypoint> wps;
            if (d.contains("waypoints") && d["waypoints"].is_array() && !d["waypoints"].empty()) {
                for (std::size_t k = 0; k < d["waypoints"].size(); ++k) {
                    const auto& w = d["waypoints"][k];
                    const std::string wp = path + ".waypoints[" + std::to_string(k) + "]";
                    const double t = rd.number_or(w, "t", wp, 0.0);
                    if (auto p = rd.position(w, wp, cfg.origin)) wps.push_back({t, *p});
                }
            } else if (d.contains("position")) {
                if (auto p = rd.position(d["position"], path + ".position", cfg.origin)) wps.push_back({0.0, *p});
            } else {
                rd.fail(path, "needs waypoints or position");
            }
            try {
                if (!wps.empty()) spec.gateway.mobility = gw::MobilityTrace(wps);
            } catch (const std::exception& e) {
                rd.fail(path + ".waypoints", e.what());
            }
            if (d.contains("uplink_down")) {
                if (!d["uplink_down"].is_array()) rd.fail(path + ".uplink_down", "expected array of [t0, t1]");
                for (const auto& iv : d["uplink_down"]) {
                    if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number() ||
                        iv[0].get<double>() > iv[1].get<double>()) {
                        rd.fail(path + ".uplink_down", "expected [t0, t1] with t0 <= t1");
                        continue;
                    }
                    spec.gateway.uplink.down.push_back({iv[0].get<double>(), iv[1].get<double>()});
                }
            }
            const auto mode = rd.string(d, "mode", path, false).value_or("live");
            if (mode == "live")
                spec.gateway.mode = gw::GatewayMode::Live;
            else if (mode == "logging")
                spec.gateway.mode = gw::GatewayMode::Logging;
            else
                rd.fail(path + ".mode", "expected live or logging");
            spec.gateway.fix_noise_m = rd.number_or(d, "fix_noise_m", path, 0.0);
            spec.gateway.seed = rf::mix_seed(cfg.seed, rf::link_key(spec.gateway.device_id, "gw"));
            if (d.contains("serial")) {
                const auto& s = d["serial"];
                spec.gateway.serial.up_s = rd.number_or(s, "up_s", path + ".serial", spec.gateway.serial.up_s);
                spec.gateway.serial.down_s = rd.number_or(s, "down_s", path + ".serial", spec.gateway.serial.down_s);
                spec.gateway.serial.jitter_mean_s =
                    rd.number_or(s, "jitter_mean_s", path + ".serial", spec.gateway.serial.jitter_mean_s);
            }

            auto& dev = spec.device;
            dev.id = spec.gateway.device_id;
            dev.seed = rf::mix_seed(cfg.seed, rf::link_key(dev.id, "device"));
            try {
                dev.link = sampling::LinkModel::from_preset(rd.string(d, "link", path, false).value_or("le-2m"),
                                                            rf::mix_seed(dev.seed, 1));
            } catch (const std::exception& e) {
                rd.fail(path + ".link", e.what());
            }
            dev.rx_gain_dbi = rd.number_or(d, "rx_gain_dbi", path, 0.0);
            dev.tx_gain_dbi = rd.number_or(d, "tx_gain_dbi", path, 0.0);
            dev.full_scale_dbm = rd.number_or(d, "full_scale_dbm", path, dev.full_scale_dbm);
            dev.clock_offset_s = rd.number_or(d, "clock_offset_ms", path, 0.0) * 1e-3;
            dev.clock_skew_ppm = rd.number_or(d, "clock_skew_ppm", path, 0.0);
            if (d.contains("power")) {
                const auto& p = d["power"];
                const std::string pp = path + ".power";
                dev.power.idle_mw = rd.number_or(p, "idle_mw", pp, dev.power.idle_mw);
                dev.power.rx_mw = rd.number_or(p, "rx_mw", pp, dev.power.rx_mw);
                dev.power.tx_mw = rd.number_or(p, "tx_mw", pp, dev.power.tx_mw);
                dev.power.max_mw = rd.number_or(p, "max_mw", pp, dev.power.max_mw);
                dev.power.battery_mah = rd.number_or(p, "battery_mah", pp, dev.power.battery_mah);
                dev.power.battery_v = rd.number_or(p, "battery_v", pp, dev.power.battery_v);
                try {
                    dev.power.validate();
                } catch (const std::exception& e) {
                    rd.fail(pp, e.what());
                }
            }
            cfg.devices.push_back(std::move(spec));
        }
    }
    std::sort(cfg.devices.begin(), cfg.devices.end(),
              [](const auto& a, const auto& b) { return a.gateway.device_id < b.gateway.device_id; });

    if (j.contains("transmitters")) {
        if (!j["transmitters"].is_array()) rd.fail("$.transmitters", "expected array");
        for (std::size_t i = 0; j["transmitters"].is_array() && i < j["transmitters"].size(); ++i) {
            const auto& t = j["transmitters"][i];
            const std::string path = "$.transmitters[" + std::to_string(i) + "]";
            StaticTransmitter st;
            st.tx.id = rd.string(t, "id", path, false).value_or("tx" + std::to_string(i));
            if (auto p = rd.position(t, path, cfg.origin)) st.tx.position = *p;
            st.tx.power_dbm = rd.number_or(t, "power_dbm", path, 20.0);
            st.tx.freq_hz = rd.number_or(t, "freq_hz", path, 910e6);
            st.tx.antenna_gain_dbi = rd.number_or(t, "antenna_gain_dbi", path, 0.0);
            st.t_start = rd.number_or(t, "t_start", path, 0.0);
            st.t_end = rd.number_or(t, "t_end", path, rf::kForever);
            if (t.contains("text")) {
                if (!t["text"].is_string() || t["text"].get<std::string>().empty() ||
                    t["text"].get<std::string>().size() > 255) {
                    rd.fail(path + ".text", "expected 1..255 byte string");
                } else {
                    const auto s = t["text"].get<std::string>();
                    const std::vector<std::uint8_t> payload(s.begin(), s.end());
                    st.tx.waveform = rf::FskWave{dsp::build_frame(payload), rf::FskParams{}, 0.0};
                }
            }
            if (!rf::in_tunable_range(st.tx.freq_hz)) rd.fail(path + ".freq_hz", "outside tunable range");
            cfg.transmitters.push_back(std::move(st));
        }
    }

    if (j.contains("script")) {
        if (!j["script"].is_array()) rd.fail("$.script", "expected array");
        for (std::size_t i = 0; j["script"].is_array() && i < j["script"].size(); ++i) {
            const auto& e = j["script"][i];
            const std::string path = "$.script[" + std::to_string(i) + "]";
            const double t = rd.number_or(e, "t", path, 0.0);
            if (t < 0.0 || t > cfg.duration_s) rd.fail(path + ".t", "outside [0, duration_s]");
            if (e.contains("round_robin")) {
                const auto& r = e["round_robin"];
                server::RoundRobin rr;
                rr.t_start = t;
                if (r.contains("devices") && r["devices"].is_array()) {
                    for (const auto& d : r["devices"])
                        if (d.is_string()) rr.devices.push_back(d.get<std::string>());
                } else {
                    for (const auto& d : cfg.devices) rr.devices.push_back(d.gateway.device_id);
                }
                rr.dwell_s = rd.number_or(r, "dwell_s", path + ".round_robin", rr.dwell_s);
                rr.freq_hz = rd.number_or(r, "freq_hz", path + ".round_robin", rr.freq_hz);
                rr.power_dbm = rd.number_or(r, "power_dbm", path + ".round_robin", rr.power_dbm);
                rr.rssi_rate_hz = rd.number_or(r, "rssi_rate_hz", path + ".round_robin", rr.rssi_rate_hz);
                rr.lock = r.value("lock", false);
                try {
                    for (auto& x : server::expand_round_robin(rr)) {
                        if (x.t > cfg.duration_s) rd.fail(path + ".round_robin", "extends past duration_s");
                        cfg.script.push_back(std::move(x));
                    }
                    cfg.round_robins.push_back(rr);
                } catch (const std::exception& ex) {
                    rd.fail(path + ".round_robin", ex.what());
                }
                continue;
            }
            try {
                auto cmd = ServerCommand::from_json(e);
                if (cmd.targets.empty()) rd.fail(path + ".targets", "empty");
                cfg.script.push_back({t, std::move(cmd)});
            } catch (const std::exception& ex) {
                rd.fail(path, ex.what());
            }
        }
    }
    std::stable_sort(cfg.script.begin(), cfg.script.end(), [](const auto& a, const auto& b) { return a.t < b.t; });

    if (!rd.problems.empty()) throw ScenarioError(rd.problems);
    return cfg;
}

ScenarioConfig load_scenario(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ScenarioError({p.string() + ": cannot open"});
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ScenarioError({p.string() + ": " + e.what()});
    }
    return parse_scenario(j);
}

namespace {

struct Remote {
    std::unique_ptr<net::GatewayClient> client;
    std::mutex mu;
    std::vector<ServerCommand> inbox;
};

}  // namespace

SimResult simulate(const ScenarioConfig& cfg, const SimOptions& opts) {
    rf::World world(cfg.channel);
    for (const auto& st : cfg.transmitters) world.start(st.tx, st.t_start, st.t_end);

    std::vector<std::unique_ptr<gw::GatewaySession>> sessions;
    for (const auto& d : cfg.devices) sessions.push_back(std::make_unique<gw::GatewaySession>(d.gateway, d.device));

    server::Server srv;
    double now = 0.0;
    json command_log = json::array();

    for (auto& s : sessions) {
        gw::GatewaySession* sp = s.get();
        srv.registry().register_client({{"device_id", sp->device_id()}, {"caps", {{"simulated", true}}}},
                                       [&, sp](const ServerCommand& cmd) {
                                           const auto out = sp->handle_server_command(cmd, now, world);
                                           json entry{{"t", now},       {"cmd_id", cmd.id}, {"device_id", sp->device_id()},
                                                      {"kind", cmd.kind}, {"ok", out.ok}};
                                           if (!out.ok) entry["reason"] = out.reason;
                                           command_log.push_back(std::move(entry));
                                           return true;
                                       });
    }

    std::vector<std::unique_ptr<Remote>> remotes;
    if (opts.connect_host) {
        for (auto& s : sessions) {
            auto r = std::make_unique<Remote>();
            r->client = std::make_unique<net::GatewayClient>();
            Remote* rp = r.get();
            r->client->on_command([rp](const ServerCommand& c) {
                std::lock_guard lk(rp->mu);
                rp->inbox.push_back(c);
            });
            r->client->connect(*opts.connect_host, opts.connect_port, s->device_id(), {{"simulated", true}});
            remotes.push_back(std::move(r));
        }
    }

    const auto wall0 = std::chrono::steady_clock::now();
    auto deliver = [&] {
        for (std::size_t i = 0; i < sessions.size(); ++i) {
            for (const auto& m : sessions[i]->drain_outbox(now)) {
                srv.ingest(m);
                if (!remotes.empty()) remotes[i]->client->send_measurement(m);
            }
        }
    };
    auto run_remote_commands = [&] {
        for (std::size_t i = 0; i < remotes.size(); ++i) {
            std::vector<ServerCommand> cmds;
            {
                std::lock_guard lk(remotes[i]->mu);
                cmds.swap(remotes[i]->inbox);
            }
            for (const auto& c : cmds) {
                const auto out = sessions[i]->handle_server_command(c, now, world);
                remotes[i]->client->send_ack(c.id, out.ok, out.reason);
            }
        }
    };
    auto advance = [&](double t) {
        while (now < t) {
            const double next = std::min(t, now + cfg.step_s);
            for (auto& s : sessions) s->step(next, world);
            now = next;
            deliver();
            if (opts.realtime) {
                std::this_thread::sleep_until(wall0 + std::chrono::duration<double>(now));
            }
            run_remote_commands();
        }
        deliver();
    };

    SimResult res;
    res.report = srv.run_script(cfg.script, advance);
    advance(cfg.duration_s);
    deliver();

    res.records = srv.query({});
    std::ostringstream log;
    for (const auto& m : res.records) log << meas::to_line(m) << '\n';
    res.log = log.str();

    // pairwise path-loss data from round-robin epochs
    for (const auto& rr : cfg.round_robins) {
        std::map<std::string, const gw::GatewaySession*> by_id;
        for (const auto& s : sessions) by_id[s->device_id()] = s.get();
        for (std::size_t i = 0; i < rr.devices.size(); ++i) {
            const double t0 = rr.t_start + static_cast<double>(i) * rr.dwell_s;
            const double t1 = t0 + rr.dwell_s;
            auto txs = by_id.find(rr.devices[i]);
            if (txs == by_id.end()) continue;
            for (const auto& m : res.records) {
                if (m.kind != meas::Kind::Rssi || m.device_id == rr.devices[i]) continue;
                if (!(m.ts >= t0 && m.ts < t1) || std::abs(m.freq_hz - rr.freq_hz) > 1.0) continue;
                const auto txp = txs->second->config().mobility.position(m.ts);
                res.pairs.push_back({rr.devices[i], m.device_id, geo::distance_m(txp, {m.lat, m.lon}),
                                     *m.rssi_dbm()});
            }
        }
    }

    json devs = json::object();
    for (const auto& s : sessions) {
        const auto& st = s->stats();
        const auto hist = s->device().mode_history();
        const auto e = device::energy_report(hist, s->device().config().power);
        json texts = json::array();
        for (const auto& r : s->received()) texts.push_back({{"t_dev", r.t_dev}, {"ok", r.ok}, {"text", r.text}});
        devs[s->device_id()] = {{"produced", st.produced},
                                {"forwarded", st.forwarded},
                                {"dropped", st.dropped},
                                {"logged", st.logged},
                                {"uploaded", st.uploaded},
                                {"pauses", st.pauses},
                                {"discarded_samples", st.discarded_samples},
                                {"energy_j", e.joules},
                                {"average_mw", e.average_mw},
                                {"idle_lifetime_h", e.idle_lifetime_h},
                                {"received", texts}};
    }
    res.summary = {{"schema", 1},
                   {"seed", cfg.seed},
                   {"duration_s", cfg.duration_s},
                   {"records", res.records.size()},
                   {"devices", devs},
                   {"script", server::to_json(res.report)},
                   {"commands", command_log},
                   {"pairs", res.pairs.size()}};

    for (auto& r : remotes) {
        r->client->sync();
        r->client->close();
    }

    if (opts.out_dir) {
        std::filesystem::create_directories(*opts.out_dir);
        std::ofstream(*opts.out_dir / "measurements.jsonl", std::ios::binary) << res.log;
        std::ofstream(*opts.out_dir / "summary.json", std::ios::binary) << res.summary.dump(2) << '\n';
        for (const auto& s : sessions) {
            if (s->mode() != gw::GatewayMode::Logging) continue;
            std::ofstream out(*opts.out_dir / ("gateway_" + s->device_id() + ".jsonl"), std::ios::binary);
            for (const auto& m : s->log()) out << meas::to_line(m) << '\n';
        }
        if (!res.pairs.empty()) {
            std::ofstream out(*opts.out_dir / "pairs.csv", std::ios::binary);
            out << "tx,rx,distance_m,rssi_dbm\n";
            char buf[160];
            for (const auto& p : res.pairs) {
                std::snprintf(buf, sizeof buf, "%s,%s,%.3f,%.3f\n", p.tx.c_str(), p.rx.c_str(), p.distance_m,
                              p.rssi_dbm);
                out << buf;
            }
        }
    }
    return res;
}

}  // namespace crowdsdr::scenario
