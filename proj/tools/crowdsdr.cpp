// crowdsdr command-line entry point: serve, simulate, analyze, version.
// Exit codes: 0 ok, 1 usage/config, 2 analysis failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "crowdsdr/dsp.hpp"
#include "crowdsdr/locate.hpp"
#include "crowdsdr/measurement.hpp"
#include "crowdsdr/net.hpp"
#include "crowdsdr/scenario.hpp"
#include "crowdsdr/server.hpp"

using namespace crowdsdr;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kAnalysis = 2;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

std::vector<meas::Measurement> read_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<meas::Measurement> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(meas::from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

bool is_number(const std::string& s) {
    try {
        std::size_t used = 0;
        std::stod(s, &used);
        return used == s.size();
    } catch (const std::exception&) {
        return false;
    }
}

std::string hex(const std::vector<std::uint8_t>& b) {
    static constexpr char k[] = "0123456789abcdef";
    std::string s;
    for (auto x : b) {
        s += k[x >> 4];
        s += k[x & 15];
    }
    return s;
}

std::vector<dsp::Capture> captures_from_log(const std::vector<meas::Measurement>& recs) {
    std::vector<dsp::Capture> out;
    for (const auto& m : recs) {
        const auto* iq = std::get_if<meas::IqPayload>(&m.payload);
        if (!iq) continue;
        const auto tl =
            sampling::reconstruct_timeline(iq->packets, iq->pauses, iq->fs_hz, m.ts, iq->mode, iq->sample_count);
        out.push_back(dsp::capture_from_timeline(m.device_id, tl, iq->fs_hz, m.freq_hz));
    }
    return out;
}

int cmd_serve(const std::string& host, int port, int event_port, const std::string& log_path) {
    if (event_port == 0) event_port = port + 1;
    server::Server srv(log_path);
    net::EventServer events(srv);
    net::HttpApi http(srv);
    try {
        events.start(host, event_port);
        http.start(host, port);
    } catch (const net::NetError& e) {
        std::cerr << "crowdsdr serve: " << e.what() << '\n';
        return kUsage;
    }
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cerr << "http on " << host << ":" << http.port() << ", events on " << host << ":" << events.port()
              << ", log " << log_path << " (" << srv.store().size() << " records)\n";
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    http.stop();
    events.stop();
    srv.store().flush();
    std::cerr << "stopped with " << srv.store().size() << " records\n";
    return kOk;
}

int cmd_simulate(const std::string& path, const std::string& out_dir, const std::string& connect, bool realtime) {
    scenario::ScenarioConfig cfg;
    try {
        cfg = scenario::load_scenario(path);
    } catch (const scenario::ScenarioError& e) {
        for (const auto& p : e.problems()) std::cerr << p << '\n';
        return kUsage;
    }
    scenario::SimOptions opts;
    if (!out_dir.empty()) opts.out_dir = out_dir;
    opts.realtime = realtime;
    if (!connect.empty()) {
        const auto colon = connect.rfind(':');
        if (colon == std::string::npos) {
            std::cerr << "--connect expects host:port\n";
            return kUsage;
        }
        opts.connect_host = connect.substr(0, colon);
        opts.connect_port = std::stoi(connect.substr(colon + 1));
    }
    const auto res = scenario::simulate(cfg, opts);
    std::cout << res.summary.dump(2) << '\n';
    std::cerr << res.records.size() << " records, " << res.report.failures << " script failures\n";
    return kOk;
}

int cmd_demod(const std::string& path, double symbol_rate, double deviation, double max_rate_error) {
    const auto caps = captures_from_log(read_log(path));
    if (caps.empty()) {
        std::cerr << "no iq_capture records in " << path << '\n';
        return kAnalysis;
    }
    int rc = kOk;
    for (const auto& c : caps) {
        dsp::CoarseParams coarse;
        coarse.fs_hz = c.fs_hz;
        coarse.symbol_rate_hz = symbol_rate;
        coarse.deviation_hz = deviation;
        coarse.max_rate_error = max_rate_error;
        json out{{"device_id", c.device_id}, {"t0", c.t0}};
        try {
            const auto r = dsp::demodulate_fsk(c, dsp::FrameConfig{}, coarse);
            out["ok"] = true;
            out["payload_hex"] = hex(r.payload);
            out["text"] = std::string(r.payload.begin(), r.payload.end());
            out["iterations"] = r.diag.iterations;
        } catch (const dsp::DemodError& e) {
            rc = kAnalysis;
            out["ok"] = false;
            out["error"] = e.what();
            out["raw_hex"] = hex(e.raw_bytes());
            const auto& d = e.diagnostics();
            std::cerr << c.device_id << " t0=" << c.t0 << ": " << e.what() << " (score " << d.detection.score
                      << ", samples/symbol " << d.samples_per_symbol << ", offset " << d.freq_offset_hz << " Hz)\n";
        }
        std::cout << out.dump() << '\n';
    }
    return rc;
}

int cmd_align(const std::string& path, std::size_t window, std::size_t reference) {
    const auto caps = captures_from_log(read_log(path));
    try {
        const auto r = dsp::align_captures(caps, window, reference);
        json arr = json::array();
        for (std::size_t i = 0; i < caps.size(); ++i)
            arr.push_back({{"device_id", caps[i].device_id},
                           {"t0", caps[i].t0},
                           {"lag_samples", r.lags[i]},
                           {"peak", r.peaks[i]},
                           {"reliable", static_cast<bool>(r.reliable[i])}});
        std::cout << json{{"reference", r.reference}, {"captures", arr}}.dump(2) << '\n';
    } catch (const std::exception& e) {
        std::cerr << "align: " << e.what() << '\n';
        return kAnalysis;
    }
    return kOk;
}

int cmd_locate(const std::string& path, std::size_t discard, double res, double floor_dbm, bool no_filter,
               const std::string& grid_csv) {
    std::vector<locate::RssiPoint> pts;
    std::size_t filtered = 0;
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
        for (const auto& row : read_csv(path)) {
            if (row.size() < 3 || !is_number(row[0])) continue;  // header
            pts.push_back({{std::stod(row[0]), std::stod(row[1])}, std::stod(row[2])});
        }
    } else {
        for (const auto& m : read_log(path)) {
            if (m.kind != meas::Kind::Rssi) continue;
            if (!no_filter && !meas::usable_for_locate(m, floor_dbm)) {
                ++filtered;
                continue;
            }
            pts.push_back({{m.lat, m.lon}, *m.rssi_dbm()});
        }
    }
    try {
        locate::LocateOptions opts;
        opts.discard_top_k = discard;
        opts.grid_res_m = res;
        const auto r = locate::estimate_tx(pts, opts);
        std::cout << json{{"estimate", {{"lat", r.estimate.lat}, {"lon", r.estimate.lon}}},
                          {"peak_dbm", r.peak_dbm},
                          {"grid_res_m", r.grid_res_m},
                          {"points_used", r.used},
                          {"points_discarded", r.discarded},
                          {"points_merged", r.merged},
                          {"points_filtered", filtered}}
                         .dump(2)
                  << '\n';
        if (!grid_csv.empty()) {
            std::vector<locate::Point> xy;
            std::vector<double> v;
            // rebuild the interpolant the estimate used
            std::vector<locate::RssiPoint> sorted(pts.begin(), pts.end());
            std::stable_sort(sorted.begin(), sorted.end(),
                             [](const auto& a, const auto& b) { return a.rssi_dbm > b.rssi_dbm; });
            for (std::size_t i = discard; i < sorted.size(); ++i) {
                xy.push_back(geo::to_local_xy(sorted[i].pos, r.origin));
                v.push_back(sorted[i].rssi_dbm);
            }
            const auto g = locate::interpolate_grid(locate::LinearInterpolant(xy, v), res);
            std::ofstream out(grid_csv);
            out << "lat,lon,rssi_dbm\n";
            for (std::size_t iy = 0; iy < g.ny; ++iy)
                for (std::size_t ix = 0; ix < g.nx; ++ix)
                    if (const auto& val = g.at(ix, iy)) {
                        const auto p = geo::from_local_xy(g.node(ix, iy), r.origin);
                        char buf[96];
                        std::snprintf(buf, sizeof buf, "%.7f,%.7f,%.2f\n", p.lat, p.lon, *val);
                        out << buf;
                    }
        }
    } catch (const locate::LocateError& e) {
        std::cerr << "locate: " << e.what() << '\n';
        return kAnalysis;
    }
    return kOk;
}

int cmd_fit(const std::string& path) {
    std::vector<std::pair<double, double>> pairs;
    const auto rows = read_csv(path);
    std::size_t d_col = 0, r_col = 1;
    if (!rows.empty() && !is_number(rows[0][0])) {
        for (std::size_t i = 0; i < rows[0].size(); ++i) {
            if (rows[0][i] == "distance_m") d_col = i;
            if (rows[0][i] == "rssi_dbm") r_col = i;
        }
    }
    for (const auto& row : rows) {
        if (row.size() <= std::max(d_col, r_col) || !is_number(row[d_col]) || !is_number(row[r_col])) continue;
        pairs.emplace_back(std::stod(row[d_col]), std::stod(row[r_col]));
    }
    try {
        const auto f = locate::fit_path_loss(pairs);
        std::cout << json{{"n", f.exponent_n}, {"A", f.intercept_a}, {"rms", f.rms_db}, {"count", f.count}}.dump(2)
                  << '\n';
    } catch (const locate::LocateError& e) {
        std::cerr << "fit: " << e.what() << '\n';
        return kAnalysis;
    }
    return kOk;
}

int cmd_query(const std::string& path, const std::vector<std::string>& params) {
    std::map<std::string, std::string> kv;
    for (const auto& p : params) {
        const auto eq = p.find('=');
        if (eq == std::string::npos) {
            std::cerr << "filter expects key=value, got '" << p << "'\n";
            return kUsage;
        }
        kv[p.substr(0, eq)] = p.substr(eq + 1);
    }
    server::QueryFilter f;
    try {
        f = net::parse_filter(kv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "query: " << e.what() << '\n';
        return kUsage;
    }
    server::MeasurementStore store;
    for (const auto& m : read_log(path)) store.ingest(m);
    const auto out = store.query(f);
    for (const auto& m : out) std::cout << meas::to_line(m) << '\n';
    std::cerr << out.size() << " of " << store.size() << " records\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crowdsdr: simulated crowd-sourced spectrum sensing fleet"};
    app.require_subcommand(1);

    auto* serve = app.add_subcommand("serve", "run the command-and-control server");
    std::string host = "127.0.0.1", log_path = "crowdsdr_log.jsonl";
    int port = 8080, event_port = 0;
    serve->add_option("--host", host, "listen address");
    serve->add_option("--port", port, "HTTP port");
    serve->add_option("--event-port", event_port, "gateway event port (default: port+1)");
    serve->add_option("--log", log_path, "measurement log file");

    auto* sim = app.add_subcommand("simulate", "run a scenario in virtual time");
    std::string scenario_path, out_dir, connect;
    bool realtime = false;
    sim->add_option("scenario", scenario_path, "scenario JSON")->required();
    sim->add_option("--out", out_dir, "output directory");
    sim->add_option("--connect", connect, "also forward records to a server's event port (host:port)");
    sim->add_flag("--realtime", realtime, "pace virtual time to the wall clock");

    auto* analyze = app.add_subcommand("analyze", "offline analyses");
    analyze->require_subcommand(1);
    std::string input;
    auto* demod = analyze->add_subcommand("demod", "demodulate 2-FSK frames from iq_capture records");
    double symbol_rate = 5000.0, deviation = 2000.0, max_rate_error = 0.01;
    demod->add_option("input", input, "measurement log (NDJSON)")->required();
    demod->add_option("--symbol-rate", symbol_rate);
    demod->add_option("--deviation", deviation);
    demod->add_option("--max-rate-error", max_rate_error);

    auto* align = analyze->add_subcommand("align", "cross-correlate iq captures");
    std::size_t window = 256, reference = 0;
    align->add_option("input", input, "measurement log (NDJSON)")->required();
    align->add_option("--window", window, "search window, samples");
    align->add_option("--reference", reference, "reference capture index");

    auto* loc = analyze->add_subcommand("locate", "estimate a transmitter position from RSSI");
    std::size_t discard = 3;
    double grid_res = 2.0, floor_dbm = -100.0;
    bool no_filter = false;
    std::string grid_csv;
    loc->add_option("input", input, "measurement log (NDJSON) or CSV lat,lon,rssi")->required();
    loc->add_option("--discard-top", discard, "strongest readings to drop");
    loc->add_option("--grid-res", grid_res, "grid resolution, meters");
    loc->add_option("--floor", floor_dbm, "drop readings below this RSSI (log input)");
    loc->add_flag("--no-filter", no_filter, "keep unlocked readings (log input)");
    loc->add_option("--grid-csv", grid_csv, "write the interpolated grid as CSV");

    auto* fit = analyze->add_subcommand("fit", "fit a log-distance path-loss model");
    fit->add_option("input", input, "CSV with distance_m,rssi_dbm columns")->required();

    auto* query = analyze->add_subcommand("query", "filter a measurement log");
    std::vector<std::string> filter;
    query->add_option("input", input, "measurement log (NDJSON)")->required();
    query->add_option("--where", filter, "key=value (t_min, t_max, devices, f_min, f_max, min_rssi, lat_min, ...)");

    app.add_subcommand("version", "print version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (app.got_subcommand("version")) {
            std::cout << "crowdsdr " << CROWDSDR_VERSION << '\n';
            return kOk;
        }
        if (*serve) return cmd_serve(host, port, event_port, log_path);
        if (*sim) return cmd_simulate(scenario_path, out_dir, connect, realtime);
        if (*demod) return cmd_demod(input, symbol_rate, deviation, max_rate_error);
        if (*align) return cmd_align(input, window, reference);
        if (*loc) return cmd_locate(input, discard, grid_res, floor_dbm, no_filter, grid_csv);
        if (*fit) return cmd_fit(input);
        if (*query) return cmd_query(input, filter);
    } catch (const std::exception& e) {
        std::cerr << "crowdsdr: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}
