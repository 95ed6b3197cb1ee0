#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "query_oracle.hpp"
#include "crowdsdr/server.hpp"

using namespace crowdsdr;
using namespace crowdsdr::server;
using nlohmann::json;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("crowdsdr_test_" + name);
    std::filesystem::remove(p);
    return p;
}

meas::Measurement rssi(const std::string& dev, double ts, double dbm) {
    meas::Measurement m;
    m.device_id = dev;
    m.ts = ts;
    m.lat = 37;
    m.lon = -122;
    m.freq_hz = 910e6;
    m.payload = meas::RssiPayload{dbm, false, std::nullopt, std::nullopt};
    return m;
}

meas::Measurement trigger(const std::string& dev, double ts) {
    auto m = rssi(dev, ts, -60);
    m.kind = meas::Kind::Trigger;
    m.payload = meas::TriggerPayload{-60, -80};
    return m;
}

}  // namespace

TEST_CASE("server: registry replaces sessions") {
    ClientRegistry r;
    int old_calls = 0, new_calls = 0;
    const auto s1 = r.register_client({{"device_id", "dev1"}}, [&](const ServerCommand&) { return ++old_calls, true; });
    CHECK(r.size() == 1);
    const auto s2 = r.register_client({{"device_id", "dev1"}, {"caps", {{"fsk", true}}}},
                                      [&](const ServerCommand&) { return ++new_calls, true; });
    CHECK(r.size() == 1);
    CHECK(s2 != s1);
    r.sink("dev1")(ServerCommand{});
    CHECK(new_calls == 1);
    CHECK(old_calls == 0);
    r.disconnect("dev1", s1);  // stale session: no effect
    CHECK(r.connected_ids() == std::vector<std::string>{"dev1"});
    r.disconnect("dev1", s2);
    CHECK(r.connected_ids().empty());
    CHECK_FALSE(r.sink("dev1"));
    CHECK(r.size() == 0);  // size counts live sessions
    CHECK_THROWS(r.register_client({{"device_id", ""}}, {}));
    CHECK_THROWS(r.register_client(json::array(), {}));
    CHECK_THROWS(r.register_client({{"id", "x"}}, {}));
    for (int i = 0; i < 250; ++i) r.register_client({{"device_id", "d" + std::to_string(i)}}, [](auto&) { return true; });
    CHECK(r.size() == 250);
    CHECK(r.list().size() == 250);
}

TEST_CASE("server: dispatch receipts") {
    Server s;
    std::vector<std::string> delivered;
    for (const char* id : {"a", "b", "c"})
        s.registry().register_client({{"device_id", id}}, [&, id = std::string(id)](const ServerCommand& c) {
            delivered.push_back(id + ":" + c.kind);
            return id != "c";
        });
    ServerCommand stop;
    stop.kind = "stop";
    stop.targets = {"all"};
    auto r = s.dispatch(stop);
    CHECK(r.receipts.size() == 3);
    CHECK(r.acked() == 2);
    CHECK(r.failed() == 1);
    CHECK(r.cmd_id > 0);
    CHECK(delivered == std::vector<std::string>{"a:stop", "b:stop", "c:stop"});

    ServerCommand rep;
    rep.kind = "report_rssi";
    rep.params = {{"freq_hz", 910e6}};
    rep.targets = {"ghost", "a", "a"};
    r = s.dispatch(rep);
    REQUIRE(r.receipts.size() == 2);
    CHECK(r.receipts[0].device_id == "a");
    CHECK(r.receipts[0].ok);
    CHECK(r.receipts[1].device_id == "ghost");
    CHECK_FALSE(r.receipts[1].ok);
    CHECK(r.receipts[1].reason == "not connected");
    const auto j = to_json(r);
    CHECK(j["acked"] == 1);
    CHECK(j["receipts"].size() == 2);

    rep.targets.clear();
    CHECK_THROWS_AS(s.dispatch(rep), CommandError);
    Server empty;
    stop.targets = {"all"};
    CHECK_THROWS_AS(empty.dispatch(stop), CommandError);
    rep.targets = {"a"};
    rep.params = json::object();
    CHECK_THROWS_AS(s.dispatch(rep), CommandError);
}

TEST_CASE("server: ingest dedups and rejects bad records") {
    Server s;
    CHECK(s.ingest(rssi("a", 10.0, -70)).stored);
    const auto dup = s.ingest(rssi("a", 10.0002, -50));
    CHECK(dup.duplicate);
    CHECK_FALSE(dup.stored);
    CHECK(s.store().size() == 1);
    CHECK(s.ingest(trigger("a", 10.0)).stored);
    CHECK(s.store().size() == 2);
    json bad = meas::to_json(rssi("a", 11, -70));
    bad["lon"] = 500;
    CHECK_THROWS_AS(s.ingest_json(bad), meas::SchemaError);
    CHECK(s.store().size() == 2);
    // last-seen tracking
    s.registry().register_client({{"device_id", "a"}}, [](auto&) { return true; });
    s.ingest(rssi("a", 20.0, -70));
    CHECK(s.registry().list()[0].last_seen_ts == 20.0);
}

TEST_CASE("server: queries match the linear-scan oracle") {
    std::mt19937_64 g(77);
    MeasurementStore store;
    std::vector<meas::Measurement> kept;
    std::set<meas::DedupKey> seen;
    for (int i = 0; i < 3000; ++i) {
        auto m = oracle::random_record(g, 20, 1000.0, 60.0);
        const bool fresh = seen.insert(meas::dedup_key(m)).second;
        CHECK(store.ingest(m).stored == fresh);
        if (fresh) kept.push_back(m);
    }
    CHECK(store.size() == kept.size());
    CHECK(store.query({}) == oracle::scan(kept, {}));
    for (int q = 0; q < 200; ++q) {
        const auto f = oracle::random_filter(g, 20, 1000.0, 60.0);
        if (f.f_min && f.f_max) continue;  // inverted range, covered below
        REQUIRE(store.query(f) == oracle::scan(kept, f));
    }
    QueryFilter straddle;
    straddle.min_rssi_dbm = -70;
    for (const auto& m : store.query(straddle)) CHECK(*m.rssi_dbm() >= -70);
    QueryFilter inv;
    inv.t_min = 5;
    inv.t_max = 4;
    CHECK_THROWS(store.query(inv));
    inv = {};
    inv.box = GeoBox{10, 5, 0, 1};
    CHECK_THROWS(store.query(inv));
}

TEST_CASE("server: persistence round trip and partial trailing line") {
    const auto path = temp_file("store.jsonl");
    std::mt19937_64 g(5);
    std::vector<oracle::QueryFilter> filters;
    for (int i = 0; i < 20; ++i) filters.push_back(oracle::random_filter(g, 5, 0, 30));
    std::vector<std::vector<meas::Measurement>> before;
    {
        MeasurementStore s(path);
        for (int i = 0; i < 500; ++i) s.ingest(oracle::random_record(g, 5, 0, 30));
        for (const auto& f : filters) before.push_back((f.f_min && f.f_max) ? std::vector<meas::Measurement>{} : s.query(f));
    }
    {
        std::ofstream app(path, std::ios::app);
        app << "{\"device_id\": \"dev-1\", \"ts\": 1";  // interrupted write
    }
    const auto size_with_partial = std::filesystem::file_size(path);
    {
        MeasurementStore s(path);
        for (std::size_t i = 0; i < filters.size(); ++i)
            if (!(filters[i].f_min && filters[i].f_max)) CHECK(s.query(filters[i]) == before[i]);
        CHECK(std::filesystem::file_size(path) < size_with_partial);
        CHECK(s.ingest(rssi("new", 99, -1)).stored);
    }
    MeasurementStore again(path);
    QueryFilter f;
    f.devices = {"new"};
    CHECK(again.query(f).size() == 1);
    std::filesystem::remove(path);
}

TEST_CASE("server: round robin script") {
    RoundRobin rr;
    rr.devices = {"a", "b", "c", "d"};
    rr.t_start = 5;
    const auto script = expand_round_robin(rr);
    int transmits = 0;
    for (const auto& e : script) {
        if (e.cmd.kind == "transmit") {
            ++transmits;
            CHECK(e.cmd.targets.size() == 1);
        }
        if (e.cmd.kind == "report_rssi") {
            CHECK(e.cmd.targets.size() == 3);
            CHECK(std::find(e.cmd.targets.begin(), e.cmd.targets.end(), rr.devices[static_cast<std::size_t>((e.t - 5) / 10)]) == e.cmd.targets.end());
        }
    }
    CHECK(transmits == 4);
    CHECK(script.back().cmd.kind == "stop");
    CHECK(script.back().t == 45);
    CHECK_THROWS(expand_round_robin(RoundRobin{0, {"a"}}));

    Server s;
    std::vector<std::pair<double, std::string>> seen;
    double clock = 0;
    for (const auto& id : rr.devices)
        s.registry().register_client({{"device_id", id}}, [&, id](const ServerCommand& c) {
            seen.emplace_back(clock, id + ":" + c.kind);
            return true;
        });
    const auto rep = s.run_script(script, [&](double t) { clock = t; });
    CHECK(rep.failures == 0);
    CHECK(rep.lines.size() == script.size());
    CHECK(seen.size() == 4 * (4 + 1 + 3) + 4);
    CHECK(seen[4] == std::pair<double, std::string>{5.0, "a:transmit"});
    CHECK(seen[8 + 4] == std::pair<double, std::string>{15.0, "b:transmit"});
    CHECK(to_json(rep)["lines"].size() == script.size());
}

TEST_CASE("server: script failures are recorded and the script continues") {
    Server s;
    s.registry().register_client({{"device_id", "a"}}, [](auto&) { return true; });
    ServerCommand good{0, "stop", json::object(), {"a"}};
    ServerCommand ghost{0, "stop", json::object(), {"ghost"}};
    ServerCommand invalid{0, "transmit", json::object(), {"a"}};
    const auto rep = s.run_script({{0, good}, {1, ghost}, {2, invalid}, {3, good}}, {});
    CHECK(rep.failures == 2);
    CHECK(rep.lines[2].error.size() > 0);
    CHECK(rep.lines[3].result.acked() == 1);
    CHECK(s.run_script({}, {}).lines.empty());
    CHECK_THROWS(s.run_script({{2, good}, {1, good}}, {}));
}

TEST_CASE("server: trigger clock offsets") {
    const std::vector<meas::Measurement> t{trigger("a", 100.000), trigger("b", 100.003), trigger("c", 99.998),
                                           trigger("b", 100.5)};
    const auto off = estimate_clock_offsets(t, "a");
    CHECK(off.at("a") == 0.0);
    CHECK(off.at("b") == doctest::Approx(0.003).epsilon(1e-9));
    CHECK(off.at("c") == doctest::Approx(-0.002).epsilon(1e-9));
    CHECK_THROWS(estimate_clock_offsets({trigger("a", 1)}, "a"));
    CHECK_THROWS(estimate_clock_offsets(t, "z"));
}
