#include <cmath>

#include "doctest.h"
#include "crowdsdr/device.hpp"

using namespace crowdsdr;
using namespace crowdsdr::device;

namespace {

const geo::GeoPoint kHere{37.4, -122.1};

DeviceConfig cfg(const std::string& id = "dev", std::uint64_t seed = 1) {
    DeviceConfig c;
    c.id = id;
    c.seed = seed;
    return c;
}

Response one(Device& d, std::string_view line, double t, rf::World& w) {
    const auto r = d.handle_command(line, t, w);
    REQUIRE(r.size() == 1);
    return r[0];
}

template <typename T>
std::vector<T> pick(const std::vector<Output>& outs) {
    std::vector<T> v;
    for (const auto& o : outs)
        if (const auto* p = std::get_if<T>(&o)) v.push_back(*p);
    return v;
}

// co-located transmitter: path loss is exactly pl0
rf::World world_with_pl0(double pl0_db, double noise_dbm = -100.0) {
    rf::ChannelModel ch;
    ch.pl0_db = pl0_db;
    ch.noise_floor_dbm = noise_dbm;
    return rf::World(ch);
}

rf::Transmitter cw_at(double freq_hz, double power_dbm, const std::string& id = "tx") {
    rf::Transmitter tx;
    tx.id = id;
    tx.position = kHere;
    tx.power_dbm = power_dbm;
    tx.freq_hz = freq_hz;
    return tx;
}

}  // namespace

TEST_CASE("device: response text") {
    CHECK(Response{true, 'F', "915000000"}.to_ascii() == "K F 915000000");
    CHECK(Response{false, 'S', "busy"}.to_ascii() == "N S busy");
    CHECK(Response::parse("K H") == Response{true, 'H', ""});
    CHECK(Response::parse("N T band") == Response{false, 'T', "band"});
    CHECK_THROWS(Response::parse("X"));
}

TEST_CASE("device: frequency word") {
    // 915 MHz: 915e6 / (40e6 / 4) * 2^16 = 5996544
    CHECK(freq_to_word(915e6) == 0x5B8000);
    CHECK(word_to_freq(0x5B8000) == 915e6);
    for (double f = 137e6; f <= 950e6; f += 7.777e6) {
        const double rf = std::round(f / 1000.0) * 1000.0;
        CHECK(word_to_freq(freq_to_word(rf)) == rf);
    }
}

TEST_CASE("device: grammar and NAK reasons") {
    rf::World w;
    Device d(cfg(), [](double) { return kHere; });
    CHECK(one(d, "Q", 0, w) == Response{false, 'Q', "unknown"});
    CHECK(one(d, "", 0, w).ack == false);
    CHECK(one(d, "FF 1", 0, w).detail == "unknown");
    CHECK(one(d, "F", 0, w) == Response{false, 'F', "args"});
    CHECK(one(d, "F abc", 0, w) == Response{false, 'F', "args"});
    CHECK(one(d, "F 100000000", 0, w) == Response{false, 'F', "range"});
    CHECK(one(d, "F 915000500", 0, w) == Response{false, 'F', "resolution"});
    CHECK(one(d, "S D 1 10", 0, w) == Response{false, 'S', "untuned"});
    CHECK(one(d, "R 100", 0, w) == Response{false, 'R', "untuned"});
    CHECK(one(d, "F 915000000\r\n", 0, w) == Response{true, 'F', "915000000"});
    CHECK(one(d, "S X 1 10", 0, w) == Response{false, 'S', "args"});
    CHECK(one(d, "S M 64001 10", 0, w) == Response{false, 'S', "range"});
    CHECK(one(d, "S P 104001 10", 0, w) == Response{false, 'S', "range"});
    CHECK(one(d, "S D 101 10", 0, w) == Response{false, 'S', "range"});
    CHECK(one(d, "S D 1 10 2", 0, w) == Response{false, 'S', "args"});
    CHECK(one(d, "S T 64000 10", 0, w) == Response{false, 'S', "args"});
    CHECK(one(d, "T C 600000000 10", 0, w) == Response{false, 'T', "band"});
    CHECK(one(d, "T C 915000000 21", 0, w) == Response{false, 'T', "range"});
    CHECK(one(d, "T X 915000000 10", 0, w) == Response{false, 'T', "args"});
    CHECK(one(d, "T F 915000000 10", 0, w) == Response{false, 'T', "args"});
    CHECK(one(d, "A 256", 0, w) == Response{false, 'A', "range"});
    CHECK(one(d, "A 1 256", 0, w) == Response{false, 'A', "args"});
    CHECK(one(d, "C X 1 1", 0, w) == Response{false, 'C', "args"});
    CHECK(one(d, "C A 7 100", 0, w) == Response{false, 'C', "args"});  // no stamp with seq 7
    CHECK(one(d, "P", 0, w) == Response{true, 'P', "1M"});
    CHECK(d.link().rate_bps == 0.7e6);
    CHECK(one(d, "P", 0, w) == Response{true, 'P', "2M"});
}

TEST_CASE("device: registers") {
    rf::World w;
    Device d(cfg());
    CHECK(one(d, "A 16", 0, w).detail == "16 64");
    CHECK(one(d, "F 915000000", 0, w).ack);
    CHECK(d.state().registers[kRegFreq2] == 0x5B);
    CHECK(d.state().registers[kRegFreq1] == 0x80);
    CHECK(d.state().registers[kRegFreq0] == 0x00);
    const auto all = one(d, "A", 0, w);
    CHECK(all.ack);
    CHECK(all.detail.size() == 512);
    CHECK(all.detail.substr(2 * 0x0C, 6) == "5b8000");
    CHECK(one(d, "A 16 200", 0, w).ack);
    CHECK(one(d, "A 16", 0, w).detail == "16 200");
    // writing the frequency word retunes
    CHECK(one(d, "A 12 91", 0, w).ack);
    CHECK(one(d, "A 13 0", 0, w).ack);
    CHECK(d.state().freq_hz == 910000000);
}

TEST_CASE("device: busy outside idle, STOP and RESET") {
    auto w = world_with_pl0(40.0);
    Device d(cfg(), [](double) { return kHere; });
    one(d, "F 915000000", 0, w);
    CHECK(one(d, "S D 10 0", 0, w).ack);
    CHECK(d.state().mode == Mode::Receiving);
    CHECK(one(d, "F 910000000", 0.1, w) == Response{false, 'F', "busy"});
    CHECK(one(d, "A", 0.1, w) == Response{false, 'A', "busy"});
    CHECK(one(d, "C R", 0.1, w).ack);
    CHECK(one(d, "H", 0.5, w).ack);
    CHECK(d.state().mode == Mode::Idle);
    const auto outs = d.advance(0.6, w);
    CHECK(pick<RssiReport>(outs).size() == 5);  // t = 0.0 .. 0.4
    CHECK(one(d, "S D 10 0", 1.0, w).ack);
    CHECK(one(d, "Z", 1.2, w).ack);
    CHECK(d.state().mode == Mode::Idle);
    CHECK(d.state().freq_hz == 0);
    CHECK(d.state().registers[kRegRxBwKhz] == 64);
    CHECK(one(d, "S D 10 0", 1.3, w).detail == "untuned");
}

TEST_CASE("device: RSSI reports") {
    auto w = world_with_pl0(40.0);
    w.start(cw_at(915e6 + 3000, -30.0), 0.0);  // -70 dBm at the receiver
    Device d(cfg(), [](double) { return kHere; });
    one(d, "F 915000000", 0, w);
    CHECK(one(d, "S C 10 20", 0, w).ack);
    auto outs = d.advance(3.0, w);
    auto reps = pick<RssiReport>(outs);
    REQUIRE(reps.size() == 20);
    CHECK(d.state().mode == Mode::Idle);
    for (const auto& r : reps) {
        CHECK(r.calculated);
        CHECK(std::abs(r.rssi_dbm + 70.0) <= 0.5);
    }
    CHECK(reps[1].t_dev - reps[0].t_dev == doctest::Approx(0.1));

    one(d, "S D 10 20", 3.0, w);
    reps = pick<RssiReport>(d.advance(6.0, w));
    REQUIRE(reps.size() == 20);
    for (const auto& r : reps) {
        CHECK_FALSE(r.calculated);
        CHECK(r.rssi_dbm == -70.0);
    }

    // noise only
    rf::World quiet = world_with_pl0(40.0, -100.0);
    Device q(cfg("q"), [](double) { return kHere; });
    one(q, "F 915000000", 0, quiet);
    one(q, "S D 10 10", 0, quiet);
    for (const auto& r : pick<RssiReport>(q.advance(2.0, quiet))) CHECK(std::abs(r.rssi_dbm + 100.0) <= 2.0);
}

TEST_CASE("device: frequency lock") {
    auto w = world_with_pl0(40.0);
    w.start(cw_at(915e6 + 2000, -40.0), 0.0);
    Device d(cfg(), [](double) { return kHere; });
    auto r = d.lock_freq(915e6, 0.0, w);
    CHECK(r.locked);
    CHECK(std::abs(r.f_locked_hz - (915e6 + 2000)) <= 100.0);

    rf::World quiet;
    CHECK_FALSE(d.lock_freq(915e6, 0.0, quiet).locked);

    auto two = world_with_pl0(40.0);
    two.start(cw_at(915e6 - 3000, -40.0, "a"), 0.0);
    two.start(cw_at(915e6 + 1500, -55.0, "b"), 0.0);
    r = d.lock_freq(915e6, 0.0, two);
    CHECK(r.locked);
    CHECK(std::abs(r.f_locked_hz - (915e6 - 3000)) <= 100.0);

    // L command produces a report
    CHECK(one(d, "L 915000000", 1.0, w).ack);
    const auto reps = pick<LockReport>(d.advance(3.0, w));
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].result.locked);
    CHECK(d.state().mode == Mode::Idle);
}

TEST_CASE("device: triggered capture") {
    auto w = world_with_pl0(40.0);
    w.start(cw_at(915e6 + 1000, -30.0), 0.5, 0.6);  // 100 ms burst at -70 dBm
    DeviceConfig c = cfg();
    c.clock_offset_s = 0.25;
    Device d(c, [](double) { return kHere; });
    one(d, "F 915000000", 0, w);
    CHECK(one(d, "S T 64000 0 -80", 0, w).ack);
    CHECK(d.state().mode == Mode::TriggeredArmed);
    const auto outs = d.advance(1.0, w);
    const auto trig = pick<TriggerEvent>(outs);
    REQUIRE(trig.size() == 1);
    // first sample at or after 0.5 s on the device clock
    CHECK(std::abs(trig[0].t_dev - (0.5 + 0.25)) <= 1.0 / 64000.0 + 1e-9);
    CHECK(trig[0].rssi_dbm >= -80.0);
    const auto caps = pick<IqCapture>(outs);
    REQUIRE(caps.size() == 1);
    CHECK(caps[0].triggered);
    // 81 pre-trigger samples, then ~6400 above threshold
    CHECK(caps[0].t0_dev == doctest::Approx(trig[0].t_dev - 81.0 / 64000.0));
    CHECK(caps[0].sample_count + caps[0].discarded == doctest::Approx(81 + 6400).epsilon(0.002));
    one(d, "H", 1.0, w);
}

TEST_CASE("device: continuous capture emits one capture with pauses") {
    auto w = world_with_pl0(40.0);
    w.start(cw_at(915e6 + 1000, -30.0), 0.0);
    Device d(cfg(), [](double) { return kHere; });
    one(d, "F 915000000", 0, w);
    CHECK(one(d, "S M 64000 64000", 0, w).ack);
    const auto caps = pick<IqCapture>(d.advance(2.0, w));
    REQUIRE(caps.size() == 1);
    CHECK(caps[0].sample_count + caps[0].discarded == 64000);
    CHECK_FALSE(caps[0].pauses.empty());
    CHECK(caps[0].packets.size() == (caps[0].sample_count + 80) / 81);
    CHECK(d.state().mode == Mode::Idle);
}

TEST_CASE("device: transmit and receive text") {
    auto w = world_with_pl0(60.0);
    Device tx(cfg("tx", 2), [](double) { return kHere; });
    Device rx(cfg("rx", 3), [](double) { return kHere; });
    one(rx, "F 915000000", 0, w);
    CHECK(one(rx, "R 100", 0.0, w).ack);
    CHECK(one(tx, "T F 915000000 10 HELLO world", 0.01, w) == Response{true, 'T', "F"});
    CHECK(tx.state().mode == Mode::Transmitting);
    tx.advance(0.2, w);
    CHECK(tx.state().mode == Mode::Idle);  // burst ends on its own
    const auto texts = pick<ReceivedText>(rx.advance(0.2, w));
    REQUIRE(texts.size() == 1);
    CHECK(texts[0].ok);
    CHECK(texts[0].text == "HELLO world");
}

TEST_CASE("device: CW transmit interval ends at STOP") {
    rf::World w;
    Device d(cfg(), [](double) { return kHere; });
    one(d, "F 915000000", 0, w);
    CHECK(one(d, "T C 0 10", 1.0, w).ack);  // 0 = tuned frequency
    REQUIRE(w.transmissions().size() == 1);
    CHECK(w.transmissions()[0].tx.freq_hz == 915e6);
    CHECK(w.transmissions()[0].t_start == 1.0);
    one(d, "H", 4.0, w);
    CHECK(w.transmissions()[0].t_end == 4.0);
    const auto hist = d.mode_history();
    double tx_s = 0;
    for (const auto& s : hist)
        if (s.mode == Mode::Transmitting) tx_s += s.duration_s;
    CHECK(tx_s == doctest::Approx(3.0));
}

TEST_CASE("device: clock stamp and apply") {
    rf::World w;
    DeviceConfig c = cfg();
    c.clock_offset_s = 0.5;
    Device d(c);
    CHECK(d.device_time(10.0) == doctest::Approx(10.5));
    CHECK(d.true_time(d.device_time(3.0)) == doctest::Approx(3.0));
    // stamp received at true 10.004 carrying gps 10.000, half-RTT 4 ms
    CHECK(one(d, "C S 1 10000000", 10.004, w).ack);
    CHECK(one(d, "C A 1 4000", 10.004, w) == Response{true, 'C', "A 1"});
    CHECK(d.device_time(20.0) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(one(d, "C R", 20.0, w).detail == "R 20000000");
}

TEST_CASE("device: energy") {
    PowerProfile p;
    const std::vector<ModeSpan> idle{{Mode::Idle, 36000.0}};
    const auto r = energy_report(idle, p);
    CHECK(r.joules == doctest::Approx(648.0));
    CHECK(r.average_mw == doctest::Approx(18.0));
    CHECK(r.battery_joules == doctest::Approx(2397.6));
    CHECK(r.idle_lifetime_h == doctest::Approx(37.0));
    p.battery_mah = 850;
    CHECK(energy_report(idle, p).idle_lifetime_h == doctest::Approx(174.7222));
    const std::vector<ModeSpan> mixed{{Mode::Idle, 10}, {Mode::Receiving, 10}, {Mode::Transmitting, 10}};
    CHECK(energy_report(mixed, PowerProfile{}).joules == doctest::Approx(0.18 + 1.0 + 1.8));
    PowerProfile bad;
    bad.tx_mw = 200;
    CHECK_THROWS(bad.validate());
}
