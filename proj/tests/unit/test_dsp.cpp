#include <string>

#include "doctest.h"
#include "crowdsdr/dsp.hpp"
#include "crowdsdr/rfmodel.hpp"

using namespace crowdsdr;
using namespace crowdsdr::dsp;

namespace {

Capture make_capture(const std::string& payload, double fs, std::uint64_t seed, double snr_db = 30.0,
                     std::size_t lead = 300, double skew = 0.0) {
    const std::vector<std::uint8_t> p(payload.begin(), payload.end());
    const auto frame = build_frame(p);
    rf::FskParams fp;
    auto bb = rf::synth_fsk(frame, fp, fs, skew);
    rf::Baseband stream(lead, {0.0, 0.0});
    stream.insert(stream.end(), bb.begin(), bb.end());
    stream.resize(stream.size() + lead, {0.0, 0.0});
    // unit-power burst at 0 dBm over a noise floor snr_db below it
    stream = rf::add_noise(std::move(stream), 0.0, -snr_db, seed);
    Capture c;
    c.device_id = "d";
    c.fs_hz = fs;
    for (const auto& s : stream) c.samples.push_back(sampling::quantize(s, 4.0));
    return c;
}

}  // namespace

TEST_CASE("dsp: CRC-16/CCITT check value") {
    const std::string s = "123456789";
    const std::vector<std::uint8_t> v(s.begin(), s.end());
    CHECK(crc16_ccitt(v) == 0x29B1);
    CHECK(crc16_ccitt({}) == 0xFFFF);
}

TEST_CASE("dsp: frame layout") {
    const std::vector<std::uint8_t> p{'H', 'I'};
    const auto f = build_frame(p);
    REQUIRE(f.size() == 4 + 2 + 1 + 2 + 2);
    CHECK(f[0] == 0xAA);
    CHECK(f[3] == 0xAA);
    CHECK(f[4] == 0xD3);
    CHECK(f[5] == 0x91);
    CHECK(f[6] == 2);
    CHECK(f[7] == 'H');
    const std::vector<std::uint8_t> covered{2, 'H', 'I'};
    const auto crc = crc16_ccitt(covered);
    CHECK(f[9] == (crc >> 8));
    CHECK(f[10] == (crc & 0xFF));
    FrameConfig bad;
    bad.sync_word = {0x01};
    CHECK_THROWS(build_frame(p, bad));
    CHECK_THROWS(build_frame(std::vector<std::uint8_t>(256), FrameConfig{}));
}

TEST_CASE("dsp: discriminator reads tone frequency") {
    const double fs = 64000.0;
    auto bb = rf::synth_cw(2000.0, fs, 512, 1.0);
    Capture c;
    c.fs_hz = fs;
    for (auto s : bb) c.samples.push_back(sampling::quantize(s, 1.0));
    const auto f = discriminate(c);
    REQUIRE(f.size() == 511);
    double mean = 0;
    for (double x : f) mean += x;
    mean /= static_cast<double>(f.size());
    // one angle unit is 62.5 Hz at 64 kS/s
    CHECK(mean == doctest::Approx(2000.0).epsilon(0.02));
    for (double x : f) CHECK(std::abs(x - 2000.0) <= 62.5 + 1e-9);
}

TEST_CASE("dsp: discriminator handles wrap at ±π") {
    Capture c;
    c.fs_hz = 1024.0;
    c.samples = {{1, 510}, {1, -510}};
    const auto f = discriminate(c);
    CHECK(f[0] == doctest::Approx(4.0));
}

TEST_CASE("dsp: timeline gaps repeat the previous angle") {
    std::vector<sampling::TimedSample> tl{{0.0, {5, 10}}, {1.0 / 1000, {5, 20}}, {4.0 / 1000, {5, 30}}};
    const auto c = capture_from_timeline("x", tl, 1000.0, 9e8);
    REQUIRE(c.samples.size() == 5);
    CHECK(c.samples[2] == sampling::IQSample{0, 20});
    CHECK(c.samples[3] == sampling::IQSample{0, 20});
    const auto f = discriminate(c);
    CHECK(f[1] == 0.0);
    CHECK(f[2] == 0.0);
}

TEST_CASE("dsp: int16 import wraps angles") {
    const std::vector<std::uint16_t> m{1, 2};
    const std::vector<std::int16_t> a{600, -1};
    const auto s = samples_from_int16(m, a);
    CHECK(s[0].angle == 600 - 1024);
    CHECK(s[1].angle == -1);
    CHECK_THROWS(samples_from_int16(m, std::vector<std::int16_t>{1}));
}

TEST_CASE("dsp: 2-FSK loopback recovers payload") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const std::string msg = "HELLO " + std::to_string(seed);
        const auto c = make_capture(msg, 64000.0, seed, 20.0, 200 + 17 * seed);
        const auto r = demodulate_fsk(c, {}, {});
        CHECK(std::string(r.payload.begin(), r.payload.end()) == msg);
        CHECK(r.diag.samples_per_symbol == doctest::Approx(12.8).epsilon(0.01));
    }
}

TEST_CASE("dsp: loopback tolerates symbol clock skew") {
    const auto c = make_capture("skewed clock test payload", 64000.0, 3, 25.0, 250, 0.005);
    const auto r = demodulate_fsk(c, {}, {});
    CHECK(std::string(r.payload.begin(), r.payload.end()) == "skewed clock test payload");
    CHECK(r.diag.samples_per_symbol == doctest::Approx(12.8 / 1.005).epsilon(0.002));
}

TEST_CASE("dsp: no frame and corrupted frame") {
    Capture quiet;
    quiet.fs_hz = 64000.0;
    const auto noise = rf::add_noise(rf::Baseband(4000, {0, 0}), 0.0, 0.0, 5);
    for (auto s : noise) quiet.samples.push_back(sampling::quantize(s, 4.0));
    try {
        demodulate_fsk(quiet, {}, {});
        FAIL("expected NoFrame");
    } catch (const DemodError& e) {
        CHECK(e.kind() == DemodError::Kind::NoFrame);
    }

    auto c = make_capture("payload under test", 64000.0, 8, 30.0);
    // flip the sign of the instantaneous frequency across one payload symbol
    const std::size_t sym = 300 + static_cast<std::size_t>(12.8 * (6 * 8 + 8 + 20));
    for (std::size_t i = sym; i < c.samples.size(); ++i)
        c.samples[i].angle = sampling::wrap_angle(-c.samples[i].angle + 2 * c.samples[sym].angle);
    try {
        demodulate_fsk(c, {}, {});
        FAIL("expected CRC failure");
    } catch (const DemodError& e) {
        CHECK(e.kind() == DemodError::Kind::Crc);
        CHECK_FALSE(e.raw_bytes().empty());
    }
}

TEST_CASE("dsp: alignment lag sign and size") {
    const auto a = make_capture("alignment reference signal", 64000.0, 11, 30.0, 300);
    Capture b = a;
    b.device_id = "b";
    b.samples.insert(b.samples.begin(), 7, sampling::IQSample{0, 0});
    Capture c2 = a;
    c2.device_id = "c";
    c2.samples.erase(c2.samples.begin(), c2.samples.begin() + 5);
    std::vector<Capture> caps{a, b, c2};
    const auto r = align_captures(caps, 20);
    CHECK(r.lags[0] == 0.0);
    CHECK(r.lags[1] == doctest::Approx(7.0));
    CHECK(r.lags[2] == doctest::Approx(-5.0));
    CHECK(r.reliable[1]);
    CHECK(r.peaks[1] > 0.9);

    // a timestamp correction moves the lag, and the window is centred on it
    caps[1].t0 = -3.0 / 64000.0;
    const auto r2 = align_captures(caps, 20);
    CHECK(r2.lags[1] == doctest::Approx(4.0));
    CHECK(r2.peaks[1] > 0.9);
    CHECK_THROWS_AS(align_captures(std::span<const Capture>(caps).first(1), 10), AlignError);
    CHECK_THROWS_AS(align_captures(caps, 10, 5), AlignError);
}
