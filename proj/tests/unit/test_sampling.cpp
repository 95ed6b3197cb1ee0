#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "crowdsdr/sampling.hpp"

using namespace crowdsdr;
using namespace crowdsdr::sampling;

namespace {

std::vector<IQSample> ramp(std::size_t n) {
    std::vector<IQSample> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = {static_cast<std::uint32_t>((i * 977) % 131072) & ~7u, wrap_angle(static_cast<int>(i * 13))};
    return v;
}

}  // namespace

TEST_CASE("sampling: quantize") {
    const auto s = quantize({1.0, 0.0}, 1.0);
    CHECK(s.magnitude == kMagnitudeMax);
    CHECK(s.angle == 0);
    CHECK(quantize({10.0, 0.0}, 1.0).magnitude == kMagnitudeMax);
    CHECK(quantize({0.0, 0.5}, 1.0).angle == 256);
    CHECK(quantize({-1.0, 1e-18}, 1.0).angle == -512);  // +π wraps onto -512
    CHECK(quantize({0.0, -0.5}, 1.0).angle == -256);
    CHECK(quantize({0.5, 0.0}, 1.0).magnitude == 65536);  // round(65535.5)
    CHECK(quantize({}, 1.0) == IQSample{0, 0});
    CHECK(wrap_angle(512) == -512);
    CHECK(wrap_angle(-513) == 511);
    CHECK(wrap_angle(1024 + 5) == 5);
}

TEST_CASE("sampling: 3-byte compression layout") {
    // (8, 0): magnitude field 1 at bit 10
    const auto c = compress({8, 0});
    CHECK(c == CompressedSample{0x00, 0x04, 0x00});
    CHECK(compress({kMagnitudeMax, -1}) == CompressedSample{0xFF, 0xFF, 0xFF});
    CHECK(compress({0, -512}) == CompressedSample{0x00, 0x02, 0x00});
    CHECK(compress({0, 511}) == CompressedSample{0x00, 0x01, 0xFF});
    const auto d = decompress(std::span<const std::uint8_t, 3>(c));
    CHECK(d == IQSample{8, 0});
    // low three magnitude bits are dropped
    const auto lossy = compress({15, 3});
    CHECK(decompress(std::span<const std::uint8_t, 3>(lossy)) == IQSample{8, 3});
}

TEST_CASE("sampling: golden packets") {
    const std::string dir = CROWDSDR_DATA_DIR "/golden/";
    {
        std::vector<IQSample> s(81);
        for (std::size_t i = 0; i < 81; ++i)
            s[i] = {static_cast<std::uint32_t>((1621 * i + 7) % 131072), static_cast<std::int16_t>((37 * i) % 1024 - 512)};
        const auto want = oracle::read_hex(dir + "magnitude_ramp_seq5.hex");
        const auto got = packetize(s, 5);
        REQUIRE(want.size() == kPacketBytes);
        CHECK(std::equal(got.begin(), got.end(), want.begin()));
    }
    {
        std::vector<IQSample> s(81);
        const std::uint32_t mags[3] = {131071, 8, 0};
        const std::int16_t angs[5] = {-512, 511, 0, -1, 1};
        for (std::size_t i = 0; i < 81; ++i) s[i] = {mags[i % 3], angs[i % 5]};
        const auto want = oracle::read_hex(dir + "magnitude_edges_seq255.hex");
        const auto got = packetize(s, 255);
        CHECK(std::equal(got.begin(), got.end(), want.begin()));
        const auto back = depacketize(want);
        CHECK(back.seq == 255);
        for (std::size_t i = 0; i < 81; ++i) CHECK(back.samples[i] == IQSample{mags[i % 3] & ~7u, angs[i % 5]});
    }
    {
        std::vector<IQSample> s(192);
        for (std::size_t i = 0; i < 192; ++i) s[i] = {0, static_cast<std::int16_t>((53 * i) % 1024 - 512)};
        const auto want = oracle::read_hex(dir + "phase_ramp_seq3.hex");
        const auto got = packetize(s, 3, CaptureMode::Phase);
        CHECK(std::equal(got.begin(), got.end(), want.begin()));
        const auto back = depacketize(want, CaptureMode::Phase);
        CHECK(back.seq == 3);
        CHECK(back.samples == s);
    }
}

TEST_CASE("sampling: packetize errors") {
    const auto s = ramp(80);
    CHECK_THROWS_AS(packetize(s, 0), SamplingError);
    std::vector<std::uint8_t> short_pkt(243);
    CHECK_THROWS_AS(depacketize(short_pkt), SamplingError);
    PacketBytes mag_pkt{};
    CHECK_THROWS_AS(depacketize(mag_pkt, CaptureMode::Phase), SamplingError);
    CHECK(samples_per_packet(CaptureMode::Phase) == 192);
    CHECK(capture_mode_from_string("phase") == CaptureMode::Phase);
    CHECK_THROWS(capture_mode_from_string("x"));
}

TEST_CASE("sampling: link presets") {
    CHECK(LinkModel::from_preset("le-2m").rate_bps == 1.3e6);
    CHECK(LinkModel::from_preset("le-1m").rate_bps == 0.7e6);
    CHECK(std::isinf(LinkModel::from_preset("ideal").rate_bps));
    CHECK(LinkModel::from_preset("interferers-2").rate_bps == doctest::Approx(1.18e6));
    CHECK_THROWS(LinkModel::from_preset("interferers-9"));
    CHECK_THROWS(LinkModel::from_preset("wifi"));
}

TEST_CASE("sampling: pipeline limits") {
    CHECK_THROWS_AS(CapturePipeline(64001.0, LinkModel{}), SamplingError);
    CHECK_NOTHROW(CapturePipeline(104000.0, LinkModel{}, CaptureMode::Phase));
    CHECK_THROWS_AS(CapturePipeline(105000.0, LinkModel{}, CaptureMode::Phase), SamplingError);
    CHECK_THROWS_AS(CapturePipeline(1000.0, LinkModel{}, CaptureMode::Magnitude, 1), SamplingError);
}

TEST_CASE("sampling: no pauses when the link keeps up") {
    const auto src = ramp(40000);
    const auto r = run_capture_pipeline(src, 40000.0, LinkModel::from_preset("le-2m"));
    CHECK(r.pauses.empty());
    CHECK(r.discarded == 0);
    CHECK(r.emitted == src.size());
    CHECK(r.packets.size() == (src.size() + 80) / 81);
    CHECK(r.padded == r.packets.size() * 81 - src.size());
    const auto tl = reconstruct_timeline(r.packets, r.pauses, 40000.0, 5.0, CaptureMode::Magnitude, r.emitted);
    REQUIRE(tl.size() == src.size());
    for (std::size_t i = 0; i < src.size(); i += 997) {
        CHECK(tl[i].sample == src[i]);
        CHECK(tl[i].t == doctest::Approx(5.0 + i / 40000.0));
    }
    // sequence numbers increment and wrap
    for (std::size_t k = 0; k < r.packets.size(); ++k) CHECK(r.packets[k][0] == static_cast<std::uint8_t>(k));
}

TEST_CASE("sampling: pauses at 64 kS/s match the event oracle") {
    const std::uint64_t n = 64000;
    const auto src = ramp(n);
    const auto r = run_capture_pipeline(src, 64000.0, LinkModel::from_preset("le-2m"));
    CHECK_FALSE(r.pauses.empty());
    CHECK(r.emitted + r.discarded == n);
    const auto want = oracle::capture_ticks(n, 64000.0, 1.3e6);
    const auto got = reconstruct_ticks(r.emitted, r.pauses, 64000.0);
    REQUIRE(got.size() == want.ticks.size());
    CHECK(got == want.ticks);
    CHECK(r.packets.size() == want.packets);
    // retained samples come out in order, unmodified apart from the low bits
    const auto tl = reconstruct_timeline(r.packets, r.pauses, 64000.0, 0.0, CaptureMode::Magnitude, r.emitted);
    for (std::size_t i = 0; i < tl.size(); ++i) {
        const auto j = static_cast<std::size_t>(want.ticks[i] / 250);
        REQUIRE(tl[i].sample == src[j]);
    }
}

TEST_CASE("sampling: jittered links drain everything and stay ordered") {
    const auto src = ramp(20000);
    for (const char* preset : {"pocket", "backpack", "interferers-3", "le-1m"}) {
        const auto r = run_capture_pipeline(src, 64000.0, LinkModel::from_preset(preset, 9));
        CHECK(r.emitted + r.discarded == src.size());
        CHECK(r.packets.size() == (r.emitted + 80) / 81);
        for (std::size_t k = 1; k < r.pauses.size(); ++k)
            CHECK(r.pauses[k].after_sample_index > r.pauses[k - 1].after_sample_index);
        std::uint64_t total = 0;
        for (const auto& p : r.pauses) total += p.ticks;
        // a pause still open at the end of the capture is never reported
        CHECK(total <= r.discarded * 250);
        CHECK(total > 0);
    }
}

TEST_CASE("sampling: reconstruct rejects unordered pauses") {
    std::vector<PauseRecord> p{{10, 5}, {10, 7}};
    CHECK_THROWS_AS(reconstruct_ticks(20, p, 64000.0), SamplingError);
    std::vector<PacketBytes> one(1);
    CHECK_THROWS_AS(reconstruct_timeline(one, {}, 1000.0, 0.0, CaptureMode::Magnitude, 82), SamplingError);
}
