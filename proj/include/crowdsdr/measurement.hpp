#pragma once

// Server-visible measurement records and their JSON form. One record per
// line in logs; IQ packets travel as one base64 blob of concatenated
// 244-byte packets.

#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "crowdsdr/device.hpp"
#include "crowdsdr/geo.hpp"
#include "crowdsdr/sampling.hpp"

namespace crowdsdr::meas {

using nlohmann::json;

enum class Kind { Rssi, IqCapture, Trigger };

std::string to_string(Kind k);
Kind kind_from_string(std::string_view s);

struct RssiPayload {
    double rssi_dbm = 0.0;
    bool calculated = false;
    std::optional<bool> locked;
    std::optional<double> lock_offset_hz;  // f_locked - freq_hz

    bool operator==(const RssiPayload&) const = default;
};

struct IqPayload {
    sampling::CaptureMode mode = sampling::CaptureMode::Magnitude;
    double fs_hz = 0.0;
    bool triggered = false;
    std::uint64_t sample_count = 0;
    std::vector<sampling::PacketBytes> packets;
    std::vector<sampling::PauseRecord> pauses;

    bool operator==(const IqPayload&) const = default;
};

struct TriggerPayload {
    double rssi_dbm = 0.0;
    double threshold_dbm = 0.0;

    bool operator==(const TriggerPayload&) const = default;
};

struct Measurement {
    std::string device_id;
    double ts = 0.0;  // device clock, seconds
    double lat = 0.0;
    double lon = 0.0;
    Kind kind = Kind::Rssi;
    double freq_hz = 0.0;
    std::variant<RssiPayload, IqPayload, TriggerPayload> payload;

    bool operator==(const Measurement&) const = default;
    /// RSSI carried by the record, if its kind has one.
    std::optional<double> rssi_dbm() const;
};

class SchemaError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

json to_json(const Measurement& m);
/// Validates field presence, types and ranges; SchemaError names the path.
Measurement from_json(const json& j);
std::string to_line(const Measurement& m);

struct DedupKey {
    std::string device_id;
    std::int64_t ts_ms = 0;
    Kind kind = Kind::Rssi;

    auto operator<=>(const DedupKey&) const = default;
};

DedupKey dedup_key(const Measurement& m);

std::string base64_encode(std::span<const std::uint8_t> data);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Annotates a device output with identity and position. Lock reports and
/// received text are not measurements and give nullopt.
std::optional<Measurement> from_output(const std::string& device_id, geo::GeoPoint pos,
                                       const device::Output& out);

/// Localization pre-filter: keep RSSI records that phase-locked within
/// ±span/2 of the tuned frequency and read at or above `floor_dbm`.
bool usable_for_locate(const Measurement& m, double floor_dbm, double span_hz = 10000.0);

}  // namespace crowdsdr::meas
