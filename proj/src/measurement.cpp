#include "crowdsdr/measurement.hpp"

#include <cmath>

namespace crowdsdr::meas {

std::string to_string(Kind k) {
    switch (k) {
        case Kind::Rssi: return "rssi";
        case Kind::IqCapture: return "iq_capture";
        case Kind::Trigger: return "trigger";
    }
    return "?";
}

Kind kind_from_string(std::string_view s) {
    if (s == "rssi") return Kind::Rssi;
    if (s == "iq_capture") return Kind::IqCapture;
    if (s == "trigger") return Kind::Trigger;
    throw SchemaError("kind: unknown value '" + std::string(s) + "'");
}

std::optional<double> Measurement::rssi_dbm() const {
    if (const auto* r = std::get_if<RssiPayload>(&payload)) return r->rssi_dbm;
    if (const auto* t = std::get_if<TriggerPayload>(&payload)) return t->rssi_dbm;
    return std::nullopt;
}

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

const json& field(const json& j, const char* key, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(path + key + ": missing");
    return *it;
}

double number(const json& j, const char* key, const std::string& path) {
    const auto& v = field(j, key, path);
    if (!v.is_number()) throw SchemaError(path + key + ": expected number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw SchemaError(path + key + ": not finite");
    return d;
}

std::uint64_t unsigned_int(const json& j, const char* key, const std::string& path) {
    const auto& v = field(j, key, path);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw SchemaError(path + key + ": expected non-negative integer");
    return v.get<std::uint64_t>();
}

std::string string(const json& j, const char* key, const std::string& path) {
    const auto& v = field(j, key, path);
    if (!v.is_string()) throw SchemaError(path + key + ": expected string");
    return v.get<std::string>();
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> data) {
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < data.size(); i += 3) {
        const std::uint32_t v = std::uint32_t{data[i]} << 16 | std::uint32_t{data[i + 1]} << 8 | data[i + 2];
        out += kB64[v >> 18];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
    }
    if (const std::size_t rem = data.size() - i; rem > 0) {
        std::uint32_t v = std::uint32_t{data[i]} << 16;
        if (rem == 2) v |= std::uint32_t{data[i + 1]} << 8;
        out += kB64[v >> 18];
        out += kB64[(v >> 12) & 63];
        out += rem == 2 ? kB64[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw SchemaError("base64: length not a multiple of 4");
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        const int pad = last ? (text[i + 3] == '=') + (text[i + 2] == '=') : 0;
        if (pad == 1 && text[i + 2] == '=') throw SchemaError("base64: bad padding");
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k) {
            const int d = k >= 4 - pad ? 0 : value(text[i + k]);
            if (d < 0) throw SchemaError("base64: invalid character");
            v = v << 6 | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>(v >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
    }
    return out;
}

json to_json(const Measurement& m) {
    json p = json::object();
    std::visit(
        [&](const auto& pl) {
            using T = std::decay_t<decltype(pl)>;
            if constexpr (std::is_same_v<T, RssiPayload>) {
                p["rssi_dbm"] = pl.rssi_dbm;
                p["source"] = pl.calculated ? "calculated" : "direct";
                if (pl.locked) p["locked"] = *pl.locked;
                if (pl.lock_offset_hz) p["lock_offset_hz"] = *pl.lock_offset_hz;
            } else if constexpr (std::is_same_v<T, IqPayload>) {
                p["mode"] = sampling::to_string(pl.mode);
                p["fs_hz"] = pl.fs_hz;
                p["triggered"] = pl.triggered;
                p["sample_count"] = pl.sample_count;
                std::vector<std::uint8_t> blob;
                blob.reserve(pl.packets.size() * sampling::kPacketBytes);
                for (const auto& pk : pl.packets) blob.insert(blob.end(), pk.begin(), pk.end());
                p["packets"] = base64_encode(blob);
                json pauses = json::array();
                for (const auto& pr : pl.pauses) pauses.push_back({{"after_index", pr.after_sample_index}, {"ticks", pr.ticks}});
                p["pauses"] = std::move(pauses);
            } else {
                p["rssi_dbm"] = pl.rssi_dbm;
                p["threshold_dbm"] = pl.threshold_dbm;
            }
        },
        m.payload);
    return json{{"device_id", m.device_id}, {"ts", m.ts},           {"lat", m.lat},          {"lon", m.lon},
                {"kind", to_string(m.kind)}, {"freq_hz", m.freq_hz}, {"payload", std::move(p)}};
}

Measurement from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("measurement: expected object");
    Measurement m;
    m.device_id = string(j, "device_id", "");
    if (m.device_id.empty()) throw SchemaError("device_id: empty");
    m.ts = number(j, "ts", "");
    m.lat = number(j, "lat", "");
    m.lon = number(j, "lon", "");
    if (!geo::valid({m.lat, m.lon})) throw SchemaError("lat/lon: out of range");
    m.kind = kind_from_string(string(j, "kind", ""));
    m.freq_hz = number(j, "freq_hz", "");
    const auto& p = field(j, "payload", "");
    if (!p.is_object()) throw SchemaError("payload: expected object");
    switch (m.kind) {
        case Kind::Rssi: {
            RssiPayload r;
            r.rssi_dbm = number(p, "rssi_dbm", "payload.");
            const auto src = string(p, "source", "payload.");
            if (src != "direct" && src != "calculated") throw SchemaError("payload.source: unknown value");
            r.calculated = src == "calculated";
            if (p.contains("locked")) {
                if (!p["locked"].is_boolean()) throw SchemaError("payload.locked: expected boolean");
                r.locked = p["locked"].get<bool>();
            }
            if (p.contains("lock_offset_hz")) r.lock_offset_hz = number(p, "lock_offset_hz", "payload.");
            m.payload = r;
            break;
        }
        case Kind::IqCapture: {
            IqPayload q;
            try {
                q.mode = sampling::capture_mode_from_string(string(p, "mode", "payload."));
            } catch (const sampling::SamplingError&) {
                throw SchemaError("payload.mode: unknown value");
            }
            q.fs_hz = number(p, "fs_hz", "payload.");
            if (!(q.fs_hz > 0.0)) throw SchemaError("payload.fs_hz: must be positive");
            if (p.contains("triggered")) q.triggered = p["triggered"].is_boolean() && p["triggered"].get<bool>();
            q.sample_count = unsigned_int(p, "sample_count", "payload.");
            const auto blob = base64_decode(string(p, "packets", "payload."));
            if (blob.size() % sampling::kPacketBytes != 0)
                throw SchemaError("payload.packets: not a whole number of packets");
            q.packets.resize(blob.size() / sampling::kPacketBytes);
            for (std::size_t i = 0; i < q.packets.size(); ++i)
                std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(i * sampling::kPacketBytes),
                            sampling::kPacketBytes, q.packets[i].begin());
            if (q.sample_count > q.packets.size() * sampling::samples_per_packet(q.mode))
                throw SchemaError("payload.sample_count: exceeds packet capacity");
            const auto& pauses = field(p, "pauses", "payload.");
            if (!pauses.is_array()) throw SchemaError("payload.pauses: expected array");
            for (const auto& pr : pauses) {
                if (!pr.is_object()) throw SchemaError("payload.pauses[]: expected object");
                q.pauses.push_back({unsigned_int(pr, "after_index", "payload.pauses[]."),
                                    unsigned_int(pr, "ticks", "payload.pauses[].")});
            }
            m.payload = std::move(q);
            break;
        }
        case Kind::Trigger: {
            TriggerPayload t;
            t.rssi_dbm = number(p, "rssi_dbm", "payload.");
            t.threshold_dbm = number(p, "threshold_dbm", "payload.");
            m.payload = t;
            break;
        }
    }
    return m;
}

std::string to_line(const Measurement& m) { return to_json(m).dump(); }

DedupKey dedup_key(const Measurement& m) { return {m.device_id, std::llround(m.ts * 1000.0), m.kind}; }

std::optional<Measurement> from_output(const std::string& device_id, geo::GeoPoint pos, const device::Output& out) {
    Measurement m;
    m.device_id = device_id;
    m.lat = pos.lat;
    m.lon = pos.lon;
    if (const auto* r = std::get_if<device::RssiReport>(&out)) {
        m.ts = r->t_dev;
        m.kind = Kind::Rssi;
        m.freq_hz = r->freq_hz;
        RssiPayload p;
        p.rssi_dbm = r->rssi_dbm;
        p.calculated = r->calculated;
        if (r->lock) {
            p.locked = r->lock->locked;
            if (r->lock->locked) p.lock_offset_hz = r->lock->f_locked_hz - r->freq_hz;
        }
        m.payload = p;
        return m;
    }
    if (const auto* c = std::get_if<device::IqCapture>(&out)) {
        m.ts = c->t0_dev;
        m.kind = Kind::IqCapture;
        m.freq_hz = c->freq_hz;
        m.payload = IqPayload{c->mode, c->fs_hz, c->triggered, c->sample_count, c->packets, c->pauses};
        return m;
    }
    if (const auto* t = std::get_if<device::TriggerEvent>(&out)) {
        m.ts = t->t_dev;
        m.kind = Kind::Trigger;
        m.freq_hz = t->freq_hz;
        m.payload = TriggerPayload{t->rssi_dbm, t->threshold_dbm};
        return m;
    }
    return std::nullopt;
}

bool usable_for_locate(const Measurement& m, double floor_dbm, double span_hz) {
    const auto* r = std::get_if<RssiPayload>(&m.payload);
    if (!r || m.kind != Kind::Rssi) return false;
    if (!r->locked || !*r->locked || !r->lock_offset_hz) return false;
    if (std::abs(*r->lock_offset_hz) > span_hz / 2.0) return false;
    return r->rssi_dbm >= floor_dbm;
}

}  // namespace crowdsdr::meas
