#include "crowdsdr/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace crowdsdr::gw {

MobilityTrace::MobilityTrace(std::vector<Waypoint> points) : points_(std::move(points)) {
    if (points_.empty()) throw std::invalid_argument("mobility: no waypoints");
    for (std::size_t i = 0; i < points_.size(); ++i) {
        if (!geo::valid(points_[i].pos)) throw std::invalid_argument("mobility: waypoint out of range");
        if (i > 0 && !(points_[i].t > points_[i - 1].t))
            throw std::invalid_argument("mobility: timestamps must be strictly increasing");
    }
}

geo::GeoPoint MobilityTrace::position(double t) const {
    if (points_.empty()) return {};
    if (t <= points_.front().t) return points_.front().pos;
    if (t >= points_.back().t) return points_.back().pos;
    auto hi = std::upper_bound(points_.begin(), points_.end(), t,
                               [](double v, const Waypoint& w) { return v < w.t; });
    auto lo = hi - 1;
    const double a = (t - lo->t) / (hi->t - lo->t);
    return {lo->pos.lat + a * (hi->pos.lat - lo->pos.lat), lo->pos.lon + a * (hi->pos.lon - lo->pos.lon)};
}

bool UplinkTrace::up(double t) const {
    return std::none_of(down.begin(), down.end(), [&](const Interval& iv) { return t >= iv.t0 && t < iv.t1; });
}

double UplinkTrace::next_up(double t) const {
    // intervals may overlap or touch; iterate until stable
    bool moved = true;
    while (moved) {
        moved = false;
        for (const auto& iv : down) {
            if (t >= iv.t0 && t < iv.t1) {
                t = iv.t1;
                moved = true;
            }
        }
    }
    return t;
}

namespace {

std::string fmt_num(double v) {
    if (v == std::round(v) && std::abs(v) < 9e15) return std::to_string(static_cast<long long>(v));
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

double num(const nlohmann::json& p, const char* key, double def) {
    return p.contains(key) ? p[key].get<double>() : def;
}

}  // namespace

std::vector<GatewayAction> translate_server_command(const ServerCommand& cmd) {
    cmd.validate();
    const auto& p = cmd.params;
    const auto& k = cmd.kind;
    std::vector<GatewayAction> out;
    auto tune = [&] { out.push_back(DeviceLine{"F " + fmt_num(std::round(p["freq_hz"].get<double>()))}); };
    if (k == "report_rssi") {
        tune();
        const bool calculated = p.value("source", std::string("direct")) == "calculated";
        std::string line = std::string("S ") + (calculated ? "C " : "D ") + fmt_num(num(p, "rate_hz", 1.0)) + " " +
                           fmt_num(num(p, "count", 0.0));
        if (p.value("lock", false)) line += " 1";
        out.push_back(DeviceLine{line});
    } else if (k == "triggered_capture") {
        tune();
        std::string line = "S T " + fmt_num(p["fs_hz"].get<double>()) + " " + fmt_num(num(p, "count", 0.0)) + " " +
                           fmt_num(p["threshold_dbm"].get<double>());
        if (p.contains("pretrigger")) line += " " + fmt_num(p["pretrigger"].get<double>());
        out.push_back(DeviceLine{line});
    } else if (k == "continuous_capture") {
        tune();
        const bool phase = p.value("mode", std::string("magnitude")) == "phase";
        out.push_back(DeviceLine{std::string("S ") + (phase ? "P " : "M ") + fmt_num(p["fs_hz"].get<double>()) + " " +
                                 fmt_num(num(p, "count", 0.0))});
    } else if (k == "clock") {
        out.push_back(ClockSyncAction{});
    } else if (k == "stop") {
        out.push_back(DeviceLine{"H"});
    } else if (k == "transmit") {
        const std::string f = fmt_num(std::round(p["freq_hz"].get<double>()));
        const std::string pw = fmt_num(p["power_dbm"].get<double>());
        if (p.contains("text"))
            out.push_back(DeviceLine{"T F " + f + " " + pw + " " + p["text"].get<std::string>()});
        else
            out.push_back(DeviceLine{"T C " + f + " " + pw});
    } else if (k == "upload") {
        out.push_back(UploadAction{num(p, "t_start", 0.0)});
    } else if (k == "debug") {
        out.push_back(DeviceLine{p["raw"].get<std::string>()});
    }
    return out;
}

GatewaySession::GatewaySession(GatewayConfig cfg, device::DeviceConfig dev)
    : cfg_(std::move(cfg)),
      device_([&] {
          dev.id = cfg_.device_id;
          return dev;
      }()),
      rng_(rf::mix_seed(cfg_.seed, rf::link_key(cfg_.device_id, "gateway"))) {
    if (cfg_.device_id.empty()) throw std::invalid_argument("gateway: empty device id");
    if (cfg_.mobility.points().empty()) cfg_.mobility = MobilityTrace::stationary({});
    device_.set_position_fn([this](double t) { return cfg_.mobility.position(t); });
}

geo::GeoPoint GatewaySession::fix(double t) const {
    const auto p = cfg_.mobility.position(t);
    if (cfg_.fix_noise_m <= 0.0) return p;
    std::uint64_t bits;
    std::memcpy(&bits, &t, sizeof bits);
    std::mt19937_64 g(rf::mix_seed(cfg_.seed ^ 0x9e3779b97f4a7c15ULL, bits));
    std::normal_distribution<double> n(0.0, cfg_.fix_noise_m);
    const double dx = n(g);
    const double dy = n(g);
    const auto xy = geo::to_local_xy(p, p);
    return geo::from_local_xy({xy.x + dx, xy.y + dy}, p);
}

std::vector<device::Response> GatewaySession::send_device(const std::string& line, double t, rf::World& world) {
    auto r = device_.handle_command(line, t, world);
    route(device_.advance(device_.now(), world));
    return r;
}

void GatewaySession::step(double t_end, rf::World& world) { route(device_.advance(t_end, world)); }

void GatewaySession::route(std::vector<device::Output> outs) {
    for (auto& o : outs) {
        if (auto* txt = std::get_if<device::ReceivedText>(&o)) {
            received_.push_back(std::move(*txt));
            continue;
        }
        if (auto* lk = std::get_if<device::LockReport>(&o)) {
            locks_.push_back(*lk);
            continue;
        }
        if (const auto* c = std::get_if<device::IqCapture>(&o)) {
            stats_.pauses += c->pauses.size();
            stats_.discarded_samples += c->discarded;
        }
        const double t_dev = std::visit(
            [](const auto& v) -> double {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, device::IqCapture>)
                    return v.t0_dev;
                else
                    return v.t_dev;
            },
            o);
        const double t_true = device_.true_time(t_dev);
        auto m = meas::from_output(cfg_.device_id, fix(t_true), o);
        if (!m) continue;
        ++stats_.produced;
        if (cfg_.mode == GatewayMode::Logging) {
            log_.push_back(std::move(*m));
            ++stats_.logged;
        } else if (cfg_.uplink.up(t_true)) {
            outbox_.push_back(std::move(*m));
            ++stats_.forwarded;
        } else {
            ++stats_.dropped;
        }
    }
}

double GatewaySession::serial_delay(double base) {
    if (cfg_.serial.jitter_mean_s <= 0.0) return base;
    std::exponential_distribution<double> e(1.0 / cfg_.serial.jitter_mean_s);
    return base + e(rng_);
}

ClockSyncResult GatewaySession::clock_sync(double t, rf::World& world, std::size_t max_attempts) {
    if (!cfg_.reachable) throw SyncFailed("device " + cfg_.device_id + " unreachable");
    if (max_attempts == 0) throw std::invalid_argument("clock_sync: max_attempts must be positive");
    ClockSyncResult r;
    std::vector<std::uint32_t> seqs;
    double cur = std::max(t, device_.now());
    char buf[64];
    for (std::size_t a = 0; a < max_attempts; ++a) {
        const double d_up = serial_delay(cfg_.serial.up_s);
        const double d_down = serial_delay(cfg_.serial.down_s);
        const std::uint32_t seq = ++clock_seq_;
        std::snprintf(buf, sizeof buf, "C S %u %.3f", seq, cur * 1e6);
        const auto resp = send_device(buf, cur + d_up, world);
        if (resp.empty() || !resp.front().ack) throw SyncFailed("clock stamp rejected");
        r.rtts.push_back(d_up + d_down);
        seqs.push_back(seq);
        cur += d_up + d_down;
    }
    r.chosen = static_cast<std::size_t>(std::min_element(r.rtts.begin(), r.rtts.end()) - r.rtts.begin());
    r.rtt_min = r.rtts[r.chosen];
    const double before = device_.state().clock_offset_s;
    std::snprintf(buf, sizeof buf, "C A %u %.3f", seqs[r.chosen], r.rtt_min / 2.0 * 1e6);
    const double d_up = serial_delay(cfg_.serial.up_s);
    const auto resp = send_device(buf, cur + d_up, world);
    if (resp.empty() || !resp.front().ack) throw SyncFailed("clock apply rejected");
    r.applied_offset_s = device_.state().clock_offset_s - before;
    r.t_done = cur + d_up + serial_delay(cfg_.serial.down_s);
    return r;
}

UploadResult GatewaySession::upload_from(double t_start, double t_now) {
    UploadResult r;
    r.t_done = cfg_.uplink.next_up(t_now);
    for (const auto& m : log_) {
        if (m.ts < t_start) continue;
        outbox_.push_back(m);
        ++r.count;
    }
    stats_.uploaded += r.count;
    return r;
}

std::vector<meas::Measurement> GatewaySession::drain_outbox(double t_now) {
    if (!cfg_.uplink.up(t_now)) return {};
    std::vector<meas::Measurement> out(std::make_move_iterator(outbox_.begin()),
                                       std::make_move_iterator(outbox_.end()));
    outbox_.clear();
    return out;
}

CommandOutcome GatewaySession::handle_server_command(const ServerCommand& cmd, double t, rf::World& world) {
    CommandOutcome out;
    std::vector<GatewayAction> actions;
    try {
        actions = translate_server_command(cmd);
    } catch (const CommandError& e) {
        return {false, e.what(), {}};
    }
    for (const auto& a : actions) {
        if (const auto* l = std::get_if<DeviceLine>(&a)) {
            auto resp = send_device(l->line, t, world);
            out.responses.insert(out.responses.end(), resp.begin(), resp.end());
            if (!resp.empty() && !resp.front().ack) {
                out.ok = false;
                out.reason = resp.front().to_ascii();
                return out;
            }
        } else if (std::holds_alternative<ClockSyncAction>(a)) {
            try {
                clock_sync(t, world);
            } catch (const SyncFailed& e) {
                return {false, e.what(), out.responses};
            }
        } else if (const auto* u = std::get_if<UploadAction>(&a)) {
            upload_from(u->t_start, t);
        }
    }
    return out;
}

}  // namespace crowdsdr::gw
