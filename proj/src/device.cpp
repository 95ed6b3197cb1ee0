#include "crowdsdr/device.hpp"

#include <fftw3.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <mutex>
#include <numbers>

namespace crowdsdr::device {

using sampling::CaptureMode;
using sampling::IQSample;

std::string to_string(Mode m) {
    switch (m) {
        case Mode::Idle: return "idle";
        case Mode::Receiving: return "receiving";
        case Mode::Transmitting: return "transmitting";
        case Mode::TriggeredArmed: return "triggered_armed";
        case Mode::Locking: return "locking";
    }
    return "?";
}

std::string to_string(CaptureParam p) {
    switch (p) {
        case CaptureParam::Magnitude: return "magnitude";
        case CaptureParam::RssiDirect: return "rssi_direct";
        case CaptureParam::RssiCalculated: return "rssi_calculated";
        case CaptureParam::Phase: return "phase";
        case CaptureParam::Triggered: return "triggered";
    }
    return "?";
}

std::uint32_t freq_to_word(double freq_hz) {
    return static_cast<std::uint32_t>(std::llround(freq_hz * kLoDivider * 65536.0 / kXoscHz)) & 0xFFFFFF;
}

double word_to_freq(std::uint32_t word) {
    const double f = static_cast<double>(word) * kXoscHz / (kLoDivider * 65536.0);
    return std::round(f / 1000.0) * 1000.0;
}

void PowerProfile::validate() const {
    if (!(idle_mw > 0.0 && idle_mw <= rx_mw && rx_mw <= max_mw && tx_mw <= max_mw && idle_mw <= tx_mw))
        throw std::invalid_argument("power profile: need 0 < idle <= rx, tx <= max");
    if (!(battery_mah > 0.0 && battery_v > 0.0)) throw std::invalid_argument("power profile: bad battery");
}

double PowerProfile::power_mw(Mode m) const {
    switch (m) {
        case Mode::Idle: return idle_mw;
        case Mode::Transmitting: return tx_mw;
        default: return rx_mw;
    }
}

EnergyReport energy_report(std::span<const ModeSpan> history, const PowerProfile& profile) {
    EnergyReport r;
    double total_s = 0.0;
    for (const auto& span : history) {
        if (span.duration_s < 0.0) throw std::invalid_argument("energy: negative duration");
        r.joules += profile.power_mw(span.mode) * 1e-3 * span.duration_s;
        total_s += span.duration_s;
    }
    r.average_mw = total_s > 0.0 ? r.joules / total_s * 1e3 : 0.0;
    r.battery_joules = profile.battery_mah * profile.battery_v * 3.6;
    r.idle_lifetime_h = r.battery_joules / (profile.idle_mw * 1e-3) / 3600.0;
    return r;
}

std::string Response::to_ascii() const {
    std::string s;
    s += ack ? 'K' : 'N';
    s += ' ';
    s += opcode;
    if (!detail.empty()) {
        s += ' ';
        s += detail;
    }
    return s;
}

Response Response::parse(std::string_view line) {
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
    if (line.size() < 3 || (line[0] != 'K' && line[0] != 'N') || line[1] != ' ')
        throw std::invalid_argument("malformed response line");
    Response r;
    r.ack = line[0] == 'K';
    r.opcode = line[2];
    if (line.size() > 4) r.detail = std::string(line.substr(4));
    return r;
}

namespace {

std::vector<std::string_view> split(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && s[i] == ' ') ++i;
        const std::size_t j = s.find(' ', i);
        const std::size_t end = j == std::string_view::npos ? s.size() : j;
        if (end > i) out.push_back(s.substr(i, end - i));
        i = end;
    }
    return out;
}

template <typename T>
std::optional<T> parse_num(std::string_view s) {
    T v{};
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc{} || p != end) return std::nullopt;
    return v;
}

Response nak(char op, std::string reason) { return {false, op, std::move(reason)}; }
Response ack(char op, std::string detail = {}) { return {true, op, std::move(detail)}; }

std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

Device::Device(DeviceConfig cfg, PositionFn position)
    : cfg_(std::move(cfg)),
      position_(std::move(position)),
      link_(cfg_.link),
      rng_(rf::mix_seed(cfg_.seed, rf::link_key(cfg_.id, "device"))),
      skew_(cfg_.clock_skew_ppm * 1e-6) {
    cfg_.power.validate();
    state_.registers[kRegRxBwKhz] = 64;
    state_.clock_offset_s = cfg_.clock_offset_s;
    state_.phy_2m = link_.preset != "le-1m";
}

geo::GeoPoint Device::position(double t) const { return position_ ? position_(t) : geo::GeoPoint{}; }

double Device::device_time(double t_true) const { return t_true * (1.0 + skew_) + state_.clock_offset_s; }

double Device::true_time(double t_dev) const { return (t_dev - state_.clock_offset_s) / (1.0 + skew_); }

double Device::full_scale_amplitude() const { return std::sqrt(rf::dbm_to_mw(cfg_.full_scale_dbm)); }

double Device::rssi_offset_db() const {
    return cfg_.full_scale_dbm - 20.0 * std::log10(static_cast<double>(sampling::kMagnitudeMax));
}

double Device::rx_bandwidth_hz() const { return std::max<double>(1, state_.registers[kRegRxBwKhz]) * 1000.0; }

std::vector<ModeSpan> Device::mode_history() const {
    std::vector<ModeSpan> out;
    out.reserve(history_.size() + 1);
    for (const auto& [m, d] : history_) out.push_back({m, d});
    out.push_back({state_.mode, now_ - mode_since_});
    return out;
}

void Device::set_mode(Mode m, double t) {
    const double dur = std::max(0.0, t - mode_since_);
    history_.emplace_back(state_.mode, dur);
    state_.energy_mj += cfg_.power.power_mw(state_.mode) * dur;
    state_.mode = m;
    mode_since_ = t;
}

void Device::set_tuned(double freq_hz) {
    state_.freq_hz = static_cast<std::uint64_t>(freq_hz);
    const auto word = freq_to_word(freq_hz);
    state_.registers[kRegFreq2] = static_cast<std::uint8_t>(word >> 16);
    state_.registers[kRegFreq1] = static_cast<std::uint8_t>(word >> 8);
    state_.registers[kRegFreq0] = static_cast<std::uint8_t>(word);
}

void Device::write_register(std::uint8_t addr, std::uint8_t value) {
    state_.registers[addr] = value;
    if (addr == kRegFreq2 || addr == kRegFreq1 || addr == kRegFreq0) {
        const std::uint32_t word = std::uint32_t{state_.registers[kRegFreq2]} << 16 |
                                   std::uint32_t{state_.registers[kRegFreq1]} << 8 | state_.registers[kRegFreq0];
        const double f = word_to_freq(word);
        state_.freq_hz = rf::in_tunable_range(f) ? static_cast<std::uint64_t>(f) : 0;
    }
}

std::complex<double> Device::noise_sample(double noise_mw) {
    if (noise_mw <= 0.0) return {};
    std::normal_distribution<double> n(0.0, std::sqrt(noise_mw / 2.0));
    const double re = n(rng_);
    const double im = n(rng_);
    return {re, im};
}

rf::Baseband Device::receive_block(const rf::World& world, double tuned_hz, double fs, double t0, std::size_t n) {
    rf::Baseband out(n);
    const double t1 = t0 + static_cast<double>(n) / fs;
    const auto comps = world.components(cfg_.id, position(t0), cfg_.rx_gain_dbi, tuned_hz, fs, t0, t1);
    const double floor_dbm = world.channel().noise_floor_dbm;
    const double noise_mw = floor_dbm == rf::kNoNoise ? 0.0 : rf::dbm_to_mw(floor_dbm);
    for (std::size_t k = 0; k < n; ++k)
        out[k] = rf::evaluate(comps, t0 + static_cast<double>(k) / fs) + noise_sample(noise_mw);
    return out;
}

LockResult Device::lock_freq(double center_hz, double t, const rf::World& world) {
    constexpr std::size_t n = kLockFft;
    const auto stream = receive_block(world, center_hz, kLockFs, t, n * kLockFrames);

    std::vector<double> power(n, 0.0);
    {
        fftw_complex* buf = fftw_alloc_complex(n);
        fftw_plan plan;
        {
            std::lock_guard lk(fftw_plan_mutex());
            plan = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        }
        for (std::size_t f = 0; f < kLockFrames; ++f) {
            for (std::size_t k = 0; k < n; ++k) {
                const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / n);
                buf[k][0] = stream[f * n + k].real() * w;
                buf[k][1] = stream[f * n + k].imag() * w;
            }
            fftw_execute(plan);
            for (std::size_t k = 0; k < n; ++k) power[k] += buf[k][0] * buf[k][0] + buf[k][1] * buf[k][1];
        }
        {
            std::lock_guard lk(fftw_plan_mutex());
            fftw_destroy_plan(plan);
        }
        fftw_free(buf);
    }

    const double bin_hz = kLockFs / static_cast<double>(n);
    auto bin_freq = [&](std::size_t k) {
        return (k < n / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n)) * bin_hz;
    };
    std::vector<std::size_t> span_bins;
    for (std::size_t k = 0; k < n; ++k)
        if (std::abs(bin_freq(k)) <= kLockSpanHz / 2.0) span_bins.push_back(k);
    std::size_t peak = span_bins.front();
    for (auto k : span_bins)
        if (power[k] > power[peak]) peak = k;
    std::vector<double> vals;
    for (auto k : span_bins) vals.push_back(power[k]);
    std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(vals.size() / 2), vals.end());
    const double floor = vals[vals.size() / 2];

    LockResult r;
    r.snr_db = floor > 0.0 ? 10.0 * std::log10(power[peak] / floor) : 0.0;
    r.locked = r.snr_db >= 6.0;
    if (!r.locked) return r;
    const double a = std::log(power[(peak + n - 1) % n] + 1e-300);
    const double b = std::log(power[peak] + 1e-300);
    const double c = std::log(power[(peak + 1) % n] + 1e-300);
    const double denom = a - 2.0 * b + c;
    const double delta = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
    r.f_locked_hz = center_hz + bin_freq(peak) + std::clamp(delta, -0.5, 0.5) * bin_hz;
    return r;
}

std::vector<Response> Device::handle_command(std::string_view line, double t, rf::World& world) {
    t = std::max(t, now_);
    auto outs = advance(t, world);
    pending_.insert(pending_.end(), std::make_move_iterator(outs.begin()), std::make_move_iterator(outs.end()));

    while (!line.empty() && (line.back() == '\n' || line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
    auto tokens = split(line);
    if (tokens.empty() || tokens[0].size() != 1) return {nak(tokens.empty() ? '?' : tokens[0][0], "unknown")};
    const char op = tokens[0][0];
    std::string_view rest;
    if (op == 'T' && tokens.size() > 4) rest = line.substr(static_cast<std::size_t>(tokens[4].data() - line.data()));
    tokens.erase(tokens.begin());
    return {dispatch(op, std::move(tokens), rest, t, world)};
}

Response Device::dispatch(char op, std::vector<std::string_view> args, std::string_view rest, double t,
                          rf::World& world) {
    static constexpr std::string_view kKnown = "ASFPTRLHZC";
    if (kKnown.find(op) == std::string_view::npos) return nak(op, "unknown");
    if (op == 'H') {
        stop(t, world);
        return ack(op);
    }
    if (op == 'Z') {
        reset(t, world);
        return ack(op);
    }
    if (op == 'C') return cmd_clock(std::move(args), t);
    if (state_.mode != Mode::Idle) return nak(op, "busy");

    switch (op) {
        case 'A': return cmd_register(std::move(args));
        case 'S': return cmd_capture(std::move(args), t);
        case 'F': return cmd_tune(std::move(args));
        case 'P': {
            state_.phy_2m = !state_.phy_2m;
            const auto seed = link_.seed;
            link_ = sampling::LinkModel::from_preset(state_.phy_2m ? "le-2m" : "le-1m", seed);
            return ack(op, state_.phy_2m ? "2M" : "1M");
        }
        case 'T': return cmd_transmit(std::move(args), rest, t, world);
        case 'R': {
            if (args.size() != 1) return nak(op, "args");
            const auto ms = parse_num<std::uint32_t>(args[0]);
            if (!ms || *ms == 0 || *ms > 60000) return nak(op, "args");
            if (state_.freq_hz == 0) return nak(op, "untuned");
            receive_ = ReceiveRun{t, t + *ms / 1000.0};
            set_mode(Mode::Receiving, t);
            return ack(op);
        }
        case 'L': {
            if (args.size() != 1) return nak(op, "args");
            const auto hz = parse_num<std::uint64_t>(args[0]);
            if (!hz) return nak(op, "args");
            if (!rf::in_tunable_range(static_cast<double>(*hz))) return nak(op, "range");
            set_tuned(static_cast<double>(*hz));
            lock_ = LockRun{t, static_cast<double>(*hz)};
            set_mode(Mode::Locking, t);
            return ack(op);
        }
        default: return nak(op, "unknown");
    }
}

Response Device::cmd_register(std::vector<std::string_view> args) {
    if (args.empty()) {
        static constexpr char kHex[] = "0123456789abcdef";
        std::string hex;
        hex.reserve(512);
        for (auto b : state_.registers) {
            hex += kHex[b >> 4];
            hex += kHex[b & 0xF];
        }
        return ack('A', hex);
    }
    if (args.size() > 2) return nak('A', "args");
    const auto addr = parse_num<unsigned>(args[0]);
    if (!addr) return nak('A', "args");
    if (*addr > 255) return nak('A', "range");
    if (args.size() == 2) {
        const auto value = parse_num<unsigned>(args[1]);
        if (!value || *value > 255) return nak('A', "args");
        write_register(static_cast<std::uint8_t>(*addr), static_cast<std::uint8_t>(*value));
    }
    return ack('A', std::to_string(*addr) + " " + std::to_string(state_.registers[*addr]));
}

Response Device::cmd_tune(std::vector<std::string_view> args) {
    if (args.size() != 1) return nak('F', "args");
    const auto hz = parse_num<std::uint64_t>(args[0]);
    if (!hz) return nak('F', "args");
    if (!rf::in_tunable_range(static_cast<double>(*hz))) return nak('F', "range");
    if (*hz % 1000 != 0) return nak('F', "resolution");
    set_tuned(static_cast<double>(*hz));
    return ack('F', std::to_string(*hz));
}

Response Device::cmd_capture(std::vector<std::string_view> args, double t) {
    if (args.size() < 3 || args[0].size() != 1) return nak('S', "args");
    const auto rate = parse_num<double>(args[1]);
    const auto count = parse_num<std::uint64_t>(args[2]);
    if (!rate || !(*rate > 0.0) || !count) return nak('S', "args");
    if (state_.freq_hz == 0) return nak('S', "untuned");

    CaptureRun run;
    run.rate = *rate;
    run.count = *count;
    run.t_start = t;
    switch (args[0][0]) {
        case 'M': run.param = CaptureParam::Magnitude; break;
        case 'P': run.param = CaptureParam::Phase; break;
        case 'D': run.param = CaptureParam::RssiDirect; break;
        case 'C': run.param = CaptureParam::RssiCalculated; break;
        case 'T': run.param = CaptureParam::Triggered; break;
        default: return nak('S', "args");
    }
    Mode next = Mode::Receiving;
    switch (run.param) {
        case CaptureParam::Magnitude:
        case CaptureParam::Phase: {
            const auto mode = run.param == CaptureParam::Phase ? CaptureMode::Phase : CaptureMode::Magnitude;
            if (*rate > sampling::max_sample_rate(mode)) return nak('S', "range");
            if (args.size() != 3) return nak('S', "args");
            run.pipeline.emplace(*rate, link_, mode);
            run.segment_t0 = t;
            break;
        }
        case CaptureParam::RssiDirect:
        case CaptureParam::RssiCalculated: {
            if (*rate > 100.0) return nak('S', "range");
            if (args.size() > 4) return nak('S', "args");
            if (args.size() == 4) {
                const auto flag = parse_num<int>(args[3]);
                if (!flag || (*flag != 0 && *flag != 1)) return nak('S', "args");
                run.lock_each = *flag == 1;
            }
            break;
        }
        case CaptureParam::Triggered: {
            if (*rate > sampling::kMaxFsMagnitude) return nak('S', "range");
            if (args.size() < 4 || args.size() > 5) return nak('S', "args");
            const auto thr = parse_num<double>(args[3]);
            if (!thr) return nak('S', "args");
            state_.threshold_dbm = *thr;
            run.pretrigger = cfg_.pretrigger_samples;
            if (args.size() == 5) {
                const auto pre = parse_num<std::size_t>(args[4]);
                if (!pre || *pre > 4096) return nak('S', "args");
                run.pretrigger = *pre;
            }
            next = Mode::TriggeredArmed;
            break;
        }
    }
    state_.capture_param = run.param;
    capture_ = std::move(run);
    set_mode(next, t);
    return ack('S', std::string(1, args[0][0]));
}

Response Device::cmd_transmit(std::vector<std::string_view> args, std::string_view rest, double t,
                              rf::World& world) {
    if (args.size() < 3 || args[0].size() != 1 || (args[0][0] != 'C' && args[0][0] != 'F')) return nak('T', "args");
    const bool cw = args[0][0] == 'C';
    auto hz = parse_num<std::uint64_t>(args[1]);
    const auto power = parse_num<double>(args[2]);
    if (!hz || !power) return nak('T', "args");
    if (*hz == 0) {
        if (state_.freq_hz == 0) return nak('T', "untuned");
        hz = state_.freq_hz;
    }
    const double f = static_cast<double>(*hz);
    if (!rf::in_tunable_range(f)) return nak('T', "range");
    if (*hz % 1000 != 0) return nak('T', "resolution");
    if (!rf::in_ism_band(f, world.ism_bands())) return nak('T', "band");
    if (*power > cfg_.max_tx_power_dbm) return nak('T', "range");
    if (cw && args.size() != 3) return nak('T', "args");
    if (!cw && (rest.empty() || rest.size() > 255)) return nak('T', "args");

    rf::Transmitter tx;
    tx.id = cfg_.id;
    tx.position = position(t);
    tx.power_dbm = *power;
    tx.freq_hz = f;
    tx.antenna_gain_dbi = cfg_.tx_gain_dbi;
    if (!cw) {
        const std::vector<std::uint8_t> payload(rest.begin(), rest.end());
        tx.waveform = rf::FskWave{dsp::build_frame(payload, cfg_.frame), cfg_.fsk, skew_};
    }
    set_tuned(f);
    tx_id_ = world.start(std::move(tx), t);
    tx_end_ = world.find(*tx_id_)->t_end;
    set_mode(Mode::Transmitting, t);
    return ack('T', cw ? "C" : "F");
}

Response Device::cmd_clock(std::vector<std::string_view> args, double t) {
    if (args.size() == 1 && args[0] == "R") {
        const auto us = std::llround(device_time(t) * 1e6);
        return ack('C', "R " + std::to_string(us));
    }
    if (args.size() != 3 || (args[0] != "S" && args[0] != "A")) return nak('C', "args");
    const auto seq = parse_num<std::uint32_t>(args[1]);
    const auto value = parse_num<double>(args[2]);
    if (!seq || !value) return nak('C', "args");
    if (args[0] == "S") {
        stamps_.push_back({*seq, *value * 1e-6, device_time(t)});
        if (stamps_.size() > 32) stamps_.erase(stamps_.begin());
        return ack('C', "S " + std::to_string(*seq));
    }
    auto it = std::find_if(stamps_.begin(), stamps_.end(), [&](const ClockStamp& s) { return s.seq == *seq; });
    if (it == stamps_.end()) return nak('C', "args");
    state_.clock_offset_s += it->gps_s + *value * 1e-6 - it->local_s;
    stamps_.clear();
    return ack('C', "A " + std::to_string(*seq));
}

void Device::finish_segment(double) {
    auto& run = *capture_;
    if (!run.pipeline) return;
    auto result = run.pipeline->finish();
    IqCapture cap;
    cap.t0_dev = device_time(run.segment_t0);
    cap.fs_hz = run.rate;
    cap.freq_hz = static_cast<double>(state_.freq_hz);
    cap.mode = run.param == CaptureParam::Phase ? CaptureMode::Phase : CaptureMode::Magnitude;
    cap.triggered = run.param == CaptureParam::Triggered;
    cap.sample_count = result.emitted;
    cap.packets = std::move(result.packets);
    cap.pauses = std::move(result.pauses);
    cap.discarded = result.discarded;
    run.pipeline.reset();
    if (cap.sample_count > 0) pending_.push_back(std::move(cap));
}

void Device::stop(double t, rf::World& world) {
    if (capture_) {
        finish_segment(t);
        capture_.reset();
    }
    receive_.reset();
    lock_.reset();
    if (tx_id_) {
        world.stop(*tx_id_, t);
        tx_id_.reset();
    }
    if (state_.mode != Mode::Idle) set_mode(Mode::Idle, t);
}

void Device::reset(double t, rf::World& world) {
    stop(t, world);
    state_.registers.fill(0);
    state_.registers[kRegRxBwKhz] = 64;
    state_.freq_hz = 0;
    state_.capture_param = CaptureParam::RssiDirect;
    state_.threshold_dbm = 0.0;
    state_.clock_offset_s = cfg_.clock_offset_s;
    link_ = cfg_.link;
    state_.phy_2m = link_.preset != "le-1m";
    stamps_.clear();
}

std::vector<Output> Device::advance(double t_end, rf::World& world) {
    while (now_ < t_end) {
        switch (state_.mode) {
            case Mode::Idle: now_ = t_end; break;
            case Mode::Transmitting:
                if (tx_end_ <= t_end) {
                    now_ = std::max(now_, tx_end_);
                    tx_id_.reset();
                    set_mode(Mode::Idle, now_);
                } else {
                    now_ = t_end;
                }
                break;
            case Mode::Locking: {
                const double done = lock_->t_start + static_cast<double>(kLockFft * kLockFrames) / kLockFs;
                if (done <= t_end) {
                    const auto r = lock_freq(lock_->center_hz, lock_->t_start, world);
                    pending_.push_back(LockReport{device_time(lock_->t_start), lock_->center_hz, r});
                    lock_.reset();
                    now_ = std::max(now_, done);
                    set_mode(Mode::Idle, now_);
                } else {
                    now_ = t_end;
                }
                break;
            }
            case Mode::Receiving:
                if (receive_) {
                    if (receive_->t_end <= t_end) {
                        run_receive(world);
                        now_ = std::max(now_, receive_->t_end);
                        receive_.reset();
                        set_mode(Mode::Idle, now_);
                    } else {
                        now_ = t_end;
                    }
                    break;
                }
                [[fallthrough]];
            case Mode::TriggeredArmed: run_capture(t_end, world); break;
        }
    }
    std::vector<Output> out;
    out.swap(pending_);
    return out;
}

void Device::run_capture(double t_end, rf::World& world) {
    if (capture_->param == CaptureParam::RssiDirect || capture_->param == CaptureParam::RssiCalculated)
        run_rssi(t_end, world);
    else
        run_samples(t_end, world);
}

void Device::run_rssi(double t_end, rf::World& world) {
    auto& run = *capture_;
    const double f = static_cast<double>(state_.freq_hz);
    while (true) {
        const double tk = run.t_start + static_cast<double>(run.produced) / run.rate;
        if (run.count != 0 && run.produced >= run.count) {
            now_ = std::max(now_, tk);
            capture_.reset();
            set_mode(Mode::Idle, now_);
            return;
        }
        if (tk >= t_end) break;
        RssiReport rep;
        rep.t_dev = device_time(tk);
        rep.freq_hz = f;
        rep.calculated = run.param == CaptureParam::RssiCalculated;
        if (run.lock_each) rep.lock = lock_freq(f, tk, world);
        const auto block = receive_block(world, f, kRssiFs, tk, kRssiWindow);
        if (rep.calculated) {
            const double amp = full_scale_amplitude();
            double acc = 0.0;
            for (const auto& s : block) {
                const double m = sampling::quantize(s, amp).magnitude;
                acc += m * m;
            }
            acc /= static_cast<double>(block.size());
            rep.rssi_dbm = (acc > 0.0 ? 10.0 * std::log10(acc) : -6.0) + rssi_offset_db();
        } else {
            const double mw = rf::mean_power_mw(block);
            const double dbm = mw > 0.0 ? std::round(rf::mw_to_dbm(mw)) : -128.0;
            rep.rssi_dbm = std::clamp(dbm, -128.0, 127.0);
        }
        pending_.push_back(rep);
        ++run.produced;
    }
    now_ = t_end;
}

void Device::run_samples(double t_end, rf::World& world) {
    auto& run = *capture_;
    const double f = static_cast<double>(state_.freq_hz);
    const double amp = full_scale_amplitude();
    const double k_db = rssi_offset_db();
    constexpr std::uint64_t kBlock = 1024;
    const bool triggered = run.param == CaptureParam::Triggered;

    while (true) {
        const std::uint64_t limit_total = (!triggered && run.count != 0) ? run.count : UINT64_MAX;
        if (run.produced >= limit_total) break;
        // samples with time < t_end
        const double first_t = run.t_start + static_cast<double>(run.produced) / run.rate;
        if (first_t >= t_end) break;
        const auto upto = static_cast<std::uint64_t>(std::ceil((t_end - run.t_start) * run.rate));
        std::uint64_t n = std::min({kBlock, upto - run.produced, limit_total - run.produced});
        if (n == 0) break;
        const auto block = receive_block(world, f, run.rate, first_t, n);
        for (std::uint64_t k = 0; k < n; ++k) {
            const double tk = run.t_start + static_cast<double>(run.produced + k) / run.rate;
            const IQSample s = sampling::quantize(block[k], amp);
            if (!triggered) {
                run.pipeline->offer(s);
                continue;
            }
            const double rssi = s.magnitude > 0 ? 20.0 * std::log10(static_cast<double>(s.magnitude)) + k_db
                                                : -std::numeric_limits<double>::infinity();
            const bool above = rssi >= state_.threshold_dbm;
            if (!run.triggered) {
                if (above) {
                    run.triggered = true;
                    pending_.push_back(TriggerEvent{device_time(tk), rssi, state_.threshold_dbm, f});
                    run.pipeline.emplace(run.rate, link_, CaptureMode::Magnitude);
                    const auto held = run.history.size();
                    run.segment_t0 = tk - static_cast<double>(held) / run.rate;
                    for (std::size_t h = 0; h < held; ++h)
                        run.pipeline->offer(run.history[(run.history_head + h) % held].second);
                    run.history.clear();
                    run.history_head = 0;
                    run.pipeline->offer(s);
                    ++run.retained;
                } else if (run.pretrigger > 0) {
                    if (run.history.size() < run.pretrigger) {
                        run.history.emplace_back(tk, s);
                    } else {
                        run.history[run.history_head] = {tk, s};
                        run.history_head = (run.history_head + 1) % run.pretrigger;
                    }
                }
            } else if (above) {
                run.pipeline->offer(s);
                ++run.retained;
            } else {
                finish_segment(tk);
                run.triggered = false;
                if (run.pretrigger > 0) run.history.emplace_back(tk, s);
            }
            if (run.count != 0 && run.retained >= run.count) {
                finish_segment(tk);
                const double end = tk + 1.0 / run.rate;
                capture_.reset();
                now_ = std::max(now_, end);
                set_mode(Mode::Idle, now_);
                return;
            }
        }
        run.produced += n;
    }
    if (!triggered && run.count != 0 && run.produced >= run.count) {
        finish_segment(run.t_start + static_cast<double>(run.count) / run.rate);
        const double end = run.t_start + static_cast<double>(run.count) / run.rate;
        capture_.reset();
        now_ = std::max(now_, end);
        set_mode(Mode::Idle, now_);
        return;
    }
    now_ = t_end;
}

void Device::run_receive(const rf::World& world) {
    const auto& rx = *receive_;
    const auto n = static_cast<std::size_t>((rx.t_end - rx.t_start) * kReceiveFs);
    const double f = static_cast<double>(state_.freq_hz);
    const auto block = receive_block(world, f, kReceiveFs, rx.t_start, n);
    dsp::Capture c;
    c.device_id = cfg_.id;
    c.t0 = device_time(rx.t_start);
    c.fs_hz = kReceiveFs;
    c.freq_hz = f;
    c.samples.reserve(n);
    const double amp = full_scale_amplitude();
    for (const auto& s : block) c.samples.push_back(sampling::quantize(s, amp));
    dsp::CoarseParams coarse;
    coarse.fs_hz = kReceiveFs;
    coarse.symbol_rate_hz = cfg_.fsk.symbol_rate_hz;
    coarse.deviation_hz = cfg_.fsk.deviation_hz;
    ReceivedText out;
    out.t_dev = c.t0;
    try {
        const auto r = dsp::demodulate_fsk(c, cfg_.frame, coarse);
        out.ok = true;
        out.text.assign(r.payload.begin(), r.payload.end());
    } catch (const dsp::DemodError& e) {
        out.ok = false;
        out.text = e.what();
    }
    pending_.push_back(std::move(out));
}

}  // namespace crowdsdr::device
