#pragma once

// The virtual portable SDR: an ASCII-command state machine over an emulated
// register file, driving the simulated front-end and the capture pipeline.
// Command grammar and register map are documented in docs/.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <complex>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "crowdsdr/dsp.hpp"
#include "crowdsdr/geo.hpp"
#include "crowdsdr/rfmodel.hpp"
#include "crowdsdr/sampling.hpp"
#include "crowdsdr/world.hpp"

namespace crowdsdr::device {

enum class Mode { Idle, Receiving, Transmitting, TriggeredArmed, Locking };
enum class CaptureParam { Magnitude, RssiDirect, RssiCalculated, Phase, Triggered };

std::string to_string(Mode m);
std::string to_string(CaptureParam p);

// Register map (docs/registers.md)
inline constexpr std::uint8_t kRegFreq2 = 0x0C;
inline constexpr std::uint8_t kRegFreq1 = 0x0D;
inline constexpr std::uint8_t kRegFreq0 = 0x0E;
inline constexpr std::uint8_t kRegRxBwKhz = 0x10;
inline constexpr double kXoscHz = 40e6;
inline constexpr double kLoDivider = 4.0;

std::uint32_t freq_to_word(double freq_hz);
double word_to_freq(std::uint32_t word);  // rounded to 1 kHz

struct PowerProfile {
    double idle_mw = 18.0;
    double rx_mw = 100.0;
    double tx_mw = 180.0;
    double max_mw = 180.0;
    double battery_mah = 180.0;
    double battery_v = 3.7;

    void validate() const;
    double power_mw(Mode m) const;
};

struct ModeSpan {
    Mode mode = Mode::Idle;
    double duration_s = 0.0;
};

struct EnergyReport {
    double joules = 0.0;
    double average_mw = 0.0;
    double battery_joules = 0.0;
    double idle_lifetime_h = 0.0;
};

EnergyReport energy_report(std::span<const ModeSpan> history, const PowerProfile& profile);

struct DeviceConfig {
    std::string id = "dev";
    double rx_gain_dbi = 0.0;
    double tx_gain_dbi = 0.0;
    double full_scale_dbm = -10.0;  // RSSI at magnitude 131071
    double clock_offset_s = 0.0;    // device clock minus true time at t = 0
    double clock_skew_ppm = 0.0;
    double max_tx_power_dbm = 20.0;
    std::size_t pretrigger_samples = sampling::kSamplesPerPacket;
    std::uint64_t seed = 0;
    PowerProfile power;
    sampling::LinkModel link = sampling::LinkModel::from_preset("le-2m");
    rf::FskParams fsk;
    dsp::FrameConfig frame;
};

struct DeviceState {
    Mode mode = Mode::Idle;
    std::uint64_t freq_hz = 0;  // 0 = untuned
    CaptureParam capture_param = CaptureParam::RssiDirect;
    double threshold_dbm = 0.0;
    std::array<std::uint8_t, 256> registers{};
    double clock_offset_s = 0.0;
    double energy_mj = 0.0;
    bool phy_2m = true;
};

struct Response {
    bool ack = true;
    char opcode = '?';
    std::string detail;  // payload on ACK, reason on NAK

    std::string to_ascii() const;
    static Response parse(std::string_view line);
    bool operator==(const Response&) const = default;
};

struct LockResult {
    bool locked = false;
    double f_locked_hz = 0.0;
    double snr_db = 0.0;
};

// Outputs carried back over the serial link, timestamped on the device clock.
struct RssiReport {
    double t_dev = 0.0;
    double rssi_dbm = 0.0;
    bool calculated = false;
    double freq_hz = 0.0;
    std::optional<LockResult> lock;
};

struct TriggerEvent {
    double t_dev = 0.0;
    double rssi_dbm = 0.0;
    double threshold_dbm = 0.0;
    double freq_hz = 0.0;
};

struct IqCapture {
    double t0_dev = 0.0;
    double fs_hz = 0.0;
    double freq_hz = 0.0;
    sampling::CaptureMode mode = sampling::CaptureMode::Magnitude;
    bool triggered = false;
    std::size_t sample_count = 0;
    std::vector<sampling::PacketBytes> packets;
    std::vector<sampling::PauseRecord> pauses;
    std::uint64_t discarded = 0;
};

struct LockReport {
    double t_dev = 0.0;
    double center_hz = 0.0;
    LockResult result;
};

struct ReceivedText {
    double t_dev = 0.0;
    bool ok = false;
    std::string text;
};

using Output = std::variant<RssiReport, TriggerEvent, IqCapture, LockReport, ReceivedText>;

using PositionFn = std::function<geo::GeoPoint(double t_true)>;

class Device {
public:
    explicit Device(DeviceConfig cfg, PositionFn position = {});

    /// Executes one newline-terminated ASCII command at true time `t`
    /// (advancing the device to `t` first). Never throws on bad input;
    /// malformed commands are NAKed.
    std::vector<Response> handle_command(std::string_view line, double t, rf::World& world);

    /// Runs ongoing activity up to true time `t_end` and returns the outputs
    /// produced, in time order.
    std::vector<Output> advance(double t_end, rf::World& world);

    /// Scans ±5 kHz around `center_hz` starting at true time `t`.
    LockResult lock_freq(double center_hz, double t, const rf::World& world);

    const DeviceState& state() const { return state_; }
    const DeviceConfig& config() const { return cfg_; }
    const sampling::LinkModel& link() const { return link_; }
    double now() const { return now_; }
    double device_time(double t_true) const;
    double true_time(double t_dev) const;
    std::vector<ModeSpan> mode_history() const;
    void set_position_fn(PositionFn fn) { position_ = std::move(fn); }
    geo::GeoPoint position(double t) const;

    static constexpr double kLockFs = 16000.0;
    static constexpr std::size_t kLockFft = 512;
    static constexpr std::size_t kLockFrames = 16;
    static constexpr double kLockSpanHz = 10000.0;
    static constexpr double kRssiFs = 64000.0;
    static constexpr std::size_t kRssiWindow = 64;
    static constexpr double kReceiveFs = 40000.0;

private:
    struct CaptureRun {
        CaptureParam param = CaptureParam::Magnitude;
        double rate = 0.0;  // fs for sample modes, reports/s for RSSI modes
        std::uint64_t count = 0;  // 0 = until STOP
        double t_start = 0.0;
        std::uint64_t produced = 0;  // samples or reports generated so far
        bool lock_each = false;
        std::size_t pretrigger = 0;
        // sample modes
        std::optional<sampling::CapturePipeline> pipeline;
        double segment_t0 = 0.0;
        std::vector<std::pair<double, sampling::IQSample>> history;  // triggered pre-trigger ring
        std::size_t history_head = 0;
        std::uint64_t retained = 0;
        bool triggered = false;
    };

    struct ReceiveRun {
        double t_start = 0.0;
        double t_end = 0.0;
    };

    struct LockRun {
        double t_start = 0.0;
        double center_hz = 0.0;
    };

    Response dispatch(char op, std::vector<std::string_view> args, std::string_view rest, double t, rf::World& world);
    Response cmd_register(std::vector<std::string_view> args);
    Response cmd_capture(std::vector<std::string_view> args, double t);
    Response cmd_tune(std::vector<std::string_view> args);
    Response cmd_transmit(std::vector<std::string_view> args, std::string_view rest, double t, rf::World& world);
    Response cmd_clock(std::vector<std::string_view> args, double t);
    void stop(double t, rf::World& world);
    void reset(double t, rf::World& world);
    void set_mode(Mode m, double t);
    void write_register(std::uint8_t addr, std::uint8_t value);
    void set_tuned(double freq_hz);

    double full_scale_amplitude() const;
    double rssi_offset_db() const;  // K in rssi = 20·log10(mag) + K
    double rx_bandwidth_hz() const;
    std::complex<double> noise_sample(double noise_mw);
    rf::Baseband receive_block(const rf::World& world, double tuned_hz, double fs, double t0, std::size_t n);

    void run_capture(double t_end, rf::World& world);
    void run_rssi(double t_end, rf::World& world);
    void run_samples(double t_end, rf::World& world);
    void finish_segment(double t);
    void run_receive(const rf::World& world);

    DeviceConfig cfg_;
    PositionFn position_;
    DeviceState state_;
    sampling::LinkModel link_;
    std::mt19937_64 rng_;
    double now_ = 0.0;
    double mode_since_ = 0.0;
    std::vector<std::pair<Mode, double>> history_;  // closed spans
    double skew_;

    std::optional<CaptureRun> capture_;
    std::optional<ReceiveRun> receive_;
    std::optional<LockRun> lock_;
    std::optional<std::uint64_t> tx_id_;
    double tx_end_ = 0.0;

    struct ClockStamp {
        std::uint32_t seq;
        double gps_s;
        double local_s;
    };
    std::vector<ClockStamp> stamps_;
    std::vector<Output> pending_;
};

}  // namespace crowdsdr::device
