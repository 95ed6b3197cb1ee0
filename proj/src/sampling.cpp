#include "crowdsdr/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "crowdsdr/rfmodel.hpp"

namespace crowdsdr::sampling {

std::string to_string(CaptureMode m) { return m == CaptureMode::Magnitude ? "magnitude" : "phase"; }

CaptureMode capture_mode_from_string(const std::string& s) {
    if (s == "magnitude") return CaptureMode::Magnitude;
    if (s == "phase") return CaptureMode::Phase;
    throw SamplingError("unknown capture mode '" + s + "'");
}

std::size_t samples_per_packet(CaptureMode m) {
    return m == CaptureMode::Magnitude ? kSamplesPerPacket : kAnglesPerPhasePacket;
}

double max_sample_rate(CaptureMode m) { return m == CaptureMode::Magnitude ? kMaxFsMagnitude : kMaxFsPhase; }

std::int16_t wrap_angle(int units) {
    int a = (units + kAngleUnits / 2) % kAngleUnits;
    if (a < 0) a += kAngleUnits;
    return static_cast<std::int16_t>(a - kAngleUnits / 2);
}

IQSample quantize(std::complex<double> sample, double full_scale) {
    const double mag = std::abs(sample) / full_scale * static_cast<double>(kMagnitudeMax);
    IQSample out;
    out.magnitude = static_cast<std::uint32_t>(std::min(std::round(mag), static_cast<double>(kMagnitudeMax)));
    if (sample == std::complex<double>{}) return out;
    const double turns = std::arg(sample) / (2.0 * std::numbers::pi);
    out.angle = wrap_angle(static_cast<int>(std::lround(turns * kAngleUnits)));
    return out;
}

CompressedSample compress(IQSample s) {
    const std::uint32_t word = ((s.magnitude >> 3) & 0x3FFF) << 10 | (static_cast<std::uint32_t>(s.angle) & 0x3FF);
    return {static_cast<std::uint8_t>(word >> 16), static_cast<std::uint8_t>(word >> 8),
            static_cast<std::uint8_t>(word)};
}

IQSample decompress(std::span<const std::uint8_t, 3> b) {
    const std::uint32_t word = std::uint32_t{b[0]} << 16 | std::uint32_t{b[1]} << 8 | b[2];
    IQSample s;
    s.magnitude = (word >> 10) << 3;
    const int raw = static_cast<int>(word & 0x3FF);
    s.angle = static_cast<std::int16_t>(raw >= 512 ? raw - 1024 : raw);
    return s;
}

PacketBytes packetize(std::span<const IQSample> samples, std::uint8_t seq, CaptureMode mode) {
    const std::size_t want = samples_per_packet(mode);
    if (samples.size() != want)
        throw SamplingError("packetize: expected " + std::to_string(want) + " samples, got " +
                            std::to_string(samples.size()));
    PacketBytes out{};
    if (mode == CaptureMode::Magnitude) {
        out[0] = seq;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto c = compress(samples[i]);
            std::copy(c.begin(), c.end(), out.begin() + 1 + 3 * static_cast<std::ptrdiff_t>(i));
        }
        return out;
    }
    out[0] = static_cast<std::uint8_t>(0x80 | (seq & 0x7F));
    for (std::size_t g = 0; g < kAnglesPerPhasePacket / 4; ++g) {
        std::uint64_t group = 0;
        for (std::size_t k = 0; k < 4; ++k)
            group = group << 10 | (static_cast<std::uint64_t>(samples[4 * g + k].angle) & 0x3FF);
        for (std::size_t k = 0; k < 5; ++k) out[1 + 5 * g + k] = static_cast<std::uint8_t>(group >> (8 * (4 - k)));
    }
    return out;
}

SamplePacket depacketize(std::span<const std::uint8_t> bytes, CaptureMode mode) {
    if (bytes.size() != kPacketBytes)
        throw SamplingError("depacketize: expected 244 bytes, got " + std::to_string(bytes.size()));
    SamplePacket p;
    p.mode = mode;
    if (mode == CaptureMode::Magnitude) {
        p.seq = bytes[0];
        p.samples.reserve(kSamplesPerPacket);
        for (std::size_t i = 0; i < kSamplesPerPacket; ++i)
            p.samples.push_back(decompress(bytes.subspan(1 + 3 * i).first<3>()));
        return p;
    }
    if ((bytes[0] & 0x80) == 0) throw SamplingError("depacketize: phase packet without mode flag");
    p.seq = bytes[0] & 0x7F;
    p.samples.reserve(kAnglesPerPhasePacket);
    for (std::size_t g = 0; g < kAnglesPerPhasePacket / 4; ++g) {
        std::uint64_t group = 0;
        for (std::size_t k = 0; k < 5; ++k) group = group << 8 | bytes[1 + 5 * g + k];
        for (std::size_t k = 0; k < 4; ++k) {
            const int raw = static_cast<int>((group >> (10 * (3 - k))) & 0x3FF);
            p.samples.push_back({0, static_cast<std::int16_t>(raw >= 512 ? raw - 1024 : raw)});
        }
    }
    return p;
}

LinkModel LinkModel::from_preset(const std::string& name, std::uint64_t seed) {
    LinkModel l;
    l.preset = name;
    l.seed = seed;
    if (name == "le-2m") {
        l.rate_bps = 1.3e6;
    } else if (name == "le-1m") {
        l.rate_bps = 0.7e6;
    } else if (name == "ideal") {
        l.rate_bps = std::numeric_limits<double>::infinity();
    } else if (name == "pocket") {
        l.rate_bps = 1.1e6;
        l.jitter_mean_s = 200e-6;
    } else if (name == "backpack") {
        l.rate_bps = 1.0e6;
        l.jitter_mean_s = 300e-6;
    } else if (name.rfind("interferers-", 0) == 0) {
        const int n = std::stoi(name.substr(12));
        if (n < 0 || n > 4) throw SamplingError("link preset: interferers-N needs N in 0..4");
        l.rate_bps = 1.3e6 - 0.06e6 * n;
        l.jitter_mean_s = 100e-6 * n;
    } else {
        throw SamplingError("unknown link preset '" + name + "'");
    }
    return l;
}

void LinkModel::validate() const {
    if (!(rate_bps > 0.0)) throw SamplingError("link: rate_bps must be positive");
    if (!(jitter_mean_s >= 0.0)) throw SamplingError("link: jitter must be non-negative");
}

CapturePipeline::CapturePipeline(double fs_hz, LinkModel link, CaptureMode mode, std::size_t n_buffers)
    : fs_(fs_hz),
      link_(std::move(link)),
      mode_(mode),
      n_buffers_(n_buffers),
      capacity_(samples_per_packet(mode)),
      rng_state_(rf::mix_seed(link_.seed, 0x6c696e6bULL)) {
    if (!(fs_hz > 0.0)) throw SamplingError("pipeline: fs must be positive");
    if (fs_hz > max_sample_rate(mode))
        throw SamplingError("pipeline: fs " + std::to_string(fs_hz) + " exceeds " + to_string(mode) +
                            " mode limit");
    if (n_buffers < 2) throw SamplingError("pipeline: need at least two buffers");
    link_.validate();
    fill_.reserve(capacity_);
}

std::int64_t CapturePipeline::arrival_tick(std::uint64_t j) const {
    return std::llround(static_cast<double>(j) * kPauseClockHz / fs_);
}

std::int64_t CapturePipeline::draw_service_ticks() {
    double seconds = static_cast<double>(kPacketBytes) * 8.0 / link_.rate_bps;
    if (link_.jitter_mean_s > 0.0) {
        rng_state_ = rf::mix_seed(rng_state_, 1);
        const double u = static_cast<double>(rng_state_ >> 11) * 0x1.0p-53;
        seconds += -link_.jitter_mean_s * std::log1p(-u);
    }
    return static_cast<std::int64_t>(std::ceil(seconds * kPauseClockHz));
}

void CapturePipeline::advance_link(std::int64_t now) {
    while (!queue_.empty()) {
        const auto& head = queue_.front();
        const std::int64_t done = std::max(link_free_tick_, head.ready_tick) + head.service_ticks;
        if (done > now) break;
        link_free_tick_ = done;
        result_.packets.push_back(head.bytes);
        queue_.erase(queue_.begin());
    }
}

void CapturePipeline::queue_filling(std::int64_t now) {
    queue_.push_back({packetize(fill_, seq_, mode_), now + kBufferSwitchTicks, draw_service_ticks()});
    seq_ = static_cast<std::uint8_t>(mode_ == CaptureMode::Magnitude ? seq_ + 1 : (seq_ + 1) & 0x7F);
    fill_.clear();
    filling_ = false;
}

void CapturePipeline::offer(const IQSample& s) {
    const std::int64_t now = arrival_tick(offered_);
    ++offered_;
    advance_link(now);
    if (!filling_) {
        if (queue_.size() < n_buffers_) {
            filling_ = true;
            if (paused_) {
                result_.pauses.push_back(
                    {result_.emitted, static_cast<std::uint64_t>(now - pause_start_tick_)});
                paused_ = false;
            }
        } else {
            if (!paused_) {
                paused_ = true;
                pause_start_tick_ = now;
            }
            ++result_.discarded;
            return;
        }
    }
    fill_.push_back(s);
    ++result_.emitted;
    if (fill_.size() == capacity_) queue_filling(now);
}

PipelineResult CapturePipeline::finish() {
    const std::int64_t now = arrival_tick(offered_);
    if (filling_ && !fill_.empty()) {
        result_.padded = capacity_ - fill_.size();
        fill_.resize(capacity_);
        queue_filling(now);
    }
    advance_link(std::numeric_limits<std::int64_t>::max());
    result_.offered = offered_;
    return std::move(result_);
}

PipelineResult run_capture_pipeline(std::span<const IQSample> source, double fs_hz, const LinkModel& link,
                                    CaptureMode mode, std::size_t n_buffers) {
    CapturePipeline p(fs_hz, link, mode, n_buffers);
    for (const auto& s : source) p.offer(s);
    return p.finish();
}

std::vector<std::int64_t> reconstruct_ticks(std::size_t n_samples, std::span<const PauseRecord> pauses,
                                            double fs_hz) {
    if (!(fs_hz > 0.0)) throw SamplingError("reconstruct: fs must be positive");
    for (std::size_t k = 1; k < pauses.size(); ++k)
        if (pauses[k].after_sample_index <= pauses[k - 1].after_sample_index)
            throw SamplingError("reconstruct: pause records out of order");
    std::vector<std::int64_t> out(n_samples);
    std::int64_t shift = 0;
    std::size_t next = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        while (next < pauses.size() && pauses[next].after_sample_index <= i)
            shift += static_cast<std::int64_t>(pauses[next++].ticks);
        out[i] = std::llround(static_cast<double>(i) * kPauseClockHz / fs_hz) + shift;
    }
    return out;
}

std::vector<TimedSample> reconstruct_timeline(std::span<const PacketBytes> packets,
                                              std::span<const PauseRecord> pauses, double fs_hz, double t0,
                                              CaptureMode mode, std::optional<std::size_t> sample_count) {
    std::vector<IQSample> samples;
    for (const auto& p : packets) {
        auto decoded = depacketize(p, mode);
        samples.insert(samples.end(), decoded.samples.begin(), decoded.samples.end());
    }
    if (sample_count) {
        if (*sample_count > samples.size()) throw SamplingError("reconstruct: sample_count exceeds packet data");
        samples.resize(*sample_count);
    }
    const auto ticks = reconstruct_ticks(samples.size(), pauses, fs_hz);
    std::vector<TimedSample> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        out[i] = {t0 + static_cast<double>(ticks[i]) / kPauseClockHz, samples[i]};
    return out;
}

}  // namespace crowdsdr::sampling
