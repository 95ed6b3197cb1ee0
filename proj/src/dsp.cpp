#include "crowdsdr/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace crowdsdr::dsp {

using sampling::IQSample;

Capture capture_from_timeline(std::string device_id, std::span<const sampling::TimedSample> timeline,
                              double fs_hz, double freq_hz) {
    Capture c;
    c.device_id = std::move(device_id);
    c.fs_hz = fs_hz;
    c.freq_hz = freq_hz;
    if (timeline.empty()) return c;
    c.t0 = timeline.front().t;
    c.samples.reserve(timeline.size());
    for (const auto& ts : timeline) {
        const auto slot = static_cast<std::size_t>(std::llround((ts.t - c.t0) * fs_hz));
        while (c.samples.size() < slot) c.samples.push_back({0, c.samples.empty() ? ts.sample.angle : c.samples.back().angle});
        c.samples.push_back(ts.sample);
    }
    return c;
}

std::vector<IQSample> samples_from_int16(std::span<const std::uint16_t> magnitude, std::span<const std::int16_t> angle) {
    if (magnitude.size() != angle.size()) throw std::invalid_argument("samples_from_int16: length mismatch");
    std::vector<IQSample> out(magnitude.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {magnitude[i], sampling::wrap_angle(angle[i])};
    return out;
}

std::vector<double> discriminate(const Capture& c) {
    std::vector<double> f;
    if (c.samples.size() < 2) return f;
    f.resize(c.samples.size() - 1);
    const double hz_per_unit = c.fs_hz / sampling::kAngleUnits;
    for (std::size_t i = 0; i + 1 < c.samples.size(); ++i)
        f[i] = sampling::wrap_angle(c.samples[i + 1].angle - c.samples[i].angle) * hz_per_unit;
    return f;
}

void FrameConfig::validate() const {
    if (preamble_bytes < 1) throw std::invalid_argument("frame: preamble must be at least one byte");
    if (sync_word.size() < 2 || sync_word.size() > 4) throw std::invalid_argument("frame: sync word must be 2..4 bytes");
}

std::uint16_t crc16_ccitt(std::span<const std::uint8_t> data, std::uint16_t init) {
    std::uint16_t crc = init;
    for (std::uint8_t byte : data) {
        crc ^= static_cast<std::uint16_t>(byte) << 8;
        for (int b = 0; b < 8; ++b) crc = (crc & 0x8000) ? static_cast<std::uint16_t>(crc << 1 ^ 0x1021) : static_cast<std::uint16_t>(crc << 1);
    }
    return crc;
}

std::vector<std::uint8_t> build_frame(std::span<const std::uint8_t> payload, const FrameConfig& cfg) {
    cfg.validate();
    if (payload.size() > 255) throw std::invalid_argument("frame: payload exceeds 255 bytes");
    std::vector<std::uint8_t> f(static_cast<std::size_t>(cfg.preamble_bytes), 0xAA);
    f.insert(f.end(), cfg.sync_word.begin(), cfg.sync_word.end());
    const std::size_t body = f.size();
    f.push_back(static_cast<std::uint8_t>(payload.size()));
    f.insert(f.end(), payload.begin(), payload.end());
    const auto crc = crc16_ccitt(std::span(f).subspan(body));
    f.push_back(static_cast<std::uint8_t>(crc >> 8));
    f.push_back(static_cast<std::uint8_t>(crc));
    return f;
}

namespace {

std::vector<int> to_symbols(std::span<const std::uint8_t> bytes) {
    std::vector<int> s;
    s.reserve(bytes.size() * 8);
    for (auto b : bytes)
        for (int k = 7; k >= 0; --k) s.push_back(((b >> k) & 1) ? 1 : -1);
    return s;
}

std::vector<int> header_symbols(const FrameConfig& cfg) {
    std::vector<std::uint8_t> h(static_cast<std::size_t>(cfg.preamble_bytes), 0xAA);
    h.insert(h.end(), cfg.sync_word.begin(), cfg.sync_word.end());
    return to_symbols(h);
}

// Mean discriminator output over the central 60% of symbol m. Element i of
// `freq` sits at sample position i + 0.5.
std::optional<double> symbol_mean(std::span<const double> freq, double start, double sps, std::size_t m) {
    const double lo = start + (static_cast<double>(m) + 0.2) * sps - 0.5;
    const double hi = start + (static_cast<double>(m) + 0.8) * sps - 0.5;
    auto first = static_cast<std::ptrdiff_t>(std::ceil(lo));
    auto last = static_cast<std::ptrdiff_t>(std::floor(hi));
    if (last < first) first = last = static_cast<std::ptrdiff_t>(std::lround((lo + hi) / 2.0));
    if (first < 0 || last >= static_cast<std::ptrdiff_t>(freq.size())) return std::nullopt;
    double acc = 0.0;
    for (auto i = first; i <= last; ++i) acc += freq[static_cast<std::size_t>(i)];
    return acc / static_cast<double>(last - first + 1);
}

std::optional<std::vector<std::uint8_t>> slice_bytes(std::span<const double> freq, double start, double sps,
                                                     double offset, std::size_t first_bit, std::size_t n_bytes) {
    std::vector<std::uint8_t> out(n_bytes, 0);
    for (std::size_t k = 0; k < n_bytes * 8; ++k) {
        auto v = symbol_mean(freq, start, sps, first_bit + k);
        if (!v) return std::nullopt;
        if (*v - offset > 0.0) out[k / 8] |= static_cast<std::uint8_t>(0x80 >> (k % 8));
    }
    return out;
}

}  // namespace

std::optional<FrameDetection> detect_frame(std::span<const double> freq, const FrameConfig& cfg,
                                           const CoarseParams& coarse) {
    cfg.validate();
    const auto bits = header_symbols(cfg);
    const double nominal_sps = coarse.fs_hz / coarse.symbol_rate_hz;
    constexpr double kRateStep = 0.0025;
    const int steps = static_cast<int>(std::ceil(coarse.max_rate_error / kRateStep));

    std::vector<double> prefix(freq.size() + 1, 0.0), prefix_sq(freq.size() + 1, 0.0);
    for (std::size_t i = 0; i < freq.size(); ++i) {
        prefix[i + 1] = prefix[i] + freq[i];
        prefix_sq[i + 1] = prefix_sq[i] + freq[i] * freq[i];
    }

    std::optional<FrameDetection> best;
    for (int k = -steps; k <= steps; ++k) {
        const double sps = nominal_sps / (1.0 + k * kRateStep);
        const auto len = static_cast<std::size_t>(std::floor(static_cast<double>(bits.size()) * sps));
        if (len < 8 || len > freq.size()) continue;
        std::vector<double> tmpl(len);
        for (std::size_t i = 0; i < len; ++i)
            tmpl[i] = bits[std::min(bits.size() - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) / sps))];
        const double t_mean = std::accumulate(tmpl.begin(), tmpl.end(), 0.0) / static_cast<double>(len);
        double t_norm = 0.0;
        for (auto& v : tmpl) {
            v -= t_mean;
            t_norm += v * v;
        }
        t_norm = std::sqrt(t_norm);
        for (auto& v : tmpl) v /= t_norm;

        for (std::size_t i0 = 0; i0 + len <= freq.size(); ++i0) {
            const double sum = prefix[i0 + len] - prefix[i0];
            const double var = prefix_sq[i0 + len] - prefix_sq[i0] - sum * sum / static_cast<double>(len);
            if (var <= 1e-9) continue;
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) dot += tmpl[i] * freq[i0 + i];
            const double score = dot / std::sqrt(var);
            if (!best || score > best->score) {
                FrameDetection d;
                d.start = static_cast<double>(i0);
                d.samples_per_symbol = sps;
                d.score = score;
                // regression freq ≈ dev·bit + offset over the window
                d.deviation_hz = dot / t_norm;
                d.freq_offset_hz = sum / static_cast<double>(len) - d.deviation_hz * t_mean;
                best = d;
            }
        }
    }
    if (!best || best->score < coarse.min_score) return std::nullopt;

    const std::size_t pre_bits = 8 * static_cast<std::size_t>(cfg.preamble_bytes);
    auto sync = slice_bytes(freq, best->start, best->samples_per_symbol, best->freq_offset_hz, pre_bits,
                            cfg.sync_word.size());
    if (!sync || *sync != cfg.sync_word) return std::nullopt;
    return best;
}

DemodResult demodulate_fsk(const Capture& c, const FrameConfig& cfg, const CoarseParams& coarse) {
    const auto freq = discriminate(c);
    CoarseParams cp = coarse;
    cp.fs_hz = c.fs_hz;
    const auto det = detect_frame(freq, cfg, cp);
    if (!det) throw DemodError(DemodError::Kind::NoFrame, "no frame: preamble/sync not found");

    DemodDiagnostics diag;
    diag.detection = *det;
    double start = det->start;
    double sps = det->samples_per_symbol;
    double offset = det->freq_offset_hz;
    const std::size_t hdr = cfg.header_bits();
    const std::size_t pre_bits = 8 * static_cast<std::size_t>(cfg.preamble_bytes);

    auto frame_bits = [&]() -> std::optional<std::size_t> {
        auto len = slice_bytes(freq, start, sps, offset, hdr, 1);
        if (!len) return std::nullopt;
        return hdr + 8 * (1 + static_cast<std::size_t>((*len)[0]) + 2);
    };

    std::size_t fit_limit = std::max<std::size_t>(hdr + 8, 64);
    for (int it = 1; it <= 10; ++it) {
        diag.iterations = it;
        const auto total = frame_bits();
        if (!total) break;
        const std::size_t span_bits = std::min(fit_limit, *total);

        // zero crossings of the offset-corrected discriminator near symbol edges
        double sm = 0, sc = 0, smm = 0, smc = 0;
        std::size_t n = 0;
        const auto i_end = std::min<std::size_t>(freq.size() - 1,
                                                 static_cast<std::size_t>(start + static_cast<double>(span_bits) * sps));
        for (auto i = static_cast<std::size_t>(std::max(0.0, start)); i < i_end; ++i) {
            const double x0 = freq[i] - offset;
            const double x1 = freq[i + 1] - offset;
            if (!(x0 * x1 < 0.0)) continue;
            const double pos = static_cast<double>(i) + 0.5 + x0 / (x0 - x1);
            const double m = std::round((pos - start) / sps);
            if (m < 1.0 || m >= static_cast<double>(span_bits)) continue;
            if (std::abs(pos - (start + m * sps)) > 0.4 * sps) continue;
            sm += m;
            sc += pos;
            smm += m * m;
            smc += m * pos;
            ++n;
        }
        if (n < 2) break;
        const double dn = static_cast<double>(n);
        const double denom = dn * smm - sm * sm;
        if (denom <= 0.0) break;
        const double new_sps = (dn * smc - sm * sc) / denom;
        const double new_start = (sc - new_sps * sm) / dn;
        const double end_shift = std::abs(new_start + static_cast<double>(*total) * new_sps -
                                          (start + static_cast<double>(*total) * sps));
        const double correction = std::max(std::abs(new_start - start), end_shift) / sps;
        start = new_start;
        sps = new_sps;

        // alternating preamble averages to the carrier offset
        double acc = 0.0;
        std::size_t used = 0;
        for (std::size_t m = 0; m < pre_bits; ++m)
            if (auto v = symbol_mean(freq, start, sps, m)) {
                acc += *v;
                ++used;
            }
        if (used > 0 && used % 2 == 0) offset = acc / static_cast<double>(used);

        diag.last_correction_symbols = correction;
        if (span_bits == *total && correction < 0.05) break;
        fit_limit *= 2;
    }
    diag.start = start;
    diag.samples_per_symbol = sps;
    diag.freq_offset_hz = offset;

    const auto total = frame_bits();
    if (!total) throw DemodError(DemodError::Kind::NoFrame, "no frame: capture ends inside the header", {}, diag);
    const std::size_t n_bytes = *total / 8;
    auto raw = slice_bytes(freq, start, sps, offset, 0, n_bytes);
    if (!raw) throw DemodError(DemodError::Kind::NoFrame, "no frame: capture ends mid-payload", {}, diag);
    const std::size_t sync_at = static_cast<std::size_t>(cfg.preamble_bytes);
    if (!std::equal(cfg.sync_word.begin(), cfg.sync_word.end(), raw->begin() + static_cast<std::ptrdiff_t>(sync_at)))
        throw DemodError(DemodError::Kind::NoFrame, "no frame: sync word lost after timing recovery", *raw, diag);

    const std::size_t body = hdr / 8;
    const std::size_t len = (*raw)[body];
    const auto crc = crc16_ccitt(std::span(*raw).subspan(body, 1 + len));
    const std::uint16_t got = static_cast<std::uint16_t>((*raw)[body + 1 + len] << 8 | (*raw)[body + 2 + len]);
    if (crc != got) throw DemodError(DemodError::Kind::Crc, "CRC mismatch", *raw, diag);

    DemodResult r;
    r.payload.assign(raw->begin() + static_cast<std::ptrdiff_t>(body + 1),
                     raw->begin() + static_cast<std::ptrdiff_t>(body + 1 + len));
    r.diag = diag;
    return r;
}

namespace {

// Discriminator output with noise-only stretches zeroed: the angle of a
// sample near the noise floor is uniform and would swamp the correlation.
std::vector<double> gated_freq(const Capture& c) {
    auto f = discriminate(c);
    std::uint32_t peak = 0;
    for (const auto& s : c.samples) peak = std::max(peak, s.magnitude);
    const std::uint32_t gate = peak / 4;
    for (std::size_t i = 0; i < f.size(); ++i)
        if (c.samples[i].magnitude < gate || c.samples[i + 1].magnitude < gate) f[i] = 0.0;
    return f;
}

}  // namespace

AlignResult align_captures(std::span<const Capture> captures, std::size_t window, std::size_t reference,
                           double min_peak) {
    if (captures.size() < 2) throw AlignError("align: need at least two captures");
    if (reference >= captures.size()) throw AlignError("align: reference out of range");
    const auto& ref = captures[reference];
    const auto fa = gated_freq(ref);
    constexpr std::size_t kMinOverlap = 16;

    AlignResult out;
    out.reference = reference;
    out.lags.assign(captures.size(), 0.0);
    out.peaks.assign(captures.size(), 1.0);
    out.reliable.assign(captures.size(), true);

    for (std::size_t c = 0; c < captures.size(); ++c) {
        if (c == reference) continue;
        const auto& cap = captures[c];
        if (cap.fs_hz != ref.fs_hz) throw AlignError("align: sample rates differ");
        const auto fb = gated_freq(cap);
        const double coarse = (cap.t0 - ref.t0) * ref.fs_hz;
        const auto w = static_cast<double>(window);
        const auto k_lo = static_cast<long>(std::floor(coarse - w));
        const auto k_hi = static_cast<long>(std::ceil(coarse + w));

        bool any = false;
        double best_peak = -2.0;
        long best_k = 0;
        for (long k = k_lo; k <= k_hi; ++k) {
            // pair fa[i] with fb[i - k]: b's waveform sits k samples earlier in its own index
            const long i_lo = std::max<long>(0, k);
            const long i_hi = std::min<long>(static_cast<long>(fa.size()), static_cast<long>(fb.size()) + k);
            if (i_hi - i_lo < static_cast<long>(kMinOverlap)) continue;
            any = true;
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (long i = i_lo; i < i_hi; ++i) {
                const double a = fa[static_cast<std::size_t>(i)];
                const double b = fb[static_cast<std::size_t>(i - k)];
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
            const double n = static_cast<double>(i_hi - i_lo);
            const double va = saa - sa * sa / n;
            const double vb = sbb - sb * sb / n;
            const double peak = (va > 0 && vb > 0) ? (sab - sa * sb / n) / std::sqrt(va * vb) : 0.0;
            if (peak > best_peak) {
                best_peak = peak;
                best_k = k;
            }
        }
        if (!any) throw AlignError("align: captures do not overlap within the search window");
        // fa[i] ~ fb[i-k]: event at ref index i appears at b index i-k
        out.lags[c] = coarse - static_cast<double>(best_k);
        out.peaks[c] = best_peak;
        out.reliable[c] = best_peak >= min_peak;
    }
    return out;
}

}  // namespace crowdsdr::dsp
