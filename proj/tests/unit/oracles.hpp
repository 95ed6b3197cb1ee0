#pragma once

// Independent reference models used by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace oracle {

/// Discrete-event model of the capture path written from the buffer rules
/// alone: three buffers, 81 samples each, a full buffer becomes sendable
/// 352 ticks after its last sample, the link serves one buffer at a time in
/// fill order, and a buffer is released when its transfer completes. A new
/// buffer may start filling at a sample arrival only if fewer than three are
/// held. Returns the arrival tick of every retained sample and the number
/// of buffers sent.
struct Retained {
    std::vector<std::int64_t> ticks;
    std::size_t packets = 0;
};

inline Retained capture_ticks(std::uint64_t n_offered, double fs, double rate_bps, std::size_t buffers = 3,
                              std::size_t per_buffer = 81) {
    const double k = 16e6 / fs;
    const std::int64_t service = static_cast<std::int64_t>(std::ceil(244.0 * 8.0 / rate_bps * 16e6));
    std::vector<std::int64_t> done;  // completion tick of each sent buffer, in order
    std::int64_t link_free = 0;
    Retained out;
    std::size_t in_fill = 0;
    bool filling = true;
    for (std::uint64_t j = 0; j < n_offered; ++j) {
        const std::int64_t t = std::llround(static_cast<double>(j) * k);
        if (!filling) {
            // completion ticks are increasing, so the held buffers are a suffix
            const auto held = static_cast<std::size_t>(done.end() - std::upper_bound(done.begin(), done.end(), t));
            if (held < buffers) {
                filling = true;
                in_fill = 0;
            } else {
                continue;
            }
        }
        out.ticks.push_back(t);
        if (++in_fill == per_buffer) {
            const std::int64_t start = std::max(link_free, t + 352);
            link_free = start + service;
            done.push_back(link_free);
            filling = false;
        }
    }
    out.packets = done.size() + (filling && in_fill > 0 ? 1 : 0);
    return out;
}

inline std::vector<std::uint8_t> read_hex(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::uint8_t> out;
    std::string tok;
    while (in >> tok) out.push_back(static_cast<std::uint8_t>(std::stoul(tok, nullptr, 16)));
    return out;
}

}  // namespace oracle
