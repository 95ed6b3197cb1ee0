#pragma once

// Append-only measurement log with an in-memory time index. One writer,
// many concurrent readers.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include "crowdsdr/measurement.hpp"

namespace crowdsdr::server {

struct GeoBox {
    double lat_min = -90.0;
    double lat_max = 90.0;
    double lon_min = -180.0;
    double lon_max = 180.0;
};

struct QueryFilter {
    std::optional<double> t_min, t_max;
    std::set<std::string> devices;  // empty = any
    std::optional<double> f_min, f_max;
    std::optional<double> min_rssi_dbm;  // records without an RSSI never match
    std::optional<GeoBox> box;
    std::optional<meas::Kind> kind;

    /// Throws std::invalid_argument on inverted ranges.
    void validate() const;
    bool matches(const meas::Measurement& m) const;
};

struct IngestResult {
    bool stored = false;
    bool duplicate = false;
    std::uint64_t id = 0;
};

class MeasurementStore {
public:
    /// In-memory only.
    MeasurementStore() = default;
    /// Opens (or creates) a log file and replays it. A trailing partial line
    /// left by an interrupted write is ignored and truncated away.
    explicit MeasurementStore(std::filesystem::path log_path);

    IngestResult ingest(const meas::Measurement& m);
    std::vector<meas::Measurement> query(const QueryFilter& f) const;
    std::size_t size() const;
    void flush();
    const std::optional<std::filesystem::path>& path() const { return path_; }

private:
    using SortKey = std::tuple<double, std::string, int, std::uint64_t>;

    IngestResult insert_locked(const meas::Measurement& m);

    mutable std::shared_mutex mu_;
    std::optional<std::filesystem::path> path_;
    std::ofstream out_;
    std::vector<meas::Measurement> records_;
    std::map<SortKey, std::size_t> by_time_;
    std::set<meas::DedupKey> seen_;
};

}  // namespace crowdsdr::server
