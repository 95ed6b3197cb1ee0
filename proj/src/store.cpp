#include "crowdsdr/store.hpp"

#include <mutex>
#include <stdexcept>

namespace crowdsdr::server {

void QueryFilter::validate() const {
    if (t_min && t_max && *t_min > *t_max) throw std::invalid_argument("filter: t_min > t_max");
    if (f_min && f_max && *f_min > *f_max) throw std::invalid_argument("filter: f_min > f_max");
    if (box && (box->lat_min > box->lat_max || box->lon_min > box->lon_max))
        throw std::invalid_argument("filter: inverted bounding box");
}

bool QueryFilter::matches(const meas::Measurement& m) const {
    if (t_min && m.ts < *t_min) return false;
    if (t_max && m.ts > *t_max) return false;
    if (!devices.empty() && !devices.count(m.device_id)) return false;
    if (f_min && m.freq_hz < *f_min) return false;
    if (f_max && m.freq_hz > *f_max) return false;
    if (min_rssi_dbm) {
        const auto r = m.rssi_dbm();
        if (!r || *r < *min_rssi_dbm) return false;
    }
    if (box && (m.lat < box->lat_min || m.lat > box->lat_max || m.lon < box->lon_min || m.lon > box->lon_max))
        return false;
    if (kind && m.kind != *kind) return false;
    return true;
}

MeasurementStore::MeasurementStore(std::filesystem::path log_path) : path_(std::move(log_path)) {
    std::uintmax_t good_bytes = 0;
    if (std::filesystem::exists(*path_)) {
        std::ifstream in(*path_, std::ios::binary);
        std::string line;
        std::uintmax_t pos = 0;
        while (std::getline(in, line)) {
            const bool complete = !in.eof();
            pos += line.size() + (complete ? 1 : 0);
            if (!complete) break;  // no trailing newline: partial write
            if (line.empty()) {
                good_bytes = pos;
                continue;
            }
            insert_locked(meas::from_json(nlohmann::json::parse(line)));
            good_bytes = pos;
        }
        in.close();
        if (std::filesystem::file_size(*path_) != good_bytes) std::filesystem::resize_file(*path_, good_bytes);
    }
    out_.open(*path_, std::ios::binary | std::ios::app);
    if (!out_) throw std::runtime_error("cannot open log " + path_->string());
}

IngestResult MeasurementStore::insert_locked(const meas::Measurement& m) {
    auto key = meas::dedup_key(m);
    if (seen_.count(key)) return {false, true, 0};
    seen_.insert(std::move(key));
    const std::size_t idx = records_.size();
    records_.push_back(m);
    by_time_.emplace(SortKey{m.ts, m.device_id, static_cast<int>(m.kind), idx}, idx);
    return {true, false, idx};
}

IngestResult MeasurementStore::ingest(const meas::Measurement& m) {
    const std::string line = meas::to_line(m) + "\n";
    std::unique_lock lk(mu_);
    auto r = insert_locked(m);
    if (r.stored && out_.is_open()) {
        out_.write(line.data(), static_cast<std::streamsize>(line.size()));
        out_.flush();
    }
    return r;
}

std::vector<meas::Measurement> MeasurementStore::query(const QueryFilter& f) const {
    f.validate();
    std::shared_lock lk(mu_);
    auto it = by_time_.begin();
    if (f.t_min) it = by_time_.lower_bound(SortKey{*f.t_min, std::string(), -1, 0});
    std::vector<meas::Measurement> out;
    for (; it != by_time_.end(); ++it) {
        if (f.t_max && std::get<0>(it->first) > *f.t_max) break;
        const auto& m = records_[it->second];
        if (f.matches(m)) out.push_back(m);
    }
    return out;
}

std::size_t MeasurementStore::size() const {
    std::shared_lock lk(mu_);
    return records_.size();
}

void MeasurementStore::flush() {
    std::unique_lock lk(mu_);
    if (out_.is_open()) out_.flush();
}

}  // namespace crowdsdr::server
