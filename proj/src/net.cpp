#include "crowdsdr/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <sstream>

#include "httplib.h"

namespace crowdsdr::net {

using nlohmann::json;

namespace {

bool write_all(int fd, const std::string& s) {
    std::size_t off = 0;
    while (off < s.size()) {
        const ssize_t n = ::send(fd, s.data() + off, s.size() - off, MSG_NOSIGNAL);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return false;
        off += static_cast<std::size_t>(n);
    }
    return true;
}

/// Reads newline-terminated lines; returns false on EOF or error.
class LineReader {
public:
    explicit LineReader(int fd) : fd_(fd) {}

    bool next(std::string& line) {
        while (true) {
            const auto pos = buf_.find('\n', scan_);
            if (pos != std::string::npos) {
                line.assign(buf_, 0, pos);
                buf_.erase(0, pos + 1);
                scan_ = 0;
                return true;
            }
            scan_ = buf_.size();
            char tmp[8192];
            const ssize_t n = ::recv(fd_, tmp, sizeof tmp, 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) return false;
            buf_.append(tmp, static_cast<std::size_t>(n));
        }
    }

private:
    int fd_;
    std::string buf_;
    std::size_t scan_ = 0;
};

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument(key + ": not a number");
    }
    if (used != v.size()) throw std::invalid_argument(key + ": not a number");
    return d;
}

}  // namespace

json make_event(const std::string& event, json payload) { return json{{"event", event}, {"payload", std::move(payload)}}; }

server::QueryFilter parse_filter(const std::map<std::string, std::string>& params) {
    server::QueryFilter f;
    std::optional<server::GeoBox> box;
    for (const auto& [k, v] : params) {
        if (k == "t_min") f.t_min = parse_double(k, v);
        else if (k == "t_max") f.t_max = parse_double(k, v);
        else if (k == "f_min") f.f_min = parse_double(k, v);
        else if (k == "f_max") f.f_max = parse_double(k, v);
        else if (k == "min_rssi") f.min_rssi_dbm = parse_double(k, v);
        else if (k == "lat_min" || k == "lat_max" || k == "lon_min" || k == "lon_max") {
            if (!box) box.emplace();
            const double d = parse_double(k, v);
            if (k == "lat_min") box->lat_min = d;
            else if (k == "lat_max") box->lat_max = d;
            else if (k == "lon_min") box->lon_min = d;
            else box->lon_max = d;
        } else if (k == "devices") {
            std::stringstream ss(v);
            std::string id;
            while (std::getline(ss, id, ','))
                if (!id.empty()) f.devices.insert(id);
        } else if (k == "kind") {
            try {
                f.kind = meas::kind_from_string(v);
            } catch (const meas::SchemaError& e) {
                throw std::invalid_argument(e.what());
            }
        } else {
            throw std::invalid_argument("unknown filter parameter '" + k + "'");
        }
    }
    f.box = box;
    f.validate();
    return f;
}

// ---------------------------------------------------------------- EventServer

struct EventServer::Conn {
    int fd = -1;
    std::mutex write_mu;
    std::atomic<bool> alive{true};
    std::string device_id;
    std::uint64_t session = 0;

    bool send(const json& j) {
        if (!alive) return false;
        std::lock_guard lk(write_mu);
        if (!write_all(fd, j.dump() + "\n")) {
            alive = false;
            return false;
        }
        return true;
    }
};

EventServer::EventServer(server::Server& srv) : srv_(srv) {}

EventServer::~EventServer() { stop(); }

void EventServer::start(const std::string& host, int port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw NetError("socket: " + std::string(std::strerror(errno)));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1)
        throw NetError("bad listen address " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 512) < 0) {
        const std::string err = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw NetError("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void EventServer::stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> threads;
    {
        std::lock_guard lk(mu_);
        for (auto& c : conns_) ::shutdown(c->fd, SHUT_RDWR);
        threads.swap(threads_);
    }
    for (auto& t : threads) t.join();
    std::lock_guard lk(mu_);
    conns_.clear();
}

void EventServer::accept_loop() {
    while (running_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            break;
        }
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        auto c = std::make_shared<Conn>();
        c->fd = fd;
        std::lock_guard lk(mu_);
        if (!running_) {
            ::close(fd);
            break;
        }
        conns_.push_back(c);
        threads_.emplace_back([this, c] { serve(c); });
    }
}

void EventServer::serve(std::shared_ptr<Conn> c) {
    LineReader rd(c->fd);
    std::string line;
    while (rd.next(line)) {
        if (line.empty()) continue;
        handle(*c, line);
        if (!c->alive) break;
    }
    c->alive = false;
    if (!c->device_id.empty()) srv_.registry().disconnect(c->device_id, c->session);
    ::shutdown(c->fd, SHUT_RDWR);
    ::close(c->fd);
}

void EventServer::handle(Conn& c, const std::string& line) {
    auto reject = [&](const std::string& reason) {
        ++rejected_;
        c.send(make_event("error", {{"reason", reason}}));
    };
    json ev;
    try {
        ev = json::parse(line);
    } catch (const json::exception&) {
        reject("malformed json");
        return;
    }
    if (!ev.is_object() || !ev.contains("event") || !ev["event"].is_string()) {
        reject("missing event");
        return;
    }
    const auto kind = ev["event"].get<std::string>();
    const json payload = ev.value("payload", json::object());

    if (kind == "hello") {
        try {
            std::weak_ptr<Conn> weak;
            {
                std::lock_guard lk(mu_);
                for (auto& p : conns_)
                    if (p.get() == &c) weak = p;
            }
            c.session = srv_.registry().register_client(payload, [weak](const ServerCommand& cmd) {
                auto sp = weak.lock();
                return sp && sp->send(make_event("command", cmd.to_json()));
            });
            c.device_id = payload["device_id"].get<std::string>();
            c.send(make_event("welcome", {{"device_id", c.device_id}, {"session", c.session}}));
        } catch (const std::exception& e) {
            reject(e.what());
            c.alive = false;
        }
        return;
    }
    if (c.device_id.empty()) {
        reject("hello required first");
        c.alive = false;
        return;
    }
    if (kind == "measurement") {
        try {
            auto m = meas::from_json(payload);
            if (m.device_id != c.device_id) throw meas::SchemaError("device_id: does not match session");
            if (auto* iq = std::get_if<meas::IqPayload>(&m.payload)) {
                std::lock_guard lk(mu_);
                auto it = pending_pauses_.find(c.device_id);
                if (it != pending_pauses_.end()) {
                    iq->pauses.insert(iq->pauses.end(), it->second.begin(), it->second.end());
                    std::sort(iq->pauses.begin(), iq->pauses.end(), [](const auto& a, const auto& b) {
                        return a.after_sample_index < b.after_sample_index;
                    });
                    iq->pauses.erase(std::unique(iq->pauses.begin(), iq->pauses.end()), iq->pauses.end());
                    pending_pauses_.erase(it);
                }
            }
            srv_.ingest(m);
        } catch (const std::exception& e) {
            reject(e.what());
        }
    } else if (kind == "pause") {
        if (!payload.contains("after_index") || !payload.contains("ticks") ||
            !payload["after_index"].is_number_unsigned() || !payload["ticks"].is_number_unsigned()) {
            reject("pause: after_index and ticks must be non-negative integers");
            return;
        }
        std::lock_guard lk(mu_);
        pending_pauses_[c.device_id].push_back(
            {payload["after_index"].get<std::uint64_t>(), payload["ticks"].get<std::uint64_t>()});
    } else if (kind == "ack") {
        AckRecord a;
        a.cmd_id = payload.value("cmd_id", std::uint64_t{0});
        a.device_id = c.device_id;
        a.ok = payload.value("ok", true);
        a.reason = payload.value("reason", std::string());
        std::lock_guard lk(mu_);
        acks_.push_back(std::move(a));
    } else if (kind == "ping") {
        c.send(make_event("pong", payload));
    } else {
        reject("unknown event '" + kind + "'");
    }
}

std::vector<AckRecord> EventServer::acks() const {
    std::lock_guard lk(mu_);
    return acks_;
}

// ---------------------------------------------------------------- HttpApi

HttpApi::HttpApi(server::Server& srv) : srv_(srv), http_(std::make_unique<httplib::Server>()) {
    auto send_json = [](httplib::Response& res, const json& j, int status = 200) {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    };
    http_->Get("/health", [send_json](const httplib::Request&, httplib::Response& res) {
        send_json(res, {{"ok", true}});
    });
    http_->Get("/clients", [this, send_json](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& c : srv_.registry().list()) arr.push_back(server::to_json(c));
        send_json(res, arr);
    });
    http_->Get("/measurements", [this, send_json](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> params;
        for (const auto& [k, v] : req.params) params[k] = v;
        try {
            const auto f = parse_filter(params);
            json arr = json::array();
            for (const auto& m : srv_.query(f)) arr.push_back(meas::to_json(m));
            send_json(res, {{"schema", 1}, {"count", arr.size()}, {"measurements", std::move(arr)}});
        } catch (const std::invalid_argument& e) {
            send_json(res, {{"error", e.what()}}, 400);
        }
    });
    http_->Post("/command", [this, send_json](const httplib::Request& req, httplib::Response& res) {
        try {
            auto cmd = ServerCommand::from_json(json::parse(req.body));
            send_json(res, server::to_json(srv_.dispatch(std::move(cmd))));
        } catch (const json::exception& e) {
            send_json(res, {{"error", std::string("malformed json: ") + e.what()}}, 400);
        } catch (const std::invalid_argument& e) {
            send_json(res, {{"error", e.what()}}, 400);
        }
    });
}

HttpApi::~HttpApi() { stop(); }

void HttpApi::start(const std::string& host, int port) {
    if (port == 0) {
        port_ = http_->bind_to_any_port(host);
        if (port_ < 0) throw NetError("cannot bind HTTP on " + host);
    } else {
        if (!http_->bind_to_port(host, port)) throw NetError("cannot bind HTTP on " + host + ":" + std::to_string(port));
        port_ = port;
    }
    thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
}

void HttpApi::stop() {
    if (http_) http_->stop();
    if (thread_.joinable()) thread_.join();
}

// ---------------------------------------------------------------- GatewayClient

GatewayClient::~GatewayClient() { close(); }

void GatewayClient::connect(const std::string& host, int port, const std::string& device_id, json caps) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
        throw NetError("cannot resolve " + host);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const int rc = fd_ < 0 ? -1 : ::connect(fd_, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc < 0) {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
        throw NetError("cannot connect to " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    device_id_ = device_id;
    closed_ = false;
    reader_ = std::thread([this] { read_loop(); });
    send_line(make_event("hello", {{"device_id", device_id}, {"caps", std::move(caps)}}).dump());
}

void GatewayClient::on_command(CommandHandler h) {
    std::lock_guard lk(mu_);
    handler_ = std::move(h);
}

void GatewayClient::send_line(const std::string& s) {
    std::lock_guard lk(write_mu_);
    if (fd_ < 0 || !write_all(fd_, s + "\n")) throw NetError("event channel closed");
}

void GatewayClient::send_measurement(const meas::Measurement& m) {
    send_line(make_event("measurement", meas::to_json(m)).dump());
}

void GatewayClient::send_pause(const sampling::PauseRecord& p) {
    send_line(make_event("pause", {{"device_id", device_id_}, {"after_index", p.after_sample_index}, {"ticks", p.ticks}})
                  .dump());
}

void GatewayClient::send_ack(std::uint64_t cmd_id, bool ok, const std::string& reason) {
    send_line(make_event("ack", {{"cmd_id", cmd_id}, {"device_id", device_id_}, {"ok", ok}, {"reason", reason}}).dump());
}

bool GatewayClient::sync(int timeout_ms) {
    std::uint64_t seq;
    {
        std::lock_guard lk(mu_);
        seq = ++ping_seq_;
    }
    send_line(make_event("ping", {{"seq", seq}}).dump());
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms), [&] { return pong_seq_ >= seq || closed_; }) &&
           pong_seq_ >= seq;
}

void GatewayClient::read_loop() {
    LineReader rd(fd_);
    std::string line;
    while (rd.next(line)) {
        json ev;
        try {
            ev = json::parse(line);
        } catch (const json::exception&) {
            continue;
        }
        const auto kind = ev.value("event", std::string());
        const auto& payload = ev["payload"];
        if (kind == "pong") {
            std::lock_guard lk(mu_);
            pong_seq_ = std::max(pong_seq_, payload.value("seq", std::uint64_t{0}));
            cv_.notify_all();
        } else if (kind == "command") {
            CommandHandler h;
            {
                std::lock_guard lk(mu_);
                h = handler_;
            }
            try {
                auto cmd = ServerCommand::from_json(payload);
                if (h) h(cmd);
            } catch (const std::exception& e) {
                std::lock_guard lk(mu_);
                errors_.push_back(e.what());
            }
        } else if (kind == "error") {
            std::lock_guard lk(mu_);
            errors_.push_back(payload.value("reason", std::string("error")));
        }
    }
    std::lock_guard lk(mu_);
    closed_ = true;
    cv_.notify_all();
}

std::vector<std::string> GatewayClient::errors() const {
    std::lock_guard lk(mu_);
    return errors_;
}

void GatewayClient::close() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
    if (reader_.joinable()) reader_.join();
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

}  // namespace crowdsdr::net
