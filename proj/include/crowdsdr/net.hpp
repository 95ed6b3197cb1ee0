#pragma once

// Transports for the server: a persistent TCP channel per gateway carrying
// newline-delimited JSON events {event, payload}, and a small HTTP API for
// the operator console. Event and endpoint schemas are in docs/protocol.md.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "crowdsdr/server.hpp"

namespace httplib {
class Server;
}

namespace crowdsdr::net {

class NetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

nlohmann::json make_event(const std::string& event, nlohmann::json payload);

/// Query-string parameters to a filter; throws std::invalid_argument on bad
/// numbers, unknown kinds or inverted ranges.
server::QueryFilter parse_filter(const std::map<std::string, std::string>& params);

struct AckRecord {
    std::uint64_t cmd_id = 0;
    std::string device_id;
    bool ok = true;
    std::string reason;
};

class EventServer {
public:
    explicit EventServer(server::Server& srv);
    ~EventServer();
    EventServer(const EventServer&) = delete;
    EventServer& operator=(const EventServer&) = delete;

    /// Binds and starts accepting. Port 0 picks a free port.
    void start(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

    std::vector<AckRecord> acks() const;
    std::uint64_t rejected() const { return rejected_; }

private:
    struct Conn;

    void accept_loop();
    void serve(std::shared_ptr<Conn> c);
    void handle(Conn& c, const std::string& line);

    server::Server& srv_;
    int listen_fd_ = -1;
    int port_ = 0;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    mutable std::mutex mu_;
    std::vector<std::shared_ptr<Conn>> conns_;
    std::vector<std::thread> threads_;
    std::map<std::string, std::vector<sampling::PauseRecord>> pending_pauses_;
    std::vector<AckRecord> acks_;
    std::atomic<std::uint64_t> rejected_{0};
};

class HttpApi {
public:
    explicit HttpApi(server::Server& srv);
    ~HttpApi();
    HttpApi(const HttpApi&) = delete;
    HttpApi& operator=(const HttpApi&) = delete;

    void start(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

private:
    server::Server& srv_;
    std::unique_ptr<httplib::Server> http_;
    std::thread thread_;
    int port_ = 0;
};

/// Gateway side of the TCP channel.
class GatewayClient {
public:
    using CommandHandler = std::function<void(const ServerCommand&)>;

    GatewayClient() = default;
    ~GatewayClient();
    GatewayClient(const GatewayClient&) = delete;
    GatewayClient& operator=(const GatewayClient&) = delete;

    void connect(const std::string& host, int port, const std::string& device_id,
                 nlohmann::json caps = nlohmann::json::object());
    void on_command(CommandHandler h);
    void send_measurement(const meas::Measurement& m);
    void send_pause(const sampling::PauseRecord& p);
    void send_ack(std::uint64_t cmd_id, bool ok, const std::string& reason = {});
    /// Round-trips a ping; true once every earlier event was processed.
    bool sync(int timeout_ms = 10000);
    void close();
    const std::string& device_id() const { return device_id_; }
    std::vector<std::string> errors() const;

private:
    void send_line(const std::string& s);
    void read_loop();

    int fd_ = -1;
    std::string device_id_;
    std::thread reader_;
    std::mutex write_mu_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    CommandHandler handler_;
    std::uint64_t ping_seq_ = 0;
    std::uint64_t pong_seq_ = 0;
    std::vector<std::string> errors_;
    bool closed_ = false;
};

}  // namespace crowdsdr::net
