#pragma once

#include "nmls/neural.hpp"
#include "nmls/server/session.hpp"

#include <memory>
#include <string>

namespace nmls::server {

struct ServerOptions {
    std::string address = "127.0.0.1";
    /// 0 binds an ephemeral port; start() reports the one chosen.
    unsigned short port = 8080;
    /// Worker threads for deformation and training (0: hardware concurrency, at least 2).
    unsigned compute_threads = 0;
    /// Threads used inside one deformation request (0: hardware concurrency).
    unsigned deform_threads = 0;
    /// Directory served under / and /static/ (disabled when empty).
    std::string static_dir;
    /// Training configuration for POST /session requests without a model.
    TrainConfig train;
};

/// HTTP + WebSocket front end over a SessionRegistry.
///
///   GET  /health                 {"status":"ok","version":...}
///   POST /session                JSON body, see README; {"session_id":...}
///   GET  /session/:id/shape      binary position frame of the source vertices
///   GET  /session/:id/faces      {"faces":[...],"control_points":[...],"vertex_count":N}
///   GET  /ws/:id                 WebSocket upgrade; deform / weights messages
///
/// Deform requests on one connection are answered in order; a deform request
/// still waiting in the queue is dropped when a newer one arrives.
class Server {
public:
    explicit Server(ServerOptions options);
    ~Server();

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    SessionRegistry& sessions() noexcept;

    /// Binds, listens and serves on a background thread. Returns the bound port.
    /// Throws nmls::Error when the address cannot be bound.
    unsigned short start();

    /// Blocks until stop() is called from another thread.
    void wait();

    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace nmls::server
