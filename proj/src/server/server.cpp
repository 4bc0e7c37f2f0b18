#include "nmls/server/server.hpp"

#include "nmls/errors.hpp"
#include "nmls/server/protocol.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/strand.hpp>
#include <boost/asio/thread_pool.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <thread>
#include <variant>

namespace nmls::server {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

namespace {

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

struct State {
    ServerOptions options;
    SessionRegistry registry;
    net::thread_pool compute;

    explicit State(ServerOptions opts)
        : options(std::move(opts)),
          compute(options.compute_threads ? options.compute_threads
                                           : std::max(2u, std::thread::hardware_concurrency()))
    {}
};

Response make_response(const Request& req, http::status status, std::string body,
                       std::string_view content_type)
{
    Response res{status, req.version()};
    res.set(http::field::server, "nmls");
    res.set(http::field::content_type, std::string(content_type));
    res.set(http::field::access_control_allow_origin, "*");
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
}

Response json_response(const Request& req, http::status status, std::string body)
{
    return make_response(req, status, std::move(body), "application/json");
}

Response error_response(const Request& req, http::status status, std::string_view message)
{
    return json_response(req, status, error_to_json(message));
}

std::vector<std::string_view> split_path(std::string_view target)
{
    target = target.substr(0, target.find('?'));
    std::vector<std::string_view> parts;
    std::size_t pos = 0;
    while (pos < target.size()) {
        if (target[pos] == '/') {
            ++pos;
            continue;
        }
        const std::size_t end = std::min(target.find('/', pos), target.size());
        parts.push_back(target.substr(pos, end - pos));
        pos = end;
    }
    return parts;
}

std::string_view mime_type(const std::filesystem::path& path)
{
    const auto ext = path.extension().string();
    if (ext == ".html") return "text/html";
    if (ext == ".js" || ext == ".mjs") return "application/javascript";
    if (ext == ".css") return "text/css";
    if (ext == ".json") return "application/json";
    if (ext == ".svg") return "image/svg+xml";
    if (ext == ".png") return "image/png";
    return "application/octet-stream";
}

/// Builds a session from a POST /session body. Runs on the compute pool since
/// it may train a network.
nlohmann::json create_session_from_json(State& state, const std::string& body)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what());
    }
    if (!doc.is_object()) throw ValidationError("session request must be a JSON object");

    Shape shape;
    if (doc.contains("shape_path")) {
        const auto path = doc["shape_path"].get<std::string>();
        const auto format = doc.contains("format")
                                ? parse_shape_format(doc["format"].get<std::string>())
                                : shape_format_from_path(path);
        shape = load_shape(read_file(path), format);
        shape.name = std::filesystem::path(path).stem().string();
    } else if (doc.contains("shape")) {
        const auto& s = doc["shape"];
        for (const auto& v : s.at("vertices")) {
            shape.vertices.emplace_back(v.at(0).get<double>(), v.at(1).get<double>(),
                                        v.at(2).get<double>());
        }
        if (s.contains("faces")) {
            for (const auto& f : s["faces"]) {
                shape.faces.push_back({f.at(0).get<int>(), f.at(1).get<int>(), f.at(2).get<int>()});
            }
        }
    } else {
        throw ValidationError("session request needs \"shape_path\" or \"shape\"");
    }
    validate_shape(shape);

    std::optional<ControlPointConfig> cps;
    if (doc.contains("control_points_path")) {
        cps = load_control_points(read_file(doc["control_points_path"].get<std::string>()));
    } else if (doc.contains("control_points")) {
        cps = load_control_points(nlohmann::json{{"points", doc["control_points"]}}.dump());
    } else {
        throw ValidationError("session request needs \"control_points_path\" or \"control_points\"");
    }

    std::shared_ptr<const MlpParams> model;
    bool trained = false;
    if (doc.contains("model_path")) {
        model = std::make_shared<const MlpParams>(
            load_model(read_file(doc["model_path"].get<std::string>())));
    } else {
        TrainConfig cfg = state.options.train;
        if (doc.contains("train")) {
            const auto& t = doc["train"];
            cfg.hidden_width = t.value("hidden", cfg.hidden_width);
            cfg.max_iters = t.value("iters", cfg.max_iters);
            cfg.learning_rate = t.value("lr", cfg.learning_rate);
            cfg.seed = t.value("seed", cfg.seed);
        }
        const auto normalized = normalize_shape(shape, *cps);
        spdlog::info("training weighting network for {} control points (width {})", cps->size(),
                     cfg.hidden_width);
        auto result = train(normalized.control_points, cfg);
        spdlog::info("training finished after {} iterations, loss {:.3g}, accuracy {:.3f}",
                     result.report.iterations_run, result.report.final_loss,
                     result.report.final_accuracy);
        model = std::make_shared<const MlpParams>(std::move(result.params));
        trained = true;
    }

    const auto session = state.registry.create(std::move(shape), *cps, std::move(model),
                                               state.options.deform_threads);
    spdlog::info("created session {}", session->id());
    return {{"session_id", session->id()},
            {"vertex_count", session->source_shape().vertex_count()},
            {"control_point_count", session->source_control_points().size()},
            {"trained", trained}};
}

// ---------------------------------------------------------------------------

class WsSession : public std::enable_shared_from_this<WsSession> {
public:
    WsSession(tcp::socket&& socket, std::shared_ptr<Session> session, State& state)
        : ws_(std::move(socket)), session_(std::move(session)), state_(state)
    {}

    void run(Request req)
    {
        ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
        ws_.read_message_max(64 * 1024 * 1024);
        ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
    }

private:
    struct Outgoing {
        bool binary = false;
        std::string data;
    };

    struct Pending {
        std::variant<ClientMessage, std::string> item; // parsed request or error text
    };

    void on_accept(beast::error_code ec)
    {
        if (ec) {
            spdlog::warn("websocket accept failed: {}", ec.message());
            return;
        }
        do_read();
    }

    void do_read()
    {
        ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
    }

    void on_read(beast::error_code ec, std::size_t)
    {
        if (ec) {
            closed_ = true;
            return;
        }
        std::string text = beast::buffers_to_string(buffer_.data());
        buffer_.consume(buffer_.size());
        enqueue(text);
        do_read();
    }

    void enqueue(const std::string& text)
    {
        Pending pending;
        try {
            pending.item = parse_client_message(text);
        } catch (const std::exception& e) {
            pending.item = std::string(e.what());
        }
        if (is_deform(pending)) {
            const auto before = queue_.size();
            std::erase_if(queue_, [](const Pending& p) { return is_deform(p); });
            if (queue_.size() != before) spdlog::debug("coalesced {} stale deform request(s)", before - queue_.size());
        }
        queue_.push_back(std::move(pending));
        maybe_start();
    }

    static bool is_deform(const Pending& p)
    {
        const auto* msg = std::get_if<ClientMessage>(&p.item);
        return msg && std::holds_alternative<DeformRequest>(*msg);
    }

    void maybe_start()
    {
        if (busy_ || queue_.empty()) return;
        busy_ = true;
        Pending next = std::move(queue_.front());
        queue_.pop_front();
        net::post(state_.compute, [self = shared_from_this(), next = std::move(next)]() mutable {
            Outgoing out = self->process(next);
            net::post(self->ws_.get_executor(), [self, out = std::move(out)]() mutable {
                self->busy_ = false;
                self->send(std::move(out));
                self->maybe_start();
            });
        });
    }

    Outgoing process(const Pending& pending)
    {
        if (const auto* error = std::get_if<std::string>(&pending.item)) {
            return {false, error_to_json(*error)};
        }
        try {
            const auto& msg = std::get<ClientMessage>(pending.item);
            if (const auto* deform = std::get_if<DeformRequest>(&msg)) {
                return {true, encode_positions(session_->deform(*deform).vertices)};
            }
            return {false, weights_to_json(session_->weights(std::get<WeightsRequest>(msg)))};
        } catch (const std::exception& e) {
            return {false, error_to_json(e.what())};
        }
    }

    void send(Outgoing out)
    {
        if (closed_) return;
        writes_.push_back(std::move(out));
        if (!writing_) do_write();
    }

    void do_write()
    {
        writing_ = true;
        ws_.binary(writes_.front().binary);
        ws_.async_write(net::buffer(writes_.front().data),
                        beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
    }

    void on_write(beast::error_code ec, std::size_t)
    {
        writes_.pop_front();
        if (ec) {
            closed_ = true;
            writes_.clear();
            writing_ = false;
            return;
        }
        if (writes_.empty()) {
            writing_ = false;
        } else {
            do_write();
        }
    }

    websocket::stream<beast::tcp_stream> ws_;
    beast::flat_buffer buffer_;
    std::shared_ptr<Session> session_;
    State& state_;
    std::deque<Pending> queue_;
    std::deque<Outgoing> writes_;
    bool busy_ = false;
    bool writing_ = false;
    bool closed_ = false;
};

// ---------------------------------------------------------------------------

class HttpSession : public std::enable_shared_from_this<HttpSession> {
public:
    HttpSession(tcp::socket&& socket, State& state) : stream_(std::move(socket)), state_(state) {}

    void run()
    {
        net::dispatch(stream_.get_executor(),
                      beast::bind_front_handler(&HttpSession::do_read, shared_from_this()));
    }

private:
    void do_read()
    {
        req_ = {};
        parser_.emplace();
        parser_->body_limit(256 * 1024 * 1024);
        stream_.expires_after(std::chrono::seconds(60));
        http::async_read(stream_, buffer_, *parser_,
                         beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
    }

    void on_read(beast::error_code ec, std::size_t)
    {
        if (ec == http::error::end_of_stream) return close();
        if (ec) return;
        req_ = parser_->release();

        if (websocket::is_upgrade(req_)) {
            const auto parts = split_path(target_view());
            std::shared_ptr<Session> session;
            if (parts.size() == 2 && parts[0] == "ws") session = state_.registry.find(std::string(parts[1]));
            if (!session) {
                return send(error_response(req_, http::status::not_found, "unknown session"));
            }
            stream_.expires_never();
            std::make_shared<WsSession>(stream_.release_socket(), std::move(session), state_)
                ->run(std::move(req_));
            return;
        }
        route();
    }

    std::string_view target_view() const
    {
        const auto t = req_.target();
        return {t.data(), t.size()};
    }

    void route()
    {
        const auto parts = split_path(target_view());
        const auto method = req_.method();
        try {
            if (method == http::verb::get && parts.size() == 1 && parts[0] == "health") {
                return send(json_response(req_, http::status::ok, health_json()));
            }
            if (method == http::verb::post && parts.size() == 1 && parts[0] == "session") {
                return create_session();
            }
            if (method == http::verb::get && parts.size() == 3 && parts[0] == "session") {
                const auto session = state_.registry.find(std::string(parts[1]));
                if (!session) return send(error_response(req_, http::status::not_found, "unknown session"));
                if (parts[2] == "shape") {
                    return send(make_response(req_, http::status::ok,
                                              encode_positions(session->source_shape().vertices),
                                              "application/octet-stream"));
                }
                if (parts[2] == "faces") {
                    nlohmann::json cps = nlohmann::json::array();
                    for (const auto& p : session->source_control_points().points()) {
                        cps.push_back(nlohmann::json::array({p.x(), p.y(), p.z()}));
                    }
                    nlohmann::json doc;
                    doc["vertex_count"] = session->source_shape().vertex_count();
                    doc["faces"] = session->source_shape().faces;
                    doc["control_points"] = std::move(cps);
                    return send(json_response(req_, http::status::ok, doc.dump()));
                }
            }
            if (method == http::verb::get && !state_.options.static_dir.empty()) {
                if (auto res = serve_static(parts)) return send(std::move(*res));
            }
            send(error_response(req_, http::status::not_found, "no such endpoint"));
        } catch (const std::exception& e) {
            send(error_response(req_, http::status::bad_request, e.what()));
        }
    }

    std::optional<Response> serve_static(const std::vector<std::string_view>& parts)
    {
        std::filesystem::path rel;
        auto begin = parts.begin();
        if (begin != parts.end() && *begin == "static") ++begin;
        for (auto it = begin; it != parts.end(); ++it) {
            if (*it == ".." || *it == ".") return std::nullopt;
            rel /= std::string(*it);
        }
        if (rel.empty()) rel = "index.html";
        const auto full = std::filesystem::path(state_.options.static_dir) / rel;
        if (!std::filesystem::is_regular_file(full)) return std::nullopt;
        return make_response(req_, http::status::ok, read_file(full.string()), mime_type(full));
    }

    void create_session()
    {
        net::post(state_.compute, [self = shared_from_this()] {
            Response res;
            try {
                auto body = create_session_from_json(self->state_, self->req_.body());
                res = json_response(self->req_, http::status::ok, body.dump());
            } catch (const std::exception& e) {
                spdlog::warn("session creation failed: {}", e.what());
                res = error_response(self->req_, http::status::bad_request, e.what());
            }
            net::post(self->stream_.get_executor(),
                      [self, res = std::move(res)]() mutable { self->send(std::move(res)); });
        });
    }

    void send(Response res)
    {
        auto sp = std::make_shared<Response>(std::move(res));
        const bool close_after = sp->need_eof();
        http::async_write(stream_, *sp,
                          [self = shared_from_this(), sp, close_after](beast::error_code ec, std::size_t) {
                              if (ec) return;
                              if (close_after) return self->close();
                              self->do_read();
                          });
    }

    void close()
    {
        beast::error_code ec;
        stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
    }

    beast::tcp_stream stream_;
    beast::flat_buffer buffer_;
    std::optional<http::request_parser<http::string_body>> parser_;
    Request req_;
    State& state_;
};

// ---------------------------------------------------------------------------

class Listener : public std::enable_shared_from_this<Listener> {
public:
    Listener(net::io_context& ioc, State& state) : ioc_(ioc), acceptor_(ioc), state_(state) {}

    unsigned short open(const tcp::endpoint& endpoint)
    {
        try {
            acceptor_.open(endpoint.protocol());
            acceptor_.set_option(net::socket_base::reuse_address(true));
            acceptor_.bind(endpoint);
            acceptor_.listen(net::socket_base::max_listen_connections);
        } catch (const boost::system::system_error& e) {
            throw Error("cannot listen on " + endpoint.address().to_string() + ":" +
                        std::to_string(endpoint.port()) + ": " + e.code().message());
        }
        return acceptor_.local_endpoint().port();
    }

    void run() { do_accept(); }

private:
    void do_accept()
    {
        acceptor_.async_accept(net::make_strand(ioc_),
                               beast::bind_front_handler(&Listener::on_accept, shared_from_this()));
    }

    void on_accept(beast::error_code ec, tcp::socket socket)
    {
        if (ec) {
            if (ec == net::error::operation_aborted) return;
            spdlog::warn("accept failed: {}", ec.message());
        } else {
            std::make_shared<HttpSession>(std::move(socket), state_)->run();
        }
        do_accept();
    }

    net::io_context& ioc_;
    tcp::acceptor acceptor_;
    State& state_;
};

} // namespace

struct Server::Impl {
    State state;
    net::io_context ioc{1};
    std::thread io_thread;
    std::mutex mutex;
    std::condition_variable stopped_cv;
    bool running = false;

    explicit Impl(ServerOptions options) : state(std::move(options)) {}
};

Server::Server(ServerOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

Server::~Server()
{
    stop();
    impl_->state.compute.join();
}

SessionRegistry& Server::sessions() noexcept
{
    return impl_->state.registry;
}

unsigned short Server::start()
{
    const auto address = net::ip::make_address(impl_->state.options.address);
    auto listener = std::make_shared<Listener>(impl_->ioc, impl_->state);
    const unsigned short port = listener->open({address, impl_->state.options.port});
    listener->run();
    {
        std::lock_guard lock(impl_->mutex);
        impl_->running = true;
    }
    impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
    spdlog::info("listening on {}:{}", impl_->state.options.address, port);
    return port;
}

void Server::wait()
{
    std::unique_lock lock(impl_->mutex);
    impl_->stopped_cv.wait(lock, [this] { return !impl_->running; });
}

void Server::stop()
{
    impl_->ioc.stop();
    if (impl_->io_thread.joinable() && impl_->io_thread.get_id() != std::this_thread::get_id()) {
        impl_->io_thread.join();
    }
    {
        std::lock_guard lock(impl_->mutex);
        impl_->running = false;
    }
    impl_->stopped_cv.notify_all();
}

} // namespace nmls::server
