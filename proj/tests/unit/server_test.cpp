#include "nmls/errors.hpp"
#include "nmls/mls.hpp"
#include "nmls/server/protocol.hpp"
#include "nmls/server/server.hpp"
#include "nmls/server/session.hpp"
#include "nmls/version.hpp"

#include "shapes.hpp"

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <gtest/gtest.h>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

using namespace nmls;
using namespace nmls::server;

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

extern char** environ;

namespace {

struct HttpReply {
    unsigned status;
    std::string body;
    std::string content_type;
};

HttpReply request(unsigned short port, http::verb verb, const std::string& target, const std::string& body = {})
{
    net::io_context ioc;
    tcp::resolver resolver(ioc);
    beast::tcp_stream stream(ioc);
    stream.connect(resolver.resolve("127.0.0.1", std::to_string(port)));
    http::request<http::string_body> req{verb, target, 11};
    req.set(http::field::host, "127.0.0.1");
    if (!body.empty()) {
        req.set(http::field::content_type, "application/json");
        req.body() = body;
        req.prepare_payload();
    }
    http::write(stream, req);
    beast::flat_buffer buffer;
    http::response<http::string_body> res;
    http::read(stream, buffer, res);
    beast::error_code ec;
    stream.socket().shutdown(tcp::socket::shutdown_both, ec);
    return {res.result_int(), res.body(), std::string(res[http::field::content_type])};
}

class WsClient {
public:
    WsClient(unsigned short port, const std::string& path) : ws_(ioc_)
    {
        tcp::resolver resolver(ioc_);
        net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
        ws_.read_message_max(64 * 1024 * 1024);
        ws_.handshake("127.0.0.1", path);
    }

    void send(const std::string& text)
    {
        ws_.text(true);
        ws_.write(net::buffer(text));
    }

    struct Message {
        bool binary;
        std::string data;
    };

    Message receive()
    {
        beast::flat_buffer buffer;
        ws_.read(buffer);
        return {ws_.got_binary(), beast::buffers_to_string(buffer.data())};
    }

    void close() { ws_.close(websocket::close_code::normal); }

private:
    net::io_context ioc_;
    websocket::stream<tcp::socket> ws_;
};

std::string targets_json(const std::vector<Point3>& targets)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : targets) arr.push_back({t.x(), t.y(), t.z()});
    return arr.dump();
}

std::string deform_message(const std::vector<Point3>& targets, const std::string& extra = "")
{
    return R"({"type":"deform","targets":)" + targets_json(targets) + extra + "}";
}

Shape scaled_sphere(int level)
{
    auto s = test::icosphere(level);
    for (auto& v : s.vertices) v = v * 2.0 + Point3(1, 2, 3);
    return s;
}

std::vector<Point3> sphere_cps()
{
    return {{3, 2, 3}, {-1, 2, 3}, {1, 4, 3}, {1, 2, 5}};
}

std::shared_ptr<const MlpParams> small_model(const ControlPointConfig& cps, const Shape& shape)
{
    TrainConfig cfg;
    cfg.hidden_width = 32;
    auto normalized = normalize_shape(shape, cps);
    return std::make_shared<const MlpParams>(train(normalized.control_points, cfg).params);
}

class ServerTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        ServerOptions opts;
        opts.port = 0;
        opts.compute_threads = 2;
        opts.deform_threads = 1;
        server_ = std::make_unique<Server>(opts);
        port_ = server_->start();
        shape_ = scaled_sphere(2);
        cps_ = sphere_cps();
        model_ = small_model(ControlPointConfig(cps_), shape_);
        session_ = server_->sessions().create(shape_, ControlPointConfig(cps_), model_, 1);
    }

    void TearDown() override { server_->stop(); }

    std::unique_ptr<Server> server_;
    unsigned short port_ = 0;
    Shape shape_;
    std::vector<Point3> cps_;
    std::shared_ptr<const MlpParams> model_;
    std::shared_ptr<Session> session_;
};

} // namespace

// --- protocol ---------------------------------------------------------------

TEST(Protocol, PositionFrameLayout)
{
    const std::vector<Point3> pts{{1.0, -2.0, 0.5}, {3.25, 0, 1e-3}};
    const auto frame = encode_positions(pts);
    ASSERT_EQ(frame.size(), 4u + 2 * 3 * 4);
    EXPECT_EQ(static_cast<unsigned char>(frame[0]), 2);
    EXPECT_EQ(frame[1], 0);
    float x;
    std::memcpy(&x, frame.data() + 4, 4);
    EXPECT_EQ(x, 1.0f);
    // 1.0f little-endian is 00 00 80 3f.
    EXPECT_EQ(static_cast<unsigned char>(frame[7]), 0x3f);
    const auto back = decode_positions(frame);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_LT((back[i] - pts[i]).norm(), 1e-6);
    EXPECT_THROW(decode_positions(frame.substr(0, 10)), ParseError);
    EXPECT_THROW(decode_positions("ab"), ParseError);
}

TEST(Protocol, ParseDeform)
{
    const auto msg = parse_client_message(
        R"({"type":"deform","targets":[[1,2,3]],"method":"euclidean","mode":"affine","temperature":0.5,"alpha":2,"epsilon":0.1})");
    const auto& d = std::get<DeformRequest>(msg);
    ASSERT_EQ(d.targets.size(), 1u);
    EXPECT_EQ(d.targets[0], Point3(1, 2, 3));
    EXPECT_EQ(d.settings.method, WeightMethod::euclidean);
    EXPECT_EQ(d.settings.mode, DeformMode::affine);
    EXPECT_EQ(d.settings.temperature, 0.5);
    EXPECT_EQ(d.settings.alpha, 2.0);
    EXPECT_EQ(d.settings.epsilon, 0.1);
}

TEST(Protocol, ParseWeights)
{
    const auto msg = parse_client_message(R"({"type":"weights","at":"grid","grid":{"min":[0,0,0],"max":[1,1,1],"counts":[2,2,2]}})");
    const auto& w = std::get<WeightsRequest>(msg);
    EXPECT_EQ(w.at, WeightSite::grid);
    EXPECT_EQ(w.grid.sample_count(), 8u);
    EXPECT_EQ(std::get<WeightsRequest>(parse_client_message(R"({"type":"weights"})")).at, WeightSite::vertices);
}

TEST(Protocol, MalformedMessages)
{
    EXPECT_THROW(parse_client_message("not json"), ParseError);
    EXPECT_THROW(parse_client_message(R"({"type":"explode"})"), Error);
    EXPECT_THROW(parse_client_message(R"({"type":"deform"})"), Error);
    EXPECT_THROW(parse_client_message(R"({"type":"deform","targets":[[1,2]]})"), Error);
    EXPECT_THROW(parse_client_message(R"({"type":"deform","targets":[[1,2,3]],"mode":"shear"})"), Error);
    EXPECT_THROW(parse_client_message(R"({"type":"deform","targets":[[1,2,3]],"temperature":0})"), Error);
    EXPECT_THROW(parse_client_message(R"({"type":"weights","at":"grid","grid":{"counts":[0,1,1]}})"), Error);
}

TEST(Protocol, JsonReplies)
{
    EXPECT_EQ(nlohmann::json::parse(health_json()), (nlohmann::json{{"status", "ok"}, {"version", kVersion}}));
    const auto err = nlohmann::json::parse(error_to_json("bad \"thing\""));
    EXPECT_EQ(err["type"], "error");
    EXPECT_EQ(err["message"], "bad \"thing\"");
    WeightsResponse w{WeightSite::control_points, {{Eigen::Vector2d(1, 0)}, {Eigen::Vector2d(0, 1)}}};
    const auto doc = nlohmann::json::parse(weights_to_json(w));
    EXPECT_EQ(doc["type"], "weights");
    EXPECT_EQ(doc["at"], "control_points");
    EXPECT_EQ(doc["count"], 2);
    EXPECT_EQ(doc["weights"][1][1], 1.0);
}

// --- session ----------------------------------------------------------------

TEST(Session, FreshSessionIsIdentity)
{
    const auto shape = scaled_sphere(2);
    const ControlPointConfig cps(sphere_cps());
    Session s("a", shape, cps, small_model(cps, shape), 1);
    EXPECT_EQ(s.last_displacements().targets().size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.last_displacements()[i], cps[i]);
    const auto r = s.deform({std::vector<Point3>(cps.points().begin(), cps.points().end()), {}});
    for (std::size_t i = 0; i < shape.vertex_count(); ++i) {
        EXPECT_LT((r.vertices[i] - shape.vertices[i]).norm(), 1e-6);
    }
}

TEST(Session, ModelMismatchRejected)
{
    const auto shape = scaled_sphere(1);
    auto five = sphere_cps();
    five.push_back({1, 0, 3});
    EXPECT_THROW(Session("x", shape, ControlPointConfig(five), small_model(ControlPointConfig(sphere_cps()), shape)),
                 ValidationError);
}

TEST(Session, MatchesOfflinePipelineExactly)
{
    const auto shape = scaled_sphere(3);
    const ControlPointConfig cps(sphere_cps());
    const auto model = small_model(cps, shape);
    Session s("a", shape, cps, model, 2);
    auto q = sphere_cps();
    q[0] += Point3(0.5, 0.25, 0);
    q[2] += Point3(0, 0.3, -0.4);

    const auto n = normalize_shape(shape, cps);
    const DisplacementSet disp(n.control_points, apply_normalization(q, n.transform));
    for (double t : {0.01, 1.0, 10.0}) {
        const NeuralField field({model, t});
        auto expected = deform_shape(n.shape, n.control_points, disp, field);
        const auto want = denormalize_points(expected.vertices, n.transform);
        SettingsOverride o;
        o.temperature = t;
        const auto got = s.deform({q, o}).vertices;
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(got[i], want[i]);
    }
}

TEST(Session, TemperatureChangesOutputWithoutTouchingModel)
{
    const auto shape = scaled_sphere(2);
    const ControlPointConfig cps(sphere_cps());
    const auto model = small_model(cps, shape);
    const auto snapshot = save_model(*model);
    Session s("a", shape, cps, model, 1);
    auto q = sphere_cps();
    q[1] += Point3(-0.5, 0.5, 0.5);
    SettingsOverride sharp, smooth;
    sharp.temperature = 0.01;
    smooth.temperature = 10.0;
    const auto a = s.deform({q, sharp}).vertices;
    const auto b = s.deform({q, smooth}).vertices;
    EXPECT_NE(a, b);
    EXPECT_EQ(s.settings().temperature, 10.0);
    EXPECT_EQ(save_model(*s.model()), snapshot);
    EXPECT_EQ(s.deform({q, smooth}).vertices, b);
}

TEST(Session, FailedRequestLeavesStateUnchanged)
{
    const auto shape = scaled_sphere(1);
    const ControlPointConfig cps(sphere_cps());
    Session s("a", shape, cps, nullptr, 1);
    EXPECT_EQ(s.settings().method, WeightMethod::euclidean);
    SettingsOverride neural;
    neural.method = WeightMethod::neural;
    EXPECT_THROW(s.deform({sphere_cps(), neural}), ValidationError);
    EXPECT_THROW(s.deform({{{0, 0, 0}}, {}}), ValidationError);
    SettingsOverride bad;
    bad.temperature = -1.0;
    EXPECT_THROW(s.deform({sphere_cps(), bad}), ValidationError);
    EXPECT_EQ(s.settings().method, WeightMethod::euclidean);
    EXPECT_EQ(s.settings().temperature, 1.0);
}

TEST(Session, WeightsEndpointProperties)
{
    const auto shape = scaled_sphere(2);
    const ControlPointConfig cps(sphere_cps());
    Session s("a", shape, cps, small_model(cps, shape), 1);
    const auto at_cps = s.weights({WeightSite::control_points, {}, {}});
    ASSERT_EQ(at_cps.weights.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        Eigen::Index top;
        at_cps.weights[i].values.maxCoeff(&top);
        EXPECT_EQ(static_cast<std::size_t>(top), i);
    }
    const auto at_vertices = s.weights({WeightSite::vertices, {}, {}});
    ASSERT_EQ(at_vertices.weights.size(), shape.vertex_count());
    for (const auto& w : at_vertices.weights) EXPECT_NEAR(w.sum(), 1.0, 1e-9);

    SettingsOverride euclid;
    euclid.method = WeightMethod::euclidean;
    euclid.epsilon = 0.0;
    const auto hot = s.weights({WeightSite::control_points, {}, euclid});
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(hot.weights[i][j], i == j ? 1.0 : 0.0);
    }

    GridSpec g;
    g.min = Point3(-1, 0, 1);
    g.max = Point3(3, 4, 5);
    g.counts = {3, 3, 3};
    EXPECT_EQ(s.weights({WeightSite::grid, g, {}}).weights.size(), 27u);
}

TEST(SessionRegistry, IndependentSessions)
{
    SessionRegistry reg;
    const auto shape = scaled_sphere(1);
    const ControlPointConfig cps(sphere_cps());
    const auto a = reg.create(shape, cps, nullptr, 1);
    const auto b = reg.create(shape, cps, nullptr, 1);
    EXPECT_NE(a->id(), b->id());
    EXPECT_EQ(reg.size(), 2u);
    EXPECT_EQ(reg.find(a->id()), a);
    EXPECT_EQ(reg.find("nope"), nullptr);
    auto q = sphere_cps();
    q[0] += Point3(1, 0, 0);
    a->deform({q, {}});
    EXPECT_EQ(a->last_displacements()[0], q[0]);
    EXPECT_EQ(b->last_displacements()[0], cps[0]);
}

// --- HTTP / WebSocket -------------------------------------------------------

TEST_F(ServerTest, Health)
{
    const auto r = request(port_, http::verb::get, "/health");
    EXPECT_EQ(r.status, 200u);
    EXPECT_EQ(r.content_type, "application/json");
    EXPECT_EQ(nlohmann::json::parse(r.body)["version"], kVersion);
}

TEST_F(ServerTest, UnknownRoutes)
{
    EXPECT_EQ(request(port_, http::verb::get, "/nothing").status, 404u);
    EXPECT_EQ(request(port_, http::verb::get, "/session/zzz/shape").status, 404u);
}

TEST_F(ServerTest, ShapeAndFaces)
{
    const auto shape = request(port_, http::verb::get, "/session/" + session_->id() + "/shape");
    ASSERT_EQ(shape.status, 200u);
    const auto verts = decode_positions(shape.body);
    ASSERT_EQ(verts.size(), shape_.vertex_count());
    for (std::size_t i = 0; i < verts.size(); ++i) EXPECT_LT((verts[i] - shape_.vertices[i]).norm(), 1e-5);

    const auto faces = request(port_, http::verb::get, "/session/" + session_->id() + "/faces");
    ASSERT_EQ(faces.status, 200u);
    const auto doc = nlohmann::json::parse(faces.body);
    EXPECT_EQ(doc["faces"].size(), shape_.faces.size());
    EXPECT_EQ(doc["control_points"].size(), 4u);
    EXPECT_EQ(doc["vertex_count"], shape_.vertex_count());
}

TEST_F(ServerTest, CreateSessionInlineAndFromFiles)
{
    nlohmann::json body;
    body["shape"]["vertices"] = nlohmann::json::array();
    for (const auto& v : shape_.vertices) body["shape"]["vertices"].push_back({v.x(), v.y(), v.z()});
    body["shape"]["faces"] = shape_.faces;
    body["control_points"] = nlohmann::json::parse(targets_json(cps_));
    body["train"] = {{"hidden", 16}, {"iters", 300}};
    const auto r = request(port_, http::verb::post, "/session", body.dump());
    ASSERT_EQ(r.status, 200u) << r.body;
    const auto doc = nlohmann::json::parse(r.body);
    EXPECT_TRUE(doc["trained"].get<bool>());
    EXPECT_EQ(doc["vertex_count"], shape_.vertex_count());
    EXPECT_NE(doc["session_id"], session_->id());
    EXPECT_NE(server_->sessions().find(doc["session_id"]), nullptr);

    test::TempDir dir;
    write_file(dir.path("s.obj"), save_shape(shape_, ShapeFormat::obj));
    write_file(dir.path("c.json"), save_control_points(cps_));
    write_file(dir.path("m.json"), save_model(*model_));
    const nlohmann::json files{{"shape_path", dir.path("s.obj")},
                               {"control_points_path", dir.path("c.json")},
                               {"model_path", dir.path("m.json")}};
    const auto f = request(port_, http::verb::post, "/session", files.dump());
    ASSERT_EQ(f.status, 200u) << f.body;
    EXPECT_FALSE(nlohmann::json::parse(f.body)["trained"].get<bool>());
}

TEST_F(ServerTest, CreateSessionErrors)
{
    EXPECT_EQ(request(port_, http::verb::post, "/session", "{").status, 400u);
    EXPECT_EQ(request(port_, http::verb::post, "/session", R"({"control_points":[[0,0,0]]})").status, 400u);
    test::TempDir dir;
    write_file(dir.path("s.obj"), save_shape(shape_, ShapeFormat::obj));
    write_file(dir.path("c.json"), save_control_points(std::vector<Point3>{{0, 0, 0}, {1, 0, 0}}));
    write_file(dir.path("m.json"), save_model(*model_));
    const nlohmann::json mismatch{{"shape_path", dir.path("s.obj")},
                                  {"control_points_path", dir.path("c.json")},
                                  {"model_path", dir.path("m.json")}};
    const auto r = request(port_, http::verb::post, "/session", mismatch.dump());
    EXPECT_EQ(r.status, 400u);
    EXPECT_EQ(nlohmann::json::parse(r.body)["type"], "error");
}

TEST_F(ServerTest, WebSocketDeformIdentityAndRepeat)
{
    WsClient ws(port_, "/ws/" + session_->id());
    ws.send(deform_message(cps_));
    const auto first = ws.receive();
    ASSERT_TRUE(first.binary);
    const auto verts = decode_positions(first.data);
    ASSERT_EQ(verts.size(), shape_.vertex_count());
    for (std::size_t i = 0; i < verts.size(); ++i) EXPECT_LT((verts[i] - shape_.vertices[i]).norm(), 1e-5);

    auto q = cps_;
    q[2] += Point3(0.3, 0.6, 0);
    ws.send(deform_message(q));
    const auto a = ws.receive();
    ws.send(deform_message(q));
    const auto b = ws.receive();
    EXPECT_EQ(a.data, b.data);
    ws.send(deform_message(q, R"(,"temperature":0.01)"));
    EXPECT_NE(ws.receive().data, a.data);
    ws.close();
}

TEST_F(ServerTest, WebSocketMatchesSessionComputation)
{
    auto q = cps_;
    q[0] += Point3(0.4, 0.2, -0.1);
    SettingsOverride euclid;
    euclid.method = WeightMethod::euclidean;
    euclid.mode = DeformMode::affine;
    euclid.epsilon = 0.05;
    Session reference("ref", shape_, ControlPointConfig(cps_), model_, 1);
    const auto want = reference.deform({q, euclid}).vertices;

    WsClient ws(port_, "/ws/" + session_->id());
    ws.send(deform_message(q, R"(,"method":"euclidean","mode":"affine","epsilon":0.05)"));
    const auto got = decode_positions(ws.receive().data);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].cast<float>(), want[i].cast<float>());
    }
}

TEST_F(ServerTest, WebSocketWeightsAndErrors)
{
    WsClient ws(port_, "/ws/" + session_->id());
    ws.send(R"({"type":"weights","at":"vertices"})");
    auto m = ws.receive();
    ASSERT_FALSE(m.binary);
    auto doc = nlohmann::json::parse(m.data);
    EXPECT_EQ(doc["type"], "weights");
    EXPECT_EQ(doc["count"], shape_.vertex_count());

    ws.send("{garbage");
    m = ws.receive();
    doc = nlohmann::json::parse(m.data);
    EXPECT_EQ(doc["type"], "error");

    ws.send(deform_message({{0, 0, 0}}));
    doc = nlohmann::json::parse(ws.receive().data);
    EXPECT_EQ(doc["type"], "error");
    EXPECT_NE(doc["message"].get<std::string>().find("4"), std::string::npos);

    // Session still live after errors.
    ws.send(deform_message(cps_));
    EXPECT_TRUE(ws.receive().binary);
}

TEST_F(ServerTest, WebSocketUnknownSession)
{
    EXPECT_THROW(WsClient(port_, "/ws/doesnotexist"), boost::system::system_error);
}

TEST_F(ServerTest, DragStreamIsOrderedAndCoalesced)
{
    // Single control point: every request is a pure translation, so each
    // response identifies the request it answers.
    Shape big = test::icosphere(5);
    const std::vector<Point3> one{{0, 0, 0}};
    const auto s = server_->sessions().create(big, ControlPointConfig(one), nullptr, 1);
    WsClient ws(port_, "/ws/" + s->id());
    constexpr int kRequests = 40;
    for (int k = 0; k < kRequests; ++k) ws.send(deform_message({Point3(0.01 * (k + 1), 0, 0)}));

    int responses = 0;
    int last_index = -1;
    for (;;) {
        const auto m = ws.receive();
        ASSERT_TRUE(m.binary);
        const auto v = decode_positions(m.data);
        ASSERT_EQ(v.size(), big.vertex_count());
        const double shift = v[0].x() - big.vertices[0].cast<float>().cast<double>().x();
        const int index = static_cast<int>(std::lround(shift / 0.01)) - 1;
        ASSERT_GE(index, 0);
        ASSERT_LT(index, kRequests);
        for (std::size_t i = 0; i < v.size(); i += 997) {
            EXPECT_LT((v[i] - big.vertices[i] - Point3(0.01 * (index + 1), 0, 0)).norm(), 1e-5);
        }
        EXPECT_GT(index, last_index);
        last_index = index;
        ++responses;
        if (index == kRequests - 1) break;
    }
    EXPECT_LE(responses, kRequests);
}

TEST_F(ServerTest, PortInUse)
{
    ServerOptions opts;
    opts.port = port_;
    Server second(opts);
    EXPECT_THROW(second.start(), Error);
}

TEST(ServeCommand, HealthOverRealProcess)
{
    test::TempDir dir;
    write_file(dir.path("s.obj"), save_shape(scaled_sphere(2), ShapeFormat::obj));
    write_file(dir.path("c.json"), save_control_points(sphere_cps()));

    int pipefd[2];
    ASSERT_EQ(pipe(pipefd), 0);
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, pipefd[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, pipefd[0]);
    const std::string bin = NMLS_BINARY;
    const std::string shape = dir.path("s.obj"), cps = dir.path("c.json");
    std::vector<const char*> argv{bin.c_str(), "serve", "--shape", shape.c_str(), "--control-points",
                                  cps.c_str(), "--port", "0", "--hidden", "16", nullptr};
    pid_t pid;
    ASSERT_EQ(posix_spawn(&pid, bin.c_str(), &actions, nullptr, const_cast<char* const*>(argv.data()), environ), 0);
    posix_spawn_file_actions_destroy(&actions);
    close(pipefd[1]);

    FILE* out = fdopen(pipefd[0], "r");
    char line[512] = {};
    ASSERT_NE(fgets(line, sizeof line, out), nullptr);
    const auto ready = nlohmann::json::parse(line);
    EXPECT_EQ(ready["status"], "ready");
    const auto port = static_cast<unsigned short>(ready["port"].get<int>());
    const auto health = request(port, http::verb::get, "/health");
    EXPECT_EQ(health.status, 200u);
    EXPECT_EQ(nlohmann::json::parse(health.body)["status"], "ok");
    const auto shape_reply = request(port, http::verb::get, "/session/" + ready["session_id"].get<std::string>() + "/shape");
    EXPECT_EQ(shape_reply.status, 200u);

    kill(pid, SIGTERM);
    int status = 0;
    waitpid(pid, &status, 0);
    fclose(out);
    EXPECT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 0);
}

TEST(ServeCommand, OccupiedPortFails)
{
    net::io_context ioc;
    tcp::acceptor blocker(ioc, tcp::endpoint(net::ip::make_address("127.0.0.1"), 0));
    const auto port = blocker.local_endpoint().port();
    test::TempDir dir;
    write_file(dir.path("s.obj"), save_shape(scaled_sphere(1), ShapeFormat::obj));
    write_file(dir.path("c.json"), save_control_points(sphere_cps()));
    const std::string cmd = std::string(NMLS_BINARY) + " serve --shape " + dir.path("s.obj") +
                            " --control-points " + dir.path("c.json") + " --hidden 8 --iters 5 --port " +
                            std::to_string(port) + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    ASSERT_NE(p, nullptr);
    std::string output;
    char buf[256];
    while (fgets(buf, sizeof buf, p)) output += buf;
    const int status = pclose(p);
    EXPECT_EQ(WEXITSTATUS(status), 4) << output;
    EXPECT_NE(output.find("cannot listen"), std::string::npos) << output;
}
