#include "nmls/cli.hpp"

#include "nmls/errors.hpp"
#include "nmls/geometry.hpp"
#include "nmls/metrics.hpp"
#include "nmls/mls.hpp"
#include "nmls/neural.hpp"
#include "nmls/rng.hpp"
#include "nmls/server/server.hpp"
#include "nmls/version.hpp"
#include "nmls/weighting.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>
#include <thread>

namespace nmls::cli {

namespace {

std::atomic<bool> g_stop_requested{false};

extern "C" void handle_stop_signal(int)
{
    g_stop_requested = true;
}

struct Options {
    std::string shape;
    std::string control_points;
    std::string displacements;
    std::string model;
    std::string out;
    std::string report;

    // train
    int hidden = 1024;
    double lr = 1e-3;
    int iters = 2000;
    std::uint64_t seed = 42;
    double tolerance = 1e-3;

    // deform / sample
    std::string method = "neural";
    std::string mode = "rigid";
    double temperature = 1.0;
    double alpha = 1.0;
    double epsilon = 0.0;
    unsigned threads = 0;
    std::string out_control_points;

    // eval
    std::string source;
    std::string deformed;
    std::string deformed_control_points;
    int k = 6;
    std::string csv;

    // sample
    std::string at = "grid";
    std::vector<double> grid_min;
    std::vector<double> grid_max;
    std::vector<int> counts{16, 16, 16};

    // gradcheck
    std::uint64_t gradcheck_seed = 7;
    std::vector<int> sizes{3, 8, 8, 4};
    bool corrupt = false;

    // serve
    std::string address = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    bool exit_after_ready = false;
};

struct LoadedInputs {
    Shape shape;
    ShapeFormat format = ShapeFormat::obj;
    ControlPointConfig source_cps;
    NormalizedInputs normalized;
};

LoadedInputs load_inputs(const Options& opt)
{
    const auto format = shape_format_from_path(opt.shape);
    Shape shape = load_shape(read_file(opt.shape), format);
    shape.name = std::filesystem::path(opt.shape).stem().string();
    auto cps = load_control_points(read_file(opt.control_points));
    auto normalized = normalize_shape(shape, cps);
    return {std::move(shape), format, std::move(cps), std::move(normalized)};
}

void emit(const std::string& text, const std::string& path, std::ostream& out)
{
    if (path.empty()) {
        out << text << '\n';
    } else {
        write_file(path, text + "\n");
    }
}

std::unique_ptr<WeightField> make_field(const Options& opt, const ControlPointConfig& normalized_cps)
{
    if (opt.method == "neural") {
        if (opt.model.empty()) throw ValidationError("--model is required for --method neural");
        auto model = std::make_shared<const MlpParams>(load_model(read_file(opt.model)));
        if (static_cast<std::size_t>(model->output_size()) != normalized_cps.size()) {
            throw ValidationError("model was trained for " + std::to_string(model->output_size()) +
                                  " control points but " + std::to_string(normalized_cps.size()) +
                                  " were given");
        }
        return std::make_unique<NeuralField>(NeuralWeightParams{std::move(model), opt.temperature});
    }
    return std::make_unique<EuclideanField>(normalized_cps,
                                            EuclideanWeightParams{opt.alpha, opt.epsilon});
}

int cmd_train(const Options& opt, std::ostream& out, std::ostream& err)
{
    const auto inputs = load_inputs(opt);
    TrainConfig cfg;
    cfg.hidden_width = opt.hidden;
    cfg.learning_rate = opt.lr;
    cfg.max_iters = opt.iters;
    cfg.seed = opt.seed;
    cfg.loss_tolerance = opt.tolerance;

    const auto result = train(inputs.normalized.control_points, cfg, [&](int iter, double loss) {
        if (iter % 100 == 0) err << "train: iteration " << iter << " loss " << loss << '\n';
    });
    write_file(opt.out, save_model(result.params));
    emit(train_report_to_json(result.report), opt.report, out);

    if (result.report.final_accuracy < 1.0) {
        err << "warning: training accuracy " << result.report.final_accuracy
            << " < 1; some control points are not their own argmax\n";
        return kWarning;
    }
    return kOk;
}

int cmd_deform(const Options& opt, std::ostream&, std::ostream&)
{
    const auto inputs = load_inputs(opt);
    const auto& cps = inputs.normalized.control_points;
    const auto& t = inputs.normalized.transform;
    const auto disp = load_displacements(read_file(opt.displacements), inputs.source_cps);
    const DisplacementSet normalized_disp(cps, apply_normalization(disp.targets(), t));
    const auto field = make_field(opt, cps);
    const DeformOptions deform_opts{parse_deform_mode(opt.mode), opt.threads};

    Shape result = deform_shape(inputs.normalized.shape, cps, normalized_disp, *field, deform_opts);
    result.vertices = denormalize_points(result.vertices, t);
    write_file(opt.out, save_shape(result, shape_format_from_path(opt.out)));

    if (!opt.out_control_points.empty()) {
        const auto moved = deform_points(cps.points(), cps, normalized_disp, *field, deform_opts);
        write_file(opt.out_control_points, save_control_points(denormalize_points(moved, t)) + "\n");
    }
    return kOk;
}

/// Deformed control-point positions estimated by carrying each control point
/// along with its nearest source vertex.
std::vector<Point3> transfer_control_points(const Shape& source, const Shape& deformed,
                                            const ControlPointConfig& cps)
{
    std::vector<Point3> moved;
    for (const auto& p : cps.points()) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < source.vertices.size(); ++i) {
            const double d = (source.vertices[i] - p).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        moved.push_back(p + (deformed.vertices[best] - source.vertices[best]));
    }
    return moved;
}

int cmd_eval(const Options& opt, std::ostream& out, std::ostream&)
{
    Shape source = load_shape(read_file(opt.source), shape_format_from_path(opt.source));
    Shape deformed = load_shape(read_file(opt.deformed), shape_format_from_path(opt.deformed));
    if (source.vertex_count() != deformed.vertex_count()) {
        throw ValidationError("source has " + std::to_string(source.vertex_count()) +
                              " vertices but deformed has " +
                              std::to_string(deformed.vertex_count()));
    }
    const auto cps = load_control_points(read_file(opt.control_points));
    const auto disp = load_displacements(read_file(opt.displacements), cps);

    std::vector<Point3> moved;
    if (!opt.deformed_control_points.empty()) {
        const auto loaded = load_control_points(read_file(opt.deformed_control_points));
        moved.assign(loaded.points().begin(), loaded.points().end());
    } else {
        moved = transfer_control_points(source, deformed, cps);
    }

    const auto adj = build_adjacency(source, opt.k);
    MetricReport report;
    report.mean_laplacian_magnitude_distortion = laplacian_magnitude_distortion(source, deformed, adj);
    report.mean_curvature_distortion = mean_curvature_distortion(source, deformed, adj);
    report.mean_control_point_l2 = control_point_l2(moved, disp.targets());
    emit(metric_report_to_json(report), opt.out, out);

    if (!opt.csv.empty()) {
        const bool fresh = !std::filesystem::exists(opt.csv);
        std::ofstream csv(opt.csv, std::ios::app);
        if (!csv) throw Error("cannot open '" + opt.csv + "' for appending");
        csv.precision(17);
        if (fresh) csv << "source,deformed,lap_mag_distortion,mean_curvature_distortion,cp_l2\n";
        csv << opt.source << ',' << opt.deformed << ',' << report.mean_laplacian_magnitude_distortion
            << ',' << report.mean_curvature_distortion << ',' << report.mean_control_point_l2 << '\n';
    }
    return kOk;
}

int cmd_sample(const Options& opt, std::ostream& out, std::ostream&)
{
    const auto inputs = load_inputs(opt);
    const auto& t = inputs.normalized.transform;
    const auto field = make_field(opt, inputs.normalized.control_points);

    if (opt.at == "vertices") {
        const auto samples = field->at_many(inputs.normalized.shape.vertices);
        nlohmann::json weights = nlohmann::json::array();
        for (const auto& w : samples) {
            weights.push_back(std::vector<double>(w.values.data(), w.values.data() + w.values.size()));
        }
        emit(nlohmann::json{{"at", "vertices"}, {"weights", std::move(weights)}}.dump(), opt.out, out);
        return kOk;
    }
    if (opt.at != "grid") throw ValidationError("--at must be 'grid' or 'vertices'");

    // Grid bounds are given in the source frame and default to the shape's box.
    GridSpec grid;
    grid.min = t.invert(Point3::Constant(-1.0));
    grid.max = t.invert(Point3::Constant(1.0));
    if (!opt.grid_min.empty()) grid.min = Point3(opt.grid_min[0], opt.grid_min[1], opt.grid_min[2]);
    if (!opt.grid_max.empty()) grid.max = Point3(opt.grid_max[0], opt.grid_max[1], opt.grid_max[2]);
    grid.counts = {opt.counts[0], opt.counts[1], opt.counts[2]};
    grid.validate();

    const auto samples = field->at_many(apply_normalization(grid.points(), t));
    emit(weight_samples_to_json(grid, samples), opt.out, out);
    return kOk;
}

int cmd_gradcheck(const Options& opt, std::ostream& out, std::ostream&)
{
    if (opt.sizes.size() != 4) throw ValidationError("--sizes must list 4 layer sizes");
    MlpParams params = init_mlp(opt.gradcheck_seed, opt.sizes);
    Xoshiro256 rng(opt.gradcheck_seed ^ 0x5bd1e995ULL);
    for (int l = 0; l < MlpParams::kLayers; ++l) {
        auto b = params.bias(l);
        for (Eigen::Index j = 0; j < b.size(); ++j) b(j) = rng.uniform(-0.1, 0.1);
    }
    const auto cps = random_control_points(opt.gradcheck_seed, static_cast<std::size_t>(opt.sizes[3]), 0.05);
    const auto result = check_gradients(params, cps, 1e-6, 1e-4, opt.corrupt);
    const bool pass = result.max_relative_error < 1e-5;
    out << nlohmann::json{{"max_relative_error", result.max_relative_error},
                          {"parameters_checked", result.parameters_checked},
                          {"pass", pass}}
               .dump()
        << '\n';
    return pass ? kOk : kRuntime;
}

int cmd_serve(const Options& opt, std::ostream& out, std::ostream& err)
{
    auto logger = spdlog::get("nmls");
    if (!logger) logger = spdlog::stderr_color_mt("nmls");
    spdlog::set_default_logger(logger);

    if (opt.port < 0 || opt.port > 65535) throw ValidationError("--port must be in [0, 65535]");
    const auto inputs = load_inputs(opt);

    std::shared_ptr<const MlpParams> model;
    if (!opt.model.empty()) {
        model = std::make_shared<const MlpParams>(load_model(read_file(opt.model)));
    } else {
        TrainConfig cfg;
        cfg.hidden_width = opt.hidden;
        cfg.learning_rate = opt.lr;
        cfg.max_iters = opt.iters;
        cfg.seed = opt.seed;
        cfg.loss_tolerance = opt.tolerance;
        err << "serve: training weighting network for " << inputs.source_cps.size()
            << " control points\n";
        auto result = train(inputs.normalized.control_points, cfg, [&](int iter, double loss) {
            if (iter % 100 == 0) err << "train: iteration " << iter << " loss " << loss << '\n';
        });
        err << "train: finished after " << result.report.iterations_run << " iterations, accuracy "
            << result.report.final_accuracy << '\n';
        model = std::make_shared<const MlpParams>(std::move(result.params));
    }

    server::ServerOptions sopts;
    sopts.address = opt.address;
    sopts.port = static_cast<unsigned short>(opt.port);
    sopts.deform_threads = opt.threads;
    sopts.static_dir = opt.static_dir;
    sopts.train.hidden_width = opt.hidden;
    sopts.train.seed = opt.seed;
    server::Server srv(sopts);
    const auto session = srv.sessions().create(inputs.shape, inputs.source_cps, model, opt.threads);
    const unsigned short port = srv.start();

    out << nlohmann::json{{"status", "ready"}, {"port", port}, {"session_id", session->id()}}.dump()
        << std::endl;
    if (opt.exit_after_ready) {
        srv.stop();
        return kOk;
    }

    g_stop_requested = false;
    std::signal(SIGINT, handle_stop_signal);
    std::signal(SIGTERM, handle_stop_signal);
    while (!g_stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    srv.stop();
    return kOk;
}

template <typename Fn>
int guarded(Fn&& fn, std::ostream& err)
{
    try {
        return fn();
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DegenerateError& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    }
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Moving-least-squares shape deformation with learned control-point weights", "nmls"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    Options opt;

    auto positive = CLI::PositiveNumber;
    auto non_negative = CLI::NonNegativeNumber;

    auto add_inputs = [&](CLI::App* cmd) {
        cmd->add_option("--shape", opt.shape, "Input shape (.obj or .xyz)")->required()->check(CLI::ExistingFile);
        cmd->add_option("--control-points", opt.control_points, "Control points JSON")
            ->required()
            ->check(CLI::ExistingFile);
    };
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--hidden", opt.hidden, "Hidden layer width")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--lr", opt.lr, "Adam learning rate")->capture_default_str()->check(positive);
        cmd->add_option("--iters", opt.iters, "Maximum training iterations")->capture_default_str()->check(CLI::PositiveNumber);
        cmd->add_option("--seed", opt.seed, "Initialization seed")->capture_default_str();
        cmd->add_option("--tolerance", opt.tolerance, "Early-stop loss")->capture_default_str()->check(non_negative);
    };
    auto add_field_flags = [&](CLI::App* cmd) {
        cmd->add_option("--method", opt.method, "Weighting method")
            ->capture_default_str()
            ->check(CLI::IsMember({"neural", "euclidean"}));
        cmd->add_option("--model", opt.model, "Trained model JSON (method neural)")->check(CLI::ExistingFile);
        cmd->add_option("--temperature", opt.temperature, "Softmax temperature")->capture_default_str()->check(positive);
        cmd->add_option("--alpha", opt.alpha, "Euclidean fall-off exponent")->capture_default_str()->check(non_negative);
        cmd->add_option("--epsilon", opt.epsilon, "Euclidean denominator offset")->capture_default_str()->check(non_negative);
    };

    auto* train_cmd = app.add_subcommand("train", "Train the weighting network on control points");
    add_inputs(train_cmd);
    add_train_flags(train_cmd);
    train_cmd->add_option("--out", opt.out, "Model output path")->required();
    train_cmd->add_option("--report", opt.report, "Training report path (default: stdout)");

    auto* deform_cmd = app.add_subcommand("deform", "Deform a shape by displaced control points");
    add_inputs(deform_cmd);
    add_field_flags(deform_cmd);
    deform_cmd->add_option("--displacements", opt.displacements, "Target positions JSON")
        ->required()
        ->check(CLI::ExistingFile);
    deform_cmd->add_option("--mode", opt.mode, "MLS transform class")
        ->capture_default_str()
        ->check(CLI::IsMember({"rigid", "affine"}));
    deform_cmd->add_option("--out", opt.out, "Deformed shape path")->required();
    deform_cmd->add_option("--out-control-points", opt.out_control_points,
                           "Also write the deformed control points");
    deform_cmd->add_option("--threads", opt.threads, "Worker threads (0: all cores)");

    auto* eval_cmd = app.add_subcommand("eval", "Distortion and control-point metrics");
    eval_cmd->add_option("--source", opt.source, "Source shape")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--deformed", opt.deformed, "Deformed shape")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--control-points", opt.control_points, "Control points JSON")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--displacements", opt.displacements, "Target positions JSON")
        ->required()
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--deformed-control-points", opt.deformed_control_points,
                         "Deformed control points (default: nearest-vertex transfer)")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--k", opt.k, "Neighbors for point clouds")->capture_default_str()->check(CLI::PositiveNumber);
    eval_cmd->add_option("--out", opt.out, "Report path (default: stdout)");
    eval_cmd->add_option("--csv", opt.csv, "Append a CSV row to this file");

    auto* sample_cmd = app.add_subcommand("sample", "Sample a weight field for plotting");
    add_inputs(sample_cmd);
    add_field_flags(sample_cmd);
    sample_cmd->add_option("--at", opt.at, "Sample at 'grid' or 'vertices'")->capture_default_str();
    sample_cmd->add_option("--grid-min", opt.grid_min, "Grid minimum corner x y z")->expected(3);
    sample_cmd->add_option("--grid-max", opt.grid_max, "Grid maximum corner x y z")->expected(3);
    sample_cmd->add_option("--counts", opt.counts, "Samples per axis")->expected(3)->capture_default_str();
    sample_cmd->add_option("--out", opt.out, "Output JSON (default: stdout)");

    auto* grad_cmd = app.add_subcommand("gradcheck", "Check backprop against finite differences");
    grad_cmd->add_option("--seed", opt.gradcheck_seed, "Seed for parameters and inputs")->capture_default_str();
    grad_cmd->add_option("--sizes", opt.sizes, "Layer sizes 3 H H P")->expected(4)->delimiter(',')->capture_default_str();
    grad_cmd->add_flag("--corrupt", opt.corrupt, "Perturb the analytic gradient (harness self-test)");

    auto* serve_cmd = app.add_subcommand("serve", "Run the interactive deformation service");
    add_inputs(serve_cmd);
    add_train_flags(serve_cmd);
    serve_cmd->add_option("--model", opt.model, "Trained model JSON (trained at startup if absent)")
        ->check(CLI::ExistingFile);
    serve_cmd->add_option("--address", opt.address, "Listen address")->capture_default_str();
    serve_cmd->add_option("--port", opt.port, "Listen port (0: ephemeral)")->capture_default_str();
    serve_cmd->add_option("--static-dir", opt.static_dir, "Serve browser assets from here");
    serve_cmd->add_option("--threads", opt.threads, "Threads per deformation (0: all cores)");
    serve_cmd->add_flag("--exit-after-ready", opt.exit_after_ready, "Stop right after startup")
        ->group("");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    if (*train_cmd) return guarded([&] { return cmd_train(opt, out, err); }, err);
    if (*deform_cmd) return guarded([&] { return cmd_deform(opt, out, err); }, err);
    if (*eval_cmd) return guarded([&] { return cmd_eval(opt, out, err); }, err);
    if (*sample_cmd) return guarded([&] { return cmd_sample(opt, out, err); }, err);
    if (*grad_cmd) return guarded([&] { return cmd_gradcheck(opt, out, err); }, err);
    if (*serve_cmd) return guarded([&] { return cmd_serve(opt, out, err); }, err);
    return kUsage;
}

} // namespace nmls::cli
