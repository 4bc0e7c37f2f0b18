#include "nmls/neural.hpp"

#include "nmls/errors.hpp"
#include "nmls/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace nmls {

namespace {

using Eigen::Index;

constexpr Index kPointTile = 32;
constexpr Index kRowBlock = 128;

void check_layer_sizes(const std::vector<int>& sizes)
{
    if (sizes.size() != MlpParams::kLayers + 1) {
        throw ValidationError("layer_sizes must have the form [3, H, H, P]");
    }
    if (sizes[0] != 3) throw ValidationError("network input size must be 3");
    if (sizes[1] < 1 || sizes[2] < 1) throw ValidationError("hidden width must be >= 1");
    if (sizes[1] != sizes[2]) throw ValidationError("both hidden layers must have the same width");
    if (sizes[3] < 1) throw ValidationError("output size must be >= 1");
}

/// out = W * in + b (optionally followed by ReLU) for a tile of points.
///
/// Entry (j, t) is accumulated as b_j + sum over k in increasing order of
/// in(k, t) * W(j, k), skipping exact zeros of the input. The result for a
/// point therefore never depends on which other points share its tile.
void dense_tile(const Eigen::Map<const Eigen::MatrixXd>& W,
                const Eigen::Map<const Eigen::VectorXd>& b, const Eigen::MatrixXd& in,
                Eigen::MatrixXd& out, bool relu)
{
    const Index rows = W.rows();
    const Index cols = W.cols();
    const Index points = in.cols();
    out.resize(rows, points);
    for (Index t = 0; t < points; ++t) out.col(t) = b;

    for (Index j0 = 0; j0 < rows; j0 += kRowBlock) {
        const Index jb = std::min(kRowBlock, rows - j0);
        for (Index k = 0; k < cols; ++k) {
            const auto wk = W.col(k).segment(j0, jb);
            for (Index t = 0; t < points; ++t) {
                const double s = in(k, t);
                if (s != 0.0) out.col(t).segment(j0, jb) += s * wk;
            }
        }
    }
    if (relu) out = out.cwiseMax(0.0);
}

struct Activations {
    Eigen::MatrixXd input;   // 3 x N
    Eigen::MatrixXd hidden1; // H x N, post-ReLU
    Eigen::MatrixXd hidden2; // H x N, post-ReLU
    Eigen::MatrixXd logits;  // P x N
};

Activations forward_all(const MlpParams& params, std::span<const Point3> xs)
{
    Activations a;
    a.input.resize(3, static_cast<Index>(xs.size()));
    for (Index i = 0; i < a.input.cols(); ++i) a.input.col(i) = xs[static_cast<std::size_t>(i)];
    dense_tile(params.weight(0), params.bias(0), a.input, a.hidden1, true);
    dense_tile(params.weight(1), params.bias(1), a.hidden1, a.hidden2, true);
    dense_tile(params.weight(2), params.bias(2), a.hidden2, a.logits, false);
    return a;
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v)
{
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

double mean_cross_entropy(const Eigen::MatrixXd& logits)
{
    double total = 0.0;
    for (Index i = 0; i < logits.cols(); ++i) {
        total += log_sum_exp(logits.col(i)) - logits(i, i);
    }
    return total / static_cast<double>(logits.cols());
}

std::vector<Point3> as_vector(const ControlPointConfig& cps)
{
    return {cps.points().begin(), cps.points().end()};
}

void check_outputs(const MlpParams& params, const ControlPointConfig& cps)
{
    if (static_cast<std::size_t>(params.output_size()) != cps.size()) {
        throw ValidationError("network has " + std::to_string(params.output_size()) +
                              " outputs but there are " + std::to_string(cps.size()) +
                              " control points");
    }
}

[[noreturn]] void schema_error(const std::string& what)
{
    throw ValidationError("model schema: " + what);
}

} // namespace

MlpParams::MlpParams(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes))
{
    check_layer_sizes(sizes_);
    std::size_t offset = 0;
    for (int l = 0; l < kLayers; ++l) {
        weight_offset_.push_back(offset);
        offset += static_cast<std::size_t>(sizes_[l]) * static_cast<std::size_t>(sizes_[l + 1]);
        bias_offset_.push_back(offset);
        offset += static_cast<std::size_t>(sizes_[l + 1]);
    }
    data_.assign(offset, 0.0);
}

Eigen::Map<Eigen::MatrixXd> MlpParams::weight(int layer)
{
    return {data_.data() + weight_offset_.at(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<const Eigen::MatrixXd> MlpParams::weight(int layer) const
{
    return {data_.data() + weight_offset_.at(layer), sizes_[layer + 1], sizes_[layer]};
}

Eigen::Map<Eigen::VectorXd> MlpParams::bias(int layer)
{
    return {data_.data() + bias_offset_.at(layer), sizes_[layer + 1]};
}

Eigen::Map<const Eigen::VectorXd> MlpParams::bias(int layer) const
{
    return {data_.data() + bias_offset_.at(layer), sizes_[layer + 1]};
}

std::vector<int> mlp_layer_sizes(int hidden_width, int outputs)
{
    return {3, hidden_width, hidden_width, outputs};
}

MlpParams init_mlp(std::uint64_t seed, std::vector<int> layer_sizes)
{
    MlpParams params(std::move(layer_sizes));
    Xoshiro256 rng(seed);
    for (int l = 0; l < MlpParams::kLayers; ++l) {
        auto W = params.weight(l);
        const double limit = std::sqrt(6.0 / static_cast<double>(W.rows() + W.cols()));
        for (Index j = 0; j < W.rows(); ++j) {
            for (Index k = 0; k < W.cols(); ++k) W(j, k) = rng.uniform(-limit, limit);
        }
    }
    return params;
}

Eigen::VectorXd forward_logits(const MlpParams& params, const Point3& x)
{
    return forward_logits_batch(params, std::span<const Point3>(&x, 1)).col(0);
}

Eigen::MatrixXd forward_logits_batch(const MlpParams& params, std::span<const Point3> xs)
{
    const auto n = static_cast<Index>(xs.size());
    Eigen::MatrixXd logits(params.output_size(), n);
    Eigen::MatrixXd input(3, kPointTile);
    Eigen::MatrixXd h1;
    Eigen::MatrixXd h2;
    Eigen::MatrixXd out;
    for (Index t0 = 0; t0 < n; t0 += kPointTile) {
        const Index tb = std::min(kPointTile, n - t0);
        input.resize(3, tb);
        for (Index t = 0; t < tb; ++t) input.col(t) = xs[static_cast<std::size_t>(t0 + t)];
        dense_tile(params.weight(0), params.bias(0), input, h1, true);
        dense_tile(params.weight(1), params.bias(1), h1, h2, true);
        dense_tile(params.weight(2), params.bias(2), h2, out, false);
        logits.middleCols(t0, tb) = out;
    }
    return logits;
}

double cross_entropy_loss(const MlpParams& params, const ControlPointConfig& cps)
{
    check_outputs(params, cps);
    const auto pts = as_vector(cps);
    return mean_cross_entropy(forward_logits_batch(params, pts));
}

LossAndGradient backward(const MlpParams& params, const ControlPointConfig& cps)
{
    check_outputs(params, cps);
    const auto pts = as_vector(cps);
    const Activations a = forward_all(params, pts);
    const auto n = static_cast<double>(pts.size());

    LossAndGradient result{mean_cross_entropy(a.logits), MlpGradients(params.layer_sizes())};
    auto& g = result.gradient;

    // d loss / d logits = (softmax - onehot) / N
    Eigen::MatrixXd d_logits(a.logits.rows(), a.logits.cols());
    for (Index i = 0; i < a.logits.cols(); ++i) {
        const double lse = log_sum_exp(a.logits.col(i));
        d_logits.col(i) = (a.logits.col(i).array() - lse).exp().matrix();
        d_logits(i, i) -= 1.0;
    }
    d_logits /= n;

    g.weight(2).noalias() = d_logits * a.hidden2.transpose();
    g.bias(2) = d_logits.rowwise().sum();

    Eigen::MatrixXd d_hidden2 = params.weight(2).transpose() * d_logits;
    d_hidden2 = d_hidden2.cwiseProduct((a.hidden2.array() > 0.0).cast<double>().matrix());
    g.weight(1).noalias() = d_hidden2 * a.hidden1.transpose();
    g.bias(1) = d_hidden2.rowwise().sum();

    Eigen::MatrixXd d_hidden1 = params.weight(1).transpose() * d_hidden2;
    d_hidden1 = d_hidden1.cwiseProduct((a.hidden1.array() > 0.0).cast<double>().matrix());
    g.weight(0).noalias() = d_hidden1 * a.input.transpose();
    g.bias(0) = d_hidden1.rowwise().sum();

    return result;
}

double classification_accuracy(const MlpParams& params, const ControlPointConfig& cps)
{
    check_outputs(params, cps);
    const auto pts = as_vector(cps);
    const Eigen::MatrixXd logits = forward_logits_batch(params, pts);
    int correct = 0;
    for (Index i = 0; i < logits.cols(); ++i) {
        Index best = 0;
        logits.col(i).maxCoeff(&best);
        if (best == i) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

void TrainConfig::validate() const
{
    if (hidden_width < 1) throw ValidationError("hidden width must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ValidationError("learning rate must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("beta2 must be in [0, 1)");
    if (!(eps_adam >= 0.0)) throw ValidationError("eps_adam must be non-negative");
    if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
    if (!(loss_tolerance >= 0.0)) throw ValidationError("loss tolerance must be non-negative");
}

void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state,
               const TrainConfig& cfg)
{
    auto p = params.data();
    const auto g = grads.data();
    if (g.size() != p.size() || state.first_moment.size() != p.size() ||
        state.second_moment.size() != p.size()) {
        throw ValidationError("adam_step: parameter, gradient and state shapes differ");
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < p.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[i];
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i] * g[i];
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps_adam);
    }
}

TrainResult train(const ControlPointConfig& cps, const TrainConfig& cfg,
                  const TrainProgress& progress)
{
    cfg.validate();
    TrainResult result{init_mlp(cfg.seed, mlp_layer_sizes(cfg.hidden_width,
                                                          static_cast<int>(cps.size()))),
                       {}};
    auto& report = result.report;
    AdamState state(result.params.parameter_count());

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        auto step = backward(result.params, cps);
        if (!std::isfinite(step.loss)) {
            throw NumericError("training loss became non-finite at iteration " +
                               std::to_string(iter));
        }
        report.loss_history.push_back(step.loss);
        report.iterations_run = iter + 1;
        if (progress) progress(iter, step.loss);
        if (step.loss < cfg.loss_tolerance) break;
        adam_step(result.params, step.gradient, state, cfg);
    }

    report.final_loss = cross_entropy_loss(result.params, cps);
    if (!std::isfinite(report.final_loss)) throw NumericError("final training loss is non-finite");
    report.final_accuracy = classification_accuracy(result.params, cps);
    return result;
}

std::string train_report_to_json(const TrainReport& report)
{
    nlohmann::json doc{{"loss_history", report.loss_history},
                       {"final_loss", report.final_loss},
                       {"final_accuracy", report.final_accuracy},
                       {"iterations_run", report.iterations_run}};
    return doc.dump();
}

std::string save_model(const MlpParams& params)
{
    nlohmann::json weights = nlohmann::json::array();
    nlohmann::json biases = nlohmann::json::array();
    for (int l = 0; l < MlpParams::kLayers; ++l) {
        const auto W = params.weight(l);
        std::vector<double> row_major;
        row_major.reserve(static_cast<std::size_t>(W.size()));
        for (Index j = 0; j < W.rows(); ++j) {
            for (Index k = 0; k < W.cols(); ++k) row_major.push_back(W(j, k));
        }
        weights.push_back(std::move(row_major));
        const auto b = params.bias(l);
        biases.push_back(std::vector<double>(b.data(), b.data() + b.size()));
    }
    nlohmann::json doc{{"layer_sizes", params.layer_sizes()},
                       {"weights", std::move(weights)},
                       {"biases", std::move(biases)},
                       {"format_version", 1}};
    return doc.dump();
}

MlpParams load_model(std::string_view json_text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
    if (!doc.is_object()) schema_error("top level must be an object");
    for (const char* key : {"layer_sizes", "weights", "biases", "format_version"}) {
        if (!doc.contains(key)) schema_error(std::string("missing \"") + key + "\"");
    }
    if (doc["format_version"] != 1) schema_error("unsupported format_version");

    std::vector<int> sizes;
    try {
        sizes = doc["layer_sizes"].get<std::vector<int>>();
    } catch (const nlohmann::json::exception&) {
        schema_error("layer_sizes must be an integer array");
    }
    MlpParams params = [&] {
        try {
            return MlpParams(sizes);
        } catch (const ValidationError& e) {
            schema_error(e.what());
        }
    }();

    const auto& weights = doc["weights"];
    const auto& biases = doc["biases"];
    if (!weights.is_array() || weights.size() != MlpParams::kLayers || !biases.is_array() ||
        biases.size() != MlpParams::kLayers) {
        schema_error("expected 3 weight and 3 bias arrays");
    }
    auto read_reals = [](const nlohmann::json& arr, std::size_t expected, const std::string& what) {
        if (!arr.is_array() || arr.size() != expected) {
            schema_error(what + " must hold " + std::to_string(expected) + " values");
        }
        std::vector<double> values;
        values.reserve(expected);
        for (const auto& v : arr) {
            if (!v.is_number()) schema_error(what + " contains a non-number");
            const double d = v.get<double>();
            if (!std::isfinite(d)) schema_error(what + " contains a non-finite value");
            values.push_back(d);
        }
        return values;
    };
    for (int l = 0; l < MlpParams::kLayers; ++l) {
        auto W = params.weight(l);
        const auto w = read_reals(weights[l], static_cast<std::size_t>(W.size()),
                                  "weights[" + std::to_string(l) + "]");
        std::size_t idx = 0;
        for (Index j = 0; j < W.rows(); ++j) {
            for (Index k = 0; k < W.cols(); ++k) W(j, k) = w[idx++];
        }
        auto b = params.bias(l);
        const auto bv = read_reals(biases[l], static_cast<std::size_t>(b.size()),
                                   "biases[" + std::to_string(l) + "]");
        for (Index j = 0; j < b.size(); ++j) b(j) = bv[static_cast<std::size_t>(j)];
    }
    return params;
}

GradCheckResult check_gradients(const MlpParams& params, const ControlPointConfig& cps,
                                double step, double abs_floor, bool corrupt_gradient)
{
    auto analytic = backward(params, cps).gradient;
    if (corrupt_gradient) {
        auto g = analytic.data();
        for (std::size_t i = 0; i < g.size(); i += 7) g[i] += 1e-2 + 0.5 * std::abs(g[i]);
    }
    MlpParams probe = params;
    auto theta = probe.data();
    const auto g = analytic.data();
    GradCheckResult result;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double original = theta[i];
        theta[i] = original + step;
        const double plus = cross_entropy_loss(probe, cps);
        theta[i] = original - step;
        const double minus = cross_entropy_loss(probe, cps);
        theta[i] = original;
        const double numeric = (plus - minus) / (2.0 * step);
        const double denom = std::max({std::abs(g[i]), std::abs(numeric), abs_floor});
        result.max_relative_error =
            std::max(result.max_relative_error, std::abs(g[i] - numeric) / denom);
        ++result.parameters_checked;
    }
    return result;
}

} // namespace nmls
