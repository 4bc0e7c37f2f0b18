#pragma once

#include "nmls/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nmls {

/// Parameters of the weighting network: 3 -> H -> H -> P, ReLU after both
/// hidden layers, raw logits at the output.
///
/// All weights and biases live in one contiguous buffer so that optimizers and
/// gradient checks can treat the network as a flat vector. Weight matrices are
/// stored column-major (fan_out x fan_in) inside that buffer; the JSON model
/// format is row-major.
class MlpParams {
public:
    static constexpr int kLayers = 3;

    MlpParams() = default;

    /// Zero-filled parameters for the given sizes. Throws ValidationError unless
    /// sizes has the form [3, H, H, P] with H >= 1 and P >= 1.
    explicit MlpParams(std::vector<int> layer_sizes);

    const std::vector<int>& layer_sizes() const noexcept { return sizes_; }
    int hidden_width() const noexcept { return sizes_.at(1); }
    int output_size() const noexcept { return sizes_.back(); }

    Eigen::Map<Eigen::MatrixXd> weight(int layer);
    Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
    Eigen::Map<Eigen::VectorXd> bias(int layer);
    Eigen::Map<const Eigen::VectorXd> bias(int layer) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::size_t parameter_count() const noexcept { return data_.size(); }

    bool operator==(const MlpParams& other) const = default;

private:
    std::vector<int> sizes_;
    std::vector<double> data_;
    std::vector<std::size_t> weight_offset_;
    std::vector<std::size_t> bias_offset_;
};

/// Gradients share the parameter layout.
using MlpGradients = MlpParams;

/// Canonical layer sizes [3, hidden, hidden, outputs].
std::vector<int> mlp_layer_sizes(int hidden_width, int outputs);

/// Glorot-uniform weights from Xoshiro256(seed), zero biases. Weights are drawn
/// layer by layer in row-major order.
MlpParams init_mlp(std::uint64_t seed, std::vector<int> layer_sizes);

Eigen::VectorXd forward_logits(const MlpParams& params, const Point3& x);

/// Logits for many points, one column per point (P x N).
///
/// Every output entry is accumulated in a fixed order that does not depend on
/// how points are batched, so this agrees bit-for-bit with forward_logits.
Eigen::MatrixXd forward_logits_batch(const MlpParams& params, std::span<const Point3> xs);

/// Mean categorical cross-entropy of classifying control point i as class i.
double cross_entropy_loss(const MlpParams& params, const ControlPointConfig& cps);

struct LossAndGradient {
    double loss = 0.0;
    MlpGradients gradient;
};

/// Loss together with its exact gradient (ReLU'(0) taken as 0).
LossAndGradient backward(const MlpParams& params, const ControlPointConfig& cps);

/// Fraction of control points whose argmax logit is their own index.
double classification_accuracy(const MlpParams& params, const ControlPointConfig& cps);

struct TrainConfig {
    int hidden_width = 1024;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
    int max_iters = 2000;
    double loss_tolerance = 1e-3;
    std::uint64_t seed = 42;

    /// Throws ValidationError on out-of-range values.
    void validate() const;
};

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long step_count = 0;

    AdamState() = default;
    explicit AdamState(std::size_t parameter_count)
        : first_moment(parameter_count, 0.0), second_moment(parameter_count, 0.0)
    {}
};

/// One bias-corrected Adam update, in place.
void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state,
               const TrainConfig& cfg);

struct TrainReport {
    std::vector<double> loss_history;
    double final_loss = 0.0;
    double final_accuracy = 0.0;
    int iterations_run = 0;
};

struct TrainResult {
    MlpParams params;
    TrainReport report;
};

using TrainProgress = std::function<void(int iteration, double loss)>;

/// Full-batch training of the proxy classification task on the control points.
///
/// Stops after cfg.max_iters loss evaluations or as soon as the loss drops below
/// cfg.loss_tolerance. Throws NumericError if the loss becomes non-finite.
TrainResult train(const ControlPointConfig& cps, const TrainConfig& cfg,
                  const TrainProgress& progress = {});

std::string train_report_to_json(const TrainReport& report);

std::string save_model(const MlpParams& params);
MlpParams load_model(std::string_view json_text);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t parameters_checked = 0;
};

/// Compares backward() against central differences of cross_entropy_loss.
///
/// Relative error per entry is |a - n| / max(|a|, |n|, abs_floor). When
/// corrupt_gradient is set, the analytic gradient is deliberately perturbed
/// (negative control for the harness).
GradCheckResult check_gradients(const MlpParams& params, const ControlPointConfig& cps,
                                double step = 1e-6, double abs_floor = 1e-4,
                                bool corrupt_gradient = false);

} // namespace nmls
