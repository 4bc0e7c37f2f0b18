#include "nmls/weighting.hpp"

#include "nmls/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace nmls {

void EuclideanWeightParams::validate() const
{
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be >= 0");
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be >= 0");
    if (!(snap_distance > 0.0)) throw ValidationError("snap distance must be > 0");
}

WeightVector euclidean_weights(const Point3& x, const ControlPointConfig& cps,
                               const EuclideanWeightParams& params)
{
    const auto n = static_cast<Eigen::Index>(cps.size());
    WeightVector w{Eigen::VectorXd(n)};

    if (params.epsilon == 0.0) {
        Eigen::Index nearest = -1;
        double nearest_d = params.snap_distance;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double d = (cps[static_cast<std::size_t>(i)] - x).norm();
            if (d < nearest_d) {
                nearest_d = d;
                nearest = i;
            }
        }
        if (nearest >= 0) {
            w.values.setZero();
            w.values(nearest) = 1.0;
            return w;
        }
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        const double d2 = (cps[static_cast<std::size_t>(i)] - x).squaredNorm();
        // d^(2 alpha) == (d^2)^alpha
        w.values(i) = 1.0 / (std::pow(d2, params.alpha) + params.epsilon);
    }
    return w;
}

WeightVector softmax_weights(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature)
{
    const Eigen::VectorXd scaled = logits / temperature;
    const double m = scaled.maxCoeff();
    Eigen::VectorXd e = (scaled.array() - m).exp().matrix();
    e /= e.sum();
    return {std::move(e)};
}

void NeuralWeightParams::validate() const
{
    if (!model) throw ValidationError("neural weights need a model");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError("temperature must be > 0");
    }
}

WeightVector neural_weights(const Point3& x, const NeuralWeightParams& params)
{
    params.validate();
    return softmax_weights(forward_logits(*params.model, x), params.temperature);
}

WeightVector normalize_weights(const WeightVector& w)
{
    const double total = w.sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
        throw ValidationError("cannot normalize a weight vector with non-positive sum");
    }
    return {w.values / total};
}

std::vector<WeightVector> WeightField::at_many(std::span<const Point3> xs) const
{
    std::vector<WeightVector> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(at(x));
    return out;
}

EuclideanField::EuclideanField(ControlPointConfig cps, EuclideanWeightParams params)
    : cps_(std::move(cps)), params_(params)
{
    params_.validate();
}

WeightVector EuclideanField::at(const Point3& x) const
{
    return euclidean_weights(x, cps_, params_);
}

NeuralField::NeuralField(NeuralWeightParams params) : params_(std::move(params))
{
    params_.validate();
}

std::size_t NeuralField::control_point_count() const
{
    return static_cast<std::size_t>(params_.model->output_size());
}

WeightVector NeuralField::at(const Point3& x) const
{
    return neural_weights(x, params_);
}

std::vector<WeightVector> NeuralField::at_many(std::span<const Point3> xs) const
{
    const Eigen::MatrixXd logits = forward_logits_batch(*params_.model, xs);
    std::vector<WeightVector> out;
    out.reserve(xs.size());
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
        out.push_back(softmax_weights(logits.col(i), params_.temperature));
    }
    return out;
}

void GridSpec::validate() const
{
    for (int c = 0; c < 3; ++c) {
        if (counts[c] < 1) throw ValidationError("grid must have at least one sample per axis");
        if (!std::isfinite(min[c]) || !std::isfinite(max[c])) {
            throw ValidationError("grid bounds must be finite");
        }
        if (max[c] < min[c]) throw ValidationError("grid max must not be below grid min");
    }
}

std::size_t GridSpec::sample_count() const
{
    return static_cast<std::size_t>(counts[0]) * static_cast<std::size_t>(counts[1]) *
           static_cast<std::size_t>(counts[2]);
}

std::vector<Point3> GridSpec::points() const
{
    validate();
    auto coord = [&](int axis, int i) {
        if (counts[axis] == 1) return min[axis];
        return min[axis] + (max[axis] - min[axis]) * i / (counts[axis] - 1);
    };
    std::vector<Point3> pts;
    pts.reserve(sample_count());
    for (int ix = 0; ix < counts[0]; ++ix) {
        for (int iy = 0; iy < counts[1]; ++iy) {
            for (int iz = 0; iz < counts[2]; ++iz) {
                pts.emplace_back(coord(0, ix), coord(1, iy), coord(2, iz));
            }
        }
    }
    return pts;
}

std::vector<WeightVector> sample_weight_field(const WeightField& field, const GridSpec& grid)
{
    return field.at_many(grid.points());
}

std::string weight_samples_to_json(const GridSpec& grid, std::span<const WeightVector> samples)
{
    nlohmann::json weights = nlohmann::json::array();
    for (const auto& w : samples) {
        weights.push_back(std::vector<double>(w.values.data(), w.values.data() + w.values.size()));
    }
    nlohmann::json doc{
        {"grid",
         {{"min", {grid.min.x(), grid.min.y(), grid.min.z()}},
          {"max", {grid.max.x(), grid.max.y(), grid.max.z()}},
          {"counts", grid.counts}}},
        {"weights", std::move(weights)}};
    return doc.dump();
}

} // namespace nmls
