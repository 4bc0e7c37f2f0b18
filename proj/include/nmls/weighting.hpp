#pragma once

#include "nmls/geometry.hpp"
#include "nmls/neural.hpp"

#include <Eigen/Core>

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nmls {

/// Non-negative influence of each control point at one query point.
struct WeightVector {
    Eigen::VectorXd values;

    std::size_t size() const noexcept { return static_cast<std::size_t>(values.size()); }
    double operator[](std::size_t i) const { return values(static_cast<Eigen::Index>(i)); }
    double sum() const { return values.sum(); }
};

struct EuclideanWeightParams {
    double alpha = 1.0;
    double epsilon = 0.0;
    double snap_distance = 1e-9;

    void validate() const;
};

/// w_i = 1 / (d(p_i, x)^(2 alpha) + epsilon).
///
/// With epsilon == 0 and a control point closer than snap_distance, the
/// nearest such control point receives weight 1 and all others 0.
WeightVector euclidean_weights(const Point3& x, const ControlPointConfig& cps,
                               const EuclideanWeightParams& params);

/// Softmax of logits / temperature, computed with the max shift.
WeightVector softmax_weights(const Eigen::Ref<const Eigen::VectorXd>& logits, double temperature);

struct NeuralWeightParams {
    std::shared_ptr<const MlpParams> model;
    double temperature = 1.0;

    void validate() const;
};

WeightVector neural_weights(const Point3& x, const NeuralWeightParams& params);

/// Divides by the sum. Throws ValidationError if the sum is not positive.
WeightVector normalize_weights(const WeightVector& w);

/// Uniform query interface over weighting schemes. Implementations are
/// immutable and safe to evaluate concurrently.
class WeightField {
public:
    virtual ~WeightField() = default;

    virtual std::size_t control_point_count() const = 0;
    virtual WeightVector at(const Point3& x) const = 0;

    /// Evaluates many points. The result for each point equals at(x) exactly.
    virtual std::vector<WeightVector> at_many(std::span<const Point3> xs) const;
};

class EuclideanField final : public WeightField {
public:
    EuclideanField(ControlPointConfig cps, EuclideanWeightParams params);

    std::size_t control_point_count() const override { return cps_.size(); }
    WeightVector at(const Point3& x) const override;

private:
    ControlPointConfig cps_;
    EuclideanWeightParams params_;
};

class NeuralField final : public WeightField {
public:
    explicit NeuralField(NeuralWeightParams params);

    std::size_t control_point_count() const override;
    WeightVector at(const Point3& x) const override;
    std::vector<WeightVector> at_many(std::span<const Point3> xs) const override;

private:
    NeuralWeightParams params_;
};

/// Axis-aligned lattice. Sample (ix, iy, iz) sits at min + (max - min) * i / (n - 1)
/// per axis (at min when n == 1); samples are ordered with z varying fastest.
struct GridSpec {
    Point3 min = Point3::Constant(-1.0);
    Point3 max = Point3::Constant(1.0);
    std::array<int, 3> counts{1, 1, 1};

    void validate() const;
    std::size_t sample_count() const;
    std::vector<Point3> points() const;
};

std::vector<WeightVector> sample_weight_field(const WeightField& field, const GridSpec& grid);

/// {"grid": {"min": [...], "max": [...], "counts": [...]}, "weights": [[...], ...]}
std::string weight_samples_to_json(const GridSpec& grid, std::span<const WeightVector> samples);

} // namespace nmls
