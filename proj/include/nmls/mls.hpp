#pragma once

#include "nmls/geometry.hpp"
#include "nmls/weighting.hpp"

#include <Eigen/Core>

namespace nmls {

/// y -> rotation * y + translation, with rotation proper orthogonal.
struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Point3 apply(const Point3& y) const { return rotation * y + translation; }
};

/// y -> linear * y + translation.
struct AffineTransform {
    Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Point3 apply(const Point3& y) const { return linear * y + translation; }
};

enum class DeformMode { rigid, affine };

DeformMode parse_deform_mode(std::string_view name);

struct Centroids {
    Point3 source;
    Point3 target;
};

/// Weighted means of the sources and targets. Throws ValidationError for a
/// non-positive weight sum.
Centroids weighted_centroids(const ControlPointConfig& cps, const DisplacementSet& disp,
                             const WeightVector& w);

/// Closed-form rigid fit minimizing sum_i w_i |T(p_i) - q_i|^2.
///
/// Rotation comes from the SVD of the weighted covariance
/// C = sum_i w_i (p_i - p*)(q_i - q*)^T = U S V^T as V diag(1, 1, det(V U^T)) U^T,
/// which is always a proper rotation. A zero covariance yields the identity;
/// a rank-one covariance yields the smallest rotation taking the dominant
/// source direction onto the dominant target direction.
RigidTransform solve_rigid(const ControlPointConfig& cps, const DisplacementSet& disp,
                           const WeightVector& w);

/// Weighted least-squares affine fit. Throws DegenerateError when the weighted
/// source covariance is singular or its condition number exceeds 1e12.
AffineTransform solve_affine(const ControlPointConfig& cps, const DisplacementSet& disp,
                             const WeightVector& w);

double energy(const RigidTransform& t, const ControlPointConfig& cps, const DisplacementSet& disp,
              const WeightVector& w);
double energy(const AffineTransform& t, const ControlPointConfig& cps, const DisplacementSet& disp,
              const WeightVector& w);

Point3 deform_point(const Point3& x, const ControlPointConfig& cps, const DisplacementSet& disp,
                    const WeightField& field, DeformMode mode);

struct DeformOptions {
    DeformMode mode = DeformMode::rigid;
    /// 0 selects std::thread::hardware_concurrency().
    unsigned threads = 0;
};

/// Applies deform_point to every vertex. Faces and name are copied unchanged;
/// the output does not depend on the thread count.
Shape deform_shape(const Shape& shape, const ControlPointConfig& cps, const DisplacementSet& disp,
                   const WeightField& field, const DeformOptions& options = {});

std::vector<Point3> deform_points(std::span<const Point3> points, const ControlPointConfig& cps,
                                  const DisplacementSet& disp, const WeightField& field,
                                  const DeformOptions& options = {});

} // namespace nmls
