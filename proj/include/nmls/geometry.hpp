#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nmls {

using Point3 = Eigen::Vector3d;
using Face = std::array<int, 3>;

enum class ShapeFormat { obj, xyz };

/// Parses "obj" / "xyz" (case-insensitive). Throws ValidationError otherwise.
ShapeFormat parse_shape_format(std::string_view name);

/// Infers the format from a file extension (.obj or .xyz).
ShapeFormat shape_format_from_path(std::string_view path);

/// Vertex positions with optional triangle connectivity.
///
/// A shape without faces is a point cloud. Faces may be non-manifold or span
/// several disconnected components; only index validity is enforced.
struct Shape {
    std::vector<Point3> vertices;
    std::vector<Face> faces;
    std::string name;

    bool is_mesh() const noexcept { return !faces.empty(); }
    std::size_t vertex_count() const noexcept { return vertices.size(); }
};

/// Throws ValidationError if a face index is out of range or a vertex is non-finite.
void validate_shape(const Shape& shape);

/// Ordered, pairwise-distinct source control points.
class ControlPointConfig {
public:
    /// Throws ValidationError when empty, non-finite, or when two points coincide.
    explicit ControlPointConfig(std::vector<Point3> points);

    std::size_t size() const noexcept { return points_.size(); }
    const Point3& operator[](std::size_t i) const { return points_[i]; }
    std::span<const Point3> points() const noexcept { return points_; }

    /// Smallest distance between two distinct control points (infinity when P = 1).
    double min_pairwise_distance() const noexcept;

private:
    std::vector<Point3> points_;
};

/// Absolute target positions, one per control point of the paired configuration.
class DisplacementSet {
public:
    DisplacementSet(const ControlPointConfig& cps, std::vector<Point3> targets);

    /// Targets equal to the sources.
    static DisplacementSet identity(const ControlPointConfig& cps);

    std::size_t size() const noexcept { return targets_.size(); }
    const Point3& operator[](std::size_t i) const { return targets_[i]; }
    std::span<const Point3> targets() const noexcept { return targets_; }

private:
    std::vector<Point3> targets_;
};

/// Uniform similarity map x -> (x - center) / scale.
struct NormalizationTransform {
    Point3 center = Point3::Zero();
    double scale = 1.0;

    Point3 apply(const Point3& p) const { return (p - center) / scale; }
    Point3 invert(const Point3& p) const { return p * scale + center; }
};

/// count pairwise-distinct points uniform in [-extent, extent]^3, at least
/// min_distance apart (rejection sampling from Xoshiro256(seed)).
ControlPointConfig random_control_points(std::uint64_t seed, std::size_t count,
                                         double min_distance, double extent = 1.0);

struct NormalizedInputs {
    Shape shape;
    ControlPointConfig control_points;
    NormalizationTransform transform;
};

/// Centers the shape's bounding box at the origin and scales its largest
/// half-extent to 1. The control points share the same transform.
NormalizedInputs normalize_shape(const Shape& shape, const ControlPointConfig& cps);

/// Bounding-box normalization of the shape alone.
NormalizationTransform normalization_for(const Shape& shape);

std::vector<Point3> apply_normalization(std::span<const Point3> points,
                                        const NormalizationTransform& t);
std::vector<Point3> denormalize_points(std::span<const Point3> points,
                                       const NormalizationTransform& t);

Shape load_shape(std::string_view text, ShapeFormat format);
std::string save_shape(const Shape& shape, ShapeFormat format);

ControlPointConfig load_control_points(std::string_view json_text);
DisplacementSet load_displacements(std::string_view json_text, const ControlPointConfig& cps);
std::string save_control_points(std::span<const Point3> points);
std::string save_displacements(const DisplacementSet& disp);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

} // namespace nmls
