#pragma once

#include "nmls/geometry.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nmls {

/// Symmetric vertex neighborhoods without self-loops.
struct Adjacency {
    enum class Source { mesh_edges, knn };

    Source source = Source::mesh_edges;
    std::vector<std::vector<int>> neighbors;
    /// Vertices without neighbors; excluded from every metric average.
    std::vector<int> isolated;
};

/// One-ring from face edges for meshes; symmetrized k-nearest-neighbor graph
/// for point clouds.
Adjacency build_adjacency(const Shape& shape, int k = 6);

/// v_i minus the mean of its neighbors (zero for isolated vertices).
std::vector<Point3> umbrella_laplacian(std::span<const Point3> vertices, const Adjacency& adj);

/// Mean over non-isolated vertices of | |L_i(deformed)| - |L_i(source)| |.
double laplacian_magnitude_distortion(const Shape& source, const Shape& deformed,
                                      const Adjacency& adj);

/// Per-vertex mean curvature |L(v)| / 2.
///
/// Meshes use the cotangent Laplace-Beltrami operator (cotangents clamped at 0)
/// normalized by the mixed Voronoi area; zero-area triangles are skipped.
/// Point clouds fall back to the umbrella vector. Vertices with no support
/// are reported as empty.
std::vector<std::optional<double>> mean_curvature(const Shape& shape, const Adjacency& adj);

/// Mean of |H_i(deformed) - H_i(source)| over vertices defined in both.
double mean_curvature_distortion(const Shape& source, const Shape& deformed, const Adjacency& adj);

/// Mean Euclidean distance between deformed control points and their targets.
double control_point_l2(std::span<const Point3> deformed_control_points,
                        std::span<const Point3> targets);

struct MetricReport {
    double mean_laplacian_magnitude_distortion = 0.0;
    double mean_curvature_distortion = 0.0;
    double mean_control_point_l2 = 0.0;
};

/// {"lap_mag_distortion": .., "mean_curvature_distortion": .., "cp_l2": ..}
std::string metric_report_to_json(const MetricReport& report);

} // namespace nmls
