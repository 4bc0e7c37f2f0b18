#include "nmls/metrics.hpp"

#include "nmls/errors.hpp"

#include <Eigen/Geometry>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace nmls {

namespace {

void check_same_size(const Shape& a, const Shape& b, const Adjacency& adj)
{
    if (a.vertex_count() != b.vertex_count()) {
        throw ValidationError("source has " + std::to_string(a.vertex_count()) +
                              " vertices but deformed has " + std::to_string(b.vertex_count()));
    }
    if (adj.neighbors.size() != a.vertex_count()) {
        throw ValidationError("adjacency does not match the vertex count");
    }
}

void finalize(Adjacency& adj)
{
    for (std::size_t i = 0; i < adj.neighbors.size(); ++i) {
        auto& n = adj.neighbors[i];
        std::sort(n.begin(), n.end());
        n.erase(std::unique(n.begin(), n.end()), n.end());
        if (n.empty()) adj.isolated.push_back(static_cast<int>(i));
    }
}

// Neumaier-compensated mean so the result does not drift with vertex count.
class MeanAccumulator {
public:
    void add(double x)
    {
        const double t = sum_ + x;
        comp_ += std::abs(sum_) >= std::abs(x) ? (sum_ - t) + x : (x - t) + sum_;
        sum_ = t;
        ++count_;
    }

    double mean() const { return count_ ? (sum_ + comp_) / static_cast<double>(count_) : 0.0; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
    std::size_t count_ = 0;
};

std::vector<std::optional<double>> cotangent_mean_curvature(const Shape& shape)
{
    const std::size_t n = shape.vertex_count();
    std::vector<Eigen::Vector3d> normal(n, Eigen::Vector3d::Zero());
    std::vector<double> area(n, 0.0);
    const auto& v = shape.vertices;

    for (const auto& f : shape.faces) {
        const Eigen::Vector3d& a = v[f[0]];
        const Eigen::Vector3d& b = v[f[1]];
        const Eigen::Vector3d& c = v[f[2]];
        const double twice_area = (b - a).cross(c - a).norm();
        const double longest =
            std::max({(b - a).squaredNorm(), (c - b).squaredNorm(), (a - c).squaredNorm()});
        if (!(twice_area > 1e-12 * longest)) continue;

        const std::array<const Eigen::Vector3d*, 3> p{&a, &b, &c};
        std::array<double, 3> cot{};
        for (int i = 0; i < 3; ++i) {
            const auto& pi = *p[i];
            const auto& pj = *p[(i + 1) % 3];
            const auto& pk = *p[(i + 2) % 3];
            cot[i] = (pj - pi).dot(pk - pi) / twice_area;
        }
        for (int i = 0; i < 3; ++i) {
            const int j = f[(i + 1) % 3];
            const int k = f[(i + 2) % 3];
            const double wgt = std::max(cot[i], 0.0);
            normal[j] += wgt * (v[j] - v[k]);
            normal[k] += wgt * (v[k] - v[j]);
        }

        // Mixed Voronoi area.
        const double tri_area = 0.5 * twice_area;
        const int obtuse = cot[0] < 0.0 ? 0 : cot[1] < 0.0 ? 1 : cot[2] < 0.0 ? 2 : -1;
        for (int i = 0; i < 3; ++i) {
            if (obtuse < 0) {
                const int j = (i + 1) % 3;
                const int k = (i + 2) % 3;
                area[f[i]] += ((*p[i] - *p[j]).squaredNorm() * cot[k] +
                               (*p[i] - *p[k]).squaredNorm() * cot[j]) / 8.0;
            } else {
                area[f[i]] += obtuse == i ? tri_area / 2.0 : tri_area / 4.0;
            }
        }
    }

    std::vector<std::optional<double>> h(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (area[i] > 0.0) h[i] = normal[i].norm() / (2.0 * area[i]) / 2.0;
    }
    return h;
}

} // namespace

Adjacency build_adjacency(const Shape& shape, int k)
{
    if (shape.vertices.empty()) throw ValidationError("cannot build adjacency of an empty shape");
    const std::size_t n = shape.vertex_count();
    Adjacency adj;
    adj.neighbors.resize(n);

    if (shape.is_mesh()) {
        adj.source = Adjacency::Source::mesh_edges;
        for (const auto& f : shape.faces) {
            for (int e = 0; e < 3; ++e) {
                const int a = f[e];
                const int b = f[(e + 1) % 3];
                if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n ||
                    static_cast<std::size_t>(b) >= n) {
                    throw ValidationError("face index out of range");
                }
                if (a == b) continue;
                adj.neighbors[a].push_back(b);
                adj.neighbors[b].push_back(a);
            }
        }
    } else {
        if (k < 1) throw ValidationError("k must be >= 1");
        adj.source = Adjacency::Source::knn;
        const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n - 1);
        std::vector<std::pair<double, int>> dist;
        for (std::size_t i = 0; i < n && kk > 0; ++i) {
            dist.clear();
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) {
                    dist.emplace_back((shape.vertices[i] - shape.vertices[j]).squaredNorm(),
                                      static_cast<int>(j));
                }
            }
            std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk - 1),
                             dist.end());
            std::sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk));
            for (std::size_t m = 0; m < kk; ++m) {
                const int j = dist[m].second;
                adj.neighbors[i].push_back(j);
                adj.neighbors[static_cast<std::size_t>(j)].push_back(static_cast<int>(i));
            }
        }
    }
    finalize(adj);
    return adj;
}

std::vector<Point3> umbrella_laplacian(std::span<const Point3> vertices, const Adjacency& adj)
{
    if (adj.neighbors.size() != vertices.size()) {
        throw ValidationError("adjacency does not match the vertex count");
    }
    std::vector<Point3> out(vertices.size(), Point3::Zero());
    for (std::size_t i = 0; i < vertices.size(); ++i) {
        const auto& nb = adj.neighbors[i];
        if (nb.empty()) continue;
        Point3 mean = Point3::Zero();
        for (int j : nb) mean += vertices[static_cast<std::size_t>(j)];
        out[i] = vertices[i] - mean / static_cast<double>(nb.size());
    }
    return out;
}

double laplacian_magnitude_distortion(const Shape& source, const Shape& deformed,
                                      const Adjacency& adj)
{
    check_same_size(source, deformed, adj);
    const auto ls = umbrella_laplacian(source.vertices, adj);
    const auto ld = umbrella_laplacian(deformed.vertices, adj);
    MeanAccumulator acc;
    for (std::size_t i = 0; i < ls.size(); ++i) {
        if (adj.neighbors[i].empty()) continue;
        acc.add(std::abs(ld[i].norm() - ls[i].norm()));
    }
    return acc.mean();
}

std::vector<std::optional<double>> mean_curvature(const Shape& shape, const Adjacency& adj)
{
    if (adj.neighbors.size() != shape.vertex_count()) {
        throw ValidationError("adjacency does not match the vertex count");
    }
    if (shape.is_mesh()) return cotangent_mean_curvature(shape);

    const auto lap = umbrella_laplacian(shape.vertices, adj);
    std::vector<std::optional<double>> h(lap.size());
    for (std::size_t i = 0; i < lap.size(); ++i) {
        if (!adj.neighbors[i].empty()) h[i] = lap[i].norm() / 2.0;
    }
    return h;
}

double mean_curvature_distortion(const Shape& source, const Shape& deformed, const Adjacency& adj)
{
    check_same_size(source, deformed, adj);
    if (source.is_mesh() != deformed.is_mesh()) {
        throw ValidationError("source and deformed shapes must both be meshes or both point clouds");
    }
    const auto hs = mean_curvature(source, adj);
    const auto hd = mean_curvature(deformed, adj);
    MeanAccumulator acc;
    for (std::size_t i = 0; i < hs.size(); ++i) {
        if (adj.neighbors[i].empty() || !hs[i] || !hd[i]) continue;
        acc.add(std::abs(*hd[i] - *hs[i]));
    }
    return acc.mean();
}

double control_point_l2(std::span<const Point3> deformed_control_points,
                        std::span<const Point3> targets)
{
    if (deformed_control_points.size() != targets.size()) {
        throw ValidationError("deformed control points and targets differ in length");
    }
    MeanAccumulator acc;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        acc.add((deformed_control_points[i] - targets[i]).norm());
    }
    return acc.mean();
}

std::string metric_report_to_json(const MetricReport& report)
{
    nlohmann::json doc{{"lap_mag_distortion", report.mean_laplacian_magnitude_distortion},
                       {"mean_curvature_distortion", report.mean_curvature_distortion},
                       {"cp_l2", report.mean_control_point_l2}};
    return doc.dump();
}

} // namespace nmls
