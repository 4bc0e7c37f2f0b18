#include "shapes.hpp"

#include "nmls/rng.hpp"

#include <Eigen/Geometry>

#include <filesystem>
#include <map>
#include <random>
#include <utility>

namespace nmls::test {

Shape icosphere(int levels, double radius)
{
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    Shape s;
    s.vertices = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
    s.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
               {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (auto& v : s.vertices) v.normalize();

    for (int l = 0; l < levels; ++l) {
        std::map<std::pair<int, int>, int> midpoints;
        auto midpoint = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = midpoints.find(key);
            if (it != midpoints.end()) return it->second;
            s.vertices.push_back((s.vertices[a] + s.vertices[b]).normalized());
            const int idx = static_cast<int>(s.vertices.size()) - 1;
            midpoints.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        next.reserve(s.faces.size() * 4);
        for (const auto& f : s.faces) {
            const int a = midpoint(f[0], f[1]);
            const int b = midpoint(f[1], f[2]);
            const int c = midpoint(f[2], f[0]);
            next.push_back({f[0], a, c});
            next.push_back({f[1], b, a});
            next.push_back({f[2], c, b});
            next.push_back({a, b, c});
        }
        s.faces = std::move(next);
    }
    for (auto& v : s.vertices) v *= radius;
    s.name = "icosphere";
    return s;
}

Shape planar_grid(int n)
{
    Shape s;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            s.vertices.emplace_back(double(i) / (n - 1), double(j) / (n - 1), 0.0);
        }
    }
    for (int i = 0; i + 1 < n; ++i) {
        for (int j = 0; j + 1 < n; ++j) {
            const int a = i * n + j;
            s.faces.push_back({a, a + n, a + n + 1});
            s.faces.push_back({a, a + n + 1, a + 1});
        }
    }
    s.name = "grid";
    return s;
}

Eigen::Matrix3d random_rotation(std::uint64_t seed)
{
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> n;
    Eigen::Quaterniond q(n(gen), n(gen), n(gen), n(gen));
    return q.normalized().toRotationMatrix();
}

std::vector<Point3> random_points(std::uint64_t seed, std::size_t count, double extent)
{
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(-extent, extent);
    std::vector<Point3> pts;
    for (std::size_t i = 0; i < count; ++i) pts.emplace_back(u(gen), u(gen), u(gen));
    return pts;
}

Eigen::VectorXd random_weights(std::uint64_t seed, std::size_t count, double lo, double hi)
{
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Eigen::VectorXd w(static_cast<Eigen::Index>(count));
    for (auto& x : w) x = u(gen);
    return w;
}

TempDir::TempDir()
{
    auto base = std::filesystem::temp_directory_path();
    std::random_device rd;
    for (;;) {
        auto candidate = base / ("nmls-test-" + std::to_string(rd()));
        if (std::filesystem::create_directory(candidate)) {
            root_ = candidate.string();
            break;
        }
    }
}

TempDir::~TempDir()
{
    std::error_code ec;
    std::filesystem::remove_all(root_, ec);
}

std::string TempDir::path(const std::string& name) const
{
    return (std::filesystem::path(root_) / name).string();
}

} // namespace nmls::test
