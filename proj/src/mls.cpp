#include "nmls/mls.hpp"

#include "nmls/errors.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace nmls {

namespace {

// Singular-value ratio below which the covariance is treated as rank one.
constexpr double kRankOneRatio = 1e-10;
constexpr double kAffineMaxCondition = 1e12;
constexpr std::size_t kDeformChunk = 512;

void check_inputs(const ControlPointConfig& cps, const DisplacementSet& disp, const WeightVector& w)
{
    if (disp.size() != cps.size() || w.size() != cps.size()) {
        throw ValidationError("control points, targets and weights must have equal length");
    }
}

Eigen::Matrix3d cross_matrix(const Eigen::Vector3d& k)
{
    Eigen::Matrix3d m;
    m << 0.0, -k.z(), k.y(), k.z(), 0.0, -k.x(), -k.y(), k.x(), 0.0;
    return m;
}

/// Smallest rotation taking unit vector a onto unit vector b.
Eigen::Matrix3d minimal_rotation(const Eigen::Vector3d& a, const Eigen::Vector3d& b)
{
    const double c = a.dot(b);
    if (c < -1.0 + 1e-12) {
        // Half turn about a deterministic axis orthogonal to a.
        Eigen::Index least = 0;
        a.cwiseAbs().minCoeff(&least);
        const Eigen::Vector3d axis = a.cross(Eigen::Vector3d::Unit(least)).normalized();
        return 2.0 * axis * axis.transpose() - Eigen::Matrix3d::Identity();
    }
    const Eigen::Matrix3d k = cross_matrix(a.cross(b));
    return Eigen::Matrix3d::Identity() + k + k * k / (1.0 + c);
}

struct Svd3 {
    Eigen::Matrix3d u;
    Eigen::Vector3d s;
    Eigen::Matrix3d v;
};

/// Full SVD with singular values in decreasing order. An exactly symmetric
/// input goes through the symmetric eigensolver, which keeps U and V equal up
/// to column signs; JacobiSVD loses that symmetry for nearly singular inputs.
Svd3 svd3(const Eigen::Matrix3d& m)
{
    if (m == m.transpose()) {
        const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(m);
        std::array<int, 3> order{0, 1, 2};
        const Eigen::Vector3d lambda = eig.eigenvalues();
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return std::abs(lambda(a)) > std::abs(lambda(b)); });
        Svd3 r;
        for (int k = 0; k < 3; ++k) {
            const int i = order[static_cast<std::size_t>(k)];
            r.v.col(k) = eig.eigenvectors().col(i);
            r.u.col(k) = lambda(i) < 0.0 ? Eigen::Vector3d(-r.v.col(k)) : Eigen::Vector3d(r.v.col(k));
            r.s(k) = std::abs(lambda(i));
        }
        return r;
    }
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

template <typename Transform>
double energy_impl(const Transform& t, const ControlPointConfig& cps, const DisplacementSet& disp,
                   const WeightVector& w)
{
    check_inputs(cps, disp, w);
    double e = 0.0;
    for (std::size_t i = 0; i < cps.size(); ++i) {
        e += w[i] * (t.apply(cps[i]) - disp[i]).squaredNorm();
    }
    return e;
}

Point3 solve_and_apply(const Point3& x, const ControlPointConfig& cps, const DisplacementSet& disp,
                       const WeightVector& w, DeformMode mode)
{
    if (mode == DeformMode::rigid) return solve_rigid(cps, disp, w).apply(x);
    return solve_affine(cps, disp, w).apply(x);
}

} // namespace

DeformMode parse_deform_mode(std::string_view name)
{
    if (name == "rigid") return DeformMode::rigid;
    if (name == "affine") return DeformMode::affine;
    throw ValidationError("unknown deformation mode '" + std::string(name) + "'");
}

Centroids weighted_centroids(const ControlPointConfig& cps, const DisplacementSet& disp,
                             const WeightVector& w)
{
    check_inputs(cps, disp, w);
    const double total = w.sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
        throw ValidationError("weights must have a positive finite sum");
    }
    Point3 p = Point3::Zero();
    Point3 q = Point3::Zero();
    for (std::size_t i = 0; i < cps.size(); ++i) {
        p += w[i] * cps[i];
        q += w[i] * disp[i];
    }
    return {p / total, q / total};
}

RigidTransform solve_rigid(const ControlPointConfig& cps, const DisplacementSet& disp,
                           const WeightVector& w)
{
    const auto [p_star, q_star] = weighted_centroids(cps, disp, w);

    // Entry-wise w * (p_j * q_k): equal sources and targets give an exactly
    // symmetric covariance.
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const Eigen::Vector3d p = cps[i] - p_star;
        const Eigen::Vector3d q = disp[i] - q_star;
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) cov(j, k) += w[i] * (p(j) * q(k));
        }
    }
    if (!cov.allFinite()) throw NumericError("rigid solve: non-finite covariance");

    RigidTransform t;
    if (cov.cwiseAbs().maxCoeff() > 0.0) {
        const auto [U, s, V] = svd3(cov);
        if (s(1) <= kRankOneRatio * s(0)) {
            // Any rotation with M u1 = v1 is optimal here; the SVD's choice of the
            // remaining singular vectors is arbitrary, so pick the minimal one.
            t.rotation = minimal_rotation(U.col(0), V.col(0));
        } else {
            Eigen::Vector3d d(1.0, 1.0, (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
            t.rotation = V * d.asDiagonal() * U.transpose();
        }
    }
    t.translation = q_star - t.rotation * p_star;
    return t;
}

AffineTransform solve_affine(const ControlPointConfig& cps, const DisplacementSet& disp,
                             const WeightVector& w)
{
    const auto [p_star, q_star] = weighted_centroids(cps, disp, w);

    Eigen::Matrix3d cov_pp = Eigen::Matrix3d::Zero();
    Eigen::Matrix3d cov_qp = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const Eigen::Vector3d p = cps[i] - p_star;
        cov_pp += w[i] * p * p.transpose();
        cov_qp += w[i] * (disp[i] - q_star) * p.transpose();
    }
    if (!cov_pp.allFinite() || !cov_qp.allFinite()) {
        throw NumericError("affine solve: non-finite covariance");
    }

    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov_pp, Eigen::EigenvaluesOnly);
    const Eigen::Vector3d lambda = eig.eigenvalues(); // ascending
    const double largest = lambda(2);
    if (!(largest > 0.0) || !(lambda(0) > 0.0) || largest / lambda(0) > kAffineMaxCondition) {
        int rank = 0;
        for (int i = 0; i < 3; ++i) rank += lambda(i) > largest / kAffineMaxCondition ? 1 : 0;
        if (!(largest > 0.0)) rank = 0;
        static constexpr const char* kind[] = {"coincident", "collinear", "coplanar"};
        throw DegenerateError(std::string("affine solve: weighted control points are ") +
                              kind[std::min(rank, 2)] +
                              " (source covariance is singular); use rigid mode");
    }

    AffineTransform t;
    t.linear = cov_pp.ldlt().solve(cov_qp.transpose()).transpose();
    t.translation = q_star - t.linear * p_star;
    return t;
}

double energy(const RigidTransform& t, const ControlPointConfig& cps, const DisplacementSet& disp,
              const WeightVector& w)
{
    return energy_impl(t, cps, disp, w);
}

double energy(const AffineTransform& t, const ControlPointConfig& cps, const DisplacementSet& disp,
              const WeightVector& w)
{
    return energy_impl(t, cps, disp, w);
}

Point3 deform_point(const Point3& x, const ControlPointConfig& cps, const DisplacementSet& disp,
                    const WeightField& field, DeformMode mode)
{
    if (field.control_point_count() != cps.size()) {
        throw ValidationError("weight field and control points disagree on P");
    }
    return solve_and_apply(x, cps, disp, field.at(x), mode);
}

std::vector<Point3> deform_points(std::span<const Point3> points, const ControlPointConfig& cps,
                                  const DisplacementSet& disp, const WeightField& field,
                                  const DeformOptions& options)
{
    if (field.control_point_count() != cps.size()) {
        throw ValidationError("weight field and control points disagree on P");
    }
    if (disp.size() != cps.size()) throw ValidationError("targets and control points differ in length");

    std::vector<Point3> out(points.size());
    const std::size_t chunks = (points.size() + kDeformChunk - 1) / kDeformChunk;
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::size_t error_chunk = chunks;
    std::exception_ptr error;

    auto worker = [&] {
        for (std::size_t c = next++; c < chunks; c = next++) {
            const std::size_t begin = c * kDeformChunk;
            const std::size_t end = std::min(points.size(), begin + kDeformChunk);
            try {
                const auto block = points.subspan(begin, end - begin);
                const auto weights = field.at_many(block);
                for (std::size_t i = 0; i < block.size(); ++i) {
                    out[begin + i] = solve_and_apply(block[i], cps, disp, weights[i], options.mode);
                }
            } catch (...) {
                // Report the failure from the lowest chunk so errors are reproducible.
                std::lock_guard lock(error_mutex);
                if (c < error_chunk) {
                    error_chunk = c;
                    error = std::current_exception();
                }
            }
        }
    };

    unsigned threads = options.threads ? options.threads : std::thread::hardware_concurrency();
    threads = static_cast<unsigned>(std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(chunks, 1)));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    return out;
}

Shape deform_shape(const Shape& shape, const ControlPointConfig& cps, const DisplacementSet& disp,
                   const WeightField& field, const DeformOptions& options)
{
    Shape out;
    out.vertices = deform_points(shape.vertices, cps, disp, field, options);
    out.faces = shape.faces;
    out.name = shape.name;
    return out;
}

} // namespace nmls
