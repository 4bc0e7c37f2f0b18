#include "oracles.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace nmls::test {

double rigid_energy(const Eigen::Matrix3d& m, const Eigen::Vector3d& r, std::span<const Point3> p,
                    std::span<const Point3> q, const Eigen::VectorXd& w)
{
    double e = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        e += w(static_cast<Eigen::Index>(i)) * (m * p[i] + r - q[i]).squaredNorm();
    }
    return e;
}

double rotation_grid_min_energy(std::span<const Point3> p, std::span<const Point3> q,
                                const Eigen::VectorXd& w, int directions, int angles)
{
    Eigen::Vector3d ps = Eigen::Vector3d::Zero();
    Eigen::Vector3d qs = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < p.size(); ++i) {
        ps += w(static_cast<Eigen::Index>(i)) * p[i];
        qs += w(static_cast<Eigen::Index>(i)) * q[i];
    }
    ps /= w.sum();
    qs /= w.sum();

    auto eval = [&](const Eigen::Matrix3d& m) { return rigid_energy(m, qs - m * ps, p, q, w); };

    double best = eval(Eigen::Matrix3d::Identity());
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int d = 0; d < directions; ++d) {
        const double z = 1.0 - (2.0 * d + 1.0) / directions;
        const double rho = std::sqrt(1.0 - z * z);
        const Eigen::Vector3d axis(rho * std::cos(golden * d), rho * std::sin(golden * d), z);
        for (int a = 1; a <= angles; ++a) {
            const double theta = std::numbers::pi * a / angles;
            best = std::min(best, eval(Eigen::AngleAxisd(theta, axis).toRotationMatrix()));
        }
    }
    return best;
}

std::vector<double> naive_logits(const MlpParams& params, const Point3& x)
{
    std::vector<double> act{x.x(), x.y(), x.z()};
    for (int l = 0; l < MlpParams::kLayers; ++l) {
        const auto w = params.weight(l);
        const auto b = params.bias(l);
        std::vector<double> next(static_cast<std::size_t>(w.rows()));
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            double s = b(i);
            for (Eigen::Index j = 0; j < w.cols(); ++j) s += w(i, j) * act[static_cast<std::size_t>(j)];
            next[static_cast<std::size_t>(i)] = (l + 1 < MlpParams::kLayers) ? std::max(s, 0.0) : s;
        }
        act = std::move(next);
    }
    return act;
}

double naive_loss(const MlpParams& params, std::span<const Point3> cps)
{
    double total = 0.0;
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const auto z = naive_logits(params, cps[i]);
        const double m = *std::max_element(z.begin(), z.end());
        double s = 0.0;
        for (double v : z) s += std::exp(v - m);
        total += -(z[i] - m - std::log(s));
    }
    return total / static_cast<double>(cps.size());
}

std::vector<double> finite_difference_gradient(const MlpParams& params, std::span<const Point3> cps,
                                               double h)
{
    MlpParams probe = params;
    auto data = probe.data();
    std::vector<double> grad(data.size());
    for (std::size_t k = 0; k < data.size(); ++k) {
        const double saved = data[k];
        data[k] = saved + h;
        const double up = naive_loss(probe, cps);
        data[k] = saved - h;
        const double down = naive_loss(probe, cps);
        data[k] = saved;
        grad[k] = (up - down) / (2.0 * h);
    }
    return grad;
}

double argmax_accuracy(const MlpParams& params, std::span<const Point3> cps)
{
    int correct = 0;
    for (std::size_t i = 0; i < cps.size(); ++i) {
        const auto z = naive_logits(params, cps[i]);
        if (static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == i) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(cps.size());
}

} // namespace nmls::test
