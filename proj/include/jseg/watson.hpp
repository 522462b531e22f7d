#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "jseg/special.hpp"

namespace jseg {

// Axial (dipole-symmetric) Watson density on the sphere,
//   f(phi; psi, kappa) = exp(kappa (psi' phi)^2) / (4 pi Z(kappa)),
// with Z(kappa) = int_0^1 exp(kappa t^2) dt. dsw_logpdf reports
// kappa (psi' phi)^2 - log Z(kappa); the 1/(4 pi) constant is the same for
// every class and is dropped throughout.
inline void dsw_check_unit(const Eigen::Vector3d& v, const char* name) {
    if (std::abs(v.norm() - 1.0) > 1e-6)
        throw numeric_error(std::string("watson: ") + name + " must be unit length");
}

inline double dsw_logpdf(const Eigen::Vector3d& phi, const Eigen::Vector3d& psi, double kappa) {
    dsw_check_unit(phi, "direction");
    dsw_check_unit(psi, "axis");
    double t = psi.dot(phi);
    return kappa * t * t - kummer_log_z(kappa).log_z;
}

// Exact sampler. With s = 1 - |t| the target t-marginal exp(kappa t^2)
// becomes exp(-kappa s) * exp(kappa s(s-1)) on [0,1]; a truncated
// exponential proposal with rate kappa leaves an acceptance ratio
// exp(kappa s(s-1)) <= 1. Acceptance stays near 1/2 or better for all
// kappa, with no large-kappa special case.
template <class RngT>
Eigen::Vector3d dsw_sample(const Eigen::Vector3d& psi, double kappa, RngT& rng) {
    dsw_check_unit(psi, "axis");
    if (!(kappa >= 0.0)) throw numeric_error("watson: kappa must be >= 0");
    double t;
    if (kappa < 1e-8) {
        t = 2.0 * rng.uniform() - 1.0;
    } else {
        double scale = -std::expm1(-kappa); // 1 - e^-kappa
        for (;;) {
            double s = -std::log1p(-rng.uniform() * scale) / kappa;
            if (std::log(1.0 - rng.uniform()) < kappa * s * (s - 1.0)) {
                t = 1.0 - s;
                break;
            }
        }
        if (rng.uniform() < 0.5) t = -t;
    }
    // orthonormal frame around psi; pick the helper axis least aligned with it
    int a = 0;
    if (std::abs(psi[1]) < std::abs(psi[a])) a = 1;
    if (std::abs(psi[2]) < std::abs(psi[a])) a = 2;
    Eigen::Vector3d e1 = Eigen::Vector3d::Unit(a).cross(psi).normalized();
    Eigen::Vector3d e2 = psi.cross(e1);
    double xi = 2.0 * M_PI * rng.uniform();
    double r = std::sqrt(std::max(0.0, 1.0 - t * t));
    return (t * psi + r * (std::cos(xi) * e1 + std::sin(xi) * e2)).normalized();
}

// Axes are identified with their negation; fix the sign so the first
// nonzero component is positive. Shared by tensor eigenvectors and Watson
// axes so comparisons are well defined.
inline Eigen::Vector3d canonical_axis(Eigen::Vector3d v) {
    for (int i = 0; i < 3; ++i) {
        if (v[i] > 0.0) break;
        if (v[i] < 0.0) {
            v = -v;
            break;
        }
    }
    return v;
}

} // namespace jseg
