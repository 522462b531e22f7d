#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "jseg/common.hpp"

namespace jseg {

// Precomputed multivariate normal evaluator. Construction factorizes once;
// logpdf is then allocation-free and safe to call concurrently.
struct GaussianEval {
    Eigen::VectorXd mu;
    Eigen::MatrixXd inv;
    double log_norm; // -d/2 log(2 pi) - 1/2 log|Sigma|

    double logpdf(const Eigen::VectorXd& x) const {
        Eigen::VectorXd d = x - mu;
        return log_norm - 0.5 * d.dot(inv * d);
    }
};

inline GaussianEval make_gaussian_eval(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
    if (sigma.rows() != sigma.cols() || sigma.rows() != mu.size())
        throw numeric_error("gaussian: dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw numeric_error("gaussian: covariance is not positive definite");
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < sigma.rows(); ++i)
        log_det += 2.0 * std::log(llt.matrixL()(i, i));
    GaussianEval ev;
    ev.mu = mu;
    ev.inv = llt.solve(Eigen::MatrixXd::Identity(sigma.rows(), sigma.cols()));
    ev.log_norm = -0.5 * double(mu.size()) * std::log(2.0 * M_PI) - 0.5 * log_det;
    return ev;
}

inline double gaussian_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mu,
                              const Eigen::MatrixXd& sigma) {
    return make_gaussian_eval(mu, sigma).logpdf(x);
}

template <class RngT>
Eigen::VectorXd gaussian_sample(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, RngT& rng) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw numeric_error("gaussian: covariance is not positive definite");
    Eigen::VectorXd z(mu.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    return mu + llt.matrixL() * z;
}

} // namespace jseg
