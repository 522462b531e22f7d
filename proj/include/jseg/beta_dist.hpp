#pragma once

#include <algorithm>
#include <cmath>

#include "jseg/special.hpp"

namespace jseg {

struct BetaEval {
    double a, b, log_norm; // log_norm = -log B(a,b)

    double logpdf(double f) const {
        if (!(f > 0.0) || !(f < 1.0)) throw numeric_error("beta: argument outside (0,1)");
        return (a - 1.0) * std::log(f) + (b - 1.0) * std::log1p(-f) + log_norm;
    }
};

inline BetaEval make_beta_eval(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) throw numeric_error("beta: shape parameters must be positive");
    return {a, b, -log_beta_fn(a, b)};
}

inline double beta_logpdf(double f, double a, double b) {
    return make_beta_eval(a, b).logpdf(f);
}

// Method-of-moments fit from a weighted mean and variance. A variance at or
// above m(1-m) has no Beta solution; the common factor is floored instead,
// giving a near-uniform starting point.
inline void beta_mom(double mean, double var, double& a, double& b) {
    mean = std::clamp(mean, 1e-6, 1.0 - 1e-6);
    double common = mean * (1.0 - mean) / std::max(var, 1e-12) - 1.0;
    common = std::max(common, 2e-3);
    a = mean * common;
    b = (1.0 - mean) * common;
}

} // namespace jseg
