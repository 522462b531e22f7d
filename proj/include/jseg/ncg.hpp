#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "jseg/common.hpp"

namespace jseg {

struct NcgOptions {
    int max_iter = 100;
    double grad_tol = 1e-6; // on |g|_inf relative to 1 + |f|
    double armijo_c1 = 1e-4;
    int max_backtracks = 50;
};

struct NcgResult {
    Eigen::VectorXd x;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace; // accepted objective values, x0 first
};

// Polak-Ribiere+ nonlinear conjugate gradient with Armijo backtracking.
// Box constraints are handled by projection; whenever a step lands on a
// bound the direction is reset to steepest descent. Pass empty bound
// vectors for an unconstrained problem. fn(x, grad) returns the value and
// fills grad.
template <class F>
NcgResult minimize_cg(F&& fn, const Eigen::VectorXd& x0,
                      const Eigen::VectorXd& lower = Eigen::VectorXd(),
                      const Eigen::VectorXd& upper = Eigen::VectorXd(),
                      const NcgOptions& opts = {}) {
    const Eigen::Index n = x0.size();
    const bool has_lo = lower.size() > 0, has_hi = upper.size() > 0;
    if ((has_lo && lower.size() != n) || (has_hi && upper.size() != n))
        throw numeric_error("minimize_cg: bound size mismatch");

    auto project = [&](Eigen::VectorXd& x) {
        if (has_lo) x = x.cwiseMax(lower);
        if (has_hi) x = x.cwiseMin(upper);
    };
    // zero gradient components that push against an active bound
    auto projected_grad = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& g) {
        Eigen::VectorXd pg = g;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (has_lo && x[i] <= lower[i] && g[i] > 0.0) pg[i] = 0.0;
            if (has_hi && x[i] >= upper[i] && g[i] < 0.0) pg[i] = 0.0;
        }
        return pg;
    };

    NcgResult res;
    res.x = x0;
    project(res.x);
    Eigen::VectorXd g(n), g_new(n);
    res.f = fn(res.x, g);
    if (!std::isfinite(res.f))
        throw numeric_error("minimize_cg: objective not finite at the starting point");
    res.trace.push_back(res.f);

    Eigen::VectorXd d = -projected_grad(res.x, g);
    bool is_steepest = true;
    double step = 1.0 / std::max(1.0, d.lpNorm<Eigen::Infinity>());

    for (res.iterations = 0; res.iterations < opts.max_iter; ++res.iterations) {
        Eigen::VectorXd pg = projected_grad(res.x, g);
        if (pg.lpNorm<Eigen::Infinity>() <= opts.grad_tol * (1.0 + std::abs(res.f))) {
            res.converged = true;
            break;
        }
        if (pg.dot(d) >= 0.0) { // not a descent direction
            d = -pg;
            is_steepest = true;
        }

        double alpha = step;
        double f_new = std::numeric_limits<double>::quiet_NaN();
        Eigen::VectorXd x_new;
        bool accepted = false, hit_bound = false;
        for (int bt = 0; bt < opts.max_backtracks; ++bt) {
            Eigen::VectorXd x_free = res.x + alpha * d;
            x_new = x_free;
            project(x_new);
            bool projected = (x_new.array() != x_free.array()).any();
            Eigen::VectorXd dx = x_new - res.x;
            double directional = g.dot(dx);
            if (directional >= 0.0) { // projection destroyed descent; shrink
                alpha *= 0.5;
                continue;
            }
            f_new = fn(x_new, g_new);
            if (std::isfinite(f_new) && f_new <= res.f + opts.armijo_c1 * directional) {
                accepted = true;
                hit_bound = projected;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            if (!is_steepest) { // retry once from steepest descent
                d = -pg;
                is_steepest = true;
                step = 1.0 / std::max(1.0, d.lpNorm<Eigen::Infinity>());
                continue;
            }
            break; // no further progress possible at this scale
        }

        // Polak-Ribiere+ update, reset after any bound contact
        double beta = 0.0;
        if (!hit_bound) {
            double denom = g.dot(g);
            if (denom > 0.0) beta = std::max(0.0, g_new.dot(g_new - g) / denom);
        }
        d = -g_new + beta * d;
        is_steepest = (beta == 0.0);
        step = 2.0 * alpha; // doubling retry of the last accepted step
        res.x = std::move(x_new);
        res.f = f_new;
        g = g_new;
        res.trace.push_back(res.f);
    }
    if (!res.converged) {
        Eigen::VectorXd pg = projected_grad(res.x, g);
        res.converged = pg.lpNorm<Eigen::Infinity>() <= opts.grad_tol * (1.0 + std::abs(res.f));
    }
    return res;
}

} // namespace jseg
