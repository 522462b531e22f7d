#pragma once

#include <cmath>
#include <vector>

#include "jseg/common.hpp"

namespace jseg {

// Gauss-Legendre nodes/weights on [-1,1], computed once per order by Newton
// iteration on the Legendre recurrence (accurate to ~1e-15).
struct GaussLegendre {
    std::vector<double> x, w;

    explicit GaussLegendre(int n) : x(n), w(n) {
        for (int i = 0; i < (n + 1) / 2; ++i) {
            double xi = std::cos(M_PI * (i + 0.75) / (n + 0.5));
            double dp = 0.0;
            for (int it = 0; it < 100; ++it) {
                double p0 = 1.0, p1 = xi;
                for (int k = 2; k <= n; ++k) {
                    double p2 = ((2.0 * k - 1.0) * xi * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n * (xi * p1 - p0) / (xi * xi - 1.0);
                double dx = p1 / dp;
                xi -= dx;
                if (std::abs(dx) < 1e-15) break;
            }
            x[i] = -xi;
            x[n - 1 - i] = xi;
            w[i] = w[n - 1 - i] = 2.0 / ((1.0 - xi * xi) * dp * dp);
        }
    }

    static const GaussLegendre& order(int n) {
        static const GaussLegendre g64(64);
        static const GaussLegendre g128(128);
        if (n == 64) return g64;
        if (n == 128) return g128;
        throw numeric_error("GaussLegendre: unsupported order");
    }
};

inline constexpr double kummer_kappa_max = 5000.0;

// Z(k) = int_0^1 exp(k t^2) dt and its log-derivative. Written as
// Z = e^k * int_0^1 exp(-k s (2-s)) ds with s = 1-t; the integrand decays
// like exp(-2ks), so the domain is truncated at s_max = min(1, 40/k) before
// applying Gauss-Legendre. This keeps full relative accuracy at large k,
// where quadrature over all of [0,1] wastes every node on a dead region.
struct KummerResult {
    double log_z;  // log Z(k)
    double dlog_z; // d log Z / dk = E[t^2]
};

inline KummerResult kummer_log_z(double kappa, int nodes = 0) {
    if (!(kappa >= 0.0)) throw numeric_error("kummer_log_z: kappa must be >= 0");
    if (kappa > kummer_kappa_max) throw numeric_error("kummer_log_z: kappa exceeds supported maximum");
    if (kappa == 0.0) return {0.0, 1.0 / 3.0};
    if (nodes == 0) nodes = kappa > 200.0 ? 128 : 64;
    const GaussLegendre& gl = GaussLegendre::order(nodes);
    double s_max = std::min(1.0, 40.0 / kappa);
    double half = 0.5 * s_max;
    double i0 = 0.0, i2 = 0.0;
    for (int q = 0; q < nodes; ++q) {
        double s = half * (gl.x[q] + 1.0);
        double e = gl.w[q] * std::exp(-kappa * s * (2.0 - s));
        double t = 1.0 - s;
        i0 += e;
        i2 += e * t * t;
    }
    // the common factor half cancels in the ratio
    return {kappa + std::log(half * i0), i2 / i0};
}

inline double kummer_z(double kappa) {
    return std::exp(kummer_log_z(kappa).log_z);
}

// Cubic-Hermite table of log Z over xi = log1p(kappa), used in the hot
// loops where kappa*f is evaluated per voxel. The reported derivative is
// the derivative of the interpolant itself, so gradients and objective
// values seen by the optimizer are exactly consistent.
class KummerTable {
public:
    KummerTable() {
        xi_max_ = std::log1p(kummer_kappa_max);
        h_ = xi_max_ / intervals_;
        v_.resize(intervals_ + 1);
        d_.resize(intervals_ + 1);
        for (int i = 0; i <= intervals_; ++i) {
            double xi = i * h_;
            // expm1(log1p(max)) can land one ulp above the domain guard
            double kappa = std::min(std::expm1(xi), kummer_kappa_max);
            KummerResult r = kummer_log_z(kappa);
            v_[i] = r.log_z;
            d_[i] = r.dlog_z * (1.0 + kappa); // d logZ / d xi
        }
    }

    KummerResult operator()(double kappa) const {
        if (!(kappa >= 0.0)) throw numeric_error("KummerTable: kappa must be >= 0");
        if (kappa > kummer_kappa_max) throw numeric_error("KummerTable: kappa exceeds supported maximum");
        double xi = std::log1p(kappa);
        double u = xi / h_;
        int i = static_cast<int>(u);
        if (i >= intervals_) i = intervals_ - 1;
        double t = u - i;
        double v0 = v_[i], v1 = v_[i + 1];
        double m0 = d_[i] * h_, m1 = d_[i + 1] * h_;
        double t2 = t * t, t3 = t2 * t;
        double val = (2 * t3 - 3 * t2 + 1) * v0 + (t3 - 2 * t2 + t) * m0 +
                     (-2 * t3 + 3 * t2) * v1 + (t3 - t2) * m1;
        double dval = ((6 * t2 - 6 * t) * v0 + (3 * t2 - 4 * t + 1) * m0 +
                       (-6 * t2 + 6 * t) * v1 + (3 * t2 - 2 * t) * m1) / h_;
        return {val, dval / (1.0 + kappa)};
    }

    static const KummerTable& instance() {
        static const KummerTable table;
        return table;
    }

private:
    static constexpr int intervals_ = 4096;
    double xi_max_, h_;
    std::vector<double> v_, d_;
};

// Asymptotic series with upward recurrence below x = 8.
inline double digamma(double x) {
    if (!(x > 0.0)) throw numeric_error("digamma: argument must be positive");
    double acc = 0.0;
    while (x < 8.0) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    double inv = 1.0 / x, inv2 = inv * inv;
    double series = std::log(x) - 0.5 * inv -
                    inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))));
    return acc + series;
}

inline double log_beta_fn(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) throw numeric_error("log_beta_fn: arguments must be positive");
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

} // namespace jseg
