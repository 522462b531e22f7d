#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "jseg/grid.hpp"
#include "jseg/interp.hpp"

namespace jseg {

// Robust [0,1] rescaling between the 1st and 99th intensity percentiles.
inline VolumeD robust_scale(const VolumeD& img, std::size_t channel = 0) {
    std::vector<double> vals(img.grid.size());
    for (std::size_t v = 0; v < vals.size(); ++v) vals[v] = img.at(v, channel);
    std::vector<double> sorted = vals;
    auto pct = [&](double q) {
        std::size_t k = std::size_t(q * double(sorted.size() - 1));
        std::nth_element(sorted.begin(), sorted.begin() + k, sorted.end());
        return sorted[k];
    };
    double lo = pct(0.01), hi = pct(0.99);
    if (!(hi > lo)) throw data_error("intensity scaling: image is constant");
    VolumeD out(img.grid, 1);
    for (std::size_t v = 0; v < vals.size(); ++v)
        out.data[v] = std::clamp((vals[v] - lo) / (hi - lo), 0.0, 1.0);
    return out;
}

// Mutual information between a fixed image and a moving image warped by the
// world-to-world transform T (fixed world -> moving world). Intensities must
// already be in [0,1]; histogram weights spread linearly over the two
// adjacent bins. Samples mapping outside the moving volume pair the fixed
// intensity with a reserved extra column instead of being dropped, so a
// transform cannot raise its score by shrinking the overlap. Throws when no
// sample lands inside at all.
inline double mutual_information(const VolumeD& fixed, const VolumeD& moving, const Mat4& T,
                                 int bins = 32) {
    const int cols = bins + 1; // last column collects out-of-volume samples
    std::vector<double> joint(std::size_t(bins) * std::size_t(cols), 0.0);
    Mat3 lin = moving.grid.affine.topLeftCorner<3, 3>().inverse() * T.topLeftCorner<3, 3>() *
               fixed.grid.affine.topLeftCorner<3, 3>();
    Vec3 off = moving.grid.affine.topLeftCorner<3, 3>().inverse() *
               (T.topLeftCorner<3, 3>() * fixed.grid.affine.topRightCorner<3, 1>() +
                T.topRightCorner<3, 1>() - moving.grid.affine.topRightCorner<3, 1>());
    double inside_count = 0.0;
    for (std::size_t idx = 0; idx < fixed.grid.size(); ++idx) {
        auto [i, j, k] = fixed.grid.coords(idx);
        Vec3 p = lin * Vec3(double(i), double(j), double(k)) + off;
        bool inside = true;
        for (int a = 0; a < 3; ++a)
            if (p[a] < 0.0 || p[a] > double(moving.grid.dims[a] - 1)) inside = false;
        double fb = std::clamp(fixed.data[idx], 0.0, 1.0) * (bins - 1);
        int f0 = std::min(int(fb), bins - 2);
        double ff = fb - f0;
        if (!inside) {
            joint[std::size_t(f0) * cols + bins] += 1 - ff;
            joint[std::size_t(f0 + 1) * cols + bins] += ff;
            continue;
        }
        double mb = std::clamp(trilinear_sample(moving, p), 0.0, 1.0) * (bins - 1);
        int m0 = std::min(int(mb), bins - 2);
        double mf = mb - m0;
        joint[std::size_t(f0) * cols + m0] += (1 - ff) * (1 - mf);
        joint[std::size_t(f0) * cols + m0 + 1] += (1 - ff) * mf;
        joint[std::size_t(f0 + 1) * cols + m0] += ff * (1 - mf);
        joint[std::size_t(f0 + 1) * cols + m0 + 1] += ff * mf;
        inside_count += 1.0;
    }
    if (inside_count == 0.0) throw data_error("mutual information: no overlap between the images");
    const double count = double(fixed.grid.size());
    std::vector<double> pf(bins, 0.0), pm(std::size_t(cols), 0.0);
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < cols; ++b) {
            double p = joint[std::size_t(a) * cols + b] / count;
            pf[a] += p;
            pm[b] += p;
        }
    double mi = 0.0;
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < cols; ++b) {
            double p = joint[std::size_t(a) * cols + b] / count;
            if (p > 0.0) mi += p * std::log(p / (pf[a] * pm[b]));
        }
    return mi;
}

// 2x block-average downsampling; new voxel centres sit at old coordinates
// 2i + 0.5, which the adjusted affine records.
inline VolumeD downsample2(const VolumeD& img) {
    GridSpec g;
    for (int a = 0; a < 3; ++a) g.dims[a] = (img.grid.dims[a] + 1) / 2;
    Mat4 scale = Mat4::Identity();
    scale(0, 0) = scale(1, 1) = scale(2, 2) = 2.0;
    scale(0, 3) = scale(1, 3) = scale(2, 3) = 0.5;
    g.affine = img.grid.affine * scale;
    VolumeD out(g, img.channels);
    for (std::size_t k = 0; k < g.dims[2]; ++k)
        for (std::size_t j = 0; j < g.dims[1]; ++j)
            for (std::size_t i = 0; i < g.dims[0]; ++i)
                for (std::size_t c = 0; c < img.channels; ++c) {
                    double sum = 0.0;
                    int n = 0;
                    for (int dk = 0; dk < 2; ++dk)
                        for (int dj = 0; dj < 2; ++dj)
                            for (int di = 0; di < 2; ++di) {
                                std::size_t ii = 2 * i + di, jj = 2 * j + dj, kk = 2 * k + dk;
                                if (ii >= img.grid.dims[0] || jj >= img.grid.dims[1] ||
                                    kk >= img.grid.dims[2])
                                    continue;
                                sum += img.at(ii, jj, kk, c);
                                ++n;
                            }
                    out.at(i, j, k, c) = sum / double(n);
                }
    return out;
}

// 12-parameter affine: translation (mm), rotation (rad, Rz Ry Rx), log
// scales, shears. Rotation and scaling act about the two volume centres so
// the parameters stay well conditioned.
struct AffineParams {
    Eigen::Matrix<double, 12, 1> p = Eigen::Matrix<double, 12, 1>::Zero();

    Mat4 to_matrix(const Vec3& c_fixed, const Vec3& c_moving) const {
        double rx = p[3], ry = p[4], rz = p[5];
        Mat3 Rx, Ry, Rz;
        Rx << 1, 0, 0, 0, std::cos(rx), -std::sin(rx), 0, std::sin(rx), std::cos(rx);
        Ry << std::cos(ry), 0, std::sin(ry), 0, 1, 0, -std::sin(ry), 0, std::cos(ry);
        Rz << std::cos(rz), -std::sin(rz), 0, std::sin(rz), std::cos(rz), 0, 0, 0, 1;
        Mat3 Sh = Mat3::Identity();
        Sh(0, 1) = p[9];
        Sh(0, 2) = p[10];
        Sh(1, 2) = p[11];
        Mat3 S = Vec3(std::exp(p[6]), std::exp(p[7]), std::exp(p[8])).asDiagonal();
        Mat3 lin = Rz * Ry * Rx * Sh * S;
        Mat4 out = Mat4::Identity();
        out.topLeftCorner<3, 3>() = lin;
        out.topRightCorner<3, 1>() = c_moving + Vec3(p[0], p[1], p[2]) - lin * c_fixed;
        return out;
    }
};

inline Vec3 volume_center_world(const GridSpec& g) {
    Vec3 c;
    for (int a = 0; a < 3; ++a) c[a] = 0.5 * double(g.dims[a] - 1);
    return g.voxel_to_world(c);
}

struct RegisterOptions {
    int dof = 12;     // 6 rigid, 9 +scale, 12 +shear
    int levels = 3;   // multiresolution pyramid depth
    int bins = 32;
    double min_step_mm = 0.125;
    double min_step_rad = 0.125 * M_PI / 180.0;
    double min_step_unit = 0.002; // log-scale and shear
};

// Greedy coordinate search over the affine parameters, maximizing MI on a
// coarse-to-fine pyramid. Deterministic; no gradients needed.
inline Mat4 register_affine_mi(const VolumeD& fixed_raw, const VolumeD& moving_raw,
                               const RegisterOptions& opts = {}) {
    if (opts.dof != 6 && opts.dof != 9 && opts.dof != 12)
        throw config_error("registration: dof must be 6, 9 or 12");
    std::vector<VolumeD> fpyr{robust_scale(fixed_raw)}, mpyr{robust_scale(moving_raw)};
    for (int l = 1; l < opts.levels; ++l) {
        const VolumeD& pf = fpyr.back();
        if (*std::min_element(pf.grid.dims.begin(), pf.grid.dims.end()) < 16) break;
        fpyr.push_back(downsample2(fpyr.back()));
        mpyr.push_back(downsample2(mpyr.back()));
    }

    Vec3 c_fixed = volume_center_world(fixed_raw.grid);
    Vec3 c_moving = volume_center_world(moving_raw.grid);
    AffineParams params;

    for (int level = int(fpyr.size()) - 1; level >= 0; --level) {
        const VolumeD& f = fpyr[std::size_t(level)];
        const VolumeD& m = mpyr[std::size_t(level)];
        double mult = double(1 << level);
        double step_mm = 4.0 * mult / double(1 << (int(fpyr.size()) - 1));
        step_mm = std::max(step_mm, 2.0 * opts.min_step_mm);
        double step_rad = step_mm * M_PI / 180.0; // degrees track millimetres
        double step_unit = step_mm * 0.01;

        auto step_of = [&](int i) {
            if (i < 3) return step_mm;
            if (i < 6) return step_rad;
            return step_unit;
        };
        auto min_of = [&](int i) {
            if (i < 3) return opts.min_step_mm;
            if (i < 6) return opts.min_step_rad;
            return opts.min_step_unit;
        };
        double best = mutual_information(f, m, params.to_matrix(c_fixed, c_moving), opts.bins);
        for (;;) {
            bool any_improvement = false;
            for (int i = 0; i < opts.dof; ++i) {
                for (double sign : {1.0, -1.0}) {
                    for (;;) {
                        AffineParams trial = params;
                        trial.p[i] += sign * step_of(i);
                        double mi = mutual_information(f, m, trial.to_matrix(c_fixed, c_moving),
                                                       opts.bins);
                        if (mi > best + 1e-12) {
                            params = trial;
                            best = mi;
                            any_improvement = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if (!any_improvement) {
                step_mm *= 0.5;
                step_rad *= 0.5;
                step_unit *= 0.5;
                bool done = true;
                for (int i = 0; i < opts.dof; ++i)
                    if (step_of(i) >= min_of(i)) done = false;
                if (done) break;
            }
        }
    }
    return params.to_matrix(c_fixed, c_moving);
}

} // namespace jseg
