#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jseg/grid.hpp"
#include "jseg/interp.hpp"
#include "jseg/parallel.hpp"
#include "jseg/watson.hpp"

namespace jseg {

// Symmetric 3x3 tensors are stored as 6 channels: xx, yy, zz, xy, xz, yz.
inline Eigen::Matrix3d tensor_unpack(const double* t6) {
    Eigen::Matrix3d m;
    m << t6[0], t6[3], t6[4],
         t6[3], t6[1], t6[5],
         t6[4], t6[5], t6[2];
    return m;
}

inline void tensor_pack(const Eigen::Matrix3d& m, double* t6) {
    t6[0] = m(0, 0);
    t6[1] = m(1, 1);
    t6[2] = m(2, 2);
    t6[3] = m(0, 1);
    t6[4] = m(0, 2);
    t6[5] = m(1, 2);
}

inline constexpr double tensor_eig_floor = 1e-8;

// Matrix log with eigenvalues floored, so nearly singular fits stay inside
// the SPD cone instead of producing -inf.
inline Eigen::Matrix3d tensor_log(const Eigen::Matrix3d& d) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(d);
    Eigen::Vector3d lam = es.eigenvalues().cwiseMax(tensor_eig_floor).array().log();
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::Matrix3d tensor_exp(const Eigen::Matrix3d& l) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(l);
    Eigen::Vector3d lam = es.eigenvalues().array().exp();
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

struct TensorFeatures {
    double fa = 0.0;
    Eigen::Vector3d direction = Eigen::Vector3d::UnitX(); // canonical sign
};

inline TensorFeatures tensor_features(const Eigen::Matrix3d& d) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(d);
    Eigen::Vector3d lam = es.eigenvalues(); // ascending
    double mean = lam.mean();
    double num = (lam.array() - mean).square().sum();
    double den = lam.array().square().sum();
    TensorFeatures out;
    out.fa = den > 0.0 ? std::sqrt(std::min(1.0, 1.5 * num / den)) : 0.0;
    out.direction = canonical_axis(es.eigenvectors().col(2).normalized());
    return out;
}

// Acquisition description: one b-value and unit gradient direction per
// channel. b <= 1e-3 marks a baseline (b0) channel.
struct DtiProtocol {
    std::vector<double> bvals;
    std::vector<Eigen::Vector3d> bvecs;

    std::size_t size() const { return bvals.size(); }
    bool is_b0(std::size_t i) const { return bvals[i] <= 1e-3; }

    // design row for the compact tensor layout (xx yy zz xy xz yz)
    Eigen::Matrix<double, 6, 1> design_row(std::size_t i) const {
        const Eigen::Vector3d& g = bvecs[i];
        Eigen::Matrix<double, 6, 1> r;
        r << g.x() * g.x(), g.y() * g.y(), g.z() * g.z(),
             2.0 * g.x() * g.y(), 2.0 * g.x() * g.z(), 2.0 * g.y() * g.z();
        return -bvals[i] * r;
    }

    void validate() const {
        if (bvals.size() != bvecs.size())
            throw data_error("dti protocol: bval/bvec count mismatch");
        std::size_t nb0 = 0, ndwi = 0;
        Eigen::MatrixXd x(bvals.size(), 6);
        for (std::size_t i = 0; i < bvals.size(); ++i) {
            if (is_b0(i)) {
                ++nb0;
                continue;
            }
            if (std::abs(bvecs[i].norm() - 1.0) > 1e-3)
                throw data_error("dti protocol: gradient directions must be unit length");
            x.row(ndwi++) = design_row(i).transpose();
        }
        if (nb0 == 0) throw data_error("dti protocol: needs at least one b0 channel");
        if (ndwi < 6) throw data_error("dti protocol: needs at least six diffusion-weighted channels");
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(x.topRows(ndwi));
        if (svd.singularValues()(5) <= 1e-6 * svd.singularValues()(0))
            throw data_error("dti protocol: gradient directions are rank deficient");
    }
};

// FSL-convention gradient tables: bvals one row of N values, bvecs three
// rows (x, y, z) of N values each.
inline DtiProtocol read_protocol_fsl(const std::string& bval_path, const std::string& bvec_path) {
    auto read_rows = [](const std::string& path) {
        std::ifstream in(path);
        if (!in) throw data_error("cannot open " + path);
        std::vector<std::vector<double>> rows;
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::vector<double> row;
            double v;
            while (ls >> v) row.push_back(v);
            if (!ls.eof()) throw data_error(path + ": non-numeric token");
            if (!row.empty()) rows.push_back(std::move(row));
        }
        return rows;
    };

    auto bval_rows = read_rows(bval_path);
    if (bval_rows.size() != 1) throw data_error(bval_path + ": expected a single row of b-values");
    auto bvec_rows = read_rows(bvec_path);
    if (bvec_rows.size() != 3) throw data_error(bvec_path + ": expected three rows (x, y, z)");

    std::size_t n = bval_rows[0].size();
    for (int a = 0; a < 3; ++a)
        if (bvec_rows[a].size() != n)
            throw data_error(bvec_path + ": direction count does not match b-value count");

    DtiProtocol p;
    p.bvals = bval_rows[0];
    for (std::size_t i = 0; i < n; ++i)
        p.bvecs.emplace_back(bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]);
    p.validate();
    return p;
}

inline void write_protocol_fsl(const std::string& bval_path, const std::string& bvec_path,
                               const DtiProtocol& p) {
    std::ofstream bv(bval_path);
    if (!bv) throw data_error("cannot write " + bval_path);
    for (std::size_t i = 0; i < p.size(); ++i) bv << (i ? " " : "") << p.bvals[i];
    bv << "\n";
    std::ofstream gv(bvec_path);
    if (!gv) throw data_error("cannot write " + bvec_path);
    gv.precision(17);
    for (int a = 0; a < 3; ++a) {
        for (std::size_t i = 0; i < p.size(); ++i) gv << (i ? " " : "") << p.bvecs[i][a];
        gv << "\n";
    }
}

// Deterministic quasi-uniform directions (golden-angle spiral on the upper
// hemisphere), for synthetic acquisitions.
inline DtiProtocol make_protocol(std::size_t n_directions, double b = 1000.0, std::size_t n_b0 = 1) {
    DtiProtocol p;
    for (std::size_t i = 0; i < n_b0; ++i) {
        p.bvals.push_back(0.0);
        p.bvecs.push_back(Eigen::Vector3d::UnitZ());
    }
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < n_directions; ++i) {
        double z = (i + 0.5) / double(n_directions); // upper hemisphere
        double r = std::sqrt(1.0 - z * z);
        double th = golden * double(i);
        p.bvals.push_back(b);
        p.bvecs.emplace_back(r * std::cos(th), r * std::sin(th), z);
    }
    p.validate();
    return p;
}

// Two-pass weighted least squares on log signals; second-pass weights are
// the squared predicted signals. Returns false for voxels without usable
// signal (non-positive baseline), which callers treat as background.
inline bool fit_tensor_voxel(const double* signal, const DtiProtocol& p, Eigen::Matrix3d& out) {
    double s0 = 0.0;
    std::size_t nb0 = 0, ndwi = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p.is_b0(i)) {
            s0 += signal[i];
            ++nb0;
        } else {
            ++ndwi;
        }
    s0 /= double(nb0);
    if (!(s0 > 0.0)) return false;

    Eigen::MatrixXd x(ndwi, 6);
    Eigen::VectorXd y(ndwi);
    std::size_t r = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.is_b0(i)) continue;
        x.row(r) = p.design_row(i).transpose();
        y(r) = std::log(std::max(signal[i], 1e-6 * s0) / s0);
        ++r;
    }
    Eigen::Matrix<double, 6, 1> d = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    // reweight by predicted signal^2 and solve once more
    Eigen::VectorXd w = (2.0 * (x * d).array() + 2.0 * std::log(s0)).exp().matrix();
    Eigen::MatrixXd xw = w.asDiagonal() * x;
    d = (x.transpose() * xw).ldlt().solve(xw.transpose() * y);
    out = tensor_unpack(d.data());
    return true;
}

// Volume-level fit: dwi has one channel per protocol entry; output is a
// 6-channel tensor volume on the same grid.
inline VolumeD fit_dti(const VolumeD& dwi, const DtiProtocol& p, int nthreads = 1) {
    p.validate();
    if (dwi.channels != p.size())
        throw data_error("dti fit: channel count does not match protocol");
    VolumeD out(dwi.grid, 6);
    parallel_for(dwi.grid.size(), nthreads, [&](std::size_t v) {
        Eigen::Matrix3d d = Eigen::Matrix3d::Zero();
        if (fit_tensor_voxel(&dwi.data[v * dwi.channels], p, d))
            tensor_pack(d, &out.data[v * 6]);
    });
    return out;
}

inline VolumeD log_tensor_volume(const VolumeD& tensors, int nthreads = 1) {
    if (tensors.channels != 6) throw data_error("tensor volume must have 6 channels");
    VolumeD out(tensors.grid, 6);
    parallel_for(tensors.grid.size(), nthreads, [&](std::size_t v) {
        tensor_pack(tensor_log(tensor_unpack(&tensors.data[v * 6])), &out.data[v * 6]);
    });
    return out;
}

inline VolumeD exp_tensor_volume(const VolumeD& logs, int nthreads = 1) {
    if (logs.channels != 6) throw data_error("tensor volume must have 6 channels");
    VolumeD out(logs.grid, 6);
    parallel_for(logs.grid.size(), nthreads, [&](std::size_t v) {
        tensor_pack(tensor_exp(tensor_unpack(&logs.data[v * 6])), &out.data[v * 6]);
    });
    return out;
}

// Resampling goes through the log map so interpolated tensors stay SPD.
inline VolumeD resample_tensors_log_euclidean(const VolumeD& tensors, const GridSpec& dst,
                                              int nthreads = 1) {
    return exp_tensor_volume(resample(log_tensor_volume(tensors, nthreads), dst,
                                      boundary::clamp, nthreads),
                             nthreads);
}

} // namespace jseg
