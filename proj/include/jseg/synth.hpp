#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jseg/atlas.hpp"
#include "jseg/dti.hpp"
#include "jseg/gaussian.hpp"
#include "jseg/grid.hpp"
#include "jseg/rng.hpp"
#include "jseg/watson.hpp"

namespace jseg {

struct SynthClassSpec {
    std::string name;
    bool background = false;
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    double alpha = 1.0, beta = 1.0;
    Vec3 psi = Vec3::UnitZ();
    double kappa = 10.0;
};

struct SynthOptions {
    uint64_t seed = 1;
    std::array<std::size_t, 3> dims{32, 32, 32};
    double resolution_mm = 1.0;
    double deform_amp_mm = 1.0;      // ground-truth warp amplitude, 0 disables
    double deform_spacing_vox = 8.0; // control spacing of the ground-truth warp
};

// A complete synthetic subject: the atlas that generated it, the true warp,
// labels, and per-voxel observations drawn from the generative model.
struct SynthScene {
    ProbAtlas atlas;
    VolumeD template_img; // atlas-frame intensity template
    std::vector<SynthClassSpec> classes;
    GridSpec grid;          // working/subject grid (same frame as the atlas here)
    ControlGrid true_disp;  // ground-truth displacements
    VolumeD prior_true;     // warped prior the labels were drawn from
    Volume<int16_t> labels;
    VolumeD s_img, fa_img, dir_img;
};

// Three separated blobs over a flat background. Appearance parameters are
// far apart so posterior quality is limited by geometry, not noise.
inline std::vector<SynthClassSpec> default_synth_classes() {
    auto gauss1 = [](double mu, double sd) {
        SynthClassSpec s;
        s.mu = Eigen::VectorXd::Constant(1, mu);
        s.sigma = Eigen::MatrixXd::Constant(1, 1, sd * sd);
        return s;
    };
    std::vector<SynthClassSpec> cls(4);
    cls[0] = gauss1(30.0, 8.0);
    cls[0].name = "background";
    cls[0].background = true;
    cls[0].alpha = 1.6;
    cls[0].beta = 8.0;
    cls[0].psi = Vec3::UnitZ();
    cls[0].kappa = 3.0;

    cls[1] = gauss1(90.0, 9.0);
    cls[1].name = "ventral";
    cls[1].alpha = 6.0;
    cls[1].beta = 3.0;
    cls[1].psi = Vec3::UnitX();
    cls[1].kappa = 25.0;

    cls[2] = gauss1(145.0, 9.0);
    cls[2].name = "dorsal";
    cls[2].alpha = 8.0;
    cls[2].beta = 2.5;
    cls[2].psi = Vec3::UnitZ();
    cls[2].kappa = 30.0;

    cls[3] = gauss1(200.0, 10.0);
    cls[3].name = "medial";
    cls[3].alpha = 4.5;
    cls[3].beta = 4.5;
    cls[3].psi = Vec3(1.0, 1.0, 0.0).normalized();
    cls[3].kappa = 18.0;
    return cls;
}

inline ProbAtlas make_default_atlas(const GridSpec& grid, const std::vector<SynthClassSpec>& cls) {
    struct Blob {
        Vec3 center;
        double sigma;
    };
    const Blob blobs[3] = {
        {Vec3(10.5, 16.0, 12.5), 5.0},
        {Vec3(21.5, 11.0, 16.5), 4.6},
        {Vec3(16.0, 21.5, 20.0), 4.8},
    };
    // Smooth Gaussian supports, strictly positive everywhere like a real
    // population atlas; misalignment then degrades the prior gracefully
    // instead of vetoing the appearance evidence outright.
    ProbAtlas atlas;
    atlas.vol = VolumeD(grid, cls.size());
    for (const auto& c : cls) {
        atlas.names.push_back(c.name);
        atlas.background.push_back(c.background);
    }
    Vec3 scale(double(grid.dims[0]) / 32.0, double(grid.dims[1]) / 32.0, double(grid.dims[2]) / 32.0);
    for (std::size_t idx = 0; idx < grid.size(); ++idx) {
        auto [i, j, k] = grid.coords(idx);
        Vec3 p{double(i), double(j), double(k)};
        double raw[3];
        for (int b = 0; b < 3; ++b) {
            Vec3 c = blobs[b].center.cwiseProduct(scale);
            double sg = blobs[b].sigma * std::cbrt(scale[0] * scale[1] * scale[2]);
            double r2 = (p - c).squaredNorm() / (sg * sg);
            raw[b] = 0.96 * std::exp(-0.5 * r2);
        }
        double fg = raw[0] + raw[1] + raw[2];
        double bg = std::max(0.04, 1.0 - fg);
        double total = bg + fg;
        atlas.vol.at(idx, 0) = bg / total;
        for (int b = 0; b < 3; ++b) atlas.vol.at(idx, std::size_t(b) + 1) = raw[b] / total;
    }
    atlas.validate();
    return atlas;
}

// Intensity template in the atlas frame: prior-weighted class means. Used as
// the registration target.
inline VolumeD make_template(const ProbAtlas& atlas, const std::vector<SynthClassSpec>& cls) {
    VolumeD tmpl(atlas.vol.grid, 1);
    for (std::size_t idx = 0; idx < tmpl.grid.size(); ++idx) {
        double v = 0.0;
        for (std::size_t c = 0; c < cls.size(); ++c) v += atlas.vol.at(idx, c) * cls[c].mu[0];
        tmpl.data[idx] = v;
    }
    return tmpl;
}

inline SynthScene make_synth_scene(const SynthOptions& opts,
                                   std::vector<SynthClassSpec> cls = default_synth_classes()) {
    SynthScene sc;
    sc.classes = std::move(cls);
    const std::size_t C = sc.classes.size();
    sc.grid.dims = opts.dims;
    sc.grid.affine = Mat4::Identity();
    sc.grid.affine(0, 0) = sc.grid.affine(1, 1) = sc.grid.affine(2, 2) = opts.resolution_mm;
    sc.atlas = make_default_atlas(sc.grid, sc.classes);
    sc.template_img = make_template(sc.atlas, sc.classes);

    // ground-truth warp: independent normal control displacements
    sc.true_disp = make_control_grid(sc.grid, opts.deform_spacing_vox);
    if (opts.deform_amp_mm > 0.0) {
        for (std::size_t p = 0; p < sc.true_disp.size(); ++p) {
            Rng rng(opts.seed ^ 0x5eedc0de5eedc0deull, p);
            for (int m = 0; m < 3; ++m)
                sc.true_disp.disp[3 * p + m] = opts.deform_amp_mm * rng.normal();
        }
    }

    AtlasWarp warp;
    warp.working = sc.grid;
    warp.affine_init = Mat4::Identity();
    warp.ctrl = sc.true_disp;
    warp.set_atlas_grid(sc.atlas.vol.grid);

    sc.prior_true = VolumeD(sc.grid, C);
    sc.labels = Volume<int16_t>(sc.grid, 1);
    sc.s_img = VolumeD(sc.grid, sc.classes[0].mu.size());
    sc.fa_img = VolumeD(sc.grid, 1);
    sc.dir_img = VolumeD(sc.grid, 3);

    std::vector<Eigen::MatrixXd> chol(C);
    for (std::size_t c = 0; c < C; ++c) {
        Eigen::LLT<Eigen::MatrixXd> llt(sc.classes[c].sigma);
        if (llt.info() != Eigen::Success) throw numeric_error("synthetic class covariance not SPD");
        chol[c] = llt.matrixL();
    }

    std::vector<double> row(C);
    std::size_t n_bg = 0;
    for (std::size_t c = 0; c < C; ++c)
        if (sc.atlas.background[c]) ++n_bg;

    for (std::size_t idx = 0; idx < sc.grid.size(); ++idx) {
        Vec3 pos = warp.map_voxel(idx, sc.true_disp.disp.data());
        sample_prior_point(sc.atlas.vol, pos, row.data());
        double raw = 0.0;
        for (std::size_t c = 0; c < C; ++c) raw += row[c];
        if (raw == 0.0 && n_bg > 0) {
            // warped outside the atlas: nothing out there but background
            for (std::size_t c = 0; c < C; ++c)
                row[c] = sc.atlas.background[c] ? 1.0 / double(n_bg) : 0.0;
        } else {
            floor_and_normalize(row.data(), C, sc.atlas.background);
        }
        for (std::size_t c = 0; c < C; ++c) sc.prior_true.at(idx, c) = row[c];

        Rng rng(opts.seed, idx); // one stream per voxel: order independent
        double u = rng.uniform();
        std::size_t l = 0;
        double acc = row[0];
        while (l + 1 < C && u > acc) acc += row[++l];
        sc.labels.data[idx] = int16_t(l);

        const SynthClassSpec& k = sc.classes[l];
        Eigen::VectorXd z(k.mu.size());
        for (Eigen::Index q = 0; q < z.size(); ++q) z[q] = rng.normal();
        Eigen::VectorXd s = k.mu + chol[l] * z;
        for (Eigen::Index q = 0; q < s.size(); ++q) sc.s_img.at(idx, std::size_t(q)) = s[q];

        double f = std::clamp(rng.beta(k.alpha, k.beta), 1e-6, 1.0 - 1e-6);
        sc.fa_img.data[idx] = f;
        Vec3 phi = canonical_axis(dsw_sample(k.psi, f * k.kappa, rng));
        for (int q = 0; q < 3; ++q) sc.dir_img.at(idx, std::size_t(q)) = phi[q];
    }
    return sc;
}

// Axially symmetric tensor with a prescribed FA and principal axis; the
// radial/axial ratio solves FA^2 = (1-r)^2 / (1+2r^2).
inline Eigen::Matrix3d tensor_from_fa_dir(double fa, const Vec3& dir, double mean_diff = 7e-4) {
    fa = std::clamp(fa, 0.0, 1.0 - 1e-9);
    double f2 = fa * fa;
    double a = 1.0 - 2.0 * f2;
    double r;
    if (std::abs(a) < 1e-12)
        r = (1.0 - f2) / 2.0;
    else
        r = (1.0 - std::sqrt(std::max(0.0, 1.0 - a * (1.0 - f2)))) / a;
    // trace = lam1 (1 + 2r) = 3 * mean_diff
    double lam1 = 3.0 * mean_diff / (1.0 + 2.0 * r);
    double lam2 = r * lam1;
    return lam2 * Eigen::Matrix3d::Identity() + (lam1 - lam2) * dir * dir.transpose();
}

// Noiseless diffusion signals from per-voxel FA and direction.
inline VolumeD synth_dwi(const VolumeD& fa_img, const VolumeD& dir_img, const DtiProtocol& p,
                         double s0 = 1000.0) {
    VolumeD dwi(fa_img.grid, p.size());
    for (std::size_t idx = 0; idx < fa_img.grid.size(); ++idx) {
        Vec3 dir(dir_img.at(idx, 0), dir_img.at(idx, 1), dir_img.at(idx, 2));
        if (dir.norm() < 0.5) dir = Vec3::UnitZ();
        Eigen::Matrix3d d = tensor_from_fa_dir(fa_img.data[idx], dir.normalized());
        for (std::size_t q = 0; q < p.size(); ++q) {
            double att = p.bvals[q] * p.bvecs[q].dot(d * p.bvecs[q]);
            dwi.at(idx, q) = s0 * std::exp(-att);
        }
    }
    return dwi;
}

} // namespace jseg
