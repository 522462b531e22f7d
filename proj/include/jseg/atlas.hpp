#pragma once

#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "jseg/grid.hpp"
#include "jseg/interp.hpp"
#include "jseg/parallel.hpp"

namespace jseg {

inline constexpr double prior_floor = 1e-16;

// Per-class prior probability maps in the atlas frame plus class metadata.
struct ProbAtlas {
    VolumeD vol; // one channel per class
    std::vector<std::string> names;
    std::vector<bool> background;

    std::size_t classes() const { return vol.channels; }

    // Rows must be probabilities summing to ~1; small drift (float storage)
    // is renormalized, anything worse is rejected.
    void validate() {
        if (names.size() != vol.channels)
            throw data_error("atlas: class manifest does not match channel count");
        if (background.size() != vol.channels) background.assign(vol.channels, false);
        for (std::size_t v = 0; v < vol.grid.size(); ++v) {
            double sum = 0.0;
            for (std::size_t c = 0; c < vol.channels; ++c) {
                double p = vol.at(v, c);
                if (p < -1e-6 || p > 1.0 + 1e-3)
                    throw data_error("atlas: prior probability outside [0,1]");
                sum += std::max(p, 0.0);
            }
            if (std::abs(sum - 1.0) > 1e-3)
                throw data_error("atlas: prior probabilities do not sum to 1");
            for (std::size_t c = 0; c < vol.channels; ++c)
                vol.at(v, c) = std::max(double(vol.at(v, c)), 0.0) / sum;
        }
    }
};

// Manifest: one class per line, "name" optionally followed by the word
// "background". A class literally named "background" is marked implicitly.
inline void parse_class_manifest(std::istream& in, std::vector<std::string>& names,
                                 std::vector<bool>& background) {
    names.clear();
    background.clear();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string name, tag;
        if (!(ls >> name)) continue; // blank line
        if (name[0] == '#') continue;
        bool bg = (name == "background");
        if (ls >> tag) {
            if (tag == "background")
                bg = true;
            else
                throw data_error("atlas manifest line " + std::to_string(lineno) +
                                 ": unknown tag '" + tag + "'");
        }
        names.push_back(name);
        background.push_back(bg);
    }
    if (names.empty()) throw data_error("atlas manifest: no classes listed");
}

// Displacement control grid over the working volume. Control point p sits at
// working voxel coordinate (p-1)*spacing, one layer outside each face, so
// every voxel has a full set of eight surrounding control points.
// Displacements are in mm, applied in the atlas world frame.
struct ControlGrid {
    std::array<std::size_t, 3> dims{0, 0, 0};
    double spacing_vox = 0.0;
    Vec3 spacing_mm = Vec3::Zero();
    std::vector<double> disp; // 3 * size(), xyz per point

    std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return i + dims[0] * (j + dims[1] * k);
    }
};

inline ControlGrid make_control_grid(const GridSpec& working, double spacing_vox) {
    if (!(spacing_vox > 0.0)) throw config_error("control grid: spacing must be positive");
    ControlGrid cg;
    cg.spacing_vox = spacing_vox;
    Vec3 sp = working.spacing();
    for (int a = 0; a < 3; ++a) {
        cg.dims[a] = static_cast<std::size_t>(
                         std::ceil(double(working.dims[a] - 1) / spacing_vox)) + 3;
        cg.spacing_mm[a] = sp[a] * spacing_vox;
    }
    cg.disp.assign(3 * cg.size(), 0.0);
    return cg;
}

// Trilinear interpolation of the control displacements at a working voxel
// coordinate. disp may override the grid's own coefficients (the optimizer
// evaluates candidate fields without committing them).
inline Vec3 control_displacement(const ControlGrid& cg, const double* disp, const Vec3& voxel) {
    double u[3];
    long i0[3];
    double w[3][2];
    for (int a = 0; a < 3; ++a) {
        u[a] = voxel[a] / cg.spacing_vox + 1.0;
        long i = static_cast<long>(std::floor(u[a]));
        if (i < 0) i = 0;
        if (i > long(cg.dims[a]) - 2) i = long(cg.dims[a]) - 2;
        double f = u[a] - double(i);
        i0[a] = i;
        w[a][0] = 1.0 - f;
        w[a][1] = f;
    }
    Vec3 out = Vec3::Zero();
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                double b = w[0][di] * w[1][dj] * w[2][dk];
                if (b == 0.0) continue;
                std::size_t p = cg.index(i0[0] + di, i0[1] + dj, i0[2] + dk);
                out += b * Eigen::Map<const Vec3>(disp + 3 * p);
            }
    return out;
}

// Discrete bending energy: squared second differences of each displacement
// component, axial plus doubled mixed terms, scaled by the control cell
// volume. Zero for any affine field. Gradient is accumulated into grad
// (same layout as disp) when non-null.
inline double bending_energy(const ControlGrid& cg, const double* disp, double* grad = nullptr) {
    const auto& d = cg.dims;
    const Vec3& h = cg.spacing_mm;
    double cell = h[0] * h[1] * h[2];
    double total = 0.0;
    auto val = [&](std::size_t i, std::size_t j, std::size_t k, int m) {
        return disp[3 * cg.index(i, j, k) + m];
    };
    auto add = [&](std::size_t i, std::size_t j, std::size_t k, int m, double g) {
        if (grad) grad[3 * cg.index(i, j, k) + m] += g;
    };
    for (std::size_t k = 0; k < d[2]; ++k)
        for (std::size_t j = 0; j < d[1]; ++j)
            for (std::size_t i = 0; i < d[0]; ++i)
                for (int m = 0; m < 3; ++m) {
                    // axial terms, one per axis with both neighbours in range
                    if (i >= 1 && i + 1 < d[0]) {
                        double s = (val(i + 1, j, k, m) - 2 * val(i, j, k, m) + val(i - 1, j, k, m)) / (h[0] * h[0]);
                        total += cell * s * s;
                        double g = 2.0 * cell * s / (h[0] * h[0]);
                        add(i + 1, j, k, m, g);
                        add(i, j, k, m, -2 * g);
                        add(i - 1, j, k, m, g);
                    }
                    if (j >= 1 && j + 1 < d[1]) {
                        double s = (val(i, j + 1, k, m) - 2 * val(i, j, k, m) + val(i, j - 1, k, m)) / (h[1] * h[1]);
                        total += cell * s * s;
                        double g = 2.0 * cell * s / (h[1] * h[1]);
                        add(i, j + 1, k, m, g);
                        add(i, j, k, m, -2 * g);
                        add(i, j - 1, k, m, g);
                    }
                    if (k >= 1 && k + 1 < d[2]) {
                        double s = (val(i, j, k + 1, m) - 2 * val(i, j, k, m) + val(i, j, k - 1, m)) / (h[2] * h[2]);
                        total += cell * s * s;
                        double g = 2.0 * cell * s / (h[2] * h[2]);
                        add(i, j, k + 1, m, g);
                        add(i, j, k, m, -2 * g);
                        add(i, j, k - 1, m, g);
                    }
                    // mixed terms (weight 2), centred cross differences
                    auto mixed = [&](int a, int b) {
                        std::size_t p[3] = {i, j, k};
                        if (p[a] < 1 || p[a] + 1 >= d[a] || p[b] < 1 || p[b] + 1 >= d[b]) return;
                        auto at = [&](int da, int db) {
                            std::size_t q[3] = {i, j, k};
                            q[a] += da;
                            q[b] += db;
                            return val(q[0], q[1], q[2], m);
                        };
                        double denom = 4.0 * h[a] * h[b];
                        double s = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / denom;
                        total += 2.0 * cell * s * s;
                        if (grad) {
                            double g = 4.0 * cell * s / denom;
                            auto addq = [&](int da, int db, double gg) {
                                std::size_t q[3] = {i, j, k};
                                q[a] += da;
                                q[b] += db;
                                add(q[0], q[1], q[2], m, gg);
                            };
                            addq(1, 1, g);
                            addq(1, -1, -g);
                            addq(-1, 1, -g);
                            addq(-1, -1, g);
                        }
                    };
                    mixed(0, 1);
                    mixed(0, 2);
                    mixed(1, 2);
                }
    return total;
}

// The composed warp from working voxels into atlas voxel coordinates:
// world(v) through the initial affine, plus the control-grid displacement,
// then into the atlas index frame.
struct AtlasWarp {
    GridSpec working;
    Mat4 affine_init = Mat4::Identity(); // subject world -> atlas world
    ControlGrid ctrl;
    Mat3 atlas_R; // atlas world -> atlas voxel
    Vec3 atlas_t;

    void set_atlas_grid(const GridSpec& atlas_grid) {
        atlas_R = atlas_grid.affine.topLeftCorner<3, 3>().inverse();
        atlas_t = -atlas_R * atlas_grid.affine.topRightCorner<3, 1>();
    }

    Vec3 base_point(std::size_t voxel_idx) const {
        auto [i, j, k] = working.coords(voxel_idx);
        Vec3 w = working.voxel_to_world(Vec3(double(i), double(j), double(k)));
        return affine_init.topLeftCorner<3, 3>() * w + affine_init.topRightCorner<3, 1>();
    }

    // atlas voxel coordinate for a working voxel under displacement field d
    Vec3 map_voxel(std::size_t voxel_idx, const double* d) const {
        auto [i, j, k] = working.coords(voxel_idx);
        Vec3 u = control_displacement(ctrl, d, Vec3(double(i), double(j), double(k)));
        return atlas_R * (base_point(voxel_idx) + u) + atlas_t;
    }
};

// Sample all class priors (and optionally their gradients in atlas voxel
// coordinates) at one point. Zero fill outside the atlas; returns the raw
// probability row before flooring.
inline void sample_prior_point(const VolumeD& atlas, const Vec3& pos, double* p,
                               Vec3* grad_p = nullptr) {
    const std::size_t C = atlas.channels;
    TrilinearWeights tw = trilinear_weights(atlas.grid, pos);
    for (std::size_t c = 0; c < C; ++c) {
        p[c] = 0.0;
        if (grad_p) grad_p[c] = Vec3::Zero();
    }
    if (!tw.inside) return;
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                double wx = tw.wx[di], wy = tw.wy[dj], wz = tw.wz[dk];
                double b = wx * wy * wz;
                double sx = (di ? 1.0 : -1.0) * tw.wy[dj] * tw.wz[dk];
                double sy = (dj ? 1.0 : -1.0) * tw.wx[di] * tw.wz[dk];
                double sz = (dk ? 1.0 : -1.0) * tw.wx[di] * tw.wy[dj];
                if (b == 0.0 && !grad_p) continue;
                const double* corner = &atlas.data[atlas.channels *
                    atlas.grid.index(std::size_t(tw.i0 + di), std::size_t(tw.j0 + dj), std::size_t(tw.k0 + dk))];
                for (std::size_t c = 0; c < C; ++c) {
                    p[c] += b * corner[c];
                    if (grad_p) grad_p[c] += Vec3(sx, sy, sz) * corner[c];
                }
            }
}

// Floor and renormalize one prior row in place; returns the pre-floor sum of
// foreground probabilities (used for masking decisions).
inline double floor_and_normalize(double* p, std::size_t C, const std::vector<bool>& background) {
    double fg = 0.0;
    for (std::size_t c = 0; c < C; ++c)
        if (background.empty() || !background[c]) fg += p[c];
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        p[c] = std::max(p[c], prior_floor);
        total += p[c];
    }
    for (std::size_t c = 0; c < C; ++c) p[c] /= total;
    return fg;
}

// Registration objective: sum_v KL(w_v || q_v(disp)) + lambda * bending,
// where q is the floored, renormalized deformed prior at the masked voxels.
// Gradients flow through the prior interpolation, the floor, and the
// renormalization, so finite differences of this exact function match.
struct DeformObjective {
    const VolumeD* atlas = nullptr;
    Mat3 atlas_R;
    Vec3 atlas_t;
    const std::vector<Vec3>* base = nullptr;       // affine-mapped world point per masked voxel
    const std::vector<Vec3>* vox_coords = nullptr; // working voxel coordinate per masked voxel
    const std::vector<double>* W = nullptr;        // responsibilities, n_masked x C
    std::size_t C = 0;
    const ControlGrid* cg = nullptr;
    const std::vector<int32_t>* masked_of_full = nullptr; // full grid -> masked index or -1
    GridSpec working;
    double lambda = 0.05;
    int nthreads = 1;

    double operator()(const Eigen::VectorXd& disp, Eigen::VectorXd& grad) const {
        if (C > 64) throw numeric_error("deformation objective: class count above 64 unsupported");
        const std::size_t n = base->size();
        std::vector<Vec3> hbuf(n); // d(data term)/d(displacement) per voxel, world frame
        struct Acc {
            double v = 0.0;
        };
        Acc total = parallel_reduce<Acc>(
            n, nthreads,
            [&](Acc& acc, std::size_t v) {
                Vec3 u = control_displacement(*cg, disp.data(), (*vox_coords)[v]);
                Vec3 pos = atlas_R * ((*base)[v] + u) + atlas_t;
                constexpr std::size_t max_c = 64;
                double p[max_c];
                Vec3 gp[max_c];
                sample_prior_point(*atlas, pos, p, gp);
                double t = 0.0, sw = 0.0;
                double m[max_c];
                for (std::size_t c = 0; c < C; ++c) {
                    m[c] = std::max(p[c], prior_floor);
                    t += m[c];
                    sw += (*W)[v * C + c];
                }
                Vec3 gvox = Vec3::Zero();
                double val = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    double w = (*W)[v * C + c];
                    if (w > 0.0) val += w * (std::log(w) - std::log(m[c] / t));
                    if (p[c] > prior_floor) gvox += (sw / t - w / m[c]) * gp[c];
                }
                acc.v += val;
                hbuf[v] = atlas_R.transpose() * gvox;
            },
            [](Acc& a, const Acc& b) { a.v += b.v; });

        // gather per control point: exact adjoint of the hat-weight interpolation
        grad.setZero(disp.size());
        const auto& wd = working.dims;
        double h = cg->spacing_vox;
        parallel_for(cg->size(), nthreads, [&](std::size_t pidx) {
            std::size_t pi = pidx % cg->dims[0];
            std::size_t pj = (pidx / cg->dims[0]) % cg->dims[1];
            std::size_t pk = pidx / (cg->dims[0] * cg->dims[1]);
            double pc[3] = {double(pi), double(pj), double(pk)};
            long lo[3], hi[3];
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::max(0L, long(std::floor((pc[a] - 2.0) * h)) + 1);
                hi[a] = std::min(long(wd[a]) - 1, long(std::ceil(pc[a] * h)));
            }
            Vec3 g = Vec3::Zero();
            for (long k = lo[2]; k <= hi[2]; ++k) {
                double bz = 1.0 - std::abs(double(k) / h + 1.0 - pc[2]);
                if (bz <= 0.0) continue;
                for (long j = lo[1]; j <= hi[1]; ++j) {
                    double by = 1.0 - std::abs(double(j) / h + 1.0 - pc[1]);
                    if (by <= 0.0) continue;
                    for (long i = lo[0]; i <= hi[0]; ++i) {
                        double bx = 1.0 - std::abs(double(i) / h + 1.0 - pc[0]);
                        if (bx <= 0.0) continue;
                        int32_t mi = (*masked_of_full)[working.index(std::size_t(i), std::size_t(j), std::size_t(k))];
                        if (mi < 0) continue;
                        g += (bx * by * bz) * hbuf[std::size_t(mi)];
                    }
                }
            }
            grad.segment<3>(3 * pidx) = g;
        });

        std::vector<double> bend_grad(disp.size(), 0.0);
        double bend = bending_energy(*cg, disp.data(), bend_grad.data());
        for (Eigen::Index i = 0; i < grad.size(); ++i) grad[i] += lambda * bend_grad[i];
        return total.v + lambda * bend;
    }
};

} // namespace jseg
