#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jseg/atlas.hpp"
#include "jseg/beta_dist.hpp"
#include "jseg/ncg.hpp"
#include "jseg/special.hpp"
#include "jseg/watson.hpp"

namespace jseg {

struct ClassHyper {
    Eigen::VectorXd M; // hypermean; empty means flat prior on the mean
    double n = 0.0;    // scale (prior strength), in responsibility-mass units
};

struct ClassParams {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    double alpha = 1.0, beta = 1.0;
    Vec3 psi = Vec3::UnitZ();
    double kappa = 10.0;
};

// Parameter tying: classes mapping to the same group id share that
// parameter block. Defaults to one group per class.
struct Sharing {
    std::vector<int> gaussian, beta, watson;

    static Sharing identity(std::size_t C) {
        Sharing s;
        s.gaussian.resize(C);
        s.beta.resize(C);
        s.watson.resize(C);
        for (std::size_t c = 0; c < C; ++c) s.gaussian[c] = s.beta[c] = s.watson[c] = int(c);
        return s;
    }

    void validate(std::size_t C) const {
        for (const auto* v : {&gaussian, &beta, &watson}) {
            if (v->size() != C) throw config_error("sharing: need one group id per class");
            for (int g : *v)
                if (g < 0 || std::size_t(g) >= C)
                    throw config_error("sharing: group id out of range");
        }
    }
};

// Pooled sufficient statistics for one Beta-shape group.
struct BetaStats {
    double sw = 0.0, slogf = 0.0, slog1mf = 0.0, swf = 0.0, swf2 = 0.0;
};

// Negative pooled Beta log-likelihood in (alpha, beta), closed form in the
// sufficient statistics.
struct BetaObjective {
    BetaStats st;

    double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
        double a = x[0], b = x[1];
        double val = (a - 1.0) * st.slogf + (b - 1.0) * st.slog1mf - st.sw * log_beta_fn(a, b);
        double dab = digamma(a + b);
        grad.resize(2);
        grad[0] = -(st.slogf - st.sw * (digamma(a) - dab));
        grad[1] = -(st.slog1mf - st.sw * (digamma(b) - dab));
        return -val;
    }
};

// Negative concentration objective -(kappa * A - sum_v w_v log Z(f_v kappa))
// with A = sum_v w_v f_v (psi' phi_v)^2. Z comes from the shared table, so
// the gradient is the exact derivative of the evaluated function.
struct KappaObjective {
    const double* wplus = nullptr;
    const double* f = nullptr;
    std::size_t n = 0;
    double A = 0.0;
    const KummerTable* table = nullptr;
    int nthreads = 1;

    double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
        double kappa = x[0];
        struct S {
            double lz = 0.0, dlz = 0.0;
        };
        S s = parallel_reduce<S>(
            n, nthreads,
            [&](S& a, std::size_t v) {
                if (wplus[v] == 0.0) return;
                KummerResult r = (*table)(f[v] * kappa);
                a.lz += wplus[v] * r.log_z;
                a.dlz += wplus[v] * f[v] * r.dlog_z;
            },
            [](S& a, const S& b) {
                a.lz += b.lz;
                a.dlz += b.dlz;
            });
        grad.resize(1);
        grad[0] = -(A - s.dlz);
        return -(kappa * A - s.lz);
    }
};

struct GemOptions {
    int max_iter = 100;
    double rel_tol = 1e-6;        // on the relative bound change
    int deform_every = 5;         // deformation update period, in iterations
    double lambda = 0.05;         // bending-energy weight
    double kappa_init = 10.0;
    double kappa_max = kummer_kappa_max;
    double sigma_floor_factor = 1e-6; // times per-channel data variance
    int nthreads = 1;
    bool deterministic = true; // reductions are block-ordered either way; kept for the CLI contract
    bool update_deformation = true;
    NcgOptions param_opts;                             // Beta / kappa sub-optimizations
    NcgOptions deform_opts = NcgOptions{.max_iter = 20}; // registration sub-optimization
};

// Everything the engine needs, restricted to the masked working voxels.
struct GemData {
    GridSpec grid;
    std::vector<std::size_t> voxels;      // full-grid linear index per masked voxel
    std::vector<int32_t> masked_of_full;  // inverse map, -1 outside the mask
    std::size_t channels = 0;
    std::vector<double> s;                 // n x channels, row-major
    std::vector<double> f, logf, log1mf;   // clamped FA and cached logs
    std::vector<Vec3> phi;                 // unit axes
    const ProbAtlas* atlas = nullptr;
    AtlasWarp warp;
    std::vector<Vec3> base;       // affine-mapped world point per masked voxel
    std::vector<Vec3> vox_coords; // working voxel coordinate per masked voxel
    std::vector<double> prior, log_prior; // n x C, floored + renormalized
    std::vector<uint16_t> init_argmax;    // full grid, labels for voxels outside the mask
    std::vector<double> data_var;         // per-channel intensity variance over the mask

    std::size_t n() const { return voxels.size(); }
    std::size_t n_classes() const { return atlas->classes(); }
};

// Build GemData from co-registered working-grid volumes. The mask keeps the
// voxels whose initial deformed prior carries any foreground mass.
inline GemData make_gem_data(const VolumeD& s_img, const VolumeD& fa_img, const VolumeD& dir_img,
                             const ProbAtlas& atlas, const Mat4& affine_init,
                             double control_spacing_vox, int nthreads) {
    if (!fa_img.grid.same_geometry(s_img.grid) || !dir_img.grid.same_geometry(s_img.grid))
        throw data_error("engine inputs must share the working grid");
    if (fa_img.channels != 1 || dir_img.channels != 3)
        throw data_error("expected one FA channel and three direction channels");
    const std::size_t C = atlas.classes();
    if (C < 2 || C > 64) throw data_error("engine supports 2..64 classes");
    if (C > 65535) throw data_error("class count exceeds label range");

    GemData d;
    d.grid = s_img.grid;
    d.channels = s_img.channels;
    d.atlas = &atlas;
    d.warp.working = d.grid;
    d.warp.affine_init = affine_init;
    d.warp.ctrl = make_control_grid(d.grid, control_spacing_vox);
    d.warp.set_atlas_grid(atlas.vol.grid);

    const std::size_t nfull = d.grid.size();
    d.masked_of_full.assign(nfull, -1);
    d.init_argmax.assign(nfull, 0);

    // initial deformed prior (zero displacements) decides the mask
    std::vector<double> row(C);
    for (std::size_t idx = 0; idx < nfull; ++idx) {
        Vec3 pos = d.warp.map_voxel(idx, d.warp.ctrl.disp.data());
        sample_prior_point(atlas.vol, pos, row.data());
        double fg = floor_and_normalize(row.data(), C, atlas.background);
        std::size_t am = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (row[c] > row[am]) am = c;
        d.init_argmax[idx] = uint16_t(am);
        if (fg > 0.0) {
            d.masked_of_full[idx] = int32_t(d.voxels.size());
            d.voxels.push_back(idx);
            for (std::size_t c = 0; c < C; ++c) {
                d.prior.push_back(row[c]);
                d.log_prior.push_back(std::log(row[c]));
            }
        }
    }
    if (d.voxels.empty()) throw data_error("mask is empty: atlas has no foreground in the field of view");

    const std::size_t n = d.voxels.size();
    d.s.resize(n * d.channels);
    d.f.resize(n);
    d.logf.resize(n);
    d.log1mf.resize(n);
    d.phi.resize(n);
    d.base.resize(n);
    d.vox_coords.resize(n);
    parallel_for(n, nthreads, [&](std::size_t v) {
        std::size_t idx = d.voxels[v];
        for (std::size_t c = 0; c < d.channels; ++c) d.s[v * d.channels + c] = s_img.at(idx, c);
        double f = std::clamp(fa_img.at(idx), 1e-6, 1.0 - 1e-6);
        d.f[v] = f;
        d.logf[v] = std::log(f);
        d.log1mf[v] = std::log1p(-f);
        Vec3 dir(dir_img.at(idx, 0), dir_img.at(idx, 1), dir_img.at(idx, 2));
        double nrm = dir.norm();
        // a missing direction only occurs with FA ~ 0, where the axial term
        // is uniform anyway
        d.phi[v] = nrm > 0.5 ? Vec3(dir / nrm) : Vec3::UnitZ();
        auto [i, j, k] = d.grid.coords(idx);
        d.vox_coords[v] = Vec3(double(i), double(j), double(k));
        d.base[v] = d.warp.base_point(idx);
    });

    // per-channel variance over the mask, for the covariance floor
    d.data_var.assign(d.channels, 0.0);
    for (std::size_t c = 0; c < d.channels; ++c) {
        double mean = 0.0;
        for (std::size_t v = 0; v < n; ++v) mean += d.s[v * d.channels + c];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t v = 0; v < n; ++v) {
            double t = d.s[v * d.channels + c] - mean;
            var += t * t;
        }
        d.data_var[c] = var / double(n);
    }
    return d;
}

struct GemResult {
    std::vector<ClassParams> params;
    std::vector<double> bound_trace; // one entry per E step
    int iterations = 0;
    bool converged = false;
    std::vector<double> expected_voxels; // per class, sum of responsibilities
    Volume<int16_t> labels;              // full working grid
    std::vector<std::string> warnings;
};

class GemEngine {
public:
    GemEngine(GemData&& data, std::vector<ClassHyper> hyper, Sharing sharing, GemOptions opts)
        : d_(std::move(data)),
          hyper_(std::move(hyper)),
          sharing_(std::move(sharing)),
          opts_(opts),
          table_(KummerTable::instance()) {
        const std::size_t C = d_.n_classes();
        if (sharing_.gaussian.empty()) sharing_ = Sharing::identity(C);
        sharing_.validate(C);
        if (hyper_.empty()) hyper_.resize(C);
        if (hyper_.size() != C) throw config_error("hyperparameters: need one entry per class");
        for (auto& h : hyper_) {
            if (h.M.size() != 0 && std::size_t(h.M.size()) != d_.channels)
                throw config_error("hyperparameters: hypermean channel mismatch");
            if (h.n < 0.0) throw config_error("hyperparameters: scale must be >= 0");
            if (h.n > 0.0 && h.M.size() == 0)
                throw config_error("hyperparameters: positive scale needs a hypermean");
        }
        params_.assign(C, ClassParams{});
        for (auto& p : params_) {
            p.mu = Eigen::VectorXd::Zero(d_.channels);
            p.sigma = Eigen::MatrixXd::Identity(d_.channels, d_.channels);
            p.kappa = opts_.kappa_init;
        }
        sigma_floor_ = Eigen::VectorXd::Zero(d_.channels);
        for (std::size_t c = 0; c < d_.channels; ++c)
            sigma_floor_[c] = opts_.sigma_floor_factor * d_.data_var[c];
        w_ = d_.prior; // Algorithm init: responsibilities start at the deformed prior
    }

    const GemData& data() const { return d_; }
    const std::vector<double>& responsibilities() const { return w_; }
    const std::vector<ClassParams>& params() const { return params_; }
    std::vector<ClassParams>& params() { return params_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    // One full pass in Algorithm order. Returns the bound after the E step.
    double iterate(int it) {
        m_step_gaussian();
        m_step_beta(it == 1);
        m_step_psi();
        m_step_kappa();
        if (opts_.update_deformation && it % opts_.deform_every == 0) {
            m_step_deformation();
            refresh_prior();
        }
        return e_step();
    }

    GemResult run() {
        GemResult res;
        for (int it = 1; it <= opts_.max_iter; ++it) {
            double b = iterate(it);
            res.bound_trace.push_back(b);
            res.iterations = it;
            std::size_t k = res.bound_trace.size();
            if (k >= 2) {
                double prev = res.bound_trace[k - 2];
                if (std::abs(b - prev) <= opts_.rel_tol * std::abs(b)) {
                    res.converged = true;
                    break;
                }
            }
        }
        res.params = params_;
        res.expected_voxels = expected_voxels();
        res.labels = hard_segmentation();
        res.warnings = warnings_;
        return res;
    }

    // E step: responsibilities from the current parameters, plus the bound
    // (objective) value, which at the fresh responsibilities equals
    // log-likelihood + parameter priors.
    double e_step() {
        const std::size_t n = d_.n(), C = d_.n_classes();
        struct ClassEval {
            Eigen::MatrixXd inv;
            Eigen::VectorXd mu;
            double gauss_norm;  // -d/2 log 2pi - 1/2 log|Sigma|
            double log_det;
            double am1, bm1, beta_norm; // alpha-1, beta-1, -log B
            Vec3 psi;
            double kappa;
        };
        std::vector<ClassEval> ev(C);
        for (std::size_t c = 0; c < C; ++c) {
            const ClassParams& p = params_[c];
            Eigen::LLT<Eigen::MatrixXd> llt(p.sigma);
            if (llt.info() != Eigen::Success)
                throw numeric_error("E step: covariance not positive definite");
            double log_det = 0.0;
            for (std::size_t i = 0; i < d_.channels; ++i)
                log_det += 2.0 * std::log(llt.matrixL()(i, i));
            ev[c].inv = llt.solve(Eigen::MatrixXd::Identity(d_.channels, d_.channels));
            ev[c].mu = p.mu;
            ev[c].log_det = log_det;
            ev[c].gauss_norm = -0.5 * double(d_.channels) * std::log(2.0 * M_PI) - 0.5 * log_det;
            ev[c].am1 = p.alpha - 1.0;
            ev[c].bm1 = p.beta - 1.0;
            ev[c].beta_norm = -log_beta_fn(p.alpha, p.beta);
            ev[c].psi = p.psi;
            ev[c].kappa = p.kappa;
        }

        struct Acc {
            double bound = 0.0;
        };
        const std::size_t dch = d_.channels;
        Acc acc = parallel_reduce<Acc>(
            n, opts_.nthreads,
            [&](Acc& a, std::size_t v) {
                const double* sv = &d_.s[v * dch];
                double lw[64];
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < C; ++c) {
                    const ClassEval& e = ev[c];
                    double q = 0.0;
                    for (std::size_t i = 0; i < dch; ++i) {
                        double di = sv[i] - e.mu[i];
                        for (std::size_t j = 0; j < dch; ++j)
                            q += di * e.inv(i, j) * (sv[j] - e.mu[j]);
                    }
                    double t = e.psi.dot(d_.phi[v]);
                    double fk = d_.f[v] * e.kappa;
                    double l = e.gauss_norm - 0.5 * q + e.am1 * d_.logf[v] + e.bm1 * d_.log1mf[v] +
                               e.beta_norm + fk * t * t - table_(fk).log_z +
                               d_.log_prior[v * C + c];
                    lw[c] = l;
                    if (l > m) m = l;
                }
                double sum = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    lw[c] = std::exp(lw[c] - m);
                    sum += lw[c];
                }
                for (std::size_t c = 0; c < C; ++c) w_[v * C + c] = lw[c] / sum;
                a.bound += m + std::log(sum);
            },
            [](Acc& a, const Acc& b) { a.bound += b.bound; });

        double bound = acc.bound + log_theta_prior();
        for (std::size_t c = 0; c < C; ++c) bound += niw_log_prior(c, ev[c].log_det, ev[c].inv);
        return bound;
    }

    // Closed-form Gaussian update with conjugate-prior shrinkage. Tied
    // classes pool their statistics and prior terms.
    void m_step_gaussian() {
        const std::size_t n = d_.n(), C = d_.n_classes(), dch = d_.channels;
        const std::size_t G = C; // group ids live in [0, C)
        const std::size_t per = 1 + dch + dch * dch;
        using Stats = std::vector<double>;
        Stats st = parallel_reduce<Stats>(
            n, opts_.nthreads,
            [&](Stats& a, std::size_t v) {
                if (a.empty()) a.assign(G * per, 0.0);
                const double* sv = &d_.s[v * dch];
                for (std::size_t c = 0; c < C; ++c) {
                    double w = w_[v * C + c];
                    if (w == 0.0) continue;
                    double* dst = &a[sharing_.gaussian[c] * per];
                    dst[0] += w;
                    for (std::size_t i = 0; i < dch; ++i) {
                        dst[1 + i] += w * sv[i];
                        for (std::size_t j = 0; j < dch; ++j)
                            dst[1 + dch + i * dch + j] += w * sv[i] * sv[j];
                    }
                }
            },
            [&](Stats& a, const Stats& b) {
                if (b.empty()) return;
                if (a.empty()) a.assign(G * per, 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
            });
        if (st.empty()) st.assign(G * per, 0.0);

        for (std::size_t g = 0; g < G; ++g) {
            std::vector<std::size_t> members;
            for (std::size_t c = 0; c < C; ++c)
                if (std::size_t(sharing_.gaussian[c]) == g) members.push_back(c);
            if (members.empty()) continue;
            const double* s = &st[g * per];
            double sw = s[0];
            if (sw < 1e-12) {
                warn("gaussian update skipped for empty class '" + std::to_string(g) + "'");
                continue;
            }
            Eigen::VectorXd sx = Eigen::Map<const Eigen::VectorXd>(s + 1, dch);
            Eigen::MatrixXd sxx = Eigen::Map<const Eigen::MatrixXd>(s + 1 + dch, dch, dch);
            double n_sum = 0.0;
            Eigen::VectorXd nm = Eigen::VectorXd::Zero(dch);
            for (std::size_t c : members) {
                if (hyper_[c].n > 0.0) {
                    n_sum += hyper_[c].n;
                    nm += hyper_[c].n * hyper_[c].M;
                }
            }
            Eigen::VectorXd mu = (nm + sx) / (n_sum + sw);
            Eigen::MatrixXd num = sxx - sx * mu.transpose() - mu * sx.transpose() + sw * mu * mu.transpose();
            for (std::size_t c : members)
                if (hyper_[c].n > 0.0) {
                    Eigen::VectorXd dm = mu - hyper_[c].M;
                    num += hyper_[c].n * dm * dm.transpose();
                }
            Eigen::MatrixXd sigma = num / (double(members.size()) + sw);
            sigma += sigma_floor_.asDiagonal();
            for (std::size_t c : members) {
                params_[c].mu = mu;
                params_[c].sigma = sigma;
            }
        }
    }

    // Beta shapes: the pooled objective is closed-form in five sufficient
    // statistics, so the 2-D conjugate-gradient refinement is cheap.
    void m_step_beta(bool first_iteration) {
        const std::size_t n = d_.n(), C = d_.n_classes();
        const std::size_t per = 5; // sw, slogf, slog1mf, swf, swf2
        using Stats = std::vector<double>;
        Stats st = parallel_reduce<Stats>(
            n, opts_.nthreads,
            [&](Stats& a, std::size_t v) {
                if (a.empty()) a.assign(C * per, 0.0);
                for (std::size_t c = 0; c < C; ++c) {
                    double w = w_[v * C + c];
                    if (w == 0.0) continue;
                    double* dst = &a[sharing_.beta[c] * per];
                    dst[0] += w;
                    dst[1] += w * d_.logf[v];
                    dst[2] += w * d_.log1mf[v];
                    dst[3] += w * d_.f[v];
                    dst[4] += w * d_.f[v] * d_.f[v];
                }
            },
            [&](Stats& a, const Stats& b) {
                if (b.empty()) return;
                if (a.empty()) a.assign(C * per, 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
            });
        if (st.empty()) st.assign(C * per, 0.0);

        for (std::size_t g = 0; g < C; ++g) {
            std::vector<std::size_t> members;
            for (std::size_t c = 0; c < C; ++c)
                if (std::size_t(sharing_.beta[c]) == g) members.push_back(c);
            if (members.empty()) continue;
            const double* s = &st[g * per];
            double sw = s[0], slogf = s[1], slog1mf = s[2];
            if (sw < 1e-12) {
                warn("beta update skipped for empty class '" + std::to_string(g) + "'");
                continue;
            }
            Eigen::VectorXd x0(2);
            if (first_iteration) {
                double mean = s[3] / sw;
                double var = std::max(s[4] / sw - mean * mean, 1e-12);
                beta_mom(mean, var, x0[0], x0[1]);
            } else {
                x0 << params_[members[0]].alpha, params_[members[0]].beta;
            }
            BetaObjective fn{BetaStats{sw, slogf, slog1mf, s[3], s[4]}};
            Eigen::VectorXd lo = Eigen::VectorXd::Constant(2, 1e-3);
            NcgResult r = minimize_cg(fn, x0, lo, Eigen::VectorXd(), opts_.param_opts);
            for (std::size_t c : members) {
                params_[c].alpha = r.x[0];
                params_[c].beta = r.x[1];
            }
        }
    }

    // Axis update: leading eigenvector of the FA-weighted orientation
    // scatter, computed in closed form.
    void m_step_psi() {
        const std::size_t n = d_.n(), C = d_.n_classes();
        const std::size_t per = 6; // xx yy zz xy xz yz
        using Stats = std::vector<double>;
        Stats st = parallel_reduce<Stats>(
            n, opts_.nthreads,
            [&](Stats& a, std::size_t v) {
                if (a.empty()) a.assign(C * per, 0.0);
                const Vec3& ph = d_.phi[v];
                for (std::size_t c = 0; c < C; ++c) {
                    double wf = w_[v * C + c] * d_.f[v];
                    if (wf == 0.0) continue;
                    double* dst = &a[sharing_.watson[c] * per];
                    dst[0] += wf * ph.x() * ph.x();
                    dst[1] += wf * ph.y() * ph.y();
                    dst[2] += wf * ph.z() * ph.z();
                    dst[3] += wf * ph.x() * ph.y();
                    dst[4] += wf * ph.x() * ph.z();
                    dst[5] += wf * ph.y() * ph.z();
                }
            },
            [&](Stats& a, const Stats& b) {
                if (b.empty()) return;
                if (a.empty()) a.assign(C * per, 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
            });
        if (st.empty()) st.assign(C * per, 0.0);

        for (std::size_t g = 0; g < C; ++g) {
            bool used = false;
            for (std::size_t c = 0; c < C; ++c) used |= (std::size_t(sharing_.watson[c]) == g);
            if (!used) continue;
            const double* s = &st[g * per];
            Mat3 sc;
            sc << s[0], s[3], s[4],
                  s[3], s[1], s[5],
                  s[4], s[5], s[2];
            if (sc.norm() < 1e-300) {
                warn("axis update skipped for empty class '" + std::to_string(g) + "'");
                continue;
            }
            Eigen::SelfAdjointEigenSolver<Mat3> es(sc);
            Vec3 psi = canonical_axis(es.eigenvectors().col(2).normalized());
            for (std::size_t c = 0; c < C; ++c)
                if (std::size_t(sharing_.watson[c]) == g) params_[c].psi = psi;
        }
    }

    // Concentration update: 1-D bounded conjugate gradient per group on
    //   kappa * sum_v w f t^2 - sum_v w log Z(f kappa).
    void m_step_kappa() {
        const std::size_t n = d_.n(), C = d_.n_classes();
        std::vector<double> wplus(n), tsq(n);
        for (std::size_t g = 0; g < C; ++g) {
            std::vector<std::size_t> members;
            for (std::size_t c = 0; c < C; ++c)
                if (std::size_t(sharing_.watson[c]) == g) members.push_back(c);
            if (members.empty()) continue;
            const Vec3 psi = params_[members[0]].psi;
            struct Acc {
                double a = 0.0, sw = 0.0;
            };
            Acc acc = parallel_reduce<Acc>(
                n, opts_.nthreads,
                [&](Acc& a, std::size_t v) {
                    double w = 0.0;
                    for (std::size_t c : members) w += w_[v * C + c];
                    double t = psi.dot(d_.phi[v]);
                    wplus[v] = w;
                    tsq[v] = t * t;
                    a.a += w * d_.f[v] * t * t;
                    a.sw += w;
                },
                [](Acc& a, const Acc& b) {
                    a.a += b.a;
                    a.sw += b.sw;
                });
            if (acc.sw < 1e-12) {
                warn("concentration update skipped for empty class '" + std::to_string(g) + "'");
                continue;
            }
            KappaObjective fn{wplus.data(), d_.f.data(), n, acc.a, &table_, opts_.nthreads};
            Eigen::VectorXd x0(1), lo(1), hi(1);
            x0[0] = params_[members[0]].kappa;
            lo[0] = 0.0;
            hi[0] = opts_.kappa_max;
            NcgResult r = minimize_cg(fn, x0, lo, hi, opts_.param_opts);
            if (r.x[0] >= opts_.kappa_max * (1.0 - 1e-12))
                warn("concentration clamped at its upper bound for class '" + std::to_string(g) + "'");
            for (std::size_t c : members) params_[c].kappa = r.x[0];
        }
    }

    // Registration M step over the control-grid displacements.
    void m_step_deformation() {
        DeformObjective obj;
        obj.atlas = &d_.atlas->vol;
        obj.atlas_R = d_.warp.atlas_R;
        obj.atlas_t = d_.warp.atlas_t;
        obj.base = &d_.base;
        obj.vox_coords = &d_.vox_coords;
        obj.W = &w_;
        obj.C = d_.n_classes();
        obj.cg = &d_.warp.ctrl;
        obj.masked_of_full = &d_.masked_of_full;
        obj.working = d_.grid;
        obj.lambda = opts_.lambda;
        obj.nthreads = opts_.nthreads;
        Eigen::VectorXd x0 = Eigen::Map<const Eigen::VectorXd>(d_.warp.ctrl.disp.data(),
                                                               Eigen::Index(d_.warp.ctrl.disp.size()));
        NcgResult r = minimize_cg(obj, x0, Eigen::VectorXd(), Eigen::VectorXd(), opts_.deform_opts);
        Eigen::Map<Eigen::VectorXd>(d_.warp.ctrl.disp.data(), r.x.size()) = r.x;
    }

    // Re-sample the prior cache after a deformation change.
    void refresh_prior() {
        const std::size_t n = d_.n(), C = d_.n_classes();
        parallel_for(n, opts_.nthreads, [&](std::size_t v) {
            Vec3 u = control_displacement(d_.warp.ctrl, d_.warp.ctrl.disp.data(), d_.vox_coords[v]);
            Vec3 pos = d_.warp.atlas_R * (d_.base[v] + u) + d_.warp.atlas_t;
            double* row = &d_.prior[v * C];
            sample_prior_point(d_.atlas->vol, pos, row);
            floor_and_normalize(row, C, d_.atlas->background);
            for (std::size_t c = 0; c < C; ++c) d_.log_prior[v * C + c] = std::log(row[c]);
        });
    }

    std::vector<double> expected_voxels() const {
        const std::size_t n = d_.n(), C = d_.n_classes();
        using Stats = std::vector<double>;
        Stats st = parallel_reduce<Stats>(
            n, opts_.nthreads,
            [&](Stats& a, std::size_t v) {
                if (a.empty()) a.assign(C, 0.0);
                for (std::size_t c = 0; c < C; ++c) a[c] += w_[v * C + c];
            },
            [&](Stats& a, const Stats& b) {
                if (b.empty()) return;
                if (a.empty()) a.assign(C, 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
            });
        if (st.empty()) st.assign(C, 0.0);
        return st;
    }

    Volume<int16_t> hard_segmentation() const {
        const std::size_t C = d_.n_classes();
        Volume<int16_t> labels(d_.grid, 1);
        parallel_for(d_.grid.size(), opts_.nthreads, [&](std::size_t idx) {
            int32_t v = d_.masked_of_full[idx];
            if (v < 0) {
                labels.data[idx] = int16_t(d_.init_argmax[idx]);
                return;
            }
            std::size_t am = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (w_[std::size_t(v) * C + c] > w_[std::size_t(v) * C + am]) am = c;
            labels.data[idx] = int16_t(am);
        });
        return labels;
    }

    // log p(theta^a | gamma^a) up to a constant: -lambda * bending energy.
    double log_theta_prior() const {
        return -opts_.lambda * bending_energy(d_.warp.ctrl, d_.warp.ctrl.disp.data());
    }

    // log p(mu_c, Sigma_c | M_c, n_c) up to a constant:
    // -1/2 log|Sigma| - n/2 (mu - M)' Sigma^-1 (mu - M).
    double niw_log_prior(std::size_t c, double log_det, const Eigen::MatrixXd& inv) const {
        double t = -0.5 * log_det;
        if (hyper_[c].n > 0.0) {
            Eigen::VectorXd dm = params_[c].mu - hyper_[c].M;
            t -= 0.5 * hyper_[c].n * dm.dot(inv * dm);
        }
        return t;
    }

private:
    void warn(const std::string& msg) {
        if (warnings_.size() < 100) warnings_.push_back(msg);
    }

    GemData d_;
    std::vector<ClassHyper> hyper_;
    Sharing sharing_;
    GemOptions opts_;
    const KummerTable& table_;
    std::vector<ClassParams> params_;
    std::vector<double> w_;
    Eigen::VectorXd sigma_floor_;
    std::vector<std::string> warnings_;
};

} // namespace jseg
