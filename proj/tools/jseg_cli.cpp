// jseg: joint segmentation of structural and diffusion MRI against a
// deformable probabilistic atlas.
//
//   jseg simulate --out-dir scene/
//   jseg segment --t1 t1.nii.gz --fa fa.nii.gz --dirs dirs.nii.gz \
//                --atlas scene/atlas --out-dir result/

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "jseg/config.hpp"
#include "jseg/dti.hpp"
#include "jseg/engine.hpp"
#include "jseg/nifti.hpp"
#include "jseg/qc_png.hpp"
#include "jseg/registration.hpp"
#include "jseg/report.hpp"
#include "jseg/synth.hpp"

namespace fs = std::filesystem;
using namespace jseg;

namespace {

struct SimulateArgs {
    std::string out_dir;
    uint64_t seed = 1;
    int dim = 32;
    double resolution = 1.0;
    double deform_amp = 1.0;
    double deform_spacing = 8.0;
    int dwi_dirs = 0; // 0: write FA/direction maps only
};

struct SegmentArgs {
    std::string t1, fa, dirs, dwi, bval, bvec;
    std::string atlas_dir, config_path, affine_path, out_dir;
    uint64_t seed = 0;
    int threads = 1;
    bool deterministic = true;
    bool no_register = false;
    bool qc = false;
};

void write_truth(const std::string& path, const SynthScene& sc) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write " + path);
    for (const auto& k : sc.classes) {
        out << "name = " << k.name << "\n";
        out << "  mu =";
        for (Eigen::Index i = 0; i < k.mu.size(); ++i) out << " " << fmt_g17(k.mu[i]);
        out << "\n  sigma =";
        for (Eigen::Index i = 0; i < k.sigma.size(); ++i) out << " " << fmt_g17(k.sigma.data()[i]);
        out << "\n  alpha = " << fmt_g17(k.alpha) << "\n  beta = " << fmt_g17(k.beta) << "\n";
        out << "  psi = " << fmt_g17(k.psi.x()) << " " << fmt_g17(k.psi.y()) << " "
            << fmt_g17(k.psi.z()) << "\n";
        out << "  kappa = " << fmt_g17(k.kappa) << "\n";
    }
}

int run_simulate(const SimulateArgs& a) {
    SynthOptions opts;
    opts.seed = a.seed;
    opts.dims = {std::size_t(a.dim), std::size_t(a.dim), std::size_t(a.dim)};
    opts.resolution_mm = a.resolution;
    opts.deform_amp_mm = a.deform_amp;
    opts.deform_spacing_vox = a.deform_spacing;
    SynthScene sc = make_synth_scene(opts);

    fs::create_directories(fs::path(a.out_dir) / "atlas");
    auto p = [&](const char* name) { return (fs::path(a.out_dir) / name).string(); };

    write_nifti(p("t1.nii.gz"), sc.s_img, NiftiType::f32);
    write_nifti(p("fa.nii.gz"), sc.fa_img, NiftiType::f32);
    write_nifti(p("dirs.nii.gz"), sc.dir_img, NiftiType::f32);
    {
        VolumeD lab(sc.labels.grid, 1);
        for (std::size_t i = 0; i < lab.data.size(); ++i) lab.data[i] = sc.labels.data[i];
        write_nifti(p("labels_true.nii.gz"), lab, NiftiType::i16);
    }
    write_nifti(p("atlas/prior.nii.gz"), sc.atlas.vol, NiftiType::f32);
    write_nifti(p("atlas/template.nii.gz"), sc.template_img, NiftiType::f32);
    {
        std::ofstream cls(p("atlas/classes.txt"));
        if (!cls) throw data_error("cannot write the class manifest");
        for (std::size_t c = 0; c < sc.atlas.names.size(); ++c) {
            cls << sc.atlas.names[c];
            if (sc.atlas.background[c] && sc.atlas.names[c] != "background") cls << " background";
            cls << "\n";
        }
    }
    if (a.dwi_dirs > 0) {
        DtiProtocol prot = make_protocol(std::size_t(a.dwi_dirs));
        VolumeD dwi = synth_dwi(sc.fa_img, sc.dir_img, prot);
        write_nifti(p("dwi.nii.gz"), dwi, NiftiType::f32);
        write_protocol_fsl(p("dwi.bval"), p("dwi.bvec"), prot);
    }
    write_affine_txt(p("affine_init.txt"), Mat4::Identity());
    write_truth(p("truth.txt"), sc);

    // a segmentation config matched to this scene: hypermeans from the truth,
    // prior strengths derived from the atlas, grid at the native resolution
    {
        std::ofstream cfg(p("seg.cfg"));
        if (!cfg) throw data_error("cannot write seg.cfg");
        cfg << "[grid]\n";
        cfg << "resolution = " << a.resolution << "\n";
        cfg << "control_spacing = " << a.deform_spacing << "\n\n";
        cfg << "[hyper]\n";
        for (const auto& k : sc.classes) cfg << "M." << k.name << " = " << k.mu[0] << "\n";
        cfg << "\n[gem]\nmax_iter = 60\n";
    }
    std::cout << "simulated scene written to " << a.out_dir << "\n";
    return 0;
}

std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
    std::istringstream ss(text);
    std::vector<double> out;
    double v;
    while (ss >> v) out.push_back(v);
    if (!ss.eof()) throw config_error(what + ": expected numbers, got '" + text + "'");
    return out;
}

std::size_t class_index(const std::vector<std::string>& names, const std::string& name,
                        const std::string& what) {
    for (std::size_t c = 0; c < names.size(); ++c)
        if (names[c] == name) return c;
    throw config_error(what + ": unknown class '" + name + "'");
}

// "a b; c d" puts a,b in one group and c,d in another; the group id is the
// first member's class index. Unmentioned classes keep their own id.
void parse_sharing_groups(const std::string& text, const std::vector<std::string>& names,
                          std::vector<int>& ids, const std::string& what) {
    std::istringstream groups(text);
    std::string group;
    while (std::getline(groups, group, ';')) {
        std::istringstream ss(group);
        std::string name;
        int gid = -1;
        while (ss >> name) {
            std::size_t c = class_index(names, name, what);
            if (gid < 0) gid = int(c);
            ids[c] = gid;
        }
    }
}

int run_segment(const SegmentArgs& a) {
    auto t_start = std::chrono::steady_clock::now();

    Config cfg;
    if (!a.config_path.empty()) {
        std::ifstream in(a.config_path);
        if (!in) throw config_error("cannot open config " + a.config_path);
        cfg = Config::parse(in, a.config_path);
    }

    const double resolution = cfg.get_double("grid", "resolution", 0.5);
    const double bbox_threshold = cfg.get_double("grid", "bbox_threshold", 1e-3);
    const double bbox_margin = cfg.get_double("grid", "bbox_margin", 10.0);
    const double control_spacing = cfg.get_double("grid", "control_spacing", 16.0);

    GemOptions gopts;
    gopts.max_iter = cfg.get_int("gem", "max_iter", gopts.max_iter);
    gopts.rel_tol = cfg.get_double("gem", "rel_tol", gopts.rel_tol);
    gopts.deform_every = cfg.get_int("gem", "deform_every", gopts.deform_every);
    gopts.lambda = cfg.get_double("gem", "lambda", gopts.lambda);
    gopts.kappa_init = cfg.get_double("gem", "kappa_init", gopts.kappa_init);
    gopts.sigma_floor_factor = cfg.get_double("gem", "sigma_floor", gopts.sigma_floor_factor);
    gopts.update_deformation = cfg.get_bool("gem", "deform", true);
    gopts.param_opts.max_iter = cfg.get_int("optim", "max_iter", gopts.param_opts.max_iter);
    gopts.deform_opts.max_iter = cfg.get_int("optim", "deform_max_iter", gopts.deform_opts.max_iter);
    gopts.param_opts.grad_tol = gopts.deform_opts.grad_tol =
        cfg.get_double("optim", "grad_tol", gopts.param_opts.grad_tol);
    gopts.nthreads = a.threads;
    gopts.deterministic = a.deterministic;

    RegisterOptions ropts;
    ropts.dof = cfg.get_int("register", "dof", ropts.dof);
    ropts.levels = cfg.get_int("register", "levels", ropts.levels);

    // inputs
    VolumeD t1 = read_nifti(a.t1).vol;
    if (t1.channels != 1) throw data_error("structural image must be single channel");

    fs::path adir(a.atlas_dir);
    ProbAtlas atlas;
    atlas.vol = read_nifti((adir / "prior.nii.gz").string()).vol;
    {
        std::ifstream manifest(adir / "classes.txt");
        if (!manifest) throw data_error("cannot open " + (adir / "classes.txt").string());
        parse_class_manifest(manifest, atlas.names, atlas.background);
    }
    if (cfg.has("mask", "background")) {
        std::istringstream ss(cfg.get_string("mask", "background", ""));
        atlas.background.assign(atlas.classes(), false);
        std::string name;
        while (ss >> name) atlas.background[class_index(atlas.names, name, "mask background")] = true;
    } else {
        cfg.get_string("mask", "background", ""); // register the key as valid
    }
    atlas.validate();
    const std::size_t C = atlas.classes();

    // initial affine: explicit file, else template registration, else identity
    Mat4 affine_init = Mat4::Identity();
    std::string affine_source = "identity";
    fs::path tmpl_path = adir / "template.nii.gz";
    if (!a.affine_path.empty()) {
        affine_init = read_affine_txt(a.affine_path);
        affine_source = "file";
    } else if (!a.no_register && fs::exists(tmpl_path)) {
        VolumeD tmpl = read_nifti(tmpl_path.string()).vol;
        affine_init = register_affine_mi(t1, tmpl, ropts);
        affine_source = "registered";
    }

    // working grid: atlas foreground support mapped into subject space,
    // clipped to the structural field of view
    Mat4 inv_affine = affine_init.inverse();
    WorldBox box;
    for (std::size_t idx = 0; idx < atlas.vol.grid.size(); ++idx) {
        double fg = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            if (!atlas.background[c]) fg += atlas.vol.at(idx, c);
        if (fg < bbox_threshold) continue;
        auto [i, j, k] = atlas.vol.grid.coords(idx);
        Vec3 w = atlas.vol.grid.voxel_to_world(Vec3(double(i), double(j), double(k)));
        box.expand(inv_affine.topLeftCorner<3, 3>() * w + inv_affine.topRightCorner<3, 1>());
    }
    if (box.empty()) throw data_error("atlas has no foreground above the bounding threshold");
    box.pad(bbox_margin);
    WorldBox fov;
    for (int corner = 0; corner < 8; ++corner) {
        Vec3 v(double(corner & 1 ? t1.grid.dims[0] - 1 : 0),
               double(corner & 2 ? t1.grid.dims[1] - 1 : 0),
               double(corner & 4 ? t1.grid.dims[2] - 1 : 0));
        fov.expand(t1.grid.voxel_to_world(v));
    }
    box.lo = box.lo.cwiseMax(fov.lo);
    box.hi = box.hi.cwiseMin(fov.hi);
    if ((box.hi - box.lo).minCoeff() <= 0.0)
        throw data_error("atlas foreground does not overlap the structural image");
    GridSpec working = make_working_grid(box, resolution);

    VolumeD s_img = resample(t1, working, boundary::clamp, a.threads);

    VolumeD fa_img, dir_img;
    if (!a.dwi.empty()) {
        DtiProtocol prot = read_protocol_fsl(a.bval, a.bvec);
        VolumeD dwi = read_nifti(a.dwi).vol;
        if (dwi.channels != prot.size())
            throw data_error("diffusion volume count does not match the gradient table");
        VolumeD tensors = fit_dti(dwi, prot, a.threads);
        VolumeD warped = resample_tensors_log_euclidean(tensors, working, a.threads);
        fa_img = VolumeD(working, 1);
        dir_img = VolumeD(working, 3);
        parallel_for(working.size(), a.threads, [&](std::size_t idx) {
            TensorFeatures tf = tensor_features(tensor_unpack(&warped.data[idx * 6]));
            fa_img.data[idx] = tf.fa;
            for (int q = 0; q < 3; ++q) dir_img.at(idx, std::size_t(q)) = tf.direction[q];
        });
    } else {
        VolumeD fa_native = read_nifti(a.fa).vol;
        if (fa_native.channels != 1) throw data_error("FA image must be single channel");
        VolumeD dir_native = read_nifti(a.dirs).vol;
        if (dir_native.channels != 3) throw data_error("direction image must have three channels");
        fa_img = resample(fa_native, working, boundary::clamp, a.threads);
        dir_img = resample_nearest(dir_native, working, a.threads);
    }

    GemData data = make_gem_data(s_img, fa_img, dir_img, atlas, affine_init,
                                 control_spacing, a.threads);
    const std::size_t n_masked = data.n();
    const double voxel_mm3 = working.voxel_volume();

    // hyperparameters: per-class hypermeans plus prior strengths; a missing
    // strength defaults to the class's expected prior volume in mm^3
    std::vector<ClassHyper> hyper(C);
    const bool n_from_prior = cfg.get_bool("hyper", "n_from_prior", true);
    for (const auto& [name, value] : cfg.prefixed("hyper", "M.")) {
        std::size_t c = class_index(atlas.names, name, "hyper M");
        auto nums = parse_numbers(value, "hyper M." + name);
        if (nums.size() != data.channels)
            throw config_error("hyper M." + name + ": expected " + std::to_string(data.channels) +
                               " values");
        hyper[c].M = Eigen::Map<const Eigen::VectorXd>(nums.data(), Eigen::Index(nums.size()));
    }
    for (const auto& [name, value] : cfg.prefixed("hyper", "n.")) {
        std::size_t c = class_index(atlas.names, name, "hyper n");
        auto nums = parse_numbers(value, "hyper n." + name);
        if (nums.size() != 1) throw config_error("hyper n." + name + ": expected one value");
        hyper[c].n = nums[0];
    }
    if (n_from_prior)
        for (std::size_t c = 0; c < C; ++c)
            if (hyper[c].M.size() > 0 && hyper[c].n == 0.0) {
                double mass = 0.0;
                for (std::size_t v = 0; v < n_masked; ++v) mass += data.prior[v * C + c];
                hyper[c].n = mass * voxel_mm3;
            }

    Sharing sharing = Sharing::identity(C);
    parse_sharing_groups(cfg.get_string("sharing", "gaussian", ""), atlas.names, sharing.gaussian,
                         "sharing gaussian");
    parse_sharing_groups(cfg.get_string("sharing", "beta", ""), atlas.names, sharing.beta,
                         "sharing beta");
    parse_sharing_groups(cfg.get_string("sharing", "watson", ""), atlas.names, sharing.watson,
                         "sharing watson");

    cfg.finish();

    GemEngine engine(std::move(data), hyper, sharing, gopts);
    GemResult res = engine.run();

    // outputs
    fs::create_directories(a.out_dir);
    auto p = [&](const char* name) { return (fs::path(a.out_dir) / name).string(); };

    {
        VolumeD post(working, C);
        const auto& w = engine.responsibilities();
        const auto& mof = engine.data().masked_of_full;
        const auto& init = engine.data().init_argmax;
        parallel_for(working.size(), a.threads, [&](std::size_t idx) {
            int32_t v = mof[idx];
            for (std::size_t c = 0; c < C; ++c)
                post.at(idx, c) = v >= 0 ? w[std::size_t(v) * C + c]
                                         : (c == init[idx] ? 1.0 : 0.0);
        });
        write_nifti(p("posterior.nii.gz"), post, NiftiType::f32);
    }
    {
        VolumeD lab(working, 1);
        for (std::size_t i = 0; i < lab.data.size(); ++i) lab.data[i] = res.labels.data[i];
        write_nifti(p("labels.nii.gz"), lab, NiftiType::i16);
    }
    write_affine_txt(p("affine_used.txt"), affine_init);
    if (a.qc) write_qc_slices((fs::path(a.out_dir) / "qc").string(), s_img, res.labels);

    RunReport rep;
    rep.command = "jseg segment";
    rep.seed = a.seed;
    rep.threads = a.threads;
    rep.deterministic = a.deterministic;
    rep.settings = {
        {"resolution", fmt_g17(resolution)},
        {"bbox_threshold", fmt_g17(bbox_threshold)},
        {"bbox_margin", fmt_g17(bbox_margin)},
        {"control_spacing", fmt_g17(control_spacing)},
        {"lambda", fmt_g17(gopts.lambda)},
        {"deform_every", std::to_string(gopts.deform_every)},
        {"max_iter", std::to_string(gopts.max_iter)},
        {"rel_tol", fmt_g17(gopts.rel_tol)},
        {"affine_source", affine_source},
    };
    rep.working = working;
    rep.masked_voxels = n_masked;
    rep.class_names = atlas.names;
    rep.result = res;
    rep.voxel_volume_mm3 = voxel_mm3;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    std::ofstream rout(p("report.txt"), std::ios::binary);
    if (!rout) throw data_error("cannot write report.txt");
    write_report(rout, rep);

    std::cout << "segmentation written to " << a.out_dir << " (" << res.iterations
              << " iterations, " << (res.converged ? "converged" : "iteration limit") << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint structural and diffusion MRI segmentation"};
    app.require_subcommand(1);

    SimulateArgs sim;
    CLI::App* s = app.add_subcommand("simulate", "generate a synthetic scene and matching atlas");
    s->add_option("--out-dir", sim.out_dir, "output directory")->required();
    s->add_option("--seed", sim.seed, "random seed");
    s->add_option("--dim", sim.dim, "cubic volume size in voxels")->check(CLI::PositiveNumber);
    s->add_option("--resolution", sim.resolution, "voxel size in mm")->check(CLI::PositiveNumber);
    s->add_option("--deform-amp", sim.deform_amp, "truth warp amplitude in mm");
    s->add_option("--deform-spacing", sim.deform_spacing, "truth warp control spacing in voxels");
    s->add_option("--dwi", sim.dwi_dirs, "also write a DWI series with this many directions");

    SegmentArgs seg;
    CLI::App* g = app.add_subcommand("segment", "fit the model and write a segmentation");
    g->add_option("--t1", seg.t1, "structural image (NIfTI)")->required();
    auto* fa_opt = g->add_option("--fa", seg.fa, "fractional anisotropy image");
    g->add_option("--dirs", seg.dirs, "principal direction image (3 channels)")->needs(fa_opt);
    auto* dwi_opt = g->add_option("--dwi", seg.dwi, "diffusion-weighted series")->excludes(fa_opt);
    g->add_option("--bval", seg.bval, "b-values (FSL layout)")->needs(dwi_opt);
    g->add_option("--bvec", seg.bvec, "gradient directions (FSL layout)")->needs(dwi_opt);
    g->add_option("--atlas", seg.atlas_dir, "atlas directory (prior.nii.gz + classes.txt)")
        ->required();
    g->add_option("--config", seg.config_path, "configuration file");
    g->add_option("--affine", seg.affine_path, "initial affine (text, subject to atlas world)");
    g->add_option("--out-dir", seg.out_dir, "output directory")->required();
    g->add_option("--seed", seg.seed, "random seed (echoed in the report)");
    g->add_option("--threads", seg.threads, "worker threads")->check(CLI::PositiveNumber);
    g->add_flag("--deterministic,!--no-deterministic", seg.deterministic,
                "bitwise reproducible output (default on)");
    g->add_flag("--no-register", seg.no_register, "skip template registration");
    g->add_flag("--qc", seg.qc, "write QC overlay images");

    CLI11_PARSE(app, argc, argv);

    try {
        if (s->parsed()) return run_simulate(sim);
        if (g->parsed()) {
            if (seg.dwi.empty() && (seg.fa.empty() || seg.dirs.empty()))
                throw config_error("segment needs either --fa and --dirs or --dwi/--bval/--bvec");
            if (!seg.dwi.empty() && (seg.bval.empty() || seg.bvec.empty()))
                throw config_error("--dwi needs --bval and --bvec");
            return run_segment(seg);
        }
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
