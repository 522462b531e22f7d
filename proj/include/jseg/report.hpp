#pragma once

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "jseg/engine.hpp"

namespace jseg {

// %.17g round-trips doubles exactly, so identical numbers give identical
// report bytes.
inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct RunReport {
    std::string command;
    uint64_t seed = 0;
    int threads = 1;
    bool deterministic = true;
    std::vector<std::pair<std::string, std::string>> settings; // resolved configuration echo
    GridSpec working;
    std::size_t masked_voxels = 0;
    std::vector<std::string> class_names;
    GemResult result;
    double voxel_volume_mm3 = 0.0;
    double wall_seconds = 0.0; // reported only in non-deterministic mode
};

inline void write_report(std::ostream& out, const RunReport& r) {
    // In deterministic mode the report must not depend on anything but the
    // inputs, so the command line, thread count, and timing are left out.
    if (!r.deterministic) {
        out << "command: " << r.command << "\n";
        out << "threads: " << r.threads << "\n";
    }
    out << "seed: " << r.seed << "\n";
    out << "deterministic: " << (r.deterministic ? "true" : "false") << "\n";
    out << "\n[settings]\n";
    for (const auto& [k, v] : r.settings) out << k << " = " << v << "\n";
    out << "\n[grid]\n";
    out << "dims = " << r.working.dims[0] << " " << r.working.dims[1] << " " << r.working.dims[2]
        << "\n";
    out << "affine =";
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) out << " " << fmt_g17(r.working.affine(i, j));
    out << "\n";
    out << "masked_voxels = " << r.masked_voxels << "\n";
    out << "\n[fit]\n";
    out << "iterations = " << r.result.iterations << "\n";
    out << "converged = " << (r.result.converged ? "true" : "false") << "\n";
    out << "bound_trace =";
    for (double b : r.result.bound_trace) out << " " << fmt_g17(b);
    out << "\n";
    out << "\n[classes]\n";
    for (std::size_t c = 0; c < r.class_names.size(); ++c) {
        const ClassParams& p = r.result.params[c];
        out << "name = " << r.class_names[c] << "\n";
        out << "  mu =";
        for (Eigen::Index i = 0; i < p.mu.size(); ++i) out << " " << fmt_g17(p.mu[i]);
        out << "\n  sigma =";
        for (Eigen::Index i = 0; i < p.sigma.rows(); ++i)
            for (Eigen::Index j = 0; j < p.sigma.cols(); ++j) out << " " << fmt_g17(p.sigma(i, j));
        out << "\n  alpha = " << fmt_g17(p.alpha) << "\n  beta = " << fmt_g17(p.beta) << "\n";
        out << "  psi = " << fmt_g17(p.psi.x()) << " " << fmt_g17(p.psi.y()) << " "
            << fmt_g17(p.psi.z()) << "\n";
        out << "  kappa = " << fmt_g17(p.kappa) << "\n";
        double ev = c < r.result.expected_voxels.size() ? r.result.expected_voxels[c] : 0.0;
        out << "  expected_voxels = " << fmt_g17(ev) << "\n";
        out << "  expected_volume_mm3 = " << fmt_g17(ev * r.voxel_volume_mm3) << "\n";
    }
    out << "\n[warnings]\n";
    for (const auto& w : r.result.warnings) out << w << "\n";
    if (r.deterministic)
        out << "\nwall_seconds: not recorded in deterministic mode\n";
    else
        out << "\nwall_seconds: " << fmt_g17(r.wall_seconds) << "\n";
}

} // namespace jseg
