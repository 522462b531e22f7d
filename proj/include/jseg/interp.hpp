#pragma once

#include <cmath>

#include "jseg/grid.hpp"
#include "jseg/parallel.hpp"

namespace jseg {

enum class boundary { clamp, zero };

struct TrilinearWeights {
    // corner (i0+di, j0+dj, k0+dk) carries weight wx[di]*wy[dj]*wz[dk]
    long i0, j0, k0;
    double wx[2], wy[2], wz[2];
    bool inside; // fractional position within [0, dim-1] on all axes
};

inline TrilinearWeights trilinear_weights(const GridSpec& g, const Vec3& v) {
    TrilinearWeights tw;
    tw.inside = true;
    double pos[3];
    for (int a = 0; a < 3; ++a) {
        double x = v[a];
        if (x < 0.0 || x > double(g.dims[a] - 1)) tw.inside = false;
        // clamp so the corner indices below are always valid
        if (x < 0.0) x = 0.0;
        double top = double(g.dims[a] - 1);
        if (x > top) x = top;
        pos[a] = x;
    }
    auto split = [](double x, std::size_t dim, long& i0, double w[2]) {
        long i = static_cast<long>(std::floor(x));
        if (i > long(dim) - 2) i = long(dim) - 2; // dim==1 -> i=-1, handled by weight 0
        if (i < 0) i = 0;
        double f = x - double(i);
        if (dim == 1) { i = 0; f = 0.0; }
        w[0] = 1.0 - f;
        w[1] = f;
        i0 = i;
    };
    split(pos[0], g.dims[0], tw.i0, tw.wx);
    split(pos[1], g.dims[1], tw.j0, tw.wy);
    split(pos[2], g.dims[2], tw.k0, tw.wz);
    return tw;
}

// Sample one channel at a fractional voxel coordinate.
template <class T>
double trilinear_sample(const Volume<T>& vol, const Vec3& voxel_pos, std::size_t c = 0,
                        boundary policy = boundary::clamp) {
    TrilinearWeights tw = trilinear_weights(vol.grid, voxel_pos);
    if (policy == boundary::zero && !tw.inside) return 0.0;
    double acc = 0.0;
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                double w = tw.wx[di] * tw.wy[dj] * tw.wz[dk];
                if (w == 0.0) continue;
                acc += w * double(vol.at(std::size_t(tw.i0 + di), std::size_t(tw.j0 + dj),
                                         std::size_t(tw.k0 + dk), c));
            }
    return acc;
}

template <class T>
double sample_world(const Volume<T>& vol, const Vec3& world, std::size_t c = 0,
                    boundary policy = boundary::clamp) {
    return trilinear_sample(vol, vol.grid.world_to_voxel(world), c, policy);
}

// Resample every channel of src onto dst_grid through world coordinates.
template <class T>
Volume<double> resample(const Volume<T>& src, const GridSpec& dst_grid,
                        boundary policy = boundary::clamp, int nthreads = 1) {
    Volume<double> out(dst_grid, src.channels);
    const Mat4& sa = src.grid.affine;
    Mat3 to_src = sa.topLeftCorner<3, 3>().inverse() * dst_grid.affine.topLeftCorner<3, 3>();
    Vec3 off = sa.topLeftCorner<3, 3>().inverse() *
               (dst_grid.affine.topRightCorner<3, 1>() - sa.topRightCorner<3, 1>());
    parallel_for(dst_grid.size(), nthreads, [&](std::size_t idx) {
        auto [i, j, k] = dst_grid.coords(idx);
        Vec3 p = to_src * Vec3(double(i), double(j), double(k)) + off;
        for (std::size_t c = 0; c < src.channels; ++c)
            out.at(idx, c) = trilinear_sample(src, p, c, policy);
    });
    return out;
}

// Nearest-neighbour variant, for label maps and direction fields.
template <class T>
Volume<T> resample_nearest(const Volume<T>& src, const GridSpec& dst_grid, int nthreads = 1) {
    Volume<T> out(dst_grid, src.channels);
    const Mat4& sa = src.grid.affine;
    Mat3 to_src = sa.topLeftCorner<3, 3>().inverse() * dst_grid.affine.topLeftCorner<3, 3>();
    Vec3 off = sa.topLeftCorner<3, 3>().inverse() *
               (dst_grid.affine.topRightCorner<3, 1>() - sa.topRightCorner<3, 1>());
    parallel_for(dst_grid.size(), nthreads, [&](std::size_t idx) {
        auto [i, j, k] = dst_grid.coords(idx);
        Vec3 p = to_src * Vec3(double(i), double(j), double(k)) + off;
        std::size_t q[3];
        for (int a = 0; a < 3; ++a) {
            long r = std::lround(p[a]);
            if (r < 0) r = 0;
            if (r > long(src.grid.dims[a]) - 1) r = long(src.grid.dims[a]) - 1;
            q[a] = std::size_t(r);
        }
        for (std::size_t c = 0; c < src.channels; ++c)
            out.at(idx, c) = src.at(q[0], q[1], q[2], c);
    });
    return out;
}

// World-space bounding box of voxels where pred(volume, voxel) holds.
template <class T, class Pred>
WorldBox bounding_box(const Volume<T>& vol, Pred&& pred, double margin_mm = 0.0) {
    WorldBox box;
    for (std::size_t idx = 0; idx < vol.grid.size(); ++idx) {
        if (!pred(vol, idx)) continue;
        auto [i, j, k] = vol.grid.coords(idx);
        box.expand(vol.grid.voxel_to_world(Vec3(double(i), double(j), double(k))));
    }
    if (box.empty()) throw data_error("bounding box: no voxel satisfies the predicate");
    if (margin_mm > 0.0) box.pad(margin_mm);
    return box;
}

} // namespace jseg
