#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "jseg/common.hpp"

namespace jseg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// A sampling grid: integer dimensions plus the voxel-index -> world (RAS mm)
// affine. All geometry in the pipeline goes through world coordinates; voxel
// indices never cross between grids directly.
struct GridSpec {
    std::array<std::size_t, 3> dims{0, 0, 0};
    Mat4 affine = Mat4::Identity();

    std::size_t size() const { return dims[0] * dims[1] * dims[2]; }

    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return i + dims[0] * (j + dims[1] * k);
    }
    std::array<std::size_t, 3> coords(std::size_t idx) const {
        std::size_t i = idx % dims[0];
        std::size_t j = (idx / dims[0]) % dims[1];
        std::size_t k = idx / (dims[0] * dims[1]);
        return {i, j, k};
    }

    Vec3 voxel_to_world(const Vec3& v) const {
        return affine.topLeftCorner<3, 3>() * v + affine.topRightCorner<3, 1>();
    }
    Vec3 world_to_voxel(const Vec3& w) const {
        return affine.topLeftCorner<3, 3>().partialPivLu().solve(w - affine.topRightCorner<3, 1>());
    }

    Vec3 spacing() const {
        Vec3 s;
        for (int a = 0; a < 3; ++a) s[a] = affine.block<3, 1>(0, a).norm();
        return s;
    }
    double voxel_volume() const {
        return std::abs(affine.topLeftCorner<3, 3>().determinant());
    }

    bool same_geometry(const GridSpec& o, double tol = 1e-6) const {
        return dims == o.dims && (affine - o.affine).cwiseAbs().maxCoeff() <= tol;
    }
};

// Dense voxel array with an arbitrary number of channels, channel-major
// within a voxel (index = c + channels * voxel).
template <class T>
struct Volume {
    GridSpec grid;
    std::size_t channels = 1;
    std::vector<T> data;

    Volume() = default;
    Volume(const GridSpec& g, std::size_t nchan, T fill = T{})
        : grid(g), channels(nchan), data(g.size() * nchan, fill) {}

    T& at(std::size_t voxel, std::size_t c = 0) { return data[c + channels * voxel]; }
    const T& at(std::size_t voxel, std::size_t c = 0) const { return data[c + channels * voxel]; }

    T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0) {
        return at(grid.index(i, j, k), c);
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t c = 0) const {
        return at(grid.index(i, j, k), c);
    }
};

using VolumeD = Volume<double>;
using VolumeF = Volume<float>;

// World-aligned axis box [lo, hi] in mm.
struct WorldBox {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

    bool empty() const { return (hi.array() < lo.array()).any(); }
    void expand(const Vec3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    void pad(double mm) {
        lo.array() -= mm;
        hi.array() += mm;
    }
};

// Axis-aligned working grid at the given isotropic resolution covering a box.
inline GridSpec make_working_grid(const WorldBox& box, double resolution_mm) {
    if (box.empty()) throw data_error("working grid: empty bounding box");
    if (!(resolution_mm > 0.0)) throw config_error("working grid: resolution must be positive");
    GridSpec g;
    for (int a = 0; a < 3; ++a) {
        double extent = box.hi[a] - box.lo[a];
        g.dims[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(extent / resolution_mm)) + 1);
    }
    g.affine = Mat4::Identity();
    g.affine(0, 0) = g.affine(1, 1) = g.affine(2, 2) = resolution_mm;
    g.affine.topRightCorner<3, 1>() = box.lo;
    return g;
}

} // namespace jseg
