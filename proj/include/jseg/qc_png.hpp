#pragma once

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "jseg/common.hpp"
#include "jseg/grid.hpp"

namespace jseg {

// Minimal RGB8 PNG writer, enough for QC snapshots. One IDAT chunk,
// filter type 0 on every row.
inline void write_png_rgb(const std::string& path, int width, int height,
                          const std::vector<uint8_t>& rgb) {
    if (static_cast<std::size_t>(width) * height * 3 != rgb.size())
        throw data_error("png buffer size does not match dimensions");

    std::vector<uint8_t> raw;
    raw.reserve(rgb.size() + height);
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), rgb.begin() + std::size_t(y) * width * 3,
                   rgb.begin() + std::size_t(y + 1) * width * 3);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> zdata(bound);
    if (compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw data_error("png deflate failed");
    zdata.resize(bound);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write " + path);

    auto be32 = [](uint32_t v) {
        std::array<uint8_t, 4> b{uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
        return b;
    };
    auto chunk = [&](const char type[4], const uint8_t* data, uint32_t len) {
        auto lb = be32(len);
        out.write(reinterpret_cast<const char*>(lb.data()), 4);
        uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(type), 4);
        out.write(type, 4);
        if (len) {
            crc = crc32(crc, data, len);
            out.write(reinterpret_cast<const char*>(data), len);
        }
        auto cb = be32(crc);
        out.write(reinterpret_cast<const char*>(cb.data()), 4);
    };

    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.write(reinterpret_cast<const char*>(sig), 8);

    uint8_t ihdr[13];
    auto wb = be32(uint32_t(width));
    auto hb = be32(uint32_t(height));
    std::memcpy(ihdr, wb.data(), 4);
    std::memcpy(ihdr + 4, hb.data(), 4);
    ihdr[8] = 8;  // bit depth
    ihdr[9] = 2;  // truecolor
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    chunk("IHDR", ihdr, 13);
    chunk("IDAT", zdata.data(), uint32_t(zdata.size()));
    chunk("IEND", nullptr, 0);
    if (!out) throw data_error("write failed: " + path);
}

// Fixed label palette; wraps after 12 classes, label 0 stays dark.
inline std::array<uint8_t, 3> label_color(int label) {
    static const std::array<uint8_t, 3> table[] = {
        {40, 40, 40},   {230, 80, 60},   {70, 160, 235}, {90, 200, 90},
        {240, 200, 60}, {190, 100, 220}, {80, 210, 200}, {245, 140, 40},
        {150, 150, 240}, {200, 220, 100}, {220, 110, 150}, {120, 200, 150},
    };
    if (label <= 0) return table[0];
    return table[1 + (label - 1) % 11];
}

// Mid-volume axial/coronal/sagittal label overlays on the scalar image.
// Output rows run top to bottom along decreasing second slice axis so the
// slices look upright in ordinary viewers.
inline void write_qc_slices(const std::string& prefix, const VolumeD& scalar,
                            const Volume<int16_t>& labels, double blend = 0.45) {
    const auto& dims = scalar.grid.dims;
    double lo = 1e300, hi = -1e300;
    for (double v : scalar.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) hi = lo + 1;

    struct Plane {
        const char* name;
        int axis;
    };
    const Plane planes[] = {{"axial", 2}, {"coronal", 1}, {"sagittal", 0}};
    for (const Plane& pl : planes) {
        int a = pl.axis;
        int u = (a == 0) ? 1 : 0;
        int v = (a == 2) ? 1 : 2;
        int w = dims[u], h = dims[v];
        int mid = dims[a] / 2;
        std::vector<uint8_t> rgb(std::size_t(w) * h * 3);
        std::ptrdiff_t vox[3];
        vox[a] = mid;
        for (int row = 0; row < h; ++row) {
            vox[v] = h - 1 - row;
            for (int col = 0; col < w; ++col) {
                vox[u] = col;
                std::size_t idx = scalar.grid.index(vox[0], vox[1], vox[2]);
                double g = (scalar.data[idx * scalar.channels] - lo) / (hi - lo);
                uint8_t gray = uint8_t(std::lround(255.0 * std::clamp(g, 0.0, 1.0)));
                auto color = label_color(labels.data[idx]);
                std::size_t o = (std::size_t(row) * w + col) * 3;
                for (int ch = 0; ch < 3; ++ch)
                    rgb[o + ch] =
                        uint8_t(std::lround((1.0 - blend) * gray + blend * color[ch]));
            }
        }
        write_png_rgb(prefix + "_" + pl.name + ".png", w, h, rgb);
    }
}

} // namespace jseg
