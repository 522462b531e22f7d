#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "jseg/grid.hpp"

namespace jseg {

enum class NiftiType : int16_t {
    u8 = 2,
    i16 = 4,
    f32 = 16,
    f64 = 64,
};

namespace detail {

#pragma pack(push, 1)
struct NiftiHeader {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

inline int bitpix_for(NiftiType t) {
    switch (t) {
        case NiftiType::u8: return 8;
        case NiftiType::i16: return 16;
        case NiftiType::f32: return 32;
        case NiftiType::f64: return 64;
    }
    throw data_error("nifti: unsupported datatype");
}

// gzread handles plain files transparently, so all reads go through zlib.
class GzReader {
public:
    explicit GzReader(const std::string& path) : f_(gzopen(path.c_str(), "rb")) {
        if (!f_) throw data_error("cannot open '" + path + "'");
    }
    ~GzReader() {
        if (f_) gzclose(f_);
    }
    GzReader(const GzReader&) = delete;
    GzReader& operator=(const GzReader&) = delete;

    void read(void* dst, std::size_t bytes, const std::string& what) {
        std::size_t done = 0;
        auto* p = static_cast<unsigned char*>(dst);
        while (done < bytes) {
            unsigned chunk = unsigned(std::min<std::size_t>(bytes - done, 1u << 30));
            int got = gzread(f_, p + done, chunk);
            if (got <= 0) throw data_error("nifti: truncated file while reading " + what);
            done += std::size_t(got);
        }
    }

private:
    gzFile f_;
};

class GzOrPlainWriter {
public:
    GzOrPlainWriter(const std::string& path, bool gz) : gz_(gz) {
        if (gz_) {
            zf_ = gzopen(path.c_str(), "wb6");
            if (!zf_) throw data_error("cannot create '" + path + "'");
        } else {
            out_.open(path, std::ios::binary);
            if (!out_) throw data_error("cannot create '" + path + "'");
        }
    }
    ~GzOrPlainWriter() {
        if (zf_) gzclose(zf_);
    }
    GzOrPlainWriter(const GzOrPlainWriter&) = delete;
    GzOrPlainWriter& operator=(const GzOrPlainWriter&) = delete;

    void write(const void* src, std::size_t bytes) {
        if (gz_) {
            std::size_t done = 0;
            auto* p = static_cast<const unsigned char*>(src);
            while (done < bytes) {
                unsigned chunk = unsigned(std::min<std::size_t>(bytes - done, 1u << 30));
                if (gzwrite(zf_, p + done, chunk) != int(chunk))
                    throw data_error("nifti: write failed");
                done += chunk;
            }
        } else {
            out_.write(static_cast<const char*>(src), std::streamsize(bytes));
            if (!out_) throw data_error("nifti: write failed");
        }
    }

private:
    bool gz_;
    gzFile zf_ = nullptr;
    std::ofstream out_;
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace detail

struct NiftiImage {
    VolumeD vol;
    NiftiType stored_type = NiftiType::f32;
};

inline NiftiImage read_nifti(const std::string& path) {
    detail::GzReader in(path);
    detail::NiftiHeader h;
    in.read(&h, sizeof(h), "header");
    if (h.sizeof_hdr != 348) {
        int32_t swapped;
        auto* b = reinterpret_cast<const unsigned char*>(&h.sizeof_hdr);
        swapped = int32_t(b[0]) << 24 | int32_t(b[1]) << 16 | int32_t(b[2]) << 8 | int32_t(b[3]);
        if (swapped == 348)
            throw data_error("nifti: byte-swapped files are not supported: " + path);
        throw data_error("nifti: not a NIfTI-1 file: " + path);
    }
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw data_error("nifti: only single-file (n+1) images are supported: " + path);
    if (h.dim[0] < 3 || h.dim[0] > 4)
        throw data_error("nifti: expected a 3-D or 4-D image: " + path);
    for (int a = 1; a <= h.dim[0]; ++a)
        if (h.dim[a] <= 0) throw data_error("nifti: non-positive dimension: " + path);

    GridSpec g;
    g.dims = {std::size_t(h.dim[1]), std::size_t(h.dim[2]), std::size_t(h.dim[3])};
    std::size_t channels = h.dim[0] == 4 ? std::size_t(h.dim[4]) : 1;

    g.affine = Mat4::Identity();
    if (h.sform_code > 0) {
        for (int j = 0; j < 4; ++j) {
            g.affine(0, j) = h.srow_x[j];
            g.affine(1, j) = h.srow_y[j];
            g.affine(2, j) = h.srow_z[j];
        }
    } else if (h.qform_code > 0) {
        double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        double a2 = 1.0 - b * b - c * c - d * d;
        double a = a2 > 0.0 ? std::sqrt(a2) : 0.0;
        Mat3 r;
        r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
             2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b),
             2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d;
        double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
        for (int j = 0; j < 3; ++j) {
            double sc = (j == 2 ? qfac : 1.0) * double(h.pixdim[j + 1]);
            g.affine.block<3, 1>(0, j) = r.col(j) * sc;
        }
        g.affine.topRightCorner<3, 1>() = Vec3(h.qoffset_x, h.qoffset_y, h.qoffset_z);
    } else {
        // neither transform set: fall back to pixdim scaling at the origin
        for (int j = 0; j < 3; ++j) g.affine(j, j) = h.pixdim[j + 1] > 0.0f ? h.pixdim[j + 1] : 1.0;
    }

    if (h.vox_offset < 348.0f) throw data_error("nifti: bad voxel offset: " + path);
    std::size_t skip = std::size_t(h.vox_offset) - sizeof(h);
    if (skip > 0) {
        std::vector<char> pad(skip);
        in.read(pad.data(), skip, "extensions");
    }

    NiftiImage img;
    img.vol = VolumeD(g, channels);
    img.stored_type = NiftiType(h.datatype);
    const std::size_t nvox = g.size();
    double slope = (h.scl_slope == 0.0f) ? 1.0 : double(h.scl_slope);
    double inter = (h.scl_slope == 0.0f) ? 0.0 : double(h.scl_inter);
    bool scaled = !(slope == 1.0 && inter == 0.0);

    auto load = [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> buf(nvox);
        for (std::size_t c = 0; c < channels; ++c) {
            in.read(buf.data(), nvox * sizeof(T), "image data");
            for (std::size_t v = 0; v < nvox; ++v) {
                double val = double(buf[v]);
                img.vol.at(v, c) = scaled ? val * slope + inter : val;
            }
        }
    };
    switch (NiftiType(h.datatype)) {
        case NiftiType::u8: load(uint8_t{}); break;
        case NiftiType::i16: load(int16_t{}); break;
        case NiftiType::f32: load(float{}); break;
        case NiftiType::f64: load(double{}); break;
        default:
            throw data_error("nifti: unsupported datatype " + std::to_string(h.datatype) + ": " + path);
    }
    return img;
}

inline void write_nifti(const std::string& path, const VolumeD& vol, NiftiType type) {
    detail::NiftiHeader h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    bool is4d = vol.channels > 1;
    h.dim[0] = is4d ? 4 : 3;
    h.dim[1] = int16_t(vol.grid.dims[0]);
    h.dim[2] = int16_t(vol.grid.dims[1]);
    h.dim[3] = int16_t(vol.grid.dims[2]);
    h.dim[4] = is4d ? int16_t(vol.channels) : 1;
    for (int a = 5; a < 8; ++a) h.dim[a] = 1;
    h.datatype = int16_t(type);
    h.bitpix = int16_t(detail::bitpix_for(type));
    Vec3 sp = vol.grid.spacing();
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = float(sp[a]);
    h.pixdim[4] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2; // millimetres
    h.sform_code = 1;
    h.qform_code = 0;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = float(vol.grid.affine(0, j));
        h.srow_y[j] = float(vol.grid.affine(1, j));
        h.srow_z[j] = float(vol.grid.affine(2, j));
    }
    std::memcpy(h.magic, "n+1", 4);

    detail::GzOrPlainWriter out(path, detail::ends_with(path, ".gz"));
    out.write(&h, sizeof(h));
    const char pad[4] = {0, 0, 0, 0};
    out.write(pad, 4);

    const std::size_t nvox = vol.grid.size();
    auto store = [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> buf(nvox);
        for (std::size_t c = 0; c < vol.channels; ++c) {
            for (std::size_t v = 0; v < nvox; ++v) {
                double val = vol.at(v, c);
                if constexpr (std::is_integral_v<T>) {
                    double lo = double(std::numeric_limits<T>::min());
                    double hi = double(std::numeric_limits<T>::max());
                    buf[v] = T(std::llround(std::clamp(val, lo, hi)));
                } else {
                    buf[v] = T(val);
                }
            }
            out.write(buf.data(), nvox * sizeof(T));
        }
    };
    switch (type) {
        case NiftiType::u8: store(uint8_t{}); break;
        case NiftiType::i16: store(int16_t{}); break;
        case NiftiType::f32: store(float{}); break;
        case NiftiType::f64: store(double{}); break;
    }
}

// 4x4 affine as whitespace-separated text, row-major.
inline Mat4 read_affine_txt(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open '" + path + "'");
    Mat4 m;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (!(in >> m(i, j))) throw data_error("affine file '" + path + "': expected 16 numbers");
    return m;
}

inline void write_affine_txt(const std::string& path, const Mat4& m) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot create '" + path + "'");
    out.precision(17);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) out << m(i, j) << (j == 3 ? '\n' : ' ');
    }
}

} // namespace jseg
