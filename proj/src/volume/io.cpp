#include "petprompt/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include "json.hpp"
#include <string_view>

namespace petprompt::io {

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

namespace {

using json = nlohmann::json;

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct RawPaths {
    fs::path raw;
    fs::path sidecar;
};

RawPaths raw_paths(const fs::path& path) {
    fs::path base = path;
    base.replace_extension();
    return {fs::path(base).concat(".raw"), fs::path(base).concat(".json")};
}

void require_exists(const fs::path& p) {
    require(fs::exists(p), "not_found", "missing file: " + p.string());
}

// ---------------------------------------------------------------- raw + json

struct RawHeader {
    Shape3 shape;
    Spacing3 spacing{1, 1, 1};
    std::string dtype = "f32";
    json extra;
};

RawHeader read_sidecar(const fs::path& sidecar) {
    require_exists(sidecar);
    std::ifstream in(sidecar);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error("io", "malformed sidecar " + sidecar.string() + ": " + e.what());
    }
    require(j.contains("shape") && j["shape"].is_array(), "io", "sidecar " + sidecar.string() + " lacks \"shape\"");
    const auto& shape = j["shape"];
    require(shape.size() == 3, "shape",
            "expected 3 dimensions in " + sidecar.string() + ", got " + std::to_string(shape.size()));
    RawHeader h;
    h.shape = {shape[0].get<int64_t>(), shape[1].get<int64_t>(), shape[2].get<int64_t>()};
    require(h.shape.d >= 1 && h.shape.h >= 1 && h.shape.w >= 1, "shape", "sidecar shape must be positive");
    if (j.contains("spacing")) {
        const auto& sp = j["spacing"];
        require(sp.is_array() && sp.size() == 3, "shape", "expected 3 spacing components in " + sidecar.string());
        h.spacing = {sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
    }
    h.dtype = j.value("dtype", std::string("f32"));
    require(h.dtype == "f32" || h.dtype == "u8", "io", "unsupported dtype '" + h.dtype + "'");
    h.extra = j;
    return h;
}

template <typename T>
std::vector<T> read_raw(const fs::path& raw, int64_t count) {
    require_exists(raw);
    const auto expected = static_cast<uintmax_t>(count) * sizeof(T);
    const auto actual = fs::file_size(raw);
    require(actual == expected, "shape",
            raw.string() + " holds " + std::to_string(actual) + " bytes but the sidecar shape implies " +
                std::to_string(expected));
    std::vector<T> data(static_cast<size_t>(count));
    std::ifstream in(raw, std::ios::binary);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(expected));
    require(static_cast<bool>(in), "io", "short read from " + raw.string());
    return data;
}

template <typename T>
void write_raw(const fs::path& raw, std::span<const T> data) {
    std::ofstream out(raw, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "io", "cannot open " + raw.string() + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    require(static_cast<bool>(out), "io", "write failed: " + raw.string());
}

void write_sidecar(const fs::path& sidecar, const Shape3& s, const Spacing3& sp, const std::string& dtype,
                   json extra) {
    extra["shape"] = {s.d, s.h, s.w};
    extra["spacing"] = {sp[0], sp[1], sp[2]};
    extra["dtype"] = dtype;
    std::ofstream out(sidecar, std::ios::trunc);
    require(static_cast<bool>(out), "io", "cannot open " + sidecar.string() + " for writing");
    out << extra.dump(2) << '\n';
}

// --------------------------------------------------------------------- NIfTI

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
static_assert(sizeof(NiftiHeader) == 348);

enum NiftiType : int16_t {
    kUInt8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUInt16 = 512,
    kUInt32 = 768,
};

std::string read_all_gz(const fs::path& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    require(f != nullptr, "io", "cannot open " + path.string());
    std::string buf;
    char chunk[1 << 16];
    int n = 0;
    while ((n = gzread(f, chunk, sizeof(chunk))) > 0) buf.append(chunk, static_cast<size_t>(n));
    const bool failed = n < 0;
    gzclose(f);
    require(!failed, "io", "decompression failed: " + path.string());
    return buf;
}

void write_all(const fs::path& path, const std::string& bytes) {
    if (ends_with(path.string(), ".gz")) {
        gzFile f = gzopen(path.c_str(), "wb6");
        require(f != nullptr, "io", "cannot open " + path.string() + " for writing");
        const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        require(n == static_cast<int>(bytes.size()), "io", "compression failed: " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "io", "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct NiftiImage {
    Shape3 shape;
    Spacing3 spacing;
    std::vector<double> values;
};

template <typename T>
void decode_voxels(const char* src, size_t count, double slope, double inter, std::vector<double>& out) {
    out.resize(count);
    for (size_t i = 0; i < count; ++i) {
        T v;
        std::memcpy(&v, src + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v) * slope + inter;
    }
}

NiftiImage read_nifti(const fs::path& path) {
    require_exists(path);
    const std::string bytes = read_all_gz(path);  // gzread passes through uncompressed files
    require(bytes.size() >= sizeof(NiftiHeader), "io", path.string() + " is too small for a NIfTI header");
    NiftiHeader h;
    std::memcpy(&h, bytes.data(), sizeof(h));
    require(h.sizeof_hdr == 348, "io", path.string() + ": not a little-endian NIfTI-1 file");
    require(std::memcmp(h.magic, "n+1", 4) == 0, "io", path.string() + ": only single-file NIfTI (n+1) is supported");
    const int ndim = h.dim[0];
    require(ndim >= 1 && ndim <= 7, "io", path.string() + ": invalid dim[0]");
    int effective = ndim;
    while (effective > 3 && h.dim[effective] == 1) --effective;
    require(effective == 3, "shape", "expected 3 dimensions in " + path.string() + ", got " + std::to_string(effective));

    NiftiImage img;
    img.shape = {h.dim[3], h.dim[2], h.dim[1]};
    require(img.shape.d >= 1 && img.shape.h >= 1 && img.shape.w >= 1, "shape", "non-positive NIfTI dimension");
    img.spacing = {std::abs(h.pixdim[3]), std::abs(h.pixdim[2]), std::abs(h.pixdim[1])};
    for (double& s : img.spacing) {
        if (!(s > 0.0)) s = 1.0;
    }

    const auto count = static_cast<size_t>(img.shape.voxels());
    const auto offset = static_cast<size_t>(h.vox_offset);
    const size_t bytes_per_voxel = static_cast<size_t>(h.bitpix) / 8;
    require(bytes.size() >= offset + count * bytes_per_voxel, "shape",
            path.string() + ": voxel data shorter than the header shape implies");
    double slope = h.scl_slope;
    double inter = h.scl_inter;
    if (slope == 0.0 || !std::isfinite(slope)) {
        slope = 1.0;
        inter = 0.0;
    }
    const char* src = bytes.data() + offset;
    switch (h.datatype) {
    case kUInt8: decode_voxels<uint8_t>(src, count, slope, inter, img.values); break;
    case kInt8: decode_voxels<int8_t>(src, count, slope, inter, img.values); break;
    case kInt16: decode_voxels<int16_t>(src, count, slope, inter, img.values); break;
    case kUInt16: decode_voxels<uint16_t>(src, count, slope, inter, img.values); break;
    case kInt32: decode_voxels<int32_t>(src, count, slope, inter, img.values); break;
    case kUInt32: decode_voxels<uint32_t>(src, count, slope, inter, img.values); break;
    case kFloat32: decode_voxels<float>(src, count, slope, inter, img.values); break;
    case kFloat64: decode_voxels<double>(src, count, slope, inter, img.values); break;
    default: throw Error("io", path.string() + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
    }
    return img;
}

template <typename T>
void write_nifti(const fs::path& path, const Shape3& s, const Spacing3& sp, std::span<const T> data,
                 int16_t datatype) {
    NiftiHeader h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(s.w);
    h.dim[2] = static_cast<int16_t>(s.h);
    h.dim[3] = static_cast<int16_t>(s.d);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = static_cast<int16_t>(8 * sizeof(T));
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(sp[2]);
    h.pixdim[2] = static_cast<float>(sp[1]);
    h.pixdim[3] = static_cast<float>(sp[0]);
    for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // millimetres
    h.sform_code = 1;
    h.srow_x[0] = h.pixdim[1];
    h.srow_y[1] = h.pixdim[2];
    h.srow_z[2] = h.pixdim[3];
    std::memcpy(h.magic, "n+1", 4);
    require(s.d < 32768 && s.h < 32768 && s.w < 32768, "shape", "volume too large for NIfTI-1");

    std::string bytes(352 + data.size_bytes(), '\0');
    std::memcpy(bytes.data(), &h, sizeof(h));
    std::memcpy(bytes.data() + 352, data.data(), data.size_bytes());
    write_all(path, bytes);
}

} // namespace

bool is_nifti(const fs::path& path) {
    const std::string s = path.string();
    return ends_with(s, ".nii") || ends_with(s, ".nii.gz");
}

Volume load_volume(const fs::path& path) {
    Volume v;
    if (is_nifti(path)) {
        NiftiImage img = read_nifti(path);
        std::vector<float> data(img.values.size());
        std::transform(img.values.begin(), img.values.end(), data.begin(),
                       [](double x) { return static_cast<float>(x); });
        v.data = Grid3<float>(img.shape, std::move(data));
        v.spacing = img.spacing;
        std::string name = path.filename().string();
        v.id = name.substr(0, name.find(".nii"));
    } else {
        const RawPaths p = raw_paths(path);
        const RawHeader h = read_sidecar(p.sidecar);
        if (h.dtype == "f32") {
            v.data = Grid3<float>(h.shape, read_raw<float>(p.raw, h.shape.voxels()));
        } else {
            const auto bytes = read_raw<uint8_t>(p.raw, h.shape.voxels());
            v.data = Grid3<float>(h.shape, std::vector<float>(bytes.begin(), bytes.end()));
        }
        v.spacing = h.spacing;
        v.id = h.extra.value("id", p.raw.stem().string());
    }
    validate(v);
    return v;
}

void save_volume(const Volume& v, const fs::path& path) {
    validate(v);
    if (is_nifti(path)) {
        write_nifti<float>(path, v.shape(), v.spacing, v.data.values(), kFloat32);
        return;
    }
    const RawPaths p = raw_paths(path);
    write_raw<float>(p.raw, v.data.values());
    write_sidecar(p.sidecar, v.shape(), v.spacing, "f32", json{{"id", v.id}});
}

LabelVolume load_label(const fs::path& path, const std::string& target_name, LabelQuality quality) {
    LabelVolume l;
    l.target_name = target_name;
    l.quality = quality;
    std::vector<double> values;
    Shape3 shape;
    if (is_nifti(path)) {
        NiftiImage img = read_nifti(path);
        shape = img.shape;
        values = std::move(img.values);
    } else {
        const RawPaths p = raw_paths(path);
        const RawHeader h = read_sidecar(p.sidecar);
        shape = h.shape;
        if (h.dtype == "u8") {
            const auto bytes = read_raw<uint8_t>(p.raw, h.shape.voxels());
            values.assign(bytes.begin(), bytes.end());
        } else {
            const auto floats = read_raw<float>(p.raw, h.shape.voxels());
            values.assign(floats.begin(), floats.end());
        }
        if (l.target_name.empty()) l.target_name = h.extra.value("target", std::string{});
        if (h.extra.contains("quality")) l.quality = label_quality_from_string(h.extra["quality"].get<std::string>());
    }
    std::vector<uint8_t> data(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        const double x = values[i];
        require(x == 0.0 || x == 1.0, "label",
                path.string() + ": label voxels must be 0 or 1, found " + std::to_string(x));
        data[i] = static_cast<uint8_t>(x);
    }
    l.data = Grid3<uint8_t>(shape, std::move(data));
    return l;
}

void save_label(const LabelVolume& l, const fs::path& path) {
    validate(l);
    if (is_nifti(path)) {
        write_nifti<uint8_t>(path, l.shape(), {1, 1, 1}, l.data.values(), kUInt8);
        return;
    }
    const RawPaths p = raw_paths(path);
    write_raw<uint8_t>(p.raw, l.data.values());
    write_sidecar(p.sidecar, l.shape(), {1, 1, 1}, "u8",
                  json{{"target", l.target_name}, {"quality", to_string(l.quality)}});
}

} // namespace petprompt::io
