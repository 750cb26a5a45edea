#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "petprompt/error.hpp"

namespace petprompt {

// Axis order is D x H x W throughout (slice-major, W fastest).
struct Shape3 {
    int64_t d = 0;
    int64_t h = 0;
    int64_t w = 0;

    int64_t voxels() const { return d * h * w; }
    int64_t operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    bool operator==(const Shape3&) const = default;
};

struct Coord3 {
    int64_t z = 0;
    int64_t y = 0;
    int64_t x = 0;

    int64_t operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
    bool operator==(const Coord3&) const = default;
};

using Spacing3 = std::array<double, 3>;

std::string to_string(const Shape3& s);
std::string to_string(const Coord3& c);

inline bool in_bounds(const Shape3& s, const Coord3& c) {
    return c.z >= 0 && c.y >= 0 && c.x >= 0 && c.z < s.d && c.y < s.h && c.x < s.w;
}

// Dense 3D grid with value semantics.
template <typename T>
class Grid3 {
public:
    Grid3() = default;
    explicit Grid3(Shape3 shape, T fill = T{}) : shape_(shape), data_(check(shape), fill) {}
    Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        require(static_cast<int64_t>(data_.size()) == check(shape), "shape",
                "grid data size " + std::to_string(data_.size()) + " does not match shape " +
                    to_string(shape));
    }

    const Shape3& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * shape_.h + y) * shape_.w + x; }
    int64_t index(const Coord3& c) const { return index(c.z, c.y, c.x); }
    Coord3 coord(int64_t flat) const {
        const int64_t x = flat % shape_.w;
        const int64_t y = (flat / shape_.w) % shape_.h;
        return {flat / (shape_.w * shape_.h), y, x};
    }

    T& operator()(int64_t z, int64_t y, int64_t x) { return data_[static_cast<size_t>(index(z, y, x))]; }
    const T& operator()(int64_t z, int64_t y, int64_t x) const {
        return data_[static_cast<size_t>(index(z, y, x))];
    }
    T& operator[](const Coord3& c) { return data_[static_cast<size_t>(index(c))]; }
    const T& operator[](const Coord3& c) const { return data_[static_cast<size_t>(index(c))]; }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    bool operator==(const Grid3&) const = default;

private:
    static int64_t check(const Shape3& s) {
        require(s.d >= 1 && s.h >= 1 && s.w >= 1, "shape", "all dimensions must be >= 1, got " + to_string(s));
        return s.voxels();
    }

    Shape3 shape_{};
    std::vector<T> data_;
};

struct Volume {
    Grid3<float> data;
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::string id;

    const Shape3& shape() const { return data.shape(); }
};

enum class LabelQuality { HQ, LQ, Rectified };

std::string to_string(LabelQuality q);
LabelQuality label_quality_from_string(const std::string& s);

struct LabelVolume {
    Grid3<uint8_t> data;
    std::string target_name;
    LabelQuality quality = LabelQuality::HQ;

    const Shape3& shape() const { return data.shape(); }
    int64_t foreground() const;
};

// Throws unless spacing is positive and every voxel is finite.
void validate(const Volume& v);
// Throws unless every voxel is 0 or 1.
void validate(const LabelVolume& l);
// Throws unless the label is shaped like the volume.
void validate_pair(const Volume& v, const LabelVolume& l);

struct NormalizedVolume {
    Volume volume;
    std::optional<std::string> warning;
};

// Linear-interpolated percentile (same convention as numpy's default).
double percentile(std::span<const float> values, double pct);

// Clips to the [lo_pct, hi_pct] percentiles and rescales to [0, 1]. A volume
// whose percentile window collapses maps to all zeros and sets `warning`.
NormalizedVolume normalize_intensity(const Volume& v, double lo_pct = 0.5, double hi_pct = 99.5);

// Crop of `size` voxels whose center voxel is `center` (start = center - size/2).
// Voxels outside the source are zero.
template <typename T>
Grid3<T> extract_patch(const Grid3<T>& src, const Coord3& center, const Shape3& size) {
    require(size.d > 0 && size.h > 0 && size.w > 0, "shape", "patch size must be positive");
    Grid3<T> out(size);
    const Coord3 start{center.z - size.d / 2, center.y - size.h / 2, center.x - size.w / 2};
    const Shape3& s = src.shape();
    for (int64_t z = 0; z < size.d; ++z) {
        const int64_t sz = start.z + z;
        if (sz < 0 || sz >= s.d) continue;
        for (int64_t y = 0; y < size.h; ++y) {
            const int64_t sy = start.y + y;
            if (sy < 0 || sy >= s.h) continue;
            for (int64_t x = 0; x < size.w; ++x) {
                const int64_t sx = start.x + x;
                if (sx < 0 || sx >= s.w) continue;
                out(z, y, x) = src(sz, sy, sx);
            }
        }
    }
    return out;
}

// Inverse of extract_patch: writes `patch` back into `dst` at the same geometry,
// dropping voxels that fall outside.
template <typename T>
void insert_patch(Grid3<T>& dst, const Grid3<T>& patch, const Coord3& center) {
    const Shape3& size = patch.shape();
    const Coord3 start{center.z - size.d / 2, center.y - size.h / 2, center.x - size.w / 2};
    const Shape3& s = dst.shape();
    for (int64_t z = 0; z < size.d; ++z) {
        const int64_t dz = start.z + z;
        if (dz < 0 || dz >= s.d) continue;
        for (int64_t y = 0; y < size.h; ++y) {
            const int64_t dy = start.y + y;
            if (dy < 0 || dy >= s.h) continue;
            for (int64_t x = 0; x < size.w; ++x) {
                const int64_t dx = start.x + x;
                if (dx < 0 || dx >= s.w) continue;
                dst(dz, dy, dx) = patch(z, y, x);
            }
        }
    }
}

inline Coord3 to_patch_coords(const Coord3& c, const Coord3& center, const Shape3& size) {
    return {c.z - (center.z - size.d / 2), c.y - (center.y - size.h / 2), c.x - (center.x - size.w / 2)};
}

inline Coord3 from_patch_coords(const Coord3& c, const Coord3& center, const Shape3& size) {
    return {c.z + (center.z - size.d / 2), c.y + (center.y - size.h / 2), c.x + (center.x - size.w / 2)};
}

Volume extract_patch(const Volume& v, const Coord3& center, const Shape3& size);
LabelVolume extract_patch(const LabelVolume& l, const Coord3& center, const Shape3& size);

// Center of the foreground bounding box, or nullopt for an empty mask.
std::optional<Coord3> bbox_center(const LabelVolume& l);

inline Coord3 grid_center(const Shape3& s) { return {s.d / 2, s.h / 2, s.w / 2}; }

} // namespace petprompt
