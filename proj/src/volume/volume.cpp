#include "petprompt/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace petprompt {

std::string to_string(const Shape3& s) {
    return "[" + std::to_string(s.d) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + "]";
}

std::string to_string(const Coord3& c) {
    return "(" + std::to_string(c.z) + "," + std::to_string(c.y) + "," + std::to_string(c.x) + ")";
}

std::string to_string(LabelQuality q) {
    switch (q) {
    case LabelQuality::HQ: return "HQ";
    case LabelQuality::LQ: return "LQ";
    case LabelQuality::Rectified: return "RECTIFIED";
    }
    return "HQ";
}

LabelQuality label_quality_from_string(const std::string& s) {
    if (s == "HQ") return LabelQuality::HQ;
    if (s == "LQ") return LabelQuality::LQ;
    if (s == "RECTIFIED") return LabelQuality::Rectified;
    throw Error("config", "unknown label quality '" + s + "'");
}

int64_t LabelVolume::foreground() const {
    return std::count_if(data.values().begin(), data.values().end(), [](uint8_t v) { return v != 0; });
}

void validate(const Volume& v) {
    for (double s : v.spacing) {
        require(s > 0.0 && std::isfinite(s), "shape", "spacing components must be positive");
    }
    const auto vals = v.data.values();
    const auto bad = std::find_if(vals.begin(), vals.end(), [](float x) { return !std::isfinite(x); });
    if (bad != vals.end()) {
        const Coord3 c = v.data.coord(bad - vals.begin());
        throw Error("non_finite", "volume '" + v.id + "' has a non-finite voxel at " + to_string(c));
    }
}

void validate(const LabelVolume& l) {
    const auto vals = l.data.values();
    const auto bad = std::find_if(vals.begin(), vals.end(), [](uint8_t x) { return x > 1; });
    if (bad != vals.end()) {
        throw Error("label", "label '" + l.target_name + "' has value " + std::to_string(*bad) +
                                 " at " + to_string(l.data.coord(bad - vals.begin())));
    }
}

void validate_pair(const Volume& v, const LabelVolume& l) {
    require(v.shape() == l.shape(), "shape",
            "label '" + l.target_name + "' shape " + to_string(l.shape()) + " differs from volume shape " +
                to_string(v.shape()));
}

double percentile(std::span<const float> values, double pct) {
    require(!values.empty(), "shape", "percentile of an empty set");
    require(pct >= 0.0 && pct <= 100.0, "config", "percentile must lie in [0, 100]");
    std::vector<float> sorted(values.begin(), values.end());
    const double rank = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(lo), sorted.end());
    const double a = sorted[lo];
    if (hi == lo) return a;
    const double b = *std::min_element(sorted.begin() + static_cast<std::ptrdiff_t>(lo) + 1, sorted.end());
    return a + (rank - static_cast<double>(lo)) * (b - a);
}

NormalizedVolume normalize_intensity(const Volume& v, double lo_pct, double hi_pct) {
    require(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0, "config",
            "normalization requires 0 <= lo_pct < hi_pct <= 100");
    NormalizedVolume out{v, std::nullopt};
    const double lo = percentile(v.data.values(), lo_pct);
    const double hi = percentile(v.data.values(), hi_pct);
    auto dst = out.volume.data.values();
    if (!(hi > lo)) {
        std::fill(dst.begin(), dst.end(), 0.0f);
        out.warning = "volume '" + v.id + "' has a degenerate intensity window; normalized to zeros";
        return out;
    }
    const double scale = 1.0 / (hi - lo);
    for (float& x : dst) {
        const double clipped = std::clamp(static_cast<double>(x), lo, hi);
        x = static_cast<float>((clipped - lo) * scale);
    }
    return out;
}

Volume extract_patch(const Volume& v, const Coord3& center, const Shape3& size) {
    return Volume{extract_patch(v.data, center, size), v.spacing, v.id};
}

LabelVolume extract_patch(const LabelVolume& l, const Coord3& center, const Shape3& size) {
    return LabelVolume{extract_patch(l.data, center, size), l.target_name, l.quality};
}

std::optional<Coord3> bbox_center(const LabelVolume& l) {
    const Shape3& s = l.shape();
    Coord3 lo{s.d, s.h, s.w};
    Coord3 hi{-1, -1, -1};
    for (int64_t z = 0; z < s.d; ++z) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t x = 0; x < s.w; ++x) {
                if (l.data(z, y, x) == 0) continue;
                lo = {std::min(lo.z, z), std::min(lo.y, y), std::min(lo.x, x)};
                hi = {std::max(hi.z, z), std::max(hi.y, y), std::max(hi.x, x)};
            }
        }
    }
    if (hi.z < 0) return std::nullopt;
    return Coord3{(lo.z + hi.z + 1) / 2, (lo.y + hi.y + 1) / 2, (lo.x + hi.x + 1) / 2};
}

} // namespace petprompt
