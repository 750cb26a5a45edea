#include "petprompt/prompting.hpp"

#include <algorithm>

namespace petprompt::prompting {

namespace {

// Uniform pick among voxels satisfying `pred`; count must be > 0.
template <typename Pred>
Coord3 pick_uniform(const Shape3& s, int64_t count, Pred pred, std::mt19937_64& rng) {
    int64_t k = std::uniform_int_distribution<int64_t>(0, count - 1)(rng);
    for (int64_t i = 0; i < s.voxels(); ++i) {
        if (!pred(i)) continue;
        if (k-- == 0) {
            const int64_t x = i % s.w;
            const int64_t y = (i / s.w) % s.h;
            return {i / (s.w * s.h), y, x};
        }
    }
    throw Error("internal", "uniform pick ran past the end of the set");
}

} // namespace

PromptPoint initial_prompt(const Grid3<uint8_t>& gt, int perturb_radius, std::mt19937_64& rng) {
    require(perturb_radius >= 0, "config", "perturb_radius must be >= 0");
    const auto vals = gt.values();
    const int64_t count = std::count_if(vals.begin(), vals.end(), [](uint8_t v) { return v != 0; });
    require(count > 0, "empty_mask", "no foreground to prompt");
    const Coord3 base = pick_uniform(gt.shape(), count, [&](int64_t i) { return vals[static_cast<size_t>(i)] != 0; }, rng);
    if (perturb_radius == 0) return {base, Polarity::Positive};

    std::uniform_int_distribution<int64_t> jitter(-perturb_radius, perturb_radius);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const int64_t dz = jitter(rng);
        const int64_t dy = jitter(rng);
        const int64_t dx = jitter(rng);
        const Coord3 c{base.z + dz, base.y + dy, base.x + dx};
        if (in_bounds(gt.shape(), c) && gt[c] != 0) return {c, Polarity::Positive};
    }
    return {base, Polarity::Positive};
}

PromptPoint next_prompt(const Grid3<uint8_t>& gt, const Grid3<uint8_t>& prev_pred, int perturb_radius,
                        std::mt19937_64& rng) {
    require(gt.shape() == prev_pred.shape(), "shape",
            "prediction shape " + to_string(prev_pred.shape()) + " differs from label shape " + to_string(gt.shape()));
    const auto g = gt.values();
    const auto p = prev_pred.values();
    int64_t false_neg = 0;
    int64_t false_pos = 0;
    for (size_t i = 0; i < g.size(); ++i) {
        const bool gi = g[i] != 0;
        const bool pi = p[i] != 0;
        false_neg += gi && !pi;
        false_pos += pi && !gi;
    }
    if (false_neg == 0 && false_pos == 0) return initial_prompt(gt, perturb_radius, rng);
    if (false_neg >= false_pos) {
        const Coord3 c = pick_uniform(gt.shape(), false_neg,
                                      [&](int64_t i) { return g[static_cast<size_t>(i)] != 0 && p[static_cast<size_t>(i)] == 0; }, rng);
        return {c, Polarity::Positive};
    }
    const Coord3 c = pick_uniform(gt.shape(), false_pos,
                                  [&](int64_t i) { return p[static_cast<size_t>(i)] != 0 && g[static_cast<size_t>(i)] == 0; }, rng);
    return {c, Polarity::Negative};
}

int64_t occupied_slices(const Grid3<uint8_t>& gt) {
    const Shape3& s = gt.shape();
    const auto vals = gt.values();
    const int64_t plane = s.h * s.w;
    int64_t n = 0;
    for (int64_t z = 0; z < s.d; ++z) {
        const auto first = vals.begin() + z * plane;
        n += std::any_of(first, first + plane, [](uint8_t v) { return v != 0; });
    }
    return n;
}

std::vector<SlicePrompts> slicewise_budget(const Grid3<uint8_t>& gt, int points_per_slice, std::mt19937_64& rng) {
    require(points_per_slice == 1 || points_per_slice == 3 || points_per_slice == 5, "config",
            "points_per_slice must be 1, 3 or 5");
    const Shape3& s = gt.shape();
    std::vector<SlicePrompts> out;
    std::vector<Coord3> fg;
    for (int64_t z = 0; z < s.d; ++z) {
        fg.clear();
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x)
                if (gt(z, y, x)) fg.push_back({z, y, x});
        if (fg.empty()) continue;
        SlicePrompts sp{z, {}};
        if (static_cast<int64_t>(fg.size()) >= points_per_slice) {
            std::vector<Coord3> chosen;
            std::sample(fg.begin(), fg.end(), std::back_inserter(chosen), points_per_slice, rng);
            for (const auto& c : chosen) sp.points.push_back({c, Polarity::Positive});
        } else {
            std::uniform_int_distribution<size_t> pick(0, fg.size() - 1);
            for (int k = 0; k < points_per_slice; ++k) sp.points.push_back({fg[pick(rng)], Polarity::Positive});
        }
        out.push_back(std::move(sp));
    }
    require(!out.empty(), "empty_mask", "no foreground to prompt");
    return out;
}

} // namespace petprompt::prompting
