#pragma once

#include <ostream>
#include <random>
#include <utility>
#include <vector>

#include "petprompt/volume.hpp"

namespace petprompt {

enum class Polarity : uint8_t { Negative = 0, Positive = 1 };

struct PromptPoint {
    Coord3 coord;
    Polarity polarity = Polarity::Positive;

    bool operator==(const PromptPoint&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const PromptPoint& p) {
    return os << to_string(p.coord) << (p.polarity == Polarity::Positive ? '+' : '-');
}

namespace prompting {

enum class Mode { Volumetric3D, Slicewise2D };

struct PromptPolicy {
    int perturb_radius = 2;  // voxels of jitter on the initial point
    uint64_t seed = 0;
    Mode mode = Mode::Volumetric3D;
};

// A positive point drawn uniformly from the foreground, then jittered by up to
// perturb_radius per axis. Jitter is re-drawn (10 attempts) until the point
// stays in the foreground; after that the unjittered voxel is returned.
PromptPoint initial_prompt(const Grid3<uint8_t>& gt, int perturb_radius, std::mt19937_64& rng);

// Samples from the larger of the false-negative set (positive point) and the
// false-positive set (negative point); ties go to false negatives. With no
// error left it falls back to initial_prompt.
PromptPoint next_prompt(const Grid3<uint8_t>& gt, const Grid3<uint8_t>& prev_pred, int perturb_radius,
                        std::mt19937_64& rng);

struct SlicePrompts {
    int64_t slice = 0;
    std::vector<PromptPoint> points;
};

// 2D-protocol prompts: points_per_slice positive points on every axial slice
// holding foreground. points_per_slice must be 1, 3 or 5.
std::vector<SlicePrompts> slicewise_budget(const Grid3<uint8_t>& gt, int points_per_slice, std::mt19937_64& rng);

// Number of axial slices containing foreground.
int64_t occupied_slices(const Grid3<uint8_t>& gt);

// Seeded prompt stream over one policy: (gt, prediction sequence, seed)
// fully determine the emitted points.
class PromptSampler {
public:
    explicit PromptSampler(PromptPolicy policy) : policy_(policy), rng_(policy.seed) {}

    PromptPoint initial(const Grid3<uint8_t>& gt) { return initial_prompt(gt, policy_.perturb_radius, rng_); }
    PromptPoint next(const Grid3<uint8_t>& gt, const Grid3<uint8_t>& prev_pred) {
        return next_prompt(gt, prev_pred, policy_.perturb_radius, rng_);
    }
    std::vector<SlicePrompts> slicewise(const Grid3<uint8_t>& gt, int points_per_slice) {
        return slicewise_budget(gt, points_per_slice, rng_);
    }

    const PromptPolicy& policy() const { return policy_; }

private:
    PromptPolicy policy_;
    std::mt19937_64 rng_;
};

} // namespace prompting
} // namespace petprompt
