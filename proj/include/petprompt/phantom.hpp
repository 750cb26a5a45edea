#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "petprompt/manifest.hpp"
#include "petprompt/volume.hpp"

namespace petprompt::phantom {

struct Organ {
    std::string name;
    std::array<double, 3> center{};  // voxels, (z, y, x)
    std::array<double, 3> radii{};   // voxels
    double uptake = 1.0;
};

struct PhantomSpec {
    Shape3 shape{64, 64, 64};
    std::vector<Organ> organs;
    double background_uptake = 1.0;
    double blur_sigma = 0.0;   // voxels; models the partial-volume effect
    double noise_scale = 0.0;  // multiplicative, signal-proportional
    uint64_t seed = 0;

    void validate() const;
};

struct Phantom {
    Volume image;
    std::map<std::string, LabelVolume> labels;  // HQ ground truth, defined before blurring
};

// Image = background + sum(indicator * uptake), Gaussian-blurred, then
// multiplied voxelwise by max(0, 1 + noise_scale * N(0,1)). Where organs
// overlap, the later organ owns the voxel's label.
Phantom generate_phantom(const PhantomSpec& spec, const std::string& id = "phantom");

// Discrete ellipsoid membership on integer voxel centers.
bool inside(const Organ& organ, int64_t z, int64_t y, int64_t x);

struct CorruptionSpec {
    int radius_min = 0;  // morphological radius interval, voxels
    int radius_max = 0;
    double boundary_flip_rate = 0.0;
    double drop_rate = 0.0;
    uint64_t seed = 0;

    void validate() const;
};

// Ball structuring element (Euclidean radius) on the voxel lattice.
Grid3<uint8_t> dilate(const Grid3<uint8_t>& mask, int radius);
Grid3<uint8_t> erode(const Grid3<uint8_t>& mask, int radius);
// Voxels with at least one 6-neighbor of the other label.
Grid3<uint8_t> boundary_band(const Grid3<uint8_t>& mask);

// Dilates or erodes by a radius drawn from [radius_min, radius_max], flips
// boundary-band voxels independently, and occasionally empties the mask.
LabelVolume corrupt_labels(const LabelVolume& labels, const CorruptionSpec& cspec);

// ----------------------------------------------------------------- recipes

// Randomized whole-body-like layout. Nominal organ placement is fixed; each
// draw jitters centers, radii and uptakes.
struct PhantomRecipe {
    Shape3 shape{64, 64, 64};
    double blur_sigma = 1.0;
    double noise_scale = 0.15;
    double background_uptake = 1.0;
    double uptake_scale = 1.0;
    double center_jitter = 2.0;    // voxels
    double radius_jitter = 0.15;   // relative
    double uptake_jitter = 0.2;    // relative
    std::vector<Organ> organs = default_organs();

    static std::vector<Organ> default_organs();
    // Same anatomy, harsher acquisition: stands in for an external-site shift.
    static PhantomRecipe domain_shifted();
};

PhantomSpec sample_phantom_spec(const PhantomRecipe& recipe, uint64_t seed);

// The five organs training may prompt. The remaining default organs are held out.
std::vector<std::string> default_train_targets();

struct DatasetRecipe {
    int hq = 40;
    int lq = 160;
    int test = 60;
    PhantomRecipe phantom;
    CorruptionSpec corruption{1, 2, 0.3, 0.05, 0};
    std::vector<std::string> train_targets = default_train_targets();
    uint64_t seed = 0;
    std::string id_prefix = "ph";
};

// Writes volumes/, labels/ and manifest.json under `out_dir`. Train entries
// carry labels for train targets only; test entries carry every organ.
DatasetManifest generate_dataset(const DatasetRecipe& recipe, const std::filesystem::path& out_dir);

} // namespace petprompt::phantom
