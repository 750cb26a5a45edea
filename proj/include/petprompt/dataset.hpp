#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "petprompt/manifest.hpp"

namespace petprompt {

// One (volume, target) pair ready for cropping. Images are normalized once at
// load and shared between the targets of a volume.
struct Sample {
    std::string volume_id;
    std::string target;
    std::shared_ptr<const Volume> image;
    std::shared_ptr<const LabelVolume> label;
    Coord3 center;  // foreground bounding-box center
};

struct SampleFilter {
    std::optional<std::vector<std::string>> targets;  // nullopt = every labelled target
    bool skip_empty = true;                           // dropped LQ labels carry no foreground
    size_t max_volumes = 0;                           // 0 = all
};

// Loads every entry of `split`. Labels keep the entry's quality flag.
std::vector<Sample> load_samples(const DatasetManifest& m, Split split, const SampleFilter& filter = {});

struct Crop {
    Grid3<float> image;
    Grid3<uint8_t> label;
    Coord3 center;  // in full-volume coordinates
};

// Crop of `size` around the sample's bbox center shifted by `offset`. If the
// shift loses every foreground voxel the unshifted center is used instead.
Crop make_crop(const Sample& s, const Shape3& size, const Coord3& offset = {0, 0, 0});

} // namespace petprompt
