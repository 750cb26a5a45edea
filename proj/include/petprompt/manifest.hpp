#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "petprompt/volume.hpp"

namespace petprompt {

enum class Split { TrainHQ, TrainLQ, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string id;
    std::filesystem::path volume_path;                    // relative to the manifest directory
    std::map<std::string, std::filesystem::path> labels;  // target name -> label path
    LabelQuality quality = LabelQuality::HQ;
    Split split = Split::Test;
};

// HQ/LQ/test organization of a dataset. Serialized as manifest.json.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    uint64_t seed = 0;
    // Targets that training may prompt; every other labelled target is "unseen".
    std::vector<std::string> train_targets;
    std::filesystem::path base_dir;  // not serialized; set on load

    std::vector<const ManifestEntry*> split(Split s) const;
    std::filesystem::path resolve(const std::filesystem::path& p) const;

    // Throws on quality/split inconsistencies or ids shared across splits.
    void validate() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

} // namespace petprompt
