#pragma once

#include <filesystem>

#include "petprompt/volume.hpp"

namespace petprompt::io {

namespace fs = std::filesystem;

// Supported on-disk layouts, chosen by extension:
//   <id>.raw + <id>.json   little-endian f32 (or u8 for labels), D-major,
//                          sidecar {"shape":[D,H,W],"spacing":[sd,sh,sw],"dtype":"f32"}
//   <id>.nii / <id>.nii.gz NIfTI-1 single file
// Passing the sidecar path (.json) is equivalent to passing the .raw path.

Volume load_volume(const fs::path& path);
void save_volume(const Volume& v, const fs::path& path);

LabelVolume load_label(const fs::path& path, const std::string& target_name = {},
                       LabelQuality quality = LabelQuality::HQ);
void save_label(const LabelVolume& l, const fs::path& path);

bool is_nifti(const fs::path& path);

} // namespace petprompt::io
