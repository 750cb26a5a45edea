#pragma once

#include <filesystem>

#include "json.hpp"
#include "petprompt/net.hpp"

namespace petprompt::net {

inline constexpr const char* kCheckpointSchema = "seganypet-ckpt/1";

// Layout: u64 little-endian header length, JSON header
// {"schema", "net_config", "meta", "tensors":[{"name","shape","offset","nbytes"}]},
// then the concatenated f32 tensor payloads.
void save_checkpoint(PromptableSegmenter& model, const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedCheckpoint {
    PromptableSegmenter model{nullptr};
    nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace petprompt::net
