#include "petprompt/checkpoint.hpp"

#include <fstream>
#include <map>

namespace petprompt::net {

using nlohmann::json;

namespace {

std::map<std::string, torch::Tensor> named_state(PromptableSegmenter& model) {
    std::map<std::string, torch::Tensor> state;
    for (const auto& p : model->named_parameters()) state.emplace(p.key(), p.value());
    for (const auto& b : model->named_buffers()) state.emplace(b.key(), b.value());
    return state;
}

} // namespace

void save_checkpoint(PromptableSegmenter& model, const std::filesystem::path& path, const json& meta) {
    const auto state = named_state(model);
    json header;
    header["schema"] = kCheckpointSchema;
    header["net_config"] = to_json(model->config());
    header["meta"] = meta;
    header["tensors"] = json::array();
    std::vector<torch::Tensor> payloads;
    uint64_t offset = 0;
    for (const auto& [name, t] : state) {
        auto data = t.detach().to(torch::kFloat).contiguous().cpu();
        const uint64_t nbytes = static_cast<uint64_t>(data.numel()) * sizeof(float);
        header["tensors"].push_back({{"name", name}, {"shape", t.sizes().vec()}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
        payloads.push_back(std::move(data));
    }
    const std::string text = header.dump();
    const uint64_t len = text.size();

    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), "io", "cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& p : payloads) {
            out.write(reinterpret_cast<const char*>(p.data_ptr<float>()),
                      static_cast<std::streamsize>(p.numel() * static_cast<int64_t>(sizeof(float))));
        }
        require(static_cast<bool>(out), "io", "write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), "not_found", "missing checkpoint: " + path.string());
    std::ifstream in(path, std::ios::binary);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    require(static_cast<bool>(in) && len > 0 && len < (1ULL << 30), "io", path.string() + ": bad checkpoint header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    require(static_cast<bool>(in), "io", path.string() + ": truncated checkpoint header");
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw Error("io", path.string() + ": malformed checkpoint header: " + e.what());
    }
    require(header.value("schema", std::string{}) == kCheckpointSchema, "io",
            path.string() + ": unsupported checkpoint schema '" + header.value("schema", std::string{}) + "'");

    LoadedCheckpoint out;
    out.model = PromptableSegmenter(net_config_from_json(header.at("net_config")));
    out.meta = header.value("meta", json::object());
    auto state = named_state(out.model);
    const auto data_start = static_cast<std::streamoff>(sizeof(len) + len);

    torch::NoGradGuard no_grad;
    size_t loaded = 0;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        auto it = state.find(name);
        require(it != state.end(), "io", path.string() + ": unexpected tensor '" + name + "'");
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        require(it->second.sizes().vec() == shape, "io", path.string() + ": shape mismatch for '" + name + "'");
        const auto nbytes = entry.at("nbytes").get<uint64_t>();
        std::vector<float> buf(static_cast<size_t>(nbytes / sizeof(float)));
        in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(nbytes));
        require(static_cast<bool>(in), "io", path.string() + ": truncated payload for '" + name + "'");
        it->second.copy_(torch::from_blob(buf.data(), shape, torch::kFloat));
        ++loaded;
    }
    require(loaded == state.size(), "io", path.string() + ": checkpoint is missing tensors");
    return out;
}

} // namespace petprompt::net
