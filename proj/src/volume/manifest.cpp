#include "petprompt/manifest.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

namespace petprompt {

using json = nlohmann::json;

std::string to_string(Split s) {
    switch (s) {
    case Split::TrainHQ: return "train_hq";
    case Split::TrainLQ: return "train_lq";
    case Split::Test: return "test";
    }
    return "test";
}

Split split_from_string(const std::string& s) {
    if (s == "train_hq") return Split::TrainHQ;
    if (s == "train_lq") return Split::TrainLQ;
    if (s == "test") return Split::Test;
    throw Error("config", "unknown split '" + s + "'");
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
        if (e.split == s) out.push_back(&e);
    }
    return out;
}

std::filesystem::path DatasetManifest::resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& e : entries) {
        require(!e.id.empty(), "manifest", "manifest entry without an id");
        require(ids.insert(e.id).second, "manifest", "volume id '" + e.id + "' appears more than once");
        const LabelQuality expected = e.split == Split::TrainLQ ? LabelQuality::LQ : LabelQuality::HQ;
        require(e.quality == expected, "manifest",
                "entry '" + e.id + "' in split " + to_string(e.split) + " carries quality " + to_string(e.quality));
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), "not_found", "missing manifest: " + path.string());
    std::ifstream in(path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error("manifest", "malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.base_dir = path.parent_path();
    try {
        m.seed = j.value("seed", uint64_t{0});
        m.train_targets = j.value("train_targets", std::vector<std::string>{});
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.volume_path = je.at("volume_path").get<std::string>();
            for (const auto& [name, p] : je.at("labels").items()) e.labels[name] = p.get<std::string>();
            e.quality = label_quality_from_string(je.at("quality").get<std::string>());
            e.split = split_from_string(je.at("split").get<std::string>());
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw Error("manifest", "invalid manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    m.validate();
    json j;
    j["seed"] = m.seed;
    j["train_targets"] = m.train_targets;
    j["entries"] = json::array();
    for (const auto& e : m.entries) {
        json labels = json::object();
        for (const auto& [name, p] : e.labels) labels[name] = p.generic_string();
        j["entries"].push_back({{"id", e.id},
                                {"volume_path", e.volume_path.generic_string()},
                                {"labels", labels},
                                {"quality", to_string(e.quality)},
                                {"split", to_string(e.split)}});
    }
    std::ofstream out(path, std::ios::trunc);
    require(static_cast<bool>(out), "io", "cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

} // namespace petprompt
