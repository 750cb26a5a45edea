#include "petprompt/dataset.hpp"

#include <algorithm>
#include <map>

#include "petprompt/io.hpp"

namespace petprompt {

std::vector<Sample> load_samples(const DatasetManifest& m, Split split, const SampleFilter& filter) {
    std::vector<Sample> out;
    size_t volumes = 0;
    for (const ManifestEntry* e : m.split(split)) {
        if (filter.max_volumes && volumes >= filter.max_volumes) break;
        std::vector<std::pair<std::string, std::filesystem::path>> wanted;
        for (const auto& [name, path] : e->labels) {
            if (filter.targets &&
                std::find(filter.targets->begin(), filter.targets->end(), name) == filter.targets->end())
                continue;
            wanted.emplace_back(name, path);
        }
        if (wanted.empty()) continue;
        ++volumes;

        Volume raw = io::load_volume(m.resolve(e->volume_path));
        raw.id = e->id;
        auto image = std::make_shared<const Volume>(normalize_intensity(raw).volume);
        for (const auto& [name, path] : wanted) {
            auto label = std::make_shared<const LabelVolume>(io::load_label(m.resolve(path), name, e->quality));
            validate_pair(*image, *label);
            const auto center = bbox_center(*label);
            if (!center) {
                if (filter.skip_empty) continue;
                throw Error("empty_mask", "label " + name + " of " + e->id + " has no foreground");
            }
            out.push_back({e->id, name, image, label, *center});
        }
    }
    return out;
}

Crop make_crop(const Sample& s, const Shape3& size, const Coord3& offset) {
    Coord3 center{s.center.z + offset.z, s.center.y + offset.y, s.center.x + offset.x};
    Grid3<uint8_t> label = extract_patch(s.label->data, center, size);
    if (std::ranges::none_of(label.values(), [](uint8_t v) { return v != 0; })) {
        center = s.center;
        label = extract_patch(s.label->data, center, size);
    }
    return {extract_patch(s.image->data, center, size), std::move(label), center};
}

} // namespace petprompt
