#include "petprompt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "petprompt/io.hpp"
#include "petprompt/seeding.hpp"

namespace petprompt::phantom {

void PhantomSpec::validate() const {
    require(shape.d >= 1 && shape.h >= 1 && shape.w >= 1, "config", "phantom shape must be positive");
    require(blur_sigma >= 0.0, "config", "blur_sigma must be >= 0");
    require(noise_scale >= 0.0, "config", "noise_scale must be >= 0");
    for (const auto& o : organs) {
        require(!o.name.empty(), "config", "organ without a name");
        for (double r : o.radii) require(r > 0.0, "config", "organ '" + o.name + "' has a non-positive radius");
        for (int a = 0; a < 3; ++a) {
            const double lo = o.center[a] - o.radii[a];
            const double hi = o.center[a] + o.radii[a];
            require(hi >= 0.0 && lo <= static_cast<double>(shape[a] - 1), "config",
                    "organ '" + o.name + "' lies entirely outside the volume");
        }
    }
}

bool inside(const Organ& o, int64_t z, int64_t y, int64_t x) {
    const double dz = (static_cast<double>(z) - o.center[0]) / o.radii[0];
    const double dy = (static_cast<double>(y) - o.center[1]) / o.radii[1];
    const double dx = (static_cast<double>(x) - o.center[2]) / o.radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable blur with edge replication.
void blur(Grid3<double>& g, double sigma) {
    if (sigma <= 0.0) return;
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    const Shape3 s = g.shape();
    for (int axis = 0; axis < 3; ++axis) {
        Grid3<double> out(s);
        const int64_t n = s[axis];
        for (int64_t z = 0; z < s.d; ++z) {
            for (int64_t y = 0; y < s.h; ++y) {
                for (int64_t x = 0; x < s.w; ++x) {
                    const int64_t pos = axis == 0 ? z : (axis == 1 ? y : x);
                    double acc = 0.0;
                    for (int t = -radius; t <= radius; ++t) {
                        const int64_t q = std::clamp<int64_t>(pos + t, 0, n - 1);
                        const double v = axis == 0 ? g(q, y, x) : (axis == 1 ? g(z, q, x) : g(z, y, q));
                        acc += k[static_cast<size_t>(t + radius)] * v;
                    }
                    out(z, y, x) = acc;
                }
            }
        }
        g = std::move(out);
    }
}

std::vector<Coord3> ball_offsets(int radius) {
    std::vector<Coord3> offs;
    for (int z = -radius; z <= radius; ++z)
        for (int y = -radius; y <= radius; ++y)
            for (int x = -radius; x <= radius; ++x)
                if (z * z + y * y + x * x <= radius * radius) offs.push_back({z, y, x});
    return offs;
}

Grid3<uint8_t> invert(const Grid3<uint8_t>& m) {
    Grid3<uint8_t> out(m.shape());
    auto src = m.values();
    auto dst = out.values();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] ? 0 : 1;
    return out;
}

} // namespace

Phantom generate_phantom(const PhantomSpec& spec, const std::string& id) {
    spec.validate();
    const Shape3 s = spec.shape;
    Grid3<double> image(s, spec.background_uptake);
    Phantom ph;
    for (const auto& o : spec.organs) {
        ph.labels.emplace(o.name, LabelVolume{Grid3<uint8_t>(s), o.name, LabelQuality::HQ});
    }
    for (size_t oi = 0; oi < spec.organs.size(); ++oi) {
        const Organ& o = spec.organs[oi];
        LabelVolume& own = ph.labels.at(o.name);
        const auto lo = [&](int a) { return std::max<int64_t>(0, static_cast<int64_t>(std::floor(o.center[a] - o.radii[a]))); };
        const auto hi = [&](int a) {
            return std::min<int64_t>(s[a] - 1, static_cast<int64_t>(std::ceil(o.center[a] + o.radii[a])));
        };
        for (int64_t z = lo(0); z <= hi(0); ++z) {
            for (int64_t y = lo(1); y <= hi(1); ++y) {
                for (int64_t x = lo(2); x <= hi(2); ++x) {
                    if (!inside(o, z, y, x)) continue;
                    image(z, y, x) += o.uptake;
                    for (auto& [name, l] : ph.labels) l.data(z, y, x) = 0;
                    own.data(z, y, x) = 1;
                }
            }
        }
    }
    blur(image, spec.blur_sigma);

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<float> out(static_cast<size_t>(s.voxels()));
    auto src = image.values();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = src[i];
        if (spec.noise_scale > 0.0) v *= std::max(0.0, 1.0 + spec.noise_scale * gauss(rng));
        out[i] = static_cast<float>(v);
    }
    ph.image = Volume{Grid3<float>(s, std::move(out)), {1.0, 1.0, 1.0}, id};
    return ph;
}

void CorruptionSpec::validate() const {
    require(radius_min >= 0 && radius_min <= radius_max, "config", "corruption radius range must be ordered and >= 0");
    require(boundary_flip_rate >= 0.0 && boundary_flip_rate <= 1.0, "config", "boundary_flip_rate must lie in [0,1]");
    require(drop_rate >= 0.0 && drop_rate <= 1.0, "config", "drop_rate must lie in [0,1]");
}

Grid3<uint8_t> dilate(const Grid3<uint8_t>& mask, int radius) {
    if (radius <= 0) return mask;
    const auto offs = ball_offsets(radius);
    Grid3<uint8_t> out(mask.shape());
    const Shape3& s = mask.shape();
    for (int64_t z = 0; z < s.d; ++z) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t x = 0; x < s.w; ++x) {
                if (!mask(z, y, x)) continue;
                for (const Coord3& o : offs) {
                    const Coord3 c{z + o.z, y + o.y, x + o.x};
                    if (in_bounds(s, c)) out[c] = 1;
                }
            }
        }
    }
    return out;
}

Grid3<uint8_t> erode(const Grid3<uint8_t>& mask, int radius) {
    if (radius <= 0) return mask;
    return invert(dilate(invert(mask), radius));
}

Grid3<uint8_t> boundary_band(const Grid3<uint8_t>& mask) {
    static constexpr Coord3 kNeighbors[] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    const Shape3& s = mask.shape();
    Grid3<uint8_t> band(s);
    for (int64_t z = 0; z < s.d; ++z) {
        for (int64_t y = 0; y < s.h; ++y) {
            for (int64_t x = 0; x < s.w; ++x) {
                const uint8_t v = mask(z, y, x);
                for (const Coord3& o : kNeighbors) {
                    const Coord3 c{z + o.z, y + o.y, x + o.x};
                    if (in_bounds(s, c) && mask[c] != v) {
                        band(z, y, x) = 1;
                        break;
                    }
                }
            }
        }
    }
    return band;
}

LabelVolume corrupt_labels(const LabelVolume& labels, const CorruptionSpec& cspec) {
    cspec.validate();
    validate(labels);
    std::mt19937_64 rng(cspec.seed);
    LabelVolume out{labels.data, labels.target_name, LabelQuality::LQ};

    const int radius = std::uniform_int_distribution<int>(cspec.radius_min, cspec.radius_max)(rng);
    const bool grow = std::bernoulli_distribution(0.5)(rng);
    if (radius > 0) out.data = grow ? dilate(out.data, radius) : erode(out.data, radius);

    if (cspec.boundary_flip_rate > 0.0) {
        const Grid3<uint8_t> band = boundary_band(out.data);
        std::bernoulli_distribution flip(cspec.boundary_flip_rate);
        auto b = band.values();
        auto d = out.data.values();
        for (size_t i = 0; i < d.size(); ++i) {
            if (b[i] && flip(rng)) d[i] = d[i] ? 0 : 1;
        }
    }

    if (cspec.drop_rate > 0.0 && std::bernoulli_distribution(cspec.drop_rate)(rng)) {
        auto d = out.data.values();
        std::fill(d.begin(), d.end(), uint8_t{0});
    }
    return out;
}

// ----------------------------------------------------------------- recipes

std::vector<Organ> PhantomRecipe::default_organs() {
    // z runs head to foot; x = 20 is the patient's right.
    return {
        {"brain", {8, 32, 32}, {6, 9, 8}, 5.0},
        {"heart", {21, 30, 37}, {5, 6, 6}, 3.5},
        {"liver", {33, 32, 22}, {7, 9, 10}, 2.2},
        {"spleen", {32, 36, 46}, {5, 5, 4}, 1.8},
        {"kidney_l", {45, 40, 43}, {5, 4, 4}, 3.0},
        {"kidney_r", {45, 40, 21}, {5, 4, 4}, 3.0},
        {"bladder", {57, 34, 32}, {4, 6, 6}, 6.0},
    };
}

PhantomRecipe PhantomRecipe::domain_shifted() {
    PhantomRecipe r;
    r.blur_sigma = 1.6;
    r.noise_scale = 0.3;
    r.uptake_scale = 0.8;
    return r;
}

std::vector<std::string> default_train_targets() {
    return {"liver", "kidney_l", "kidney_r", "heart", "spleen"};
}

PhantomSpec sample_phantom_spec(const PhantomRecipe& recipe, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    PhantomSpec spec;
    spec.shape = recipe.shape;
    spec.background_uptake = recipe.background_uptake;
    spec.blur_sigma = recipe.blur_sigma;
    spec.noise_scale = recipe.noise_scale;
    spec.seed = mix_seed(seed, 0x9e3779b97f4a7c15ULL);
    const double sz = static_cast<double>(recipe.shape.d) / 64.0;
    const double sy = static_cast<double>(recipe.shape.h) / 64.0;
    const double sx = static_cast<double>(recipe.shape.w) / 64.0;
    const std::array<double, 3> scale{sz, sy, sx};
    for (const Organ& nominal : recipe.organs) {
        Organ o = nominal;
        for (int a = 0; a < 3; ++a) {
            o.center[a] = nominal.center[a] * scale[a] + recipe.center_jitter * unit(rng);
            o.radii[a] = nominal.radii[a] * scale[a] * (1.0 + recipe.radius_jitter * unit(rng));
        }
        o.uptake = nominal.uptake * recipe.uptake_scale * (1.0 + recipe.uptake_jitter * unit(rng));
        spec.organs.push_back(o);
    }
    return spec;
}

DatasetManifest generate_dataset(const DatasetRecipe& recipe, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    require(recipe.hq >= 0 && recipe.lq >= 0 && recipe.test >= 0, "config", "split counts must be >= 0");
    fs::create_directories(out_dir / "volumes");
    fs::create_directories(out_dir / "labels");

    DatasetManifest m;
    m.seed = recipe.seed;
    m.base_dir = out_dir;
    m.train_targets = recipe.train_targets;

    const auto is_train_target = [&](const std::string& name) {
        return std::find(recipe.train_targets.begin(), recipe.train_targets.end(), name) != recipe.train_targets.end();
    };

    const struct {
        Split split;
        int count;
    } plan[] = {{Split::TrainHQ, recipe.hq}, {Split::TrainLQ, recipe.lq}, {Split::Test, recipe.test}};

    uint64_t index = 0;
    for (const auto& [split, count] : plan) {
        for (int i = 0; i < count; ++i, ++index) {
            char idbuf[64];
            std::snprintf(idbuf, sizeof(idbuf), "%s%04llu", recipe.id_prefix.c_str(),
                          static_cast<unsigned long long>(index));
            const std::string id = idbuf;
            const uint64_t vseed = mix_seed(recipe.seed, index);
            const Phantom ph = generate_phantom(sample_phantom_spec(recipe.phantom, vseed), id);

            ManifestEntry e;
            e.id = id;
            e.split = split;
            e.quality = split == Split::TrainLQ ? LabelQuality::LQ : LabelQuality::HQ;
            e.volume_path = fs::path("volumes") / (id + ".raw");
            io::save_volume(ph.image, out_dir / e.volume_path);

            uint64_t organ_index = 0;
            for (const auto& [name, label] : ph.labels) {
                ++organ_index;
                if (split != Split::Test && !is_train_target(name)) continue;
                LabelVolume stored = label;
                if (split == Split::TrainLQ) {
                    CorruptionSpec c = recipe.corruption;
                    c.seed = mix_seed(mix_seed(recipe.corruption.seed, vseed), organ_index);
                    stored = corrupt_labels(label, c);
                }
                const fs::path rel = fs::path("labels") / (id + "_" + name + ".raw");
                io::save_label(stored, out_dir / rel);
                e.labels[name] = rel;
            }
            m.entries.push_back(std::move(e));
        }
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

} // namespace petprompt::phantom
