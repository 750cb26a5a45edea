#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "petprompt/dataset.hpp"
#include "petprompt/io.hpp"
#include "petprompt/manifest.hpp"
#include "support.hpp"

using namespace petprompt;

namespace {

Volume random_volume(const Shape3& s, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(2.0f, 1.5f);
    Volume v{Grid3<float>(s), {3.0, 2.5, 4.07}, "v"};
    for (auto& x : v.data.values()) x = n(rng);
    return v;
}

std::string error_code(const auto& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

} // namespace

TEST_CASE("raw volume round trip is bitwise exact") {
    testing::TempDir dir("vol");
    const Volume v = random_volume({5, 7, 9}, 1);
    io::save_volume(v, dir / "a.raw");
    const Volume back = io::load_volume(dir / "a.raw");
    CHECK(back.data == v.data);
    CHECK(back.spacing[0] == v.spacing[0]);
    CHECK(back.spacing[2] == v.spacing[2]);
    // The sidecar path names the same volume.
    CHECK(io::load_volume(dir / "a.json").data == v.data);
}

TEST_CASE("64 cubed raw file with sidecar loads with its shape") {
    testing::TempDir dir("vol64");
    Volume v{Grid3<float>({64, 64, 64}), {3, 3, 3}, "x"};
    io::save_volume(v, dir / "x.raw");
    std::ifstream in(dir / "x.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["shape"] == nlohmann::json::array({64, 64, 64}));
    CHECK(j["dtype"] == "f32");
    CHECK(io::load_volume(dir / "x.raw").shape() == Shape3{64, 64, 64});
}

TEST_CASE("nifti round trip, plain and gzipped") {
    testing::TempDir dir("nii");
    const Volume v = random_volume({4, 6, 8}, 2);
    for (const char* name : {"a.nii", "a.nii.gz"}) {
        io::save_volume(v, dir / name);
        CHECK(io::is_nifti(dir / name));
        const Volume back = io::load_volume(dir / name);
        CHECK(back.data == v.data);
        CHECK(back.spacing[1] == doctest::Approx(v.spacing[1]));
    }
    LabelVolume l{testing::ball({4, 6, 8}, {2, 3, 4}, 2.0), "liver", LabelQuality::HQ};
    io::save_label(l, dir / "l.nii.gz");
    CHECK(io::load_label(dir / "l.nii.gz").data == l.data);
}

TEST_CASE("label round trip keeps target and quality") {
    testing::TempDir dir("lab");
    LabelVolume l{testing::ball({6, 6, 6}, {3, 3, 3}, 2.0), "spleen", LabelQuality::LQ};
    io::save_label(l, dir / "s.raw");
    const LabelVolume back = io::load_label(dir / "s.raw");
    CHECK(back.data == l.data);
    CHECK(back.target_name == "spleen");
    CHECK(back.quality == LabelQuality::LQ);
}

TEST_CASE("load errors") {
    testing::TempDir dir("err");
    CHECK(error_code([&] { io::load_volume(dir / "missing.raw"); }) == "not_found");

    std::ofstream(dir / "flat.json") << R"({"shape":[64,64],"spacing":[3,3],"dtype":"f32"})";
    std::ofstream(dir / "flat.raw") << std::string(64 * 64 * 4, '\0');
    try {
        io::load_volume(dir / "flat.raw");
        FAIL("2D sidecar accepted");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("expected 3 dimensions") != std::string::npos);
    }

    std::ofstream(dir / "short.json") << R"({"shape":[4,4,4],"spacing":[1,1,1],"dtype":"f32"})";
    std::ofstream(dir / "short.raw") << std::string(10, '\0');
    CHECK(error_code([&] { io::load_volume(dir / "short.raw"); }) == "shape");

    Volume bad = random_volume({2, 2, 2}, 3);
    bad.data(1, 1, 1) = std::numeric_limits<float>::quiet_NaN();
    CHECK(error_code([&] { validate(bad); }) == "non_finite");
    CHECK(error_code([&] { io::save_volume(bad, dir / "refused.raw"); }) == "non_finite");
    std::ofstream(dir / "nan.json") << R"({"shape":[2,2,2],"spacing":[1,1,1],"dtype":"f32"})";
    std::ofstream(dir / "nan.raw", std::ios::binary)
        .write(reinterpret_cast<const char*>(bad.data.values().data()), 8 * sizeof(float));
    CHECK(error_code([&] { io::load_volume(dir / "nan.raw"); }) == "non_finite");
}

TEST_CASE("normalize_intensity") {
    SUBCASE("0..100 maps onto [0, 1]") {
        Volume v{Grid3<float>({1, 1, 101}), {1, 1, 1}, "r"};
        for (int i = 0; i <= 100; ++i) v.data(0, 0, i) = static_cast<float>(i);
        const auto n = normalize_intensity(v, 0, 100);
        CHECK_FALSE(n.warning);
        const auto vals = n.volume.data.values();
        CHECK(*std::min_element(vals.begin(), vals.end()) == 0.0f);
        CHECK(*std::max_element(vals.begin(), vals.end()) == 1.0f);
        CHECK(n.volume.data(0, 0, 25) == doctest::Approx(0.25));
    }
    SUBCASE("constant volume gives zeros and a warning") {
        Volume v{Grid3<float>({3, 3, 3}, 5.0f), {1, 1, 1}, "c"};
        const auto n = normalize_intensity(v);
        CHECK(n.warning.has_value());
        for (float x : n.volume.data.values()) CHECK(x == 0.0f);
    }
    SUBCASE("clip then rescale") {
        Volume v{Grid3<float>({1, 1, 3}), {1, 1, 1}, "t"};
        v.data(0, 0, 0) = 0;
        v.data(0, 0, 1) = 50;
        v.data(0, 0, 2) = 100;
        const auto n = normalize_intensity(v, 0, 50);
        CHECK(n.volume.data(0, 0, 0) == 0.0f);
        CHECK(n.volume.data(0, 0, 1) == 1.0f);
        CHECK(n.volume.data(0, 0, 2) == 1.0f);
    }
    SUBCASE("bad percentiles are rejected") {
        Volume v{Grid3<float>({2, 2, 2}), {1, 1, 1}, "b"};
        CHECK_THROWS_AS(normalize_intensity(v, 60, 40), Error);
    }
}

TEST_CASE("percentile follows linear interpolation") {
    const std::vector<float> v{4, 1, 3, 2};
    CHECK(percentile(v, 0) == 1.0);
    CHECK(percentile(v, 100) == 4.0);
    CHECK(percentile(v, 50) == doctest::Approx(2.5));
    CHECK(percentile(v, 25) == doctest::Approx(1.75));
}

TEST_CASE("extract_patch geometry") {
    const Shape3 s{64, 64, 64};
    Volume v{Grid3<float>(s, 1.0f), {1, 1, 1}, "ones"};

    SUBCASE("full-size crop at the center is the identity") {
        Volume r = random_volume(s, 4);
        CHECK(extract_patch(r, grid_center(s), s).data == r.data);
    }
    SUBCASE("corner crop pads seven eighths") {
        const Volume p = extract_patch(v, {0, 0, 0}, {8, 8, 8});
        int64_t zeros = 0;
        for (float x : p.data.values()) zeros += x == 0.0f;
        // start = -4 on each axis leaves 4 of 8 in range per axis.
        const int64_t inside = 4 * 4 * 4;
        CHECK(zeros == 512 - inside);
        CHECK(zeros * 8 == 512 * 7);
    }
    SUBCASE("insert_patch inverts extract_patch inside the volume") {
        Volume r = random_volume({10, 10, 10}, 5);
        const Coord3 c{3, 7, 5};
        const auto p = extract_patch(r.data, c, {4, 4, 4});
        Grid3<float> back({10, 10, 10});
        insert_patch(back, p, c);
        for (int64_t z = 1; z < 5; ++z)
            for (int64_t y = 5; y < 9; ++y)
                for (int64_t x = 3; x < 7; ++x) CHECK(back(z, y, x) == r.data(z, y, x));
    }
}

TEST_CASE("paired crops stay aligned") {
    std::mt19937_64 rng(6);
    const Shape3 s{20, 18, 22};
    std::uniform_int_distribution<int64_t> cz(-4, 24);
    for (int trial = 0; trial < 50; ++trial) {
        Volume v = random_volume(s, 100 + trial);
        LabelVolume l{testing::random_mask(s, 0.3, rng), "t", LabelQuality::HQ};
        const Coord3 c{cz(rng), cz(rng), cz(rng)};
        const Shape3 size{7, 8, 9};
        const Volume pv = extract_patch(v, c, size);
        const LabelVolume pl = extract_patch(l, c, size);
        int64_t overlap_fg = 0, patch_fg = 0;
        for (int64_t z = 0; z < size.d; ++z)
            for (int64_t y = 0; y < size.h; ++y)
                for (int64_t x = 0; x < size.w; ++x) {
                    const Coord3 src = from_patch_coords({z, y, x}, c, size);
                    CHECK(to_patch_coords(src, c, size) == Coord3{z, y, x});
                    patch_fg += pl.data(z, y, x);
                    if (!in_bounds(s, src)) {
                        CHECK(pl.data(z, y, x) == 0);
                        CHECK(pv.data(z, y, x) == 0.0f);
                        continue;
                    }
                    CHECK(pl.data(z, y, x) == l.data[src]);
                    CHECK(pv.data(z, y, x) == v.data[src]);
                    overlap_fg += l.data[src];
                }
        CHECK(patch_fg == overlap_fg);
    }
}

TEST_CASE("bbox_center") {
    LabelVolume l{Grid3<uint8_t>({10, 10, 10}), "t", LabelQuality::HQ};
    CHECK_FALSE(bbox_center(l));
    l.data(2, 3, 4) = 1;
    l.data(6, 3, 8) = 1;
    CHECK(*bbox_center(l) == Coord3{4, 3, 6});
}

TEST_CASE("manifest round trip and validation") {
    testing::TempDir dir("man");
    DatasetManifest m;
    m.seed = 9;
    m.train_targets = {"liver"};
    m.entries.push_back({"a", "volumes/a.raw", {{"liver", "labels/a_liver.raw"}}, LabelQuality::HQ, Split::TrainHQ});
    m.entries.push_back({"b", "volumes/b.raw", {{"liver", "labels/b_liver.raw"}}, LabelQuality::LQ, Split::TrainLQ});
    m.entries.push_back({"c", "volumes/c.raw", {{"liver", "labels/c_liver.raw"}}, LabelQuality::HQ, Split::Test});
    save_manifest(m, dir / "manifest.json");
    const DatasetManifest back = load_manifest(dir / "manifest.json");
    CHECK(back.seed == 9);
    CHECK(back.entries.size() == 3);
    CHECK(back.split(Split::TrainLQ).front()->id == "b");
    CHECK(back.resolve("volumes/a.raw") == dir.path() / "volumes/a.raw");

    SUBCASE("quality must match the split") {
        DatasetManifest bad = m;
        bad.entries[2].quality = LabelQuality::LQ;
        CHECK_THROWS_AS(bad.validate(), Error);
    }
    SUBCASE("ids are unique across splits") {
        DatasetManifest bad = m;
        bad.entries[2].id = "a";
        CHECK_THROWS_AS(bad.validate(), Error);
    }
}

TEST_CASE("split names") {
    CHECK(to_string(Split::TrainHQ) == "train_hq");
    CHECK(split_from_string("train_lq") == Split::TrainLQ);
    CHECK(to_string(LabelQuality::Rectified) == "RECTIFIED");
    CHECK_THROWS_AS(split_from_string("val"), Error);
}
