#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "petprompt/eval.hpp"
#include "petprompt/phantom.hpp"
#include "support.hpp"

using namespace petprompt;
using namespace petprompt::eval;

namespace {

// Set-count Dice over explicit voxel index sets.
double dsc_oracle(const Grid3<uint8_t>& g, const Grid3<uint8_t>& s) {
    std::set<int64_t> a, b;
    for (int64_t i = 0; i < g.size(); ++i) {
        if (g.values()[static_cast<size_t>(i)]) a.insert(i);
        if (s.values()[static_cast<size_t>(i)]) b.insert(i);
    }
    if (a.empty() && b.empty()) return 1.0;
    int64_t both = 0;
    for (int64_t i : a) both += b.count(i);
    return 2.0 * static_cast<double>(both) / static_cast<double>(a.size() + b.size());
}

Grid3<uint8_t> transpose_zx(const Grid3<uint8_t>& g) {
    const Shape3 s = g.shape();
    Grid3<uint8_t> out({s.w, s.h, s.d});
    for (int64_t z = 0; z < s.d; ++z)
        for (int64_t y = 0; y < s.h; ++y)
            for (int64_t x = 0; x < s.w; ++x) out(x, y, z) = g(z, y, x);
    return out;
}

Sample ball_sample(const std::string& id, const std::string& target, Coord3 c, double r) {
    const Shape3 s{24, 24, 24};
    auto label = std::make_shared<LabelVolume>(LabelVolume{testing::ball(s, c, r), target, LabelQuality::HQ});
    auto image = std::make_shared<Volume>(Volume{Grid3<float>(s), {1, 1, 1}, id});
    for (int64_t i = 0; i < s.voxels(); ++i)
        image->data.values()[static_cast<size_t>(i)] = 0.2f + 0.6f * label->data.values()[static_cast<size_t>(i)];
    return {id, target, image, label, *bbox_center(*label)};
}

} // namespace

TEST_CASE("dsc examples") {
    Grid3<uint8_t> g({1, 1, 4}), s({1, 1, 4});
    g(0, 0, 0) = g(0, 0, 1) = 1;
    s(0, 0, 1) = s(0, 0, 2) = 1;
    CHECK(dsc(g, s) == 0.5);
    CHECK(dsc(g, g) == 1.0);
    CHECK((dsc(Grid3<uint8_t>({2, 2, 2}), Grid3<uint8_t>({2, 2, 2})) == 1.0));
    CHECK((dsc(g, Grid3<uint8_t>({1, 1, 4})) == 0.0));
    CHECK_THROWS_AS(dsc(g, Grid3<uint8_t>({1, 1, 5})), Error);
}

TEST_CASE("dsc matches a set-count oracle") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> density(0.0, 0.6);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Shape3 shape{5 + trial % 4, 6, 7 + trial % 3};
        const auto g = testing::random_mask(shape, density(rng), rng);
        const auto s = testing::random_mask(shape, density(rng), rng);
        mismatches += dsc(g, s) != dsc_oracle(g, s);
        mismatches += dsc(g, s) != dsc(s, g);
        mismatches += dsc(transpose_zx(g), transpose_zx(s)) != dsc(g, s);
        bool any = false;
        for (uint8_t v : g.values()) any |= v != 0;
        if (any) mismatches += dsc(g, g) != 1.0;
    }
    CHECK(mismatches == 0);
}

TEST_CASE("binarize is strict") {
    Grid3<float> p({1, 1, 3});
    p(0, 0, 0) = 0.5f;
    p(0, 0, 1) = 0.50001f;
    p(0, 0, 2) = 0.2f;
    const auto b = binarize(p);
    CHECK(b(0, 0, 0) == 0);
    CHECK(b(0, 0, 1) == 1);
    CHECK(b(0, 0, 2) == 0);
}

TEST_CASE("case seeds depend on volume and target only") {
    CHECK(case_seed(1, "a", "liver") == case_seed(1, "a", "liver"));
    CHECK(case_seed(1, "a", "liver") != case_seed(1, "a", "spleen"));
    CHECK(case_seed(1, "a", "liver") != case_seed(1, "b", "liver"));
    CHECK(case_seed(1, "a", "liver") != case_seed(2, "a", "liver"));
}

TEST_CASE("harness with stub segmenters") {
    const std::vector<Sample> samples{ball_sample("v0", "liver", {12, 12, 12}, 4.0),
                                      ball_sample("v1", "liver", {3, 20, 12}, 3.0),
                                      ball_sample("v2", "kidney", {10, 9, 14}, 2.5)};
    const Shape3 crop{16, 16, 16};

    SUBCASE("the oracle scores one everywhere, even near the border") {
        OracleSegmenter oracle(crop);
        const auto r = evaluate_promptable(oracle, samples, {});
        CHECK(r.cells.size() == 6);
        for (const auto& c : r.cells) {
            CHECK(c.method == "oracle");
            CHECK(c.group == "seen");
            for (double d : c.dsc) CHECK(d == 1.0);
            CHECK(c.stddev() == 0.0);
        }
        CHECK(*r.macro_mean("oracle", "seen", 3) == 1.0);
        CHECK_FALSE(r.macro_mean("oracle", "unseen_organs", 3));
    }
    SUBCASE("a constant one-half map is all background") {
        ConstantSegmenter half(crop, 0.5f);
        const auto r = evaluate_promptable(half, samples, {{1}, 0, 2, "seen", 0});
        for (const auto& c : r.cells)
            for (double d : c.dsc) CHECK(d == 0.0);
    }
    SUBCASE("a constant one map scores the crop overlap") {
        ConstantSegmenter one(crop, 1.0f);
        const auto r = evaluate_case(one, samples[0], 1, 0, 2);
        const double fg = static_cast<double>(samples[0].label->foreground());
        CHECK(r.dsc == doctest::Approx(2 * fg / (fg + 16.0 * 16 * 16)));
    }
    SUBCASE("macro mean weights targets equally") {
        EvalReport r;
        r.cells.push_back({"m", "seen", "liver", 1, 0, {"a", "b", "c"}, {1.0, 1.0, 0.4}, {0, 0, 0}});
        r.cells.push_back({"m", "seen", "kidney", 1, 0, {"a"}, {0.2}, {0}});
        CHECK(*r.macro_mean("m", "seen", 1) == doctest::Approx((0.8 + 0.2) / 2));
        CHECK(r.cells[0].stddev() == doctest::Approx(std::sqrt(0.08)));
    }
    SUBCASE("LQ labels are refused") {
        auto s = samples[0];
        auto lq = std::make_shared<LabelVolume>(*s.label);
        lq->quality = LabelQuality::LQ;
        s.label = lq;
        OracleSegmenter oracle(crop);
        CHECK_THROWS_AS(evaluate_promptable(oracle, {s}, {}), Error);
    }
}

TEST_CASE("report round trip") {
    testing::TempDir dir("report");
    EvalReport r;
    r.eval_seed = 4;
    r.cells.push_back({"cpcl", "seen", "liver", 3, 2, {"a", "b"}, {0.5, 0.75}, {0.1, 0.2}});
    r.cells.push_back({"cpcl", "unseen_organs", "brain", 1, 2, {"a"}, {0.25}, {0.3}});
    r.write(dir.path());
    std::ifstream in(dir / "report.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["schema"] == kReportSchema);
    CHECK(j["cells"][0]["mean_dsc"] == 0.625);
    CHECK(j["cells"][0]["prompts_per_volume"] == 3);
    const auto back = EvalReport::from_json(j);
    CHECK(back.cells.size() == 2);
    CHECK(back.cells[0].dsc == r.cells[0].dsc);
    CHECK(back.cells[1].volume_ids == r.cells[1].volume_ids);
    CHECK(back.eval_seed == 4);
    std::ifstream csv(dir / "report.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.rfind("method,group,target,points", 0) == 0);
    CHECK_THROWS_AS(EvalReport::from_json({{"schema", "other"}}), Error);
}

TEST_CASE("ablation summary") {
    EvalReport r;
    r.cells.push_back({"cpcl", "seen", "liver", 1, 0, {"a"}, {0.6}, {0}});
    r.cells.push_back({"cpcl", "seen", "liver", 1, 1, {"a"}, {0.8}, {0}});
    r.cells.push_back({"cpcl", "seen", "kidney", 1, 1, {"a"}, {0.4}, {0}});
    const auto rows = summarize(r, {0, 1}, {1});
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].per_seed.size() == 2);
    CHECK(rows[0].per_seed[1] == doctest::Approx(0.6));
    CHECK(rows[0].mean == doctest::Approx(0.6));
    CHECK(rows[0].stddev == doctest::Approx(0.0));

    CHECK(to_string(Variant::FineTuning) == "fine_tuning");
    const auto ft = variant_config(Variant::FineTuning, {});
    CHECK_FALSE(ft.use_consistency);
    CHECK_FALSE(ft.use_rectification);
    const auto full = variant_config(Variant::Cpcl, {});
    CHECK(full.use_consistency);
    CHECK(full.use_rectification);
}

TEST_CASE("prompt budget report") {
    std::vector<Sample> samples{ball_sample("v0", "liver", {12, 12, 12}, 4.6),
                                ball_sample("v1", "kidney", {12, 12, 12}, 1.0)};
    OracleSegmenter oracle({16, 16, 16});
    const auto rows = prompt_budget_report(samples, {1, 3, 5}, 0, &oracle);
    REQUIRE(rows.size() == 2);
    // Radius 4.6 spans |dz| <= 4; radius 1 spans three slices.
    CHECK(rows[0].occupied_slices == 9);
    CHECK(rows[1].occupied_slices == 3);
    for (const auto& row : rows) {
        const int64_t n = row.occupied_slices;
        CHECK((row.budget_2d == std::vector<int64_t>{n, 3 * n, 5 * n}));
        CHECK((row.budget_3d == std::vector<int64_t>{1, 3, 5}));
        CHECK(row.seconds_3d.size() == 3);
    }
    const auto j = to_json(rows);
    CHECK(j.size() == 2);
    CHECK(j[0]["budget_2d"][2] == 45);
}
