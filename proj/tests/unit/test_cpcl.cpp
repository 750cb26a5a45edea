#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "petprompt/cpcl.hpp"
#include "petprompt/eval.hpp"
#include "petprompt/phantom.hpp"
#include "petprompt/seeding.hpp"
#include "petprompt/trainer.hpp"
#include "support.hpp"

using namespace petprompt;
using namespace petprompt::cpcl;

namespace {

const double kLn2 = std::log(2.0);

torch::Tensor full(double v) { return torch::full({2, 2, 2}, v, torch::kDouble); }

double scalar_entropy(double p) {
    auto term = [](double q) { return q > 0 ? q * std::log(q) : 0.0; };
    return -(term(p) + term(1 - p));
}

std::string error_message(const auto& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

net::NetConfig tiny_net() {
    net::NetConfig c;
    c.patch_size = 4;
    c.embed_dim = 32;
    c.depth = 1;
    c.num_heads = 2;
    c.decoder_dim = 32;
    c.decoder_heads = 2;
    c.mlp_ratio = 2;
    c.input_size = {16, 16, 16};
    return c;
}

CpclConfig short_schedule(int steps) {
    CpclConfig c;
    c.lr = 1e-3;
    c.epochs = 1;
    c.steps_per_epoch = steps;
    c.milestones = {};
    c.val_every = 0;
    c.crop_jitter = 2;
    return c;
}

DatasetManifest small_dataset(const testing::TempDir& dir, int hq, int lq) {
    phantom::DatasetRecipe r;
    r.hq = hq;
    r.lq = lq;
    r.test = 0;
    r.phantom.shape = {24, 24, 24};
    r.train_targets = {"liver"};
    r.seed = 11;
    return phantom::generate_dataset(r, dir.path());
}

} // namespace

TEST_CASE("mean prediction and consistency hand cases") {
    CHECK((mean_prediction({full(0.2), full(0.6)}).allclose(full(0.4))));
    // (0.4 - 0.2)^2 + (0.4 - 0.6)^2
    CHECK((std::abs(consistency_loss({full(0.2), full(0.6)}).item<double>() - 0.08) < 1e-9));
    CHECK((consistency_loss({full(0.3)}).item<double>() == 0.0));
    const auto p = torch::rand({1, 1, 4, 4, 4}, torch::kDouble);
    CHECK((consistency_loss({p, p.clone(), p.clone()}).item<double>() < 1e-12));
    CHECK_THROWS_AS(mean_prediction({}), Error);
    CHECK_THROWS(mean_prediction({full(0.1), torch::zeros({3}, torch::kDouble)}));
}

TEST_CASE("entropy uncertainty") {
    CHECK(std::abs(entropy_uncertainty(full(0.5))[0][0][0].item<double>() - kLn2) < 1e-6);
    CHECK(std::abs(entropy_uncertainty(full(0.9))[0][0][0].item<double>() - scalar_entropy(0.9)) < 1e-6);
    CHECK(std::abs(scalar_entropy(0.9) - 0.3251) < 1e-4);
    CHECK(entropy_uncertainty(full(0.0))[0][0][0].item<double>() == 0.0);
    CHECK(entropy_uncertainty(full(1.0))[0][0][0].item<double>() == 0.0);

    const auto p = torch::rand({1000}, torch::kDouble);
    const auto u = entropy_uncertainty(p);
    CHECK(u.min().item<double>() >= 0.0);
    CHECK(u.max().item<double>() <= kLn2);
    CHECK(u.allclose(entropy_uncertainty(1 - p)));
    CHECK_FALSE(u.isnan().any().item<bool>());
}

TEST_CASE("rectification matches a scalar loop") {
    torch::manual_seed(5);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> thr(0.0, kLn2);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto y = (torch::rand({8, 8, 8}) < 0.4).to(torch::kFloat);
        const auto u = torch::rand({8, 8, 8}) * static_cast<float>(kLn2);
        const double h = thr(rng);
        const auto out = rectify_labels(y, u, h);
        auto ya = y.accessor<float, 3>();
        auto ua = u.accessor<float, 3>();
        auto oa = out.accessor<float, 3>();
        for (int z = 0; z < 8; ++z)
            for (int j = 0; j < 8; ++j)
                for (int x = 0; x < 8; ++x) {
                    const float expected = ua[z][j][x] > h ? 1.0f - ya[z][j][x] : ya[z][j][x];
                    mismatches += oa[z][j][x] != expected;
                }
        // The flipped voxels are exactly the uncertain ones.
        REQUIRE(torch::equal(out != y, u > h));
    }
    CHECK(mismatches == 0);
}

TEST_CASE("rectification on label volumes") {
    LabelVolume l{testing::ball({6, 6, 6}, {3, 3, 3}, 2.0), "t", LabelQuality::LQ};
    Grid3<float> u({6, 6, 6}, 0.1f);
    u(3, 3, 3) = 0.6f;  // inside, flipped off
    u(0, 0, 0) = 0.6f;  // outside, flipped on
    const auto r = rectify_labels(l, u, 0.5);
    CHECK(r.quality == LabelQuality::Rectified);
    CHECK(r.data(3, 3, 3) == 0);
    CHECK(r.data(0, 0, 0) == 1);
    CHECK(r.foreground() == l.foreground());
}

TEST_CASE("supervised losses") {
    CHECK((std::abs(bce_with_logits(torch::zeros({4}), torch::ones({4})).item<double>() - kLn2) < 1e-6));
    const auto y = testing::ball({6, 6, 6}, {3, 3, 3}, 2.0);
    const auto t = net::to_tensor(y);
    CHECK(soft_dice_loss(t, t).item<double>() < 1e-6);
    CHECK(soft_dice_loss(1 - t, t).item<double>() > 0.99);
    // Empty target and empty prediction agree.
    const auto z = torch::zeros({1, 1, 4, 4, 4});
    CHECK(soft_dice_loss(z, z).item<double>() == doctest::Approx(0.0));
    // Per-sample Dice averaged over the batch.
    const auto both = torch::cat({t, t});
    const auto mixed = torch::cat({t, 1 - t});
    CHECK(soft_dice_loss(mixed, both).item<double>() ==
          doctest::Approx((soft_dice_loss(t, t).item<double>() + soft_dice_loss(1 - t, t).item<double>()) / 2));
}

TEST_CASE("ramp-up schedule") {
    CHECK(ramp_up_lambda(1000, 1000, 0.1) == 0.1);
    CHECK(std::abs(ramp_up_lambda(0, 1000, 0.1) - 0.1 * std::exp(-5.0)) < 1e-9);
    CHECK(std::abs(ramp_up_lambda(0, 1000, 0.1, RampShape::Squared) - 0.1 * std::exp(-5.0)) < 1e-9);
    CHECK(ramp_up_lambda(1000, 1000, 0.1, RampShape::Squared) == 0.1);
    double prev = 0;
    for (int64_t t = 0; t <= 1000; t += 10) {
        const double v = ramp_up_lambda(t, 1000, 0.1);
        CHECK(v >= prev);
        CHECK(ramp_up_lambda(t, 1000, 0.1, RampShape::Squared) >= v - 1e-15);
        prev = v;
    }
    CHECK((error_message([] { ramp_up_lambda(0, 0, 0.1); }).find("t_max") != std::string::npos));
    CHECK_THROWS_AS(ramp_up_lambda(11, 10, 0.1), Error);
}

TEST_CASE("loss gradients agree with central differences") {
    torch::manual_seed(3);
    const auto target = (torch::rand({1, 1, 8, 8, 8}, torch::kDouble) < 0.3).to(torch::kDouble);
    std::vector<torch::Tensor> logits;
    for (int i = 0; i < 3; ++i) logits.push_back(torch::randn({1, 1, 8, 8, 8}, torch::kDouble).requires_grad_());

    auto objective = [&](const std::vector<torch::Tensor>& ls) {
        ProbabilityStack probs;
        for (const auto& l : ls) probs.push_back(torch::sigmoid(l));
        return supervised_loss(ls, target) + 0.7 * consistency_loss(probs);
    };
    objective(logits).backward();

    const double h = 1e-6;
    double worst = 0;
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int64_t> pick(0, 511);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 12; ++k) {
            const int64_t idx = pick(rng);
            std::vector<torch::Tensor> plus, minus;
            for (const auto& l : logits) {
                plus.push_back(l.detach().clone());
                minus.push_back(l.detach().clone());
            }
            plus[i].view(-1)[idx] += h;
            minus[i].view(-1)[idx] -= h;
            const double fd = (objective(plus).item<double>() - objective(minus).item<double>()) / (2 * h);
            const double an = logits[i].grad().view(-1)[idx].item<double>();
            worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
        }
    }
    CHECK(worst < 1e-2);
}

TEST_CASE("cpcl config") {
    CpclConfig c;
    CHECK(c.t_max() == 1000);
    const CpclConfig back = cpcl_config_from_json(to_json(c));
    CHECK(back.H == c.H);
    CHECK(back.milestones == c.milestones);
    c.n_pt = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK_THROWS_AS(cpcl_config_from_json({{"n_pt", "three"}}), Error);
}

TEST_CASE("trainer") {
    torch::manual_seed(0);
    testing::TempDir dir("train");

    SUBCASE("logged totals reconstruct from their parts") {
        const auto m = small_dataset(dir, 3, 4);
        auto cfg = short_schedule(12);
        cfg.omega_max = 0.5;  // keep the LQ terms visible
        auto r = train(m, tiny_net(), cfg, 1, {});
        REQUIRE(r.log.size() == 12);
        bool any_cps = false, any_rectified = false;
        for (const auto& s : r.log) {
            const double rebuilt = s.l_seg_hq + s.lambda_t * (s.l_cps + cfg.beta * s.l_seg_lq);
            REQUIRE(std::abs(s.total - rebuilt) <= 1e-6);
            REQUIRE(s.lambda_t == ramp_up_lambda(s.step, cfg.t_max(), cfg.omega_max));
            REQUIRE(s.l_seg_lq > 0.0);
            any_cps |= s.l_cps > 0;
            any_rectified |= s.rectified_fraction > 0;
        }
        CHECK(any_cps);
        CHECK(any_rectified);
        CHECK(r.log.back().lambda_t == cfg.omega_max);
        // Every loop encoded once and started from an empty previous mask.
        auto& st = r.model->stats();
        CHECK(st.nonzero_initial_masks.load() == 0);
        CHECK(st.encoder_calls.load() == st.loops.load());
        CHECK(st.decoder_calls.load() == st.loops.load() * cfg.n_pt);
    }
    SUBCASE("without LQ data the objective is the HQ loss") {
        const auto m = small_dataset(dir, 3, 0);
        const auto r = train(m, tiny_net(), short_schedule(4), 1, {});
        for (const auto& s : r.log) {
            CHECK(s.total == s.l_seg_hq);
            CHECK(s.l_cps == 0.0);
            CHECK(s.l_seg_lq == 0.0);
        }
    }
    SUBCASE("fine-tuning variant has no consistency or rectification") {
        const auto m = small_dataset(dir, 2, 3);
        const auto cfg = eval::variant_config(eval::Variant::FineTuning, short_schedule(6));
        const auto r = train(m, tiny_net(), cfg, 2, {});
        for (const auto& s : r.log) {
            CHECK(s.l_cps == 0.0);
            CHECK(s.rectified_fraction == 0.0);
        }
        const auto cons = eval::variant_config(eval::Variant::Consistency, short_schedule(6));
        CHECK(cons.use_consistency);
        CHECK_FALSE(cons.use_rectification);
    }
    SUBCASE("same seed, same run") {
        const auto m = small_dataset(dir, 2, 2);
        const auto a = train(m, tiny_net(), short_schedule(3), 4, {});
        const auto b = train(m, tiny_net(), short_schedule(3), 4, {});
        for (size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].total == b.log[i].total);
    }
    SUBCASE("the HQ loss falls on a small problem") {
        const auto m = small_dataset(dir, 2, 0);
        auto cfg = short_schedule(60);
        cfg.n_pt = 1;
        const auto r = train(m, tiny_net(), cfg, 3, {});
        double first = 0, last = 0;
        for (int i = 0; i < 10; ++i) {
            first += r.log[static_cast<size_t>(i)].l_seg_hq;
            last += r.log[r.log.size() - 1 - static_cast<size_t>(i)].l_seg_hq;
        }
        CHECK(last < first);
    }
    SUBCASE("fifty steps improve DSC on a training phantom") {
        const auto m = small_dataset(dir, 1, 0);
        auto cfg = short_schedule(50);
        cfg.batch_size = 1;
        cfg.crop_jitter = 0;
        const auto sample = load_samples(m, Split::TrainHQ).front();
        eval::NetSegmenter before(net::make_segmenter(tiny_net(), mix_seed(2, 1)));
        const double d0 = eval::evaluate_case(before, sample, 1, 0, 2).dsc;
        eval::NetSegmenter after(train(m, tiny_net(), cfg, 2, {}).model);
        const double d50 = eval::evaluate_case(after, sample, 1, 0, 2).dsc;
        INFO(d0, " -> ", d50);
        CHECK(d50 > d0);
    }
    SUBCASE("empty HQ split") {
        const auto m = small_dataset(dir, 0, 2);
        CHECK((error_message([&] { train(m, tiny_net(), short_schedule(2), 0, {}); }) == "train_hq is empty"));
    }
    SUBCASE("run directory contents") {
        const auto m = small_dataset(dir, 2, 2);
        auto cfg = short_schedule(3);
        cfg.val_every = 1;
        cfg.val_samples = 1;
        TrainOptions opt;
        opt.out_dir = dir / "run";
        int validations = 0;
        opt.on_validate = [&](int, double v) {
            ++validations;
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        };
        const auto r = train(m, tiny_net(), cfg, 0, opt);
        CHECK(validations == 1);
        CHECK(std::filesystem::exists(r.last_checkpoint));
        CHECK(std::filesystem::exists(r.best_checkpoint));
        std::ifstream csv(dir / "run/metrics.csv");
        int lines = 0;
        for (std::string line; std::getline(csv, line);) ++lines;
        CHECK(lines == 4);
        std::ifstream tc(dir / "run/train-config.json");
        const auto j = nlohmann::json::parse(tc);
        CHECK(j["hq_batch"] == 1);
        CHECK(j["lq_batch"] == 1);
        CHECK(j["cpcl_config"]["n_pt"] == 3);
    }
}
