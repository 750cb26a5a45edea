#include "petprompt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "petprompt/checkpoint.hpp"
#include "petprompt/dataset.hpp"
#include "petprompt/eval.hpp"
#include "petprompt/seeding.hpp"

namespace petprompt::cpcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Batch {
    torch::Tensor x;  // [B,1,D,H,W]
    torch::Tensor y;  // [B,1,D,H,W] float {0,1}
    std::vector<Grid3<uint8_t>> labels;
    std::vector<std::string> ids;
};

Batch draw_batch(const std::vector<Sample>& pool, int count, const Shape3& size, int jitter, std::mt19937_64& rng) {
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    std::uniform_int_distribution<int64_t> shift(-jitter, jitter);
    Batch b;
    std::vector<torch::Tensor> xs, ys;
    for (int i = 0; i < count; ++i) {
        const Sample& s = pool[pick(rng)];
        const Coord3 offset{shift(rng), shift(rng), shift(rng)};
        Crop c = make_crop(s, size, offset);
        xs.push_back(net::to_tensor(c.image));
        ys.push_back(net::to_tensor(c.label));
        b.labels.push_back(std::move(c.label));
        b.ids.push_back(s.volume_id + ":" + s.target);
    }
    b.x = torch::cat(xs);
    b.y = torch::cat(ys);
    return b;
}

std::vector<prompting::PromptSampler> samplers_for(uint64_t seed, int64_t step, int branch, size_t count,
                                                   int perturb_radius) {
    std::vector<prompting::PromptSampler> out;
    for (size_t b = 0; b < count; ++b) {
        const uint64_t s = mix_seed(mix_seed(seed, static_cast<uint64_t>(step)), branch * 1000 + b);
        out.emplace_back(prompting::PromptPolicy{perturb_radius, s, prompting::Mode::Volumetric3D});
    }
    return out;
}

double learning_rate(const CpclConfig& c, int epoch) {
    const auto passed = std::count_if(c.milestones.begin(), c.milestones.end(), [&](int m) { return epoch >= m; });
    return c.lr * std::pow(c.gamma, static_cast<double>(passed));
}

json report_json(const LossReport& r) {
    return {{"step", r.step},
            {"lr", r.lr},
            {"lambda_t", r.lambda_t},
            {"l_seg_hq", r.l_seg_hq},
            {"l_cps", r.l_cps},
            {"l_seg_lq", r.l_seg_lq},
            {"total", r.total},
            {"mean_uncertainty", r.mean_uncertainty},
            {"rectified_fraction", r.rectified_fraction}};
}

} // namespace

void CpclConfig::validate() const {
    require(n_pt >= 1, "config", "n_pt must be >= 1");
    require(beta >= 0, "config", "beta must be >= 0");
    require(omega_max >= 0, "config", "omega_max must be >= 0");
    require(H >= 0 && H <= kLn2, "config", "H must lie in [0, ln 2]");
    require(lr > 0, "config", "lr must be positive");
    require(weight_decay >= 0, "config", "weight_decay must be >= 0");
    require(batch_size >= 1, "config", "batch_size must be >= 1");
    require(epochs >= 1 && steps_per_epoch >= 1, "config", "epochs and steps_per_epoch must be >= 1");
    require(gamma > 0, "config", "gamma must be positive");
    require(grad_accum >= 1, "config", "grad_accum must be >= 1");
    require(perturb_radius >= 0 && crop_jitter >= 0, "config", "perturb_radius and crop_jitter must be >= 0");
    require(val_every >= 0 && val_samples >= 0, "config", "validation settings must be >= 0");
    require(std::is_sorted(milestones.begin(), milestones.end()), "config", "milestones must be ascending");
}

json to_json(const CpclConfig& c) {
    return {{"n_pt", c.n_pt},
            {"beta", c.beta},
            {"omega_max", c.omega_max},
            {"H", c.H},
            {"ramp_threshold", c.ramp_threshold},
            {"squared_ramp", c.squared_ramp},
            {"use_consistency", c.use_consistency},
            {"use_rectification", c.use_rectification},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"t_max", c.t_max()},
            {"milestones", c.milestones},
            {"gamma", c.gamma},
            {"grad_accum", c.grad_accum},
            {"perturb_radius", c.perturb_radius},
            {"crop_jitter", c.crop_jitter},
            {"val_every", c.val_every},
            {"val_samples", c.val_samples}};
}

CpclConfig cpcl_config_from_json(const json& j) {
    require(j.is_object(), "config", "cpcl config must be a JSON object");
    CpclConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    try {
        get("n_pt", c.n_pt);
        get("beta", c.beta);
        get("omega_max", c.omega_max);
        get("H", c.H);
        get("ramp_threshold", c.ramp_threshold);
        get("squared_ramp", c.squared_ramp);
        get("use_consistency", c.use_consistency);
        get("use_rectification", c.use_rectification);
        get("lr", c.lr);
        get("weight_decay", c.weight_decay);
        get("batch_size", c.batch_size);
        get("epochs", c.epochs);
        get("steps_per_epoch", c.steps_per_epoch);
        get("milestones", c.milestones);
        get("gamma", c.gamma);
        get("grad_accum", c.grad_accum);
        get("perturb_radius", c.perturb_radius);
        get("crop_jitter", c.crop_jitter);
        get("val_every", c.val_every);
        get("val_samples", c.val_samples);
    } catch (const json::exception& e) {
        throw Error("config", std::string("bad cpcl config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainResult train(const DatasetManifest& manifest, const net::NetConfig& net_cfg, const CpclConfig& cfg, uint64_t seed,
                  const TrainOptions& options) {
    cfg.validate();
    net_cfg.validate();
    require(!manifest.split(Split::TrainHQ).empty(), "empty_split", "train_hq is empty");

    SampleFilter filter;
    if (!manifest.train_targets.empty()) filter.targets = manifest.train_targets;
    const std::vector<Sample> hq = load_samples(manifest, Split::TrainHQ, filter);
    require(!hq.empty(), "empty_split", "train_hq has no labelled foreground");
    const std::vector<Sample> lq = load_samples(manifest, Split::TrainLQ, filter);

    const int lq_batch = lq.empty() ? 0 : std::max(1, cfg.batch_size / 2);
    const int hq_batch = lq.empty() ? cfg.batch_size : std::max(1, cfg.batch_size - lq_batch);
    const Shape3 size = net_cfg.input_size;
    const int64_t t_max = cfg.t_max();
    const RampShape ramp = cfg.squared_ramp ? RampShape::Squared : RampShape::Printed;

    TrainResult result;
    result.model = net::make_segmenter(net_cfg, mix_seed(seed, 1));
    auto& model = result.model;
    model->train();
    torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
    std::mt19937_64 rng(mix_seed(seed, 2));

    // Fixed validation subset of the HQ training pool.
    std::vector<size_t> order(hq.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), std::mt19937_64(mix_seed(seed, 3)));
    order.resize(std::min(order.size(), static_cast<size_t>(cfg.val_samples)));

    const bool writing = !options.out_dir.empty();
    std::ofstream csv;
    if (writing) {
        fs::create_directories(options.out_dir);
        json tc = {{"cpcl_config", to_json(cfg)},
                   {"net_config", net::to_json(net_cfg)},
                   {"manifest", options.manifest_path},
                   {"seed", seed},
                   {"hq_samples", hq.size()},
                   {"lq_samples", lq.size()},
                   {"hq_batch", hq_batch},
                   {"lq_batch", lq_batch}};
        std::ofstream(options.out_dir / "train-config.json") << tc.dump(2) << "\n";
        csv.open(options.out_dir / "metrics.csv");
        csv << "step,lr,lambda_t,l_seg_hq,l_cps,l_seg_lq,total,mean_uncertainty,rectified_fraction\n";
        csv << std::setprecision(17);
        result.last_checkpoint = options.out_dir / "last.ckpt";
        result.best_checkpoint = options.out_dir / "best.ckpt";
    }

    auto meta_for = [&](int64_t step, double val) {
        return json{{"seed", seed}, {"step", step}, {"val_dsc", val}, {"cpcl_config", to_json(cfg)}};
    };

    auto validate_now = [&]() {
        if (order.empty()) return -1.0;
        eval::NetSegmenter seg(model);
        double sum = 0;
        for (size_t i : order) {
            const Sample& s = hq[i];
            sum += eval::evaluate_case(seg, s, 1, eval::case_seed(mix_seed(seed, 4), s.volume_id, s.target),
                                       cfg.perturb_radius)
                       .dsc;
        }
        model->train();
        return sum / static_cast<double>(order.size());
    };

    opt.zero_grad();
    for (int64_t t = 1; t <= t_max; ++t) {
        const int epoch = static_cast<int>((t - 1) / cfg.steps_per_epoch);
        const double lr = learning_rate(cfg, epoch);
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

        LossReport rep;
        rep.step = t;
        rep.lr = lr;
        rep.lambda_t = ramp_up_lambda(t, t_max, cfg.omega_max, ramp);
        const double threshold =
            cfg.ramp_threshold ? kLn2 - (kLn2 - cfg.H) * static_cast<double>(t) / static_cast<double>(t_max) : cfg.H;

        Batch hb = draw_batch(hq, hq_batch, size, cfg.crop_jitter, rng);
        auto hs = samplers_for(seed, t, 0, static_cast<size_t>(hq_batch), cfg.perturb_radius);
        const net::PredictionStack h_stack = model->predict_with_labels(hb.x, hb.labels, cfg.n_pt, hs);
        const torch::Tensor l_h = supervised_loss(h_stack.logits, hb.y);

        torch::Tensor l_cps = torch::zeros({});
        torch::Tensor l_lq = torch::zeros({});
        std::vector<std::string> lq_ids;
        if (lq_batch > 0) {
            Batch lb = draw_batch(lq, lq_batch, size, cfg.crop_jitter, rng);
            lq_ids = lb.ids;
            auto ls = samplers_for(seed, t, 1, static_cast<size_t>(lq_batch), cfg.perturb_radius);
            const net::PredictionStack l_stack = model->predict_with_labels(lb.x, lb.labels, cfg.n_pt, ls);
            ProbabilityStack probs;
            for (const auto& l : l_stack.logits) probs.push_back(torch::sigmoid(l));
            const torch::Tensor u = entropy_uncertainty(mean_prediction(probs).detach());
            const torch::Tensor target = cfg.use_rectification ? rectify_labels(lb.y, u, threshold) : lb.y;
            rep.mean_uncertainty = u.mean().item<double>();
            rep.rectified_fraction = (target != lb.y).to(torch::kDouble).mean().item<double>();
            l_lq = supervised_loss(l_stack.logits, target);
            if (cfg.use_consistency) l_cps = consistency_loss(probs);
        }

        // Accumulated in double so the logged total matches its parts to rounding.
        const torch::Tensor total =
            l_h.to(torch::kDouble) + rep.lambda_t * (l_cps.to(torch::kDouble) + cfg.beta * l_lq.to(torch::kDouble));
        rep.l_seg_hq = l_h.item<double>();
        rep.l_cps = l_cps.item<double>();
        rep.l_seg_lq = l_lq.item<double>();
        rep.total = total.item<double>();

        if (!std::isfinite(rep.total)) {
            json snap = report_json(rep);
            snap["hq_batch"] = hb.ids;
            snap["lq_batch"] = lq_ids;
            snap["seed"] = seed;
            if (writing) std::ofstream(options.out_dir / "divergence.json") << snap.dump(2) << "\n";
            throw Error("diverged", "non-finite loss at step " + std::to_string(t) + ": " + snap.dump());
        }

        (total / static_cast<double>(cfg.grad_accum)).backward();
        if (t % cfg.grad_accum == 0 || t == t_max) {
            opt.step();
            opt.zero_grad();
        }

        result.log.push_back(rep);
        if (csv.is_open()) {
            csv << rep.step << ',' << rep.lr << ',' << rep.lambda_t << ',' << rep.l_seg_hq << ',' << rep.l_cps << ','
                << rep.l_seg_lq << ',' << rep.total << ',' << rep.mean_uncertainty << ',' << rep.rectified_fraction
                << '\n';
        }
        if (options.on_step) options.on_step(rep);

        const bool epoch_end = t % cfg.steps_per_epoch == 0;
        if (epoch_end && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || t == t_max)) {
            const double val = validate_now();
            if (options.on_validate) options.on_validate(epoch + 1, val);
            if (val > result.best_val_dsc) {
                result.best_val_dsc = val;
                result.best_step = t;
                if (writing) net::save_checkpoint(model, result.best_checkpoint, meta_for(t, val));
            }
        }
    }
    if (csv.is_open()) csv.flush();
    if (writing) {
        net::save_checkpoint(model, result.last_checkpoint, meta_for(t_max, result.best_val_dsc));
        // Without validation the final weights are the best we know of.
        if (result.best_step < 0) net::save_checkpoint(model, result.best_checkpoint, meta_for(t_max, -1.0));
    }
    model->eval();
    return result;
}

} // namespace petprompt::cpcl
