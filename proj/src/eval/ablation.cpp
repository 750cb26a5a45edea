#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "petprompt/eval.hpp"

namespace petprompt::eval {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::FineTuning: return "fine_tuning";
        case Variant::Consistency: return "consistency";
        case Variant::Cpcl: return "cpcl";
    }
    return "unknown";
}

cpcl::CpclConfig variant_config(Variant v, const cpcl::CpclConfig& base) {
    cpcl::CpclConfig c = base;
    c.use_consistency = v != Variant::FineTuning;
    c.use_rectification = v == Variant::Cpcl;
    return c;
}

const AblationSummaryRow* AblationResult::row(const std::string& variant, const std::string& group,
                                              int points) const {
    for (const auto& r : summary) {
        if (r.variant == variant && r.group == group && r.points == points) return &r;
    }
    return nullptr;
}

json AblationResult::summary_json() const {
    json rows = json::array();
    for (const auto& r : summary) {
        rows.push_back({{"variant", r.variant},
                        {"group", r.group},
                        {"points", r.points},
                        {"per_seed", r.per_seed},
                        {"mean_dsc", r.mean},
                        {"std_dsc", r.stddev}});
    }
    return {{"rows", rows}, {"checkpoints", checkpoints}, {"seconds", seconds}};
}

std::vector<AblationSummaryRow> summarize(const EvalReport& report, const std::vector<uint64_t>& seeds,
                                          const std::vector<int>& points) {
    std::vector<std::string> groups;
    for (const auto& c : report.cells) {
        if (std::find(groups.begin(), groups.end(), c.group) == groups.end()) groups.push_back(c.group);
    }
    std::vector<AblationSummaryRow> out;
    for (const auto& method : report.methods()) {
        for (const auto& group : groups) {
            for (int p : points) {
                AblationSummaryRow row{method, group, p, {}, 0, 0};
                for (uint64_t s : seeds) {
                    if (auto m = report.macro_mean(method, group, p, s)) row.per_seed.push_back(*m);
                }
                if (row.per_seed.empty()) continue;
                for (double v : row.per_seed) row.mean += v;
                row.mean /= static_cast<double>(row.per_seed.size());
                if (row.per_seed.size() > 1) {
                    double ss = 0;
                    for (double v : row.per_seed) ss += (v - row.mean) * (v - row.mean);
                    row.stddev = std::sqrt(ss / static_cast<double>(row.per_seed.size() - 1));
                }
                out.push_back(std::move(row));
            }
        }
    }
    return out;
}

AblationResult ablation_suite(const DatasetManifest& manifest, const net::NetConfig& net_cfg,
                              const cpcl::CpclConfig& base, const AblationOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    require(!manifest.split(Split::TrainLQ).empty(), "empty_split", "ablation needs a train_lq split");
    require(!options.seeds.empty(), "config", "ablation needs at least one seed");
    auto say = [&](const std::string& msg) {
        if (options.progress) options.progress(msg);
    };

    // Seen targets are the training prompts; every other test label is an unseen organ.
    std::vector<std::string> seen = manifest.train_targets;
    std::set<std::string> all_test;
    for (const auto* e : manifest.split(Split::Test)) {
        for (const auto& [name, path] : e->labels) all_test.insert(name);
    }
    if (seen.empty()) seen.assign(all_test.begin(), all_test.end());
    std::vector<std::string> unseen;
    for (const auto& t : all_test) {
        if (std::find(seen.begin(), seen.end(), t) == seen.end()) unseen.push_back(t);
    }

    std::vector<std::pair<std::string, std::vector<Sample>>> groups;
    groups.emplace_back("seen", load_samples(manifest, Split::Test, {seen, true, options.max_test_volumes}));
    if (!unseen.empty()) {
        groups.emplace_back("unseen_organs",
                            load_samples(manifest, Split::Test, {unseen, true, options.max_test_volumes}));
    }
    if (options.shifted) {
        groups.emplace_back("shifted_domain",
                            load_samples(*options.shifted, Split::Test, {std::nullopt, true, options.max_test_volumes}));
    }
    require(!groups.front().second.empty(), "empty_split", "test split has no seen-target labels");

    AblationResult result;
    for (uint64_t seed : options.seeds) {
        for (Variant v : kVariants) {
            const std::string name = to_string(v);
            const std::string run = name + "-seed" + std::to_string(seed);
            say("training " + run);
            cpcl::TrainOptions topt;
            if (!options.out_dir.empty()) topt.out_dir = options.out_dir / run;
            cpcl::TrainResult tr = cpcl::train(manifest, net_cfg, variant_config(v, base), seed, topt);
            if (!tr.last_checkpoint.empty()) result.checkpoints.push_back(tr.last_checkpoint);
            result.logs.emplace_back(run, tr.log);

            say("evaluating " + run);
            NetSegmenter seg(tr.model, name);
            EvalReport run_report;
            for (const auto& [group, samples] : groups) {
                if (samples.empty()) continue;
                EvalOptions eo{options.points, options.eval_seed, options.perturb_radius, group, seed};
                run_report.append(evaluate_promptable(seg, samples, eo));
            }
            run_report.eval_seed = options.eval_seed;
            run_report.perturb_radius = options.perturb_radius;
            if (!topt.out_dir.empty()) run_report.write(topt.out_dir);
            result.report.append(run_report);
        }
    }
    result.report.eval_seed = options.eval_seed;
    result.report.perturb_radius = options.perturb_radius;
    result.summary = summarize(result.report, options.seeds, options.points);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!options.out_dir.empty()) {
        result.report.write(options.out_dir);
        std::ofstream(options.out_dir / "summary.json") << result.summary_json().dump(2) << "\n";
    }
    return result;
}

} // namespace petprompt::eval
