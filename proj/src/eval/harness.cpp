#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>

#include "petprompt/eval.hpp"
#include "petprompt/seeding.hpp"

namespace petprompt::eval {

namespace fs = std::filesystem;
using nlohmann::json;

Grid3<float> OracleSegmenter::segment(const Grid3<float>&, const Grid3<uint8_t>& gt, int, prompting::PromptSampler&) {
    Grid3<float> out(gt.shape());
    std::ranges::transform(gt.values(), out.values().begin(), [](uint8_t v) { return static_cast<float>(v); });
    return out;
}

Grid3<float> ConstantSegmenter::segment(const Grid3<float>&, const Grid3<uint8_t>& gt, int,
                                        prompting::PromptSampler&) {
    Grid3<float> out(gt.shape());
    std::ranges::fill(out.values(), value_);
    return out;
}

NetSegmenter::NetSegmenter(net::PromptableSegmenter model, std::string name)
    : model_(std::move(model)), name_(std::move(name)) {
    model_->eval();
}

Grid3<float> NetSegmenter::segment(const Grid3<float>& image, const Grid3<uint8_t>& gt, int n_points,
                                   prompting::PromptSampler& sampler) {
    torch::NoGradGuard no_grad;
    std::vector<prompting::PromptSampler> samplers{sampler};
    const auto stack = model_->predict_with_labels(net::to_tensor(image), {gt}, n_points, samplers);
    sampler = samplers.front();
    return net::to_grid(stack.final_probabilities());
}

uint64_t case_seed(uint64_t seed, const std::string& volume_id, const std::string& target) {
    return mix_seed(mix_seed(seed, hash_name(volume_id)), hash_name(target));
}

CaseResult evaluate_case(Segmenter& seg, const Sample& sample, int n_points, uint64_t seed, int perturb_radius) {
    require(n_points >= 1, "config", "n_points must be >= 1");
    const Crop crop = make_crop(sample, seg.input_size());
    prompting::PromptSampler sampler({perturb_radius, seed, prompting::Mode::Volumetric3D});
    const auto start = std::chrono::steady_clock::now();
    const Grid3<float> prob = seg.segment(crop.image, crop.label, n_points, sampler);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    require(prob.shape() == crop.image.shape(), "shape", "segmenter returned a mis-shaped probability map");
    Grid3<uint8_t> full(sample.label->shape());
    insert_patch(full, binarize(prob, 0.5f), crop.center);
    return {dsc(sample.label->data, full), seconds};
}

// ------------------------------------------------------------------ report

double EvalCell::mean() const {
    require(!dsc.empty(), "empty", "cell has no volumes");
    double s = 0;
    for (double v : dsc) s += v;
    return s / static_cast<double>(dsc.size());
}

double EvalCell::stddev() const {
    const double m = mean();
    double s = 0;
    for (double v : dsc) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(dsc.size()));
}

double EvalCell::seconds_per_volume() const {
    if (seconds.empty()) return 0.0;
    double s = 0;
    for (double v : seconds) s += v;
    return s / static_cast<double>(seconds.size());
}

void EvalReport::append(const EvalReport& other) {
    cells.insert(cells.end(), other.cells.begin(), other.cells.end());
}

std::optional<double> EvalReport::macro_mean(const std::string& method, const std::string& group, int points,
                                             std::optional<uint64_t> train_seed) const {
    std::map<std::string, std::vector<double>> by_target;
    for (const auto& c : cells) {
        if (c.method != method || c.group != group || c.points != points) continue;
        if (train_seed && c.train_seed != *train_seed) continue;
        auto& v = by_target[c.target];
        v.insert(v.end(), c.dsc.begin(), c.dsc.end());
    }
    if (by_target.empty()) return std::nullopt;
    double sum = 0;
    for (const auto& [target, v] : by_target) {
        double s = 0;
        for (double d : v) s += d;
        sum += s / static_cast<double>(v.size());
    }
    return sum / static_cast<double>(by_target.size());
}

std::vector<std::string> EvalReport::methods() const {
    std::vector<std::string> out;
    for (const auto& c : cells) {
        if (std::find(out.begin(), out.end(), c.method) == out.end()) out.push_back(c.method);
    }
    return out;
}

json EvalReport::to_json() const {
    json jc = json::array();
    for (const auto& c : cells) {
        jc.push_back({{"method", c.method},
                      {"group", c.group},
                      {"target", c.target},
                      {"points", c.points},
                      {"train_seed", c.train_seed},
                      {"n", c.dsc.size()},
                      {"mean_dsc", c.mean()},
                      {"std_dsc", c.stddev()},
                      {"prompts_per_volume", c.points},
                      {"seconds_per_volume", c.seconds_per_volume()},
                      {"volume_ids", c.volume_ids},
                      {"dsc", c.dsc},
                      {"seconds", c.seconds}});
    }
    return {{"schema", kReportSchema}, {"eval_seed", eval_seed}, {"perturb_radius", perturb_radius}, {"cells", jc}};
}

EvalReport EvalReport::from_json(const json& j) {
    require(j.value("schema", "") == kReportSchema, "schema", "not a petprompt report");
    EvalReport r;
    r.eval_seed = j.at("eval_seed").get<uint64_t>();
    r.perturb_radius = j.at("perturb_radius").get<int>();
    for (const auto& c : j.at("cells")) {
        EvalCell cell;
        cell.method = c.at("method").get<std::string>();
        cell.group = c.at("group").get<std::string>();
        cell.target = c.at("target").get<std::string>();
        cell.points = c.at("points").get<int>();
        cell.train_seed = c.at("train_seed").get<uint64_t>();
        cell.volume_ids = c.at("volume_ids").get<std::vector<std::string>>();
        cell.dsc = c.at("dsc").get<std::vector<double>>();
        cell.seconds = c.at("seconds").get<std::vector<double>>();
        r.cells.push_back(std::move(cell));
    }
    return r;
}

void EvalReport::write(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream(dir / "report.json") << to_json().dump(2) << "\n";
    std::ofstream csv(dir / "report.csv");
    csv << "method,group,target,points,train_seed,n,mean_dsc,std_dsc,prompts_per_volume,seconds_per_volume\n";
    csv << std::setprecision(10);
    for (const auto& c : cells) {
        csv << c.method << ',' << c.group << ',' << c.target << ',' << c.points << ',' << c.train_seed << ','
            << c.dsc.size() << ',' << c.mean() << ',' << c.stddev() << ',' << c.points << ','
            << c.seconds_per_volume() << '\n';
    }
}

EvalReport evaluate_promptable(Segmenter& seg, const std::vector<Sample>& samples, const EvalOptions& options) {
    require(!samples.empty(), "empty", "no samples to evaluate");
    for (const auto& s : samples) {
        require(s.label->quality == LabelQuality::HQ, "label", "evaluation needs HQ labels, got " + s.volume_id);
    }
    EvalReport report;
    report.eval_seed = options.seed;
    report.perturb_radius = options.perturb_radius;

    std::map<std::pair<std::string, int>, size_t> index;
    for (int points : options.points) {
        for (const auto& s : samples) {
            const auto key = std::make_pair(s.target, points);
            auto it = index.find(key);
            if (it == index.end()) {
                EvalCell cell;
                cell.method = seg.name();
                cell.group = options.group;
                cell.target = s.target;
                cell.points = points;
                cell.train_seed = options.train_seed;
                report.cells.push_back(std::move(cell));
                it = index.emplace(key, report.cells.size() - 1).first;
            }
            const CaseResult r = evaluate_case(seg, s, points, case_seed(options.seed, s.volume_id, s.target),
                                               options.perturb_radius);
            EvalCell& cell = report.cells[it->second];
            cell.volume_ids.push_back(s.volume_id);
            cell.dsc.push_back(r.dsc);
            cell.seconds.push_back(r.seconds);
        }
    }
    return report;
}

// ---------------------------------------------------------- prompt budgets

std::vector<BudgetRow> prompt_budget_report(const std::vector<Sample>& samples, const std::vector<int>& settings,
                                            uint64_t seed, Segmenter* timing, int perturb_radius) {
    std::vector<BudgetRow> rows;
    for (const auto& s : samples) {
        BudgetRow row;
        row.volume_id = s.volume_id;
        row.target = s.target;
        row.occupied_slices = prompting::occupied_slices(s.label->data);
        row.settings = settings;
        for (int k : settings) {
            std::mt19937_64 rng(case_seed(seed, s.volume_id, s.target));
            int64_t emitted = 0;
            for (const auto& sp : prompting::slicewise_budget(s.label->data, k, rng))
                emitted += static_cast<int64_t>(sp.points.size());
            row.budget_2d.push_back(emitted);
            row.budget_3d.push_back(k);
            if (timing) {
                row.seconds_3d.push_back(
                    evaluate_case(*timing, s, k, case_seed(seed, s.volume_id, s.target), perturb_radius).seconds);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

json to_json(const std::vector<BudgetRow>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"volume_id", r.volume_id},
                       {"target", r.target},
                       {"occupied_slices", r.occupied_slices},
                       {"settings", r.settings},
                       {"budget_2d", r.budget_2d},
                       {"budget_3d", r.budget_3d},
                       {"seconds_3d", r.seconds_3d}});
    }
    return out;
}

} // namespace petprompt::eval
