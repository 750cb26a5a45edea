#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "petprompt/dataset.hpp"
#include "petprompt/metrics.hpp"
#include "petprompt/net.hpp"
#include "petprompt/prompting.hpp"
#include "petprompt/trainer.hpp"

namespace petprompt::eval {

// Anything that turns simulated point prompts into a probability map. The
// harness hands it crop-sized image and ground truth; the sampler drives the
// prompts so every implementation sees the same stream.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual std::string name() const = 0;
    virtual Shape3 input_size() const = 0;
    // Probabilities of the final prompt iteration.
    virtual Grid3<float> segment(const Grid3<float>& image, const Grid3<uint8_t>& gt, int n_points,
                                 prompting::PromptSampler& sampler) = 0;
};

// Returns the ground truth as probabilities.
class OracleSegmenter : public Segmenter {
public:
    explicit OracleSegmenter(Shape3 size) : size_(size) {}
    std::string name() const override { return "oracle"; }
    Shape3 input_size() const override { return size_; }
    Grid3<float> segment(const Grid3<float>&, const Grid3<uint8_t>& gt, int, prompting::PromptSampler&) override;

private:
    Shape3 size_;
};

class ConstantSegmenter : public Segmenter {
public:
    ConstantSegmenter(Shape3 size, float value) : size_(size), value_(value) {}
    std::string name() const override { return "constant"; }
    Shape3 input_size() const override { return size_; }
    Grid3<float> segment(const Grid3<float>&, const Grid3<uint8_t>&, int, prompting::PromptSampler&) override;

private:
    Shape3 size_;
    float value_;
};

// The promptable network in inference mode.
class NetSegmenter : public Segmenter {
public:
    explicit NetSegmenter(net::PromptableSegmenter model, std::string name = "model");
    std::string name() const override { return name_; }
    Shape3 input_size() const override { return model_->config().input_size; }
    Grid3<float> segment(const Grid3<float>& image, const Grid3<uint8_t>& gt, int n_points,
                         prompting::PromptSampler& sampler) override;
    net::PromptableSegmenter& model() { return model_; }

private:
    net::PromptableSegmenter model_;
    std::string name_;
};

// Prompt seed of one (volume, target) case. Shared by every prompt setting so
// the first point is the same at 1, 3 and 5 points.
uint64_t case_seed(uint64_t seed, const std::string& volume_id, const std::string& target);

struct CaseResult {
    double dsc = 0;
    double seconds = 0;
};

// Crops around the ground-truth center, runs the segmenter, thresholds at 0.5,
// pastes the mask back and scores it against the full-volume label.
CaseResult evaluate_case(Segmenter& seg, const Sample& sample, int n_points, uint64_t seed, int perturb_radius);

struct EvalCell {
    std::string method;
    std::string group;  // "seen", "unseen_organs", "shifted_domain", ...
    std::string target;
    int points = 1;
    uint64_t train_seed = 0;
    std::vector<std::string> volume_ids;
    std::vector<double> dsc;
    std::vector<double> seconds;

    double mean() const;
    double stddev() const;  // population
    double seconds_per_volume() const;
};

inline constexpr const char* kReportSchema = "petprompt-report/1";

struct EvalReport {
    uint64_t eval_seed = 0;
    int perturb_radius = 2;
    std::vector<EvalCell> cells;

    void append(const EvalReport& other);
    // Mean over targets of the per-target mean DSC. nullopt when nothing matches.
    std::optional<double> macro_mean(const std::string& method, const std::string& group, int points,
                                     std::optional<uint64_t> train_seed = std::nullopt) const;
    std::vector<std::string> methods() const;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    // report.json and report.csv
    void write(const std::filesystem::path& dir) const;
};

struct EvalOptions {
    std::vector<int> points{1, 3, 5};
    uint64_t seed = 0;
    int perturb_radius = 2;
    std::string group = "seen";
    uint64_t train_seed = 0;
};

// Every setting is an independent run from the shared case seed.
EvalReport evaluate_promptable(Segmenter& seg, const std::vector<Sample>& samples, const EvalOptions& options);

// ---------------------------------------------------------------- ablation

enum class Variant { FineTuning, Consistency, Cpcl };
std::string to_string(Variant v);
inline constexpr std::array<Variant, 3> kVariants{Variant::FineTuning, Variant::Consistency, Variant::Cpcl};

// Fine-tuning uses raw LQ labels only. Consistency adds the consistency term and
// Cpcl also rectifies LQ labels. Everything else comes from `base`.
cpcl::CpclConfig variant_config(Variant v, const cpcl::CpclConfig& base);

struct AblationOptions {
    std::vector<uint64_t> seeds{0, 1, 2};
    std::filesystem::path out_dir;
    std::vector<int> points{1, 3, 5};
    uint64_t eval_seed = 0;
    int perturb_radius = 2;
    size_t max_test_volumes = 0;                // 0 = whole test split
    std::optional<DatasetManifest> shifted;     // domain-shifted test set
    std::function<void(const std::string&)> progress;
};

struct AblationSummaryRow {
    std::string variant;
    std::string group;
    int points = 1;
    std::vector<double> per_seed;  // macro mean DSC of each seed
    double mean = 0;
    double stddev = 0;
};

struct AblationResult {
    EvalReport report;
    std::vector<AblationSummaryRow> summary;
    std::vector<std::filesystem::path> checkpoints;
    // Per (variant, seed) training logs, in run order.
    std::vector<std::pair<std::string, std::vector<cpcl::LossReport>>> logs;
    double seconds = 0;

    const AblationSummaryRow* row(const std::string& variant, const std::string& group, int points) const;
    nlohmann::json summary_json() const;
};

std::vector<AblationSummaryRow> summarize(const EvalReport& report, const std::vector<uint64_t>& seeds,
                                          const std::vector<int>& points);

AblationResult ablation_suite(const DatasetManifest& manifest, const net::NetConfig& net_cfg,
                              const cpcl::CpclConfig& base, const AblationOptions& options);

// --------------------------------------------------------- prompt budgets

struct BudgetRow {
    std::string volume_id;
    std::string target;
    int64_t occupied_slices = 0;            // N
    std::vector<int> settings;              // points per slice / per volume, e.g. {1, 3, 5}
    std::vector<int64_t> budget_2d;         // prompts emitted by the slicewise protocol
    std::vector<int64_t> budget_3d;         // prompts consumed by the volumetric loop
    std::vector<double> seconds_3d;         // measured 3D wall clock; empty when not timed
};

std::vector<BudgetRow> prompt_budget_report(const std::vector<Sample>& samples, const std::vector<int>& settings,
                                            uint64_t seed, Segmenter* timing = nullptr, int perturb_radius = 2);
nlohmann::json to_json(const std::vector<BudgetRow>& rows);

} // namespace petprompt::eval
