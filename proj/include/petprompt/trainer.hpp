#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "petprompt/cpcl.hpp"
#include "petprompt/manifest.hpp"
#include "petprompt/net.hpp"

namespace petprompt::cpcl {

struct CpclConfig {
    int n_pt = 3;
    double beta = 5.0;
    double omega_max = 0.1;
    double H = 0.75 * 0.6931471805599453;  // nats
    bool ramp_threshold = false;           // anneal H from ln 2 down to H over training
    bool squared_ramp = false;
    bool use_consistency = true;
    bool use_rectification = true;

    double lr = 8e-4;
    double weight_decay = 0.1;
    int batch_size = 2;  // split evenly between HQ and LQ when LQ data exists
    int epochs = 20;
    int steps_per_epoch = 50;
    std::vector<int> milestones{12, 18};  // epochs
    double gamma = 0.1;
    int grad_accum = 1;

    int perturb_radius = 2;
    int crop_jitter = 4;  // voxels, per axis, training only
    int val_every = 1;    // epochs; 0 disables validation
    int val_samples = 8;  // HQ training samples scored with one prompt

    int64_t t_max() const { return static_cast<int64_t>(epochs) * steps_per_epoch; }
    void validate() const;
};

nlohmann::json to_json(const CpclConfig& c);
CpclConfig cpcl_config_from_json(const nlohmann::json& j);

// One optimizer-facing step. total is exactly the value backpropagated.
struct LossReport {
    int64_t step = 0;
    double lr = 0;
    double lambda_t = 0;
    double l_seg_hq = 0;
    double l_cps = 0;
    double l_seg_lq = 0;
    double total = 0;
    double mean_uncertainty = 0;
    double rectified_fraction = 0;
};

struct TrainOptions {
    std::filesystem::path out_dir;  // metrics.csv, train-config.json, last.ckpt, best.ckpt
    std::string manifest_path;      // recorded in train-config.json
    std::function<void(const LossReport&)> on_step;
    std::function<void(int epoch, double val_dsc)> on_validate;
};

struct TrainResult {
    net::PromptableSegmenter model{nullptr};
    std::vector<LossReport> log;
    double best_val_dsc = -1.0;
    int64_t best_step = -1;
    std::filesystem::path last_checkpoint, best_checkpoint;
};

TrainResult train(const DatasetManifest& manifest, const net::NetConfig& net_cfg, const CpclConfig& cfg, uint64_t seed,
                  const TrainOptions& options);

} // namespace petprompt::cpcl
