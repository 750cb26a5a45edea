// Command-line front end: dataset generation, training, evaluation, the
// ablation suite, the interactive service and slice export.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "petprompt/checkpoint.hpp"
#include "petprompt/eval.hpp"
#include "petprompt/io.hpp"
#include "petprompt/phantom.hpp"
#include "petprompt/service.hpp"
#include "petprompt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace petprompt;

namespace {

json read_json(const fs::path& p) {
    std::ifstream in(p);
    require(in.good(), "not_found", "cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error("config", p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(2) << "\n";
}

net::NetConfig preset(const std::string& name) {
    if (name == "toy") return {};
    if (name == "benchmark") return net::NetConfig::benchmark();
    if (name == "full") return net::NetConfig::full_scale();
    throw Error("config", "unknown preset '" + name + "' (toy, benchmark, full)");
}

fs::path default_manifest() {
    if (const char* d = std::getenv("DATA_DIR")) return fs::path(d) / "manifest.json";
    return {};
}

// Training setup shared by `train` and `ablate`: a JSON file
// {"manifest", "out", "seed", "preset", "net": {...}, "cpcl": {...}} with
// command-line flags taking precedence.
struct RunSetup {
    std::string config_path;
    std::string manifest;
    std::string out;
    std::string preset_name;
    uint64_t seed = 0;
    int epochs = 0;
    int steps = 0;
    int threads = 1;

    net::NetConfig net;
    cpcl::CpclConfig cpcl;

    void add_flags(CLI::App* app) {
        app->add_option("--config", config_path, "training config JSON");
        app->add_option("--manifest", manifest, "dataset manifest.json");
        app->add_option("--out", out, "output directory");
        app->add_option("--preset", preset_name, "network preset: toy, benchmark, full");
        app->add_option("--seed", seed, "training seed");
        app->add_option("--epochs", epochs, "override epochs");
        app->add_option("--steps-per-epoch", steps, "override steps per epoch");
        app->add_option("--threads", threads, "intra-op threads")->check(CLI::PositiveNumber);
    }

    void resolve(CLI::App* app) {
        json j = config_path.empty() ? json::object() : read_json(config_path);
        if (manifest.empty()) manifest = j.value("manifest", default_manifest().string());
        if (out.empty()) out = j.value("out", std::string("run"));
        if (app->count("--seed") == 0) seed = j.value("seed", uint64_t{0});
        if (preset_name.empty()) preset_name = j.value("preset", std::string("toy"));
        net = preset(preset_name);
        if (j.contains("net")) {
            json merged = net::to_json(net);
            merged.update(j.at("net"));
            net = net::net_config_from_json(merged);
        }
        cpcl = j.contains("cpcl") ? cpcl::cpcl_config_from_json(j.at("cpcl")) : cpcl::CpclConfig{};
        if (epochs > 0) cpcl.epochs = epochs;
        if (steps > 0) cpcl.steps_per_epoch = steps;
        cpcl.validate();
        require(!manifest.empty(), "config", "no manifest given (--manifest or DATA_DIR)");
        torch::set_num_threads(threads);
    }
};

std::vector<int> parse_points(const std::vector<int>& pts) {
    for (int p : pts) require(p >= 1, "config", "--points values must be >= 1");
    return pts;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Promptable 3D PET segmentation with cross-prompting confident learning"};
    app.require_subcommand(1);

    // generate ----------------------------------------------------------
    auto* gen = app.add_subcommand("generate", "write a synthetic phantom dataset");
    phantom::DatasetRecipe recipe;
    std::string gen_out;
    int count = 0;
    bool shifted = false;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", count, "total volumes, split 40:160:60 across train_hq/train_lq/test");
    gen->add_option("--hq", recipe.hq, "train_hq volumes");
    gen->add_option("--lq", recipe.lq, "train_lq volumes");
    gen->add_option("--test", recipe.test, "test volumes");
    gen->add_option("--seed", recipe.seed, "dataset seed");
    gen->add_option("--noise", recipe.phantom.noise_scale, "multiplicative noise scale");
    gen->add_option("--blur", recipe.phantom.blur_sigma, "Gaussian blur sigma (voxels)");
    gen->add_option("--corrupt", recipe.corruption.boundary_flip_rate, "LQ boundary flip rate");
    gen->add_option("--drop-rate", recipe.corruption.drop_rate, "LQ label drop probability");
    gen->add_option("--radius-min", recipe.corruption.radius_min, "LQ morphology radius lower bound");
    gen->add_option("--radius-max", recipe.corruption.radius_max, "LQ morphology radius upper bound");
    gen->add_option("--prefix", recipe.id_prefix, "volume id prefix");
    gen->add_flag("--domain-shift", shifted, "use the harsher acquisition recipe");

    // train -------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train a segmenter (CPCL by default)");
    RunSetup train_setup;
    train_setup.add_flags(tr);

    // eval --------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with simulated prompts");
    std::string ev_ckpt, ev_manifest, ev_out = "eval", ev_split = "test", ev_group;
    std::vector<int> ev_points{1, 3, 5};
    std::vector<std::string> ev_targets;
    uint64_t ev_seed = 0;
    int ev_perturb = 2;
    size_t ev_max = 0;
    bool ev_budget = false;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
    ev->add_option("--manifest", ev_manifest, "dataset manifest.json");
    ev->add_option("--points", ev_points, "prompt settings")->delimiter(',');
    ev->add_option("--split", ev_split, "train_hq, train_lq or test");
    ev->add_option("--targets", ev_targets, "restrict to targets")->delimiter(',');
    ev->add_option("--group", ev_group, "group label written to the report");
    ev->add_option("--seed", ev_seed, "prompt seed");
    ev->add_option("--perturb", ev_perturb, "initial-point jitter radius");
    ev->add_option("--max-volumes", ev_max, "evaluate at most this many volumes");
    ev->add_option("--out", ev_out, "report directory");
    ev->add_flag("--budget", ev_budget, "also write the 2D/3D prompt budget table");

    // ablate ------------------------------------------------------------
    auto* ab = app.add_subcommand("ablate", "fine-tuning vs consistency vs CPCL over several seeds");
    RunSetup ab_setup;
    ab_setup.add_flags(ab);
    std::vector<uint64_t> ab_seeds{0, 1, 2};
    std::string ab_shifted;
    size_t ab_max = 0;
    ab->add_option("--seeds", ab_seeds, "training seeds")->delimiter(',');
    ab->add_option("--shifted", ab_shifted, "manifest of a domain-shifted test set");
    ab->add_option("--max-test-volumes", ab_max, "cap on test volumes per group");

    // serve -------------------------------------------------------------
    auto* sv = app.add_subcommand("serve", "run the interactive segmentation service");
    service::ServiceConfig sv_cfg = service::ServiceConfig::from_env();
    std::string sv_ckpt, sv_data, sv_sessions;
    sv->add_option("--ckpt", sv_ckpt, "checkpoint (default $MODEL_CKPT)");
    sv->add_option("--data", sv_data, "dataset directory (default $DATA_DIR)");
    sv->add_option("--sessions", sv_sessions, "session persistence directory (default $SESSION_DIR)");
    sv->add_option("--host", sv_cfg.host, "bind address");
    sv->add_option("--port", sv_cfg.port, "port (default $PORT or 8080)");

    // export-slice ------------------------------------------------------
    auto* ex = app.add_subcommand("export-slice", "write one windowed slice as an 8-bit PGM");
    std::string ex_volume, ex_label, ex_out;
    int ex_axis = 0;
    int64_t ex_index = -1;
    ex->add_option("--volume", ex_volume, "volume file")->required();
    ex->add_option("--label", ex_label, "label file; writes <out>.mask.pgm as well");
    ex->add_option("--axis", ex_axis, "0, 1 or 2");
    ex->add_option("--index", ex_index, "slice index (default: middle)");
    ex->add_option("--out", ex_out, "output .pgm")->required();

    try {
        app.parse(argc, argv);

        if (*gen) {
            if (count > 0) {
                recipe.hq = std::max(1, static_cast<int>(std::lround(count * 40.0 / 260.0)));
                recipe.test = std::min(count - recipe.hq, static_cast<int>(std::lround(count * 60.0 / 260.0)));
                recipe.lq = count - recipe.hq - recipe.test;
            }
            if (shifted) {
                const auto s = phantom::PhantomRecipe::domain_shifted();
                recipe.phantom.blur_sigma = s.blur_sigma;
                recipe.phantom.noise_scale = s.noise_scale;
                recipe.phantom.uptake_scale = s.uptake_scale;
            }
            const auto m = phantom::generate_dataset(recipe, gen_out);
            std::cout << json{{"manifest", (fs::path(gen_out) / "manifest.json").string()},
                              {"volumes", m.entries.size()},
                              {"train_hq", m.split(Split::TrainHQ).size()},
                              {"train_lq", m.split(Split::TrainLQ).size()},
                              {"test", m.split(Split::Test).size()}}
                             .dump()
                      << "\n";
        } else if (*tr) {
            train_setup.resolve(tr);
            const auto manifest = load_manifest(train_setup.manifest);
            cpcl::TrainOptions opt;
            opt.out_dir = train_setup.out;
            opt.manifest_path = train_setup.manifest;
            const int64_t t_max = train_setup.cpcl.t_max();
            opt.on_step = [&](const cpcl::LossReport& r) {
                if (r.step % 25 == 0 || r.step == t_max) {
                    std::cerr << "step " << r.step << "/" << t_max << " total " << r.total << " hq " << r.l_seg_hq
                              << " lq " << r.l_seg_lq << " cps " << r.l_cps << "\n";
                }
            };
            opt.on_validate = [](int epoch, double v) { std::cerr << "epoch " << epoch << " val_dsc " << v << "\n"; };
            const auto res = cpcl::train(manifest, train_setup.net, train_setup.cpcl, train_setup.seed, opt);
            std::cout << json{{"last", res.last_checkpoint.string()},
                              {"best", res.best_checkpoint.string()},
                              {"best_val_dsc", res.best_val_dsc},
                              {"steps", res.log.size()}}
                             .dump()
                      << "\n";
        } else if (*ev) {
            torch::set_num_threads(1);
            if (ev_manifest.empty()) ev_manifest = default_manifest().string();
            require(!ev_manifest.empty(), "config", "no manifest given (--manifest or DATA_DIR)");
            const auto manifest = load_manifest(ev_manifest);
            auto loaded = net::load_checkpoint(ev_ckpt);
            SampleFilter filter;
            if (!ev_targets.empty()) filter.targets = ev_targets;
            filter.max_volumes = ev_max;
            const auto samples = load_samples(manifest, split_from_string(ev_split), filter);
            require(!samples.empty(), "missing_labels", "no labelled samples in split " + ev_split);
            eval::NetSegmenter seg(loaded.model);
            eval::EvalOptions eo;
            eo.points = parse_points(ev_points);
            eo.seed = ev_seed;
            eo.perturb_radius = ev_perturb;
            eo.group = ev_group.empty() ? ev_split : ev_group;
            eo.train_seed = loaded.meta.value("seed", uint64_t{0});
            const auto report = eval::evaluate_promptable(seg, samples, eo);
            report.write(ev_out);
            if (ev_budget) {
                write_json(fs::path(ev_out) / "budget.json",
                           eval::to_json(eval::prompt_budget_report(samples, eo.points, ev_seed, &seg, ev_perturb)));
            }
            json summary = json::object();
            for (int p : eo.points) summary[std::to_string(p)] = *report.macro_mean(seg.name(), eo.group, p);
            std::cout << json{{"report", (fs::path(ev_out) / "report.json").string()}, {"mean_dsc", summary}}.dump()
                      << "\n";
        } else if (*ab) {
            ab_setup.resolve(ab);
            const auto manifest = load_manifest(ab_setup.manifest);
            eval::AblationOptions ao;
            ao.seeds = ab_seeds;
            ao.out_dir = ab_setup.out;
            ao.max_test_volumes = ab_max;
            if (!ab_shifted.empty()) ao.shifted = load_manifest(ab_shifted);
            ao.progress = [](const std::string& m) { std::cerr << m << "\n"; };
            const auto res = eval::ablation_suite(manifest, ab_setup.net, ab_setup.cpcl, ao);
            std::cout << res.summary_json().dump(2) << "\n";
        } else if (*sv) {
            torch::set_num_threads(1);
            if (!sv_ckpt.empty()) sv_cfg.checkpoint = sv_ckpt;
            if (!sv_data.empty()) sv_cfg.data_dir = sv_data;
            if (!sv_sessions.empty()) sv_cfg.session_dir = sv_sessions;
            std::cerr << "serving on " << sv_cfg.host << ":" << sv_cfg.port << "\n";
            service::run_server(sv_cfg);
        } else if (*ex) {
            const Volume v = io::load_volume(ex_volume);
            const Shape3& s = v.shape();
            require(ex_axis >= 0 && ex_axis <= 2, "bad_request", "axis must be 0, 1 or 2");
            if (ex_index < 0) ex_index = s[ex_axis] / 2;
            const auto ss = service::slice_shape(s, ex_axis);
            const auto vals = v.data.values();
            const auto pixels = service::window_to_u8(service::extract_slice(v.data, ex_axis, ex_index),
                                                      static_cast<float>(percentile(vals, 1.0)),
                                                      static_cast<float>(percentile(vals, 99.0)));
            auto write_pgm = [&](const fs::path& p, const std::vector<uint8_t>& px) {
                std::ofstream out(p, std::ios::binary);
                require(out.good(), "io", "cannot write " + p.string());
                out << "P5\n" << ss.cols << " " << ss.rows << "\n255\n";
                out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
            };
            write_pgm(ex_out, pixels);
            if (!ex_label.empty()) {
                const LabelVolume l = io::load_label(ex_label);
                validate_pair(v, l);
                auto m = service::extract_slice(l.data, ex_axis, ex_index);
                for (auto& b : m) b = b ? 255 : 0;
                write_pgm(fs::path(ex_out).replace_extension(".mask.pgm"), m);
            }
        }
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << json{{"error", e.code()}, {"message", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
