#include "doctest_torch.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

struct Run {
    int status = -1;
    std::string out, err;
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Run cli(const testing::TempDir& dir, const std::string& args) {
    const auto out = dir / "stdout.txt";
    const auto err = dir / "stderr.txt";
    const std::string cmd = std::string(PETPROMPT_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

const char* kTinyConfig = R"({
  "net": {"input_size": [16, 16, 16], "patch_size": 4, "embed_dim": 16, "depth": 1, "num_heads": 2,
          "decoder_dim": 16, "decoder_heads": 2, "mlp_ratio": 2},
  "cpcl": {"epochs": 1, "steps_per_epoch": 2, "milestones": [], "val_every": 0}
})";

} // namespace

TEST_CASE("generate, train and eval through the command line") {
    testing::TempDir dir("cli");
    const std::string d = dir.path().string();

    const Run gen = cli(dir, "generate --out " + d + "/data --count 4 --seed 3");
    REQUIRE(gen.status == 0);
    const json g = json::parse(gen.out);
    CHECK(g["volumes"] == 4);
    CHECK(g["train_hq"] == 1);
    CHECK(g["train_lq"] == 2);
    CHECK(g["test"] == 1);
    CHECK(std::filesystem::exists(dir / "data/manifest.json"));

    std::ofstream(dir / "tiny.json") << kTinyConfig;
    const Run tr = cli(dir, "train --config " + d + "/tiny.json --manifest " + d + "/data/manifest.json --out " + d +
                                "/run --seed 1");
    INFO(tr.err);
    REQUIRE(tr.status == 0);
    CHECK(json::parse(tr.out)["steps"] == 2);
    CHECK(std::filesystem::exists(dir / "run/last.ckpt"));
    CHECK(std::filesystem::exists(dir / "run/metrics.csv"));

    const Run ev = cli(dir, "eval --ckpt " + d + "/run/last.ckpt --manifest " + d + "/data/manifest.json --points 1,3 --out " +
                                d + "/eval --budget");
    INFO(ev.err);
    REQUIRE(ev.status == 0);
    const json report = json::parse(slurp(dir / "eval/report.json"));
    CHECK(report["schema"] == "petprompt-report/1");
    CHECK_FALSE(report["cells"].empty());
    CHECK(json::parse(ev.out)["mean_dsc"].contains("3"));
    CHECK(std::filesystem::exists(dir / "eval/report.csv"));
    CHECK(std::filesystem::exists(dir / "eval/budget.json"));

    const Run ex = cli(dir, "export-slice --volume " + d + "/data/" + report["cells"][0]["volume_ids"][0].get<std::string>() +
                                " --out " + d + "/slice.pgm");
    // The volume id is not a path; the error comes back as JSON on stderr.
    CHECK(ex.status == 1);
    CHECK(json::parse(ex.err)["error"] == "not_found");
}

TEST_CASE("an empty HQ split fails with a clear message") {
    testing::TempDir dir("cli-empty");
    const std::string d = dir.path().string();
    REQUIRE(cli(dir, "generate --out " + d + "/data --hq 0 --lq 2 --test 0").status == 0);
    std::ofstream(dir / "tiny.json") << kTinyConfig;
    const Run tr = cli(dir, "train --config " + d + "/tiny.json --manifest " + d + "/data/manifest.json --out " + d + "/run");
    CHECK(tr.status == 1);
    const json e = json::parse(tr.err);
    CHECK(e["error"] == "empty_split");
    CHECK(e["message"] == "train_hq is empty");
}

TEST_CASE("usage errors exit with status 2") {
    testing::TempDir dir("cli-usage");
    CHECK(cli(dir, "").status == 2);
    CHECK(cli(dir, "frobnicate").status == 2);
    const Run r = cli(dir, "eval --points 1");
    CHECK(r.status == 2);
    CHECK(json::parse(r.err)["error"] == "usage");
    CHECK(cli(dir, "--help").status == 0);
}
