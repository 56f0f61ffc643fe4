#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "rockscope/cli.hpp"
#include "rockscope/digest.hpp"
#include "rockscope/error.hpp"

using namespace rockscope;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const std::string dir = (fs::temp_directory_path() / ("rockscope_cli_" + name)).string();
    fs::remove_all(dir);
    return dir;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Small, fast configuration for pipeline tests.
std::string small_config_path() {
    static const std::string path = [] {
        const std::string p = (fs::temp_directory_path() / "rockscope_cli_small.json").string();
        std::ofstream out(p);
        out << R"({
          "seed": 5,
          "sim": {"prompts": 60, "steps": 400, "rollouts_per_prompt": 2},
          "sweep": {"sizes": [20, 60], "ks": [4, 8, 12], "repeats": 2},
          "knockout": {"prompts": 60, "rollouts_per_prompt": 2, "resamples": 500, "candidates": 6},
          "gradgeom": {"random_controls": 6}
        })";
        return p;
    }();
    return path;
}

int run(const std::string& command, const std::string& dir, std::vector<std::string> overrides = {}) {
    CliOptions options;
    options.command = command;
    options.config_path = small_config_path();
    options.out_dir = dir;
    options.overrides = std::move(overrides);
    options.quiet = true;
    return run_stage(options);
}

int run_binary(const std::string& args) {
#ifdef ROCKSCOPE_BIN
    const int status = std::system((std::string(ROCKSCOPE_BIN) + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
#else
    (void)args;
    return -1;
#endif
}

}  // namespace

TEST_CASE("resolve_config applies defaults and overrides") {
    const std::string text = resolve_config("", {"detect.gamma=0.4", "sim.steps=123"});
    CHECK(text.find("\"gamma\": 0.4") != std::string::npos);
    CHECK(text.find("\"steps\": 123") != std::string::npos);

    CHECK_THROWS_AS(resolve_config("", {"detect.nonsense=1"}), ConfigError);
    CHECK_THROWS_AS(resolve_config("", {"detect.gamma=hello"}), ConfigError);
    CHECK_THROWS_AS(resolve_config("", {"malformed"}), ConfigError);
    CHECK_THROWS_AS(resolve_config("/no/such/config.json", {}), IoError);
}

TEST_CASE("run_stage exit codes") {
    SUBCASE("missing config file exits 2 and names the path") {
        CliOptions options;
        options.command = "simulate";
        options.config_path = "/no/such/config.json";
        options.out_dir = fresh_dir("missing_config");
        CHECK(run_stage(options) == kExitIo);
    }
    SUBCASE("unknown override key exits 1") {
        CliOptions options;
        options.command = "simulate";
        options.out_dir = fresh_dir("bad_override");
        options.overrides = {"sim.does_not_exist=1"};
        CHECK(run_stage(options) == kExitValidation);
    }
    SUBCASE("unknown command exits 64") {
        CliOptions options;
        options.command = "frobnicate";
        options.out_dir = fresh_dir("unknown_cmd");
        CHECK(run_stage(options) == kExitUsage);
    }
    SUBCASE("detect without a trace exits 2") {
        CliOptions options;
        options.command = "detect";
        options.out_dir = fresh_dir("no_trace");
        CHECK(run_stage(options) == kExitIo);
    }
}

TEST_CASE("full pipeline produces every stage output and a complete report") {
    const std::string dir = fresh_dir("pipeline");
    CHECK(run("simulate", dir) == 0);
    CHECK(run("detect", dir) == 0);
    CHECK(run("sweep", dir) == 0);
    CHECK(run("gradgeom", dir) == 0);
    CHECK(run("knockout", dir) == 0);
    CHECK(run("mask", dir) == 0);
    CHECK(run("train", dir) == 0);
    CHECK(run("report", dir) == 0);

    for (const char* f :
         {"trace.jsonl", "vocab.json", "training_log.csv", "detection.json", "detection.csv",
          "sweep_jaccard.csv", "sweep_coverage.csv", "cutoff.json", "gradients.csv",
          "persistence.csv", "gradgeom.json", "census.json", "knockout.csv",
          "masks_rock_freeze.jsonl", "mask_summary_rock_freeze.json", "trace_rock_freeze.jsonl",
          "train_summary_rock_freeze.json", "report.md", "density.csv", "manifest_simulate.json",
          "manifest_report.json"})
        CHECK_MESSAGE(fs::exists(dir + "/" + f), f);

    const std::string report = read_file(dir + "/report.md");
    for (const char* section : {"## corpus", "## detection", "## categories", "## cutoff",
                                "## gradients", "## persistence", "## knockout", "## reweight"}) {
        CHECK_MESSAGE(report.find(section) != std::string::npos, section);
    }
    CHECK(report.find("absent") == std::string::npos);

    SUBCASE("identical inputs give a byte-identical report") {
        const std::string before = read_file(dir + "/report.md");
        CHECK(run("report", dir) == 0);
        CHECK(read_file(dir + "/report.md") == before);
    }
}

TEST_CASE("re-running a stage with the same config and seed is digest-identical") {
    const std::string dir1 = fresh_dir("repro1");
    const std::string dir2 = fresh_dir("repro2");
    REQUIRE(run("simulate", dir1) == 0);
    REQUIRE(run("simulate", dir2) == 0);
    CHECK(Sha256::of_file(dir1 + "/trace.jsonl") == Sha256::of_file(dir2 + "/trace.jsonl"));
    CHECK(Sha256::of_file(dir1 + "/vocab.json") == Sha256::of_file(dir2 + "/vocab.json"));
    CHECK(Sha256::of_file(dir1 + "/training_log.csv") == Sha256::of_file(dir2 + "/training_log.csv"));

    REQUIRE(run("detect", dir1) == 0);
    REQUIRE(run("detect", dir2) == 0);
    CHECK(Sha256::of_file(dir1 + "/detection.json") == Sha256::of_file(dir2 + "/detection.json"));

    SUBCASE("a changed seed changes the simulated trace") {
        const std::string dir3 = fresh_dir("repro3");
        REQUIRE(run("simulate", dir3, {"seed=6"}) == 0);
        CHECK(Sha256::of_file(dir1 + "/trace.jsonl") != Sha256::of_file(dir3 + "/trace.jsonl"));
    }
}

TEST_CASE("all three reweighting regimes run at the CLI level") {
    const std::string dir = fresh_dir("regimes");
    // a sparse rock set keeps disjoint control placement feasible
    const std::vector<std::string> sparse{"detect.top_k=2", "reweight.radius=1"};
    REQUIRE(run("simulate", dir) == 0);
    REQUIRE(run("detect", dir, sparse) == 0);
    CHECK(run("mask", dir, {"detect.top_k=2", "reweight.radius=1",
                            "reweight.regime=baseline", "reweight.lambda=1.0"}) == 0);
    CHECK(run("mask", dir, sparse) == 0);  // default regime: rock_freeze
    CHECK(run("mask", dir, {"detect.top_k=2", "reweight.radius=1",
                            "reweight.regime=freq_matched_random"}) == 0);
    CHECK(fs::exists(dir + "/masks_baseline.jsonl"));
    CHECK(fs::exists(dir + "/masks_rock_freeze.jsonl"));
    CHECK(fs::exists(dir + "/masks_freq_matched_random.jsonl"));
    CHECK(run("train", dir, {"detect.top_k=2", "reweight.radius=1",
                             "reweight.regime=freq_matched_random"}) == 0);
    CHECK(fs::exists(dir + "/train_summary_freq_matched_random.json"));

    SUBCASE("an unknown regime is a validation error") {
        CHECK(run("mask", dir, {"reweight.regime=bogus"}) == kExitValidation);
    }
}

TEST_CASE("partial pipeline report marks missing stages as absent") {
    const std::string dir = fresh_dir("partial");
    REQUIRE(run("simulate", dir) == 0);
    REQUIRE(run("detect", dir) == 0);
    REQUIRE(run("report", dir) == 0);
    const std::string report = read_file(dir + "/report.md");
    CHECK(report.find("## detection\nmedian rock density") != std::string::npos);
    CHECK(report.find("absent") != std::string::npos);  // cutoff/knockout missing

    SUBCASE("reporting an empty run directory is an i/o error") {
        CHECK(run("report", fresh_dir("empty_report")) == kExitIo);
    }
}

TEST_CASE("installed binary maps argument errors to the usage exit code") {
    if (run_binary("--help") == -1) return;  // binary path not wired in
    CHECK(run_binary("frobnicate") == 64);
    CHECK(run_binary("") == 64);  // a subcommand is required
    CHECK(run_binary("print-config") == 0);
    CHECK(run_binary("print-config --set no.such.key=1") == kExitValidation);
    CHECK(run_binary("print-config --config /no/such/file.json") == kExitIo);
    const std::string dir = fresh_dir("binary_detect");
    CHECK(run_binary("--dir " + dir + " detect") == kExitIo);  // no trace yet
}
