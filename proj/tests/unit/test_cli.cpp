#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "boundless/io.hpp"
#include "cli.hpp"

namespace fs = std::filesystem;
using boundless::io::read_text;
using boundless::io::write_atomic;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "boundless");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = boundless::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("boundless_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ::unsetenv(boundless::cli::kOutputEnv);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config(const std::string& name, const std::string& text) {
    write_atomic(dir_ / name, text);
    return (dir_ / name).string();
  }

  fs::path dir_;
};

const char* kPlantedSweep = R"({
  "network": {"kind": "planted-mlp", "hypothesis": "LeftBoundary", "width": 16, "seed": 3},
  "hypothesis": "LeftBoundary",
  "sites": "all",
  "seeds": [0],
  "output": "out"
})";

const fs::path kData = BOUNDLESS_TEST_DATA;

}  // namespace

TEST_F(Cli, SweepOnPlantedNetPeaksAtThePlantedSite) {
  const CliRun r = run({"sweep", "--config", config("sweep.json", kPlantedSweep)});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_text(dir_ / "out" / "heatmap.csv");
  EXPECT_EQ(csv,
            "hypothesis,layer,position,iia,iia_scaled,best_seed\n"
            "LeftBoundary,0,0,0.5,0,0\n"
            "LeftBoundary,1,0,1,1,0\n");
  EXPECT_NE(r.out.find("max IIA 1.00 at (layer 1, position 0)"), std::string::npos) << r.out;
  for (const char* f : {"heatmap.meta.json", "manifest.json", "runs.json", "logs/L1_P0_seed0.csv",
                        "states/L1_P0_seed0.bin", "states/L1_P0_seed0.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "out" / f)) << f;
  }
  const std::string manifest = read_text(dir_ / "out" / "manifest.json");
  EXPECT_NE(manifest.find("\"config_sha256\""), std::string::npos);
  EXPECT_NE(manifest.find("\"seeds\""), std::string::npos);
  EXPECT_NE(manifest.find("\"boundless\": \"0.1.0\""), std::string::npos);
}

TEST_F(Cli, RerunIsByteIdentical) {
  const auto cfg = config("sweep.json", kPlantedSweep);
  ASSERT_EQ(run({"sweep", "--config", cfg, "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(run({"sweep", "--config", cfg, "--out", (dir_ / "b").string(), "--jobs", "2"}).code, 0);
  for (const char* f : {"heatmap.csv", "logs/L0_P0_seed0.csv", "logs/L1_P0_seed0.csv", "states/L1_P0_seed0.bin"}) {
    EXPECT_EQ(read_text(dir_ / "a" / f), read_text(dir_ / "b" / f)) << f;
  }
}

TEST_F(Cli, NegativeLearningRateExitsTwoWithoutArtifacts) {
  const auto cfg = config("bad.json", R"({
  "network": {"kind": "planted-mlp", "hypothesis": "LeftBoundary"},
  "hypothesis": "LeftBoundary",
  "sites": [{"layer": 1}],
  "train": {
    "lr_rotation": -0.001
  },
  "output": "out"
})");
  const CliRun r = run({"train", "--config", cfg});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.json:6: train.lr_rotation"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "out"));
}

TEST_F(Cli, UnknownKeysAndMissingFilesAreConfigErrors) {
  CliRun r = run({"train", "--config", config("a.json", "{\n  \"network\": {\"kind\": \"planted-mlp\", \"hypothesis\": \"LeftBoundary\"},\n  \"hypotesis\": \"LeftBoundary\"\n}\n")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("a.json:3: hypotesis: unknown key"), std::string::npos) << r.err;
  r = run({"eval", "--config", config("b.json", R"({"network": {"path": "missing/net"}, "hypothesis": "LeftBoundary", "sites": [{"layer": 1}], "state": "s"})")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("does not exist"), std::string::npos) << r.err;
  r = run({"train", "--config", (dir_ / "nope.json").string()});
  EXPECT_EQ(r.code, 2);
  r = run({"train", "--config", config("c.json", "{\n\"sites\": [\n")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("malformed JSON"), std::string::npos) << r.err;
  r = run({"sweep", "--config", config("d.json", R"({"network": {"kind": "planted-mlp", "hypothesis": "LeftBoundary"}, "hypothesis": "LeftBoundary", "sites": [{"layer": 7}]})")});
  EXPECT_EQ(r.code, 2);
  r = run({"train", "--config", config("e.json", kPlantedSweep)});
  EXPECT_EQ(r.code, 2) << "train takes exactly one site";
}

TEST_F(Cli, BadFlagsExitTwo) {
  const auto cfg = config("sweep.json", kPlantedSweep);
  EXPECT_EQ(run({"sweep", "--config", cfg, "--seeds", "1,x"}).code, 2);
  EXPECT_EQ(run({"sweep", "--config", cfg, "--jobs", "0"}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST_F(Cli, DivergenceExitsThree) {
  const auto cfg = config("div.json", R"({
  "network": {"kind": "planted-mlp", "hypothesis": "LeftBoundary"},
  "hypothesis": "LeftBoundary",
  "sites": [{"layer": 1}],
  "train": {"lr_rotation": 1e308, "lr_boundary": 1e308, "train_size": 640},
  "output": "out"
})");
  const CliRun r = run({"train", "--config", cfg});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "out"));
}

TEST_F(Cli, TrainThenEvalReproducesIia) {
  const auto net_cfg = config("net.json", R"({"network": {"kind": "planted-mlp", "hypothesis": "LeftBoundary", "seed": 3}, "output": "net"})");
  ASSERT_EQ(run({"build-planted", "--config", net_cfg}).code, 0);
  const auto train_cfg = config("train.json", R"({
  "network": {"path": "net/net"},
  "hypothesis": "LeftBoundary",
  "sites": [{"layer": 1, "position": 0}],
  "output": "trained"
})");
  const CliRun t = run({"train", "--config", train_cfg, "--seeds", "2"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("seed 2: test IIA 1.00"), std::string::npos) << t.out;
  const auto eval_cfg = config("eval.json", R"({
  "network": {"path": "net/net"},
  "hypothesis": "LeftBoundary",
  "sites": [{"layer": 1}],
  "state": "trained/states/L1_P0_seed2",
  "output": "ev"
})");
  const CliRun e = run({"eval", "--config", eval_cfg});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out, "IIA 1 (base rate 0.50)\n");
}

TEST_F(Cli, EnvironmentOverridesOnlyTheOutputDirectory) {
  const auto cfg = config("data.json", R"({"data": {"n": 3, "seed": 1}, "output": "cfgout"})");
  ::setenv(boundless::cli::kOutputEnv, (dir_ / "envout").c_str(), 1);
  ASSERT_EQ(run({"gen-data", "--config", cfg}).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "envout" / "tasks.csv"));
  EXPECT_FALSE(fs::exists(dir_ / "cfgout"));
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", (dir_ / "flag").string()}).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "flag" / "tasks.csv"));
  ::unsetenv(boundless::cli::kOutputEnv);
  EXPECT_EQ(read_text(dir_ / "flag" / "tasks.csv"), read_text(dir_ / "envout" / "tasks.csv"));
}

TEST_F(Cli, ReportOnFixtures) {
  const auto ref = (kData / "report" / "seqnet" / "heatmap.csv").string();
  const auto other = (kData / "report" / "shuffled" / "heatmap.csv").string();
  const CliRun r = run({"report", ref, other, "--reference", ref, "--out", (dir_ / "rep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_text(dir_ / "rep" / "summary.csv"),
            "experiment,task_acc,iia_max,correlation,variance_x100\n"
            "seqnet,0.90,0.90,1.00,1.85\n"
            "shuffled,0.90,0.90,-0.35,1.61\n");
  EXPECT_NE(r.out.find("seqnet          0.90     0.90         1.00           1.85"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "rep" / "manifest.json"));
}

TEST_F(Cli, ReportShapeMismatchFails) {
  const auto ref = (kData / "report" / "seqnet" / "heatmap.csv").string();
  const auto small = (kData / "report" / "small" / "heatmap.csv").string();
  const CliRun r = run({"report", small, "--reference", ref});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("cells"), std::string::npos) << r.err;
}
