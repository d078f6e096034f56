#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include <json.hpp>

#include "focusnet/fnt1.hpp"
#include "helpers.hpp"

using namespace focusnet;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

// Runs the CLI with stdout and stderr captured to files in `dir`.
CliResult cli(const test::TempDir& dir, const std::string& args, const std::string& env = "") {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = env + " " + quote(FOCUSNET_CLI_PATH) + " " + args + " >" +
                          quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

std::size_t entries(const fs::path& dir) {
  return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), {}));
}

// A tiny dataset plus a two-epoch run, shared by the eval/predict tests.
class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir;
    const CliResult g = cli(*dir_, "gen-data --out " + quote((*dir_ / "data").string()) +
                                 " --count 6 --size 16 16 --seed 2 --val-fraction 0.34");
    ASSERT_EQ(g.code, 0) << g.err;
    const CliResult t = cli(*dir_, "train --config " + quote(config_path().string()) + " --data " +
                                 quote((*dir_ / "data").string()) + " --out " +
                                 quote((*dir_ / "run").string()) + " --epochs 2 --quiet");
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  // Two scales of width 4 and 8 keep the CLI runs well under a second.
  static fs::path config_path() {
    const fs::path p = *dir_ / "small.json";
    if (!fs::exists(p))
      write_file_atomic(p, R"({"model": {"scales": 2, "widths": [4, 8], "se_reduction": 2},
                             "train": {"batch_size": 2, "max_epochs": 3, "seed": 1}})");
    return p;
  }

  static fs::path p(const std::string& name) { return *dir_ / name; }
  static std::string q(const std::string& name) { return quote(p(name).string()); }

  static test::TempDir* dir_;
};

test::TempDir* CliRun::dir_ = nullptr;

}  // namespace

TEST_F(CliRun, GenDataWritesADataset) {
  EXPECT_TRUE(fs::exists(p("data/images.fnt1")));
  EXPECT_TRUE(fs::exists(p("data/masks.fnt1")));
  EXPECT_TRUE(fs::exists(p("data/meta.json")));
  EXPECT_EQ(entries(p("data")), 3u);
}

TEST_F(CliRun, GenDataIsReproducible) {
  const CliResult g = cli(*dir_, "gen-data --out " + q("data2") +
                               " --count 6 --size 16 16 --seed 2 --val-fraction 0.34");
  ASSERT_EQ(g.code, 0) << g.err;
  for (const char* f : {"images.fnt1", "masks.fnt1", "meta.json"})
    EXPECT_EQ(read_file(p("data") / f), read_file(p("data2") / f)) << f;
}

TEST_F(CliRun, GenDataRefusesANonEmptyTarget) {
  const CliResult g = cli(*dir_, "gen-data --out " + q("data") + " --count 2 --size 16 16");
  EXPECT_EQ(g.code, 1);
  EXPECT_EQ(g.err.rfind("error:io: ", 0), 0u) << g.err;
}

TEST_F(CliRun, TrainWritesItsArtifacts) {
  for (const char* f : {"config.json", "history.jsonl", "best.fnt1", "last.fnt1", "state.fns1"})
    EXPECT_TRUE(fs::exists(p("run") / f)) << f;
  std::ifstream h(p("run/history.jsonl"));
  std::size_t lines = 0;
  for (std::string l; std::getline(h, l);) ++lines;
  EXPECT_EQ(lines, 2u);
  const auto cfg = nlohmann::json::parse(read_file(p("run/config.json")));
  EXPECT_EQ(cfg["model"]["widths"], nlohmann::json({4, 8}));
  EXPECT_EQ(cfg["train"]["max_epochs"], 2);
}

TEST_F(CliRun, TrainIsReproducibleAndResumable) {
  const std::string common =
      "train --config " + quote(config_path().string()) + " --data " + q("data") + " --quiet";
  ASSERT_EQ(cli(*dir_, common + " --out " + q("r3") + " --epochs 3").code, 0);
  ASSERT_EQ(cli(*dir_, common + " --out " + q("r2") + " --epochs 2").code, 0);
  EXPECT_EQ(read_file(p("r2/history.jsonl")), read_file(p("run/history.jsonl")));
  const CliResult resumed = cli(*dir_, "train --data " + q("data") + " --out " + q("r2") +
                                     " --epochs 3 --resume --quiet");
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  for (const char* f : {"history.jsonl", "state.fns1", "best.fnt1", "last.fnt1"})
    EXPECT_EQ(read_file(p("r3") / f), read_file(p("r2") / f)) << f;
}

TEST_F(CliRun, EvalWritesReportAndRoc) {
  const CliResult e = cli(*dir_, "eval --weights " + q("run/best.fnt1") + " --data " + q("data") +
                               " --report " + q("report.json"));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto j = nlohmann::json::parse(read_file(p("report.json")));
  EXPECT_EQ(j["images"], 6);
  EXPECT_EQ(j["threshold"], 0.5);
  EXPECT_TRUE(j["global"].contains("dice"));
  EXPECT_EQ(j["config"]["model"]["widths"], nlohmann::json({4, 8}));
  EXPECT_EQ(read_file(p("report.roc.csv")).rfind("fpr,tpr\n", 0), 0u);
  EXPECT_NE(e.out.find("dice"), std::string::npos);
}

TEST_F(CliRun, PredictWritesProbabilities) {
  const CliResult r = cli(*dir_, "predict --weights " + q("run/best.fnt1") + " --input " +
                               q("data/images.fnt1") + " --out " + q("pred.fnt1"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Tensor pred = find_tensor(load_fnt1(p("pred.fnt1")), "prediction");
  EXPECT_EQ(pred.shape(), (Shape{6, 1, 16, 16}));
  for (double v : pred.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST_F(CliRun, ErrorsAreOneLineAndLeaveNoArtifacts) {
  const CliResult missing = cli(*dir_, "train --config " + quote(config_path().string()) +
                                     " --data " + q("nope") + " --out " + q("never"));
  EXPECT_EQ(missing.code, 1);
  EXPECT_EQ(missing.err.rfind("error:io: ", 0), 0u) << missing.err;
  EXPECT_EQ(std::count(missing.err.begin(), missing.err.end(), '\n'), 1);
  EXPECT_FALSE(fs::exists(p("never")));
  for (const auto& e : fs::directory_iterator(dir_->path()))
    EXPECT_EQ(e.path().filename().string().find(".staging"), std::string::npos);

  const CliResult flag = cli(*dir_, "gen-data --out " + q("x") + " --bogus");
  EXPECT_EQ(flag.code, 2);
  EXPECT_EQ(flag.err.rfind("error:argument: ", 0), 0u) << flag.err;
  EXPECT_FALSE(fs::exists(p("x")));

  const CliResult cfg = cli(*dir_, "flops --config " + q("nope.json"));
  EXPECT_EQ(cfg.code, 1);
  EXPECT_EQ(cfg.err.rfind("error:", 0), 0u);

  const CliResult eval_bad = cli(*dir_, "eval --weights " + q("data/meta.json") + " --data " +
                                      q("data") + " --config " + quote(config_path().string()) +
                                      " --report " + q("bad.json"));
  EXPECT_EQ(eval_bad.code, 1);
  EXPECT_EQ(eval_bad.err.rfind("error:format: ", 0), 0u) << eval_bad.err;
  EXPECT_FALSE(fs::exists(p("bad.json")));
  EXPECT_FALSE(fs::exists(p("bad.roc.csv")));
}

TEST_F(CliRun, ConfigDirectoryOverride) {
  test::TempDir cfgs;
  write_file_atomic(cfgs / "mine.json", R"({"scales": 2, "widths": [8, 16]})");
  const CliResult r = cli(*dir_, "flops --config mine --size 16 16 --json",
                    "FOCUSNET_CONFIG_DIR=" + quote(cfgs.path().string()));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GT(j["params"].get<std::size_t>(), 0u);
  const CliResult unknown = cli(*dir_, "flops --config nothere",
                          "FOCUSNET_CONFIG_DIR=" + quote(cfgs.path().string()));
  EXPECT_NE(unknown.code, 0);
}

TEST(Cli, FlopsForThePresets) {
  test::TempDir dir;
  const CliResult r = cli(dir, "flops --json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["params"], 227221);
  EXPECT_EQ(j["flops"], 157778188);
  const CliResult table = cli(dir, "flops --config alpha-lite --size 32 32");
  ASSERT_EQ(table.code, 0) << table.err;
  EXPECT_NE(table.out.find("total params"), std::string::npos);
  EXPECT_NE(table.out.find("block3.combine"), std::string::npos);
}

TEST(Cli, ShippedConfigsMatchThePresets) {
  test::TempDir dir;
  for (const char* name : {"alpha-tiny", "alpha-lite"}) {
    const CliResult builtin = cli(dir, std::string("flops --json --config ") + name);
    const CliResult file = cli(dir, std::string("flops --json --config ") +
                                  quote(std::string(FOCUSNET_CONFIG_DIR_PATH) + "/" + name +
                                        ".json"));
    ASSERT_EQ(builtin.code, 0) << builtin.err;
    ASSERT_EQ(file.code, 0) << file.err;
    EXPECT_EQ(builtin.out, file.out) << name;
  }
}

TEST(Cli, GradcheckSingleCase) {
  test::TempDir dir;
  const CliResult ok = cli(dir, "gradcheck --only squeeze_excite --instances 3");
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("squeeze_excite"), std::string::npos);
  EXPECT_NE(ok.out.find("1 cases, 0 failed"), std::string::npos);
  const CliResult strict = cli(dir, "gradcheck --only sigmoid --instances 3 --tol 1e-30");
  EXPECT_EQ(strict.code, 3);
  EXPECT_EQ(strict.err.rfind("error:check: ", 0), 0u) << strict.err;
  const CliResult none = cli(dir, "gradcheck --only no_such_case");
  EXPECT_EQ(none.code, 2);
}

TEST(Cli, HelpAndMissingSubcommand) {
  test::TempDir dir;
  const CliResult help = cli(dir, "--help");
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("gen-data"), std::string::npos);
  const CliResult none = cli(dir, "");
  EXPECT_EQ(none.code, 2);
}
