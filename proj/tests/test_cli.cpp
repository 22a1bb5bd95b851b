#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "miat/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "miat");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = miat::cli::run(static_cast<int>(argv.size()), argv.data(), {out, err});
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("miat_cli_" + name);
  fs::remove_all(d);
  return d;
}

const std::vector<std::string> kSmallData = {"--data.history_len", "6", "--data.future_len", "5"};
const std::vector<std::string> kSmallModel = {"--model.d_model", "16", "--model.n_heads", "2", "--model.ffn_dim", "32",
                                              "--model.mlp_hidden", "16"};

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Synthetic dataset shared by the train/eval tests.
fs::path tiny_dataset() {
  static const fs::path path = [] {
    const auto dir = fresh_dir("data");
    const auto r = run_cli(join({"synth", "--n-per-class", "1", "--seed", "4", "--out-dir", dir.string()}, kSmallData));
    EXPECT_EQ(r.code, 0) << r.err;
    return dir / "dataset.bin";
  }();
  return path;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"fly"}).code, 2);
  const auto r = run_cli({"synth", "--no-such-flag", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usage"), std::string::npos);
  EXPECT_EQ(run_cli({"synth", "--set", "nope.key=1"}).code, 2);
  EXPECT_EQ(run_cli({"synth", "--set", "seed"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run_cli({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--loss.lambda"), std::string::npos);
}

TEST(Cli, ValidationErrorsExitOne) {
  const auto dir = fresh_dir("validation");
  auto r = run_cli({"train", "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dataset"), std::string::npos);
  EXPECT_EQ(run_cli({"synth", "--seed", "abc", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(run_cli({"synth", "--synth.noise_sigma", "-1", "--out-dir", dir.string()}).code, 1);
  r = run_cli({"eval", "--dataset", (dir / "missing.bin").string(), "--checkpoint", (dir / "x.bin").string(),
               "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, ConfigFileValidated) {
  const auto dir = fresh_dir("cfgfile");
  fs::create_directories(dir);
  std::ofstream(dir / "bad_key.json") << R"({"loss": {"lamda": 3}})";
  std::ofstream(dir / "bad_type.json") << R"({"loss": {"lambda": "high"}})";
  std::ofstream(dir / "not_json.json") << "{";
  for (const char* f : {"bad_key.json", "bad_type.json", "not_json.json"}) {
    const auto r = run_cli({"synth", "--config", (dir / f).string(), "--out-dir", dir.string()});
    EXPECT_EQ(r.code, 1) << f;
  }
  EXPECT_EQ(run_cli({"synth", "--config", (dir / "absent.json").string()}).code, 1);
}

TEST(Cli, OverridePrecedence) {
  const auto dir = fresh_dir("precedence");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << R"({"seed": 5, "loss": {"lambda": 7}, "synth": {"n_per_class": 1}})";
  const auto out = dir / "out";
  const auto r = run_cli(join({"synth", "--config", (dir / "c.json").string(), "--seed", "6", "--loss.lambda", "8",
                               "--set", "loss.lambda=9", "--out-dir", out.string()},
                              kSmallData));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echo = json::parse(slurp(out / "config.json"));
  EXPECT_EQ(echo.at("seed"), 6);
  EXPECT_EQ(echo.at("loss").at("lambda"), 9.0);
  EXPECT_EQ(echo.at("synth").at("n_per_class"), 1);
  EXPECT_EQ(echo.at("command"), "synth");
}

TEST(Cli, SynthIsByteIdentical) {
  const auto a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
  ASSERT_EQ(run_cli({"synth", "--n-per-class", "2", "--seed", "1", "--out-dir", a.string()}).code, 0);
  ASSERT_EQ(run_cli({"synth", "--n-per-class", "2", "--seed", "1", "--out-dir", b.string()}).code, 0);
  EXPECT_EQ(slurp(a / "dataset.bin"), slurp(b / "dataset.bin"));
  EXPECT_FALSE(slurp(a / "dataset.bin").empty());
  EXPECT_EQ(slurp(a / "stats.json"), slurp(b / "stats.json"));
}

TEST(Cli, TrainEvalDumpAndEchoReplay) {
  const auto data = tiny_dataset();
  const auto run = fresh_dir("train");
  auto args = join({"train", "--dataset", data.string(), "--out-dir", run.string(), "--train.epochs", "2",
                    "--train.batch_size", "8", "--loss.warmup_epochs", "1"},
                   kSmallModel);
  auto r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.json", "checkpoint.bin", "state.bin", "metrics.csv", "report.json"}) {
    EXPECT_TRUE(fs::exists(run / f)) << f;
  }
  const auto report = json::parse(slurp(run / "report.json"));
  EXPECT_EQ(report.at("epochs_run"), 2);

  // The echoed config alone reproduces the run.
  const auto replay = fresh_dir("train_replay");
  r = run_cli({"train", "--config", (run / "config.json").string(), "--out-dir", replay.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(run / "metrics.csv"), slurp(replay / "metrics.csv"));
  EXPECT_EQ(slurp(run / "checkpoint.bin"), slurp(replay / "checkpoint.bin"));

  const auto ev = fresh_dir("eval");
  r = run_cli({"eval", "--dataset", data.string(), "--checkpoint", (run / "checkpoint.bin").string(), "--out-dir",
               ev.string(), "--eval.split", "validation"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("RMSE"), std::string::npos);
  EXPECT_EQ(json::parse(slurp(ev / "report.json")).at("split"), "validation");
  EXPECT_EQ(run_cli({"eval", "--dataset", data.string(), "--checkpoint", (run / "checkpoint.bin").string(),
                     "--out-dir", ev.string(), "--eval.split", "holdout"})
                .code,
            1);

  const auto dump = fresh_dir("dump");
  r = run_cli({"dump-trajectories", "--dataset", data.string(), "--checkpoint", (run / "checkpoint.bin").string(),
               "--out-dir", dump.string(), "--max-samples", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(slurp(dump / "trajectories.json"));
  EXPECT_LE(j.at("samples").size(), 2u);
  EXPECT_EQ(j.at("samples")[0].at("modes").size(), 9u);
}

TEST(Cli, ResumeContinuesFromState) {
  const auto data = tiny_dataset();
  const auto straight = fresh_dir("straight");
  auto base = join({"train", "--dataset", data.string(), "--train.batch_size", "8"}, kSmallModel);
  ASSERT_EQ(run_cli(join(base, {"--out-dir", straight.string(), "--train.epochs", "3"})).code, 0);
  const auto part = fresh_dir("part");
  ASSERT_EQ(run_cli(join(base, {"--out-dir", part.string(), "--train.epochs", "2"})).code, 0);
  const auto rest = fresh_dir("rest");
  const auto r = run_cli(
      join(base, {"--out-dir", rest.string(), "--train.epochs", "3", "--resume", (part / "state.bin").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = miat::load_checkpoint<float>(straight / "state.bin");
  const auto b = miat::load_checkpoint<float>(rest / "state.bin");
  EXPECT_EQ(a.params, b.params);
}

TEST(Cli, AblateWritesPlotData) {
  const auto data = tiny_dataset();
  const auto dir = fresh_dir("ablate");
  const auto r = run_cli(join({"ablate", "--dataset", data.string(), "--out-dir", dir.string(), "--train.epochs", "1",
                               "--ablate.lambdas", "1,50"},
                              kSmallModel));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "plots" / "ablation_rmse.csv"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "baseline_rmse.csv"));
  EXPECT_TRUE(fs::exists(dir / "runs" / "lambda_50" / "metrics.csv"));
  EXPECT_EQ(json::parse(slurp(dir / "report.json")).at("runs").size(), 3u);
}

TEST(Cli, GradcheckOnDefaultConfigPasses) {
  const auto dir = fresh_dir("gradcheck");
  const auto r = run_cli({"gradcheck", "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  const auto j = json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(j.at("passed").get<bool>());
  EXPECT_GE(j.at("checked").get<int>(), 200);
  EXPECT_EQ(j.at("covered_groups").size(), j.at("groups").size());
  // An impossible tolerance flips the exit code.
  EXPECT_EQ(run_cli(join({"gradcheck", "--gradcheck.tolerance", "0", "--gradcheck.n_params", "5", "--out-dir",
                          dir.string()},
                         kSmallModel))
                .code,
            1);
}

TEST(Cli, BinaryExitCodes) {
  const std::string bin = MIAT_CLI_PATH;
  ASSERT_TRUE(fs::exists(bin));
  auto status = [&](const std::string& args) {
    const int s = std::system((bin + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(s);
  };
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status(""), 2);
  EXPECT_EQ(status("train --out-dir " + fresh_dir("bin").string()), 1);
}
