#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "model_fixture.hpp"
#include "test_support.hpp"
#include "zonosafe/model.hpp"

namespace zonosafe {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string(ZONOSAFE_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return o;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) o.output.append(buf, n);
  const int raw = ::pclose(p);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

TEST(Cli, PrintConfigListsEveryKey) {
  const auto o = cli("print-config");
  EXPECT_EQ(o.status, 0);
  EXPECT_NE(o.output.find("data.samples = 10000"), std::string::npos);
  EXPECT_NE(o.output.find("train.epochs = 120"), std::string::npos);
  EXPECT_NE(o.output.find("# non-reference default"), std::string::npos);
}

TEST(Cli, PrintConfigAppliesFile) {
  testing::ScratchDir dir("cli_print");
  write(dir.path() / "c.conf", "data.samples = 77\n");
  const auto o = cli("print-config --config " + (dir.path() / "c.conf").string());
  EXPECT_EQ(o.status, 0);
  EXPECT_NE(o.output.find("data.samples = 77"), std::string::npos);
}

TEST(Cli, TinyGenDataIsFastAndDeterministic) {
  testing::ScratchDir dir("cli_gen");
  write(dir.path() / "c.conf", "data.samples = 40\n");
  const std::string base = "gen-data --quiet --config " + (dir.path() / "c.conf").string();
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = cli(base + " --out-dir " + (dir.path() / "a").string());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(a.status, 0) << a.output;
  EXPECT_LT(secs, 1.0);
  const auto b = cli(base + " --out-dir " + (dir.path() / "b").string());
  ASSERT_EQ(b.status, 0) << b.output;

  const std::string da = slurp(dir.path() / "a" / "dataset.csv");
  EXPECT_FALSE(da.empty());
  EXPECT_EQ(da, slurp(dir.path() / "b" / "dataset.csv"));
  EXPECT_TRUE(fs::exists(dir.path() / "a" / "dataset.csv.manifest.json"));

  const auto c = cli(base + " --seed 99 --out-dir " + (dir.path() / "c").string());
  ASSERT_EQ(c.status, 0) << c.output;
  EXPECT_NE(da, slurp(dir.path() / "c" / "dataset.csv"));
}

TEST(Cli, ConfigErrorsExitTwoAndNameTheField) {
  testing::ScratchDir dir("cli_cfg");
  write(dir.path() / "bad.conf", "data.mix = 0.5,0.5,0.5,0.5\n");
  const auto o = cli("gen-data --config " + (dir.path() / "bad.conf").string() + " --out-dir " +
                     dir.path().string());
  EXPECT_EQ(o.status, 2);
  EXPECT_NE(o.output.find("data.mix"), std::string::npos);
}

TEST(Cli, MissingInputsExitThree) {
  testing::ScratchDir dir("cli_io");
  auto o = cli("train --quiet --dataset " + (dir.path() / "none.csv").string());
  EXPECT_EQ(o.status, 3);
  EXPECT_NE(o.output.find("none.csv"), std::string::npos);

  o = cli("run --quiet --model " + (dir.path() / "none.json").string());
  EXPECT_EQ(o.status, 3);

  o = cli("analyze --quiet --trace-dir " + dir.path().string());
  EXPECT_EQ(o.status, 3);
  EXPECT_NE(o.output.find("trace_"), std::string::npos);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").status, 1);
  EXPECT_EQ(cli("frobnicate").status, 1);
  EXPECT_EQ(cli("run").status, 1);  // --model is required
  EXPECT_EQ(cli("run --model x.json --mode sideways").status, 1);

  testing::ScratchDir dir("cli_usage");
  const auto model = (dir.path() / "m.json").string();
  save_model(testing::tiny_model(5), model);
  const auto o = cli("run --quiet --model " + model + " --scenario NOWHERE --out-dir " + dir.path().string());
  EXPECT_EQ(o.status, 1);
  EXPECT_NE(o.output.find("NOWHERE"), std::string::npos);
}

TEST(Cli, SingleRunSetsExitStatusAndAnalyzeReadsTraces) {
  testing::ScratchDir dir("cli_run");
  const auto model = (dir.path() / "m.json").string();
  save_model(testing::tiny_model(5), model);
  write(dir.path() / "c.conf", "sim.duration = 0.5\n");
  const std::string cfg = " --config " + (dir.path() / "c.conf").string();

  const auto out = dir.path() / "runs";
  const auto o = cli("run --quiet" + cfg + " --model " + model + " --scenario GOOD --mode set --out-dir " +
                     out.string());
  // Half a second never reaches the gate: either the timeout verdict or an early failure code.
  EXPECT_TRUE(o.status == 6 || o.status == 4 || o.status == 5) << o.status << "\n" << o.output;
  EXPECT_TRUE(fs::exists(out / "trace_GOOD_set.csv"));
  EXPECT_TRUE(fs::exists(out / "timing_GOOD_set.csv"));
  EXPECT_TRUE(fs::exists(out / "runs.csv"));

  const auto again = dir.path() / "again";
  ASSERT_EQ(cli("run --quiet" + cfg + " --model " + model + " --scenario GOOD --mode set --out-dir " +
                again.string())
                .status,
            o.status);
  EXPECT_EQ(slurp(out / "trace_GOOD_set.csv"), slurp(again / "trace_GOOD_set.csv"));

  const auto a = cli("analyze --quiet" + cfg + " --trace-dir " + out.string());
  ASSERT_EQ(a.status, 0) << a.output;
  EXPECT_TRUE(fs::exists(out / "report.txt"));
  EXPECT_TRUE(fs::exists(out / "aggregate.csv"));
  EXPECT_TRUE(fs::exists(out / "modes.csv"));
}

}  // namespace
}  // namespace zonosafe
