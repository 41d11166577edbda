#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "natlab/kv_file.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const int status = std::system((std::string(NATLAB_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "natlab_cli_test";
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("bogus"), 1);
  EXPECT_EQ(run("gen-data"), 1);
  EXPECT_EQ(run("gen-data --out /tmp/x --p-lo 2"), 1);
  EXPECT_EQ(run("oracle-check --max-m 40 --max-vocab 40"), 1);
}

TEST(Cli, HelpExitsCleanly) { EXPECT_EQ(run("--help"), 0); }

TEST(Cli, OracleAndGradientChecks) {
  const auto d = temp_dir();
  EXPECT_EQ(run("oracle-check --instances 20 --out-csv " + (d / "o.csv").string()), 0);
  EXPECT_TRUE(fs::exists(d / "o.csv"));
  EXPECT_TRUE(fs::exists(d / "o.csv.run.txt"));
  EXPECT_EQ(run("grad-check --points 5"), 0);
  EXPECT_EQ(run("grad-check --points 5 --inject-sign-error"), 2);
}

TEST(Cli, GenTrainEvalPipeline) {
  const auto d = temp_dir();
  const auto data = (d / "data").string();
  ASSERT_EQ(run("gen-data --train 50 --valid 5 --test 5 --vocab-divisor 100 --out " + data), 0);
  EXPECT_TRUE(fs::exists(d / "data" / "run_manifest.txt"));
  natlab::write_file_atomic(d / "train.cfg", "loss=oaxe\nphase1_updates=3\nphase2_updates=3\nd_model=8\nheads=2\n");
  ASSERT_EQ(run("train --config " + (d / "train.cfg").string() + " --data " + data + " --out " +
                (d / "run").string() + " --ffn 16 --tokens-per-batch 32 --warmup 2"),
            0);
  const auto manifest = natlab::read_kv_file(d / "run" / "model.bin.manifest");
  EXPECT_EQ(manifest.get("train.loss"), "oaxe");
  EXPECT_EQ(manifest.get("model.d_model"), "8");
  EXPECT_EQ(run("eval --checkpoint " + (d / "run" / "model.bin").string() + " --data " + data), 0);
  EXPECT_TRUE(fs::exists(d / "run" / "test_eval.csv"));
  EXPECT_EQ(run("eval --checkpoint " + (d / "missing.bin").string() + " --data " + data), 3);
  fs::remove_all(d);
}
