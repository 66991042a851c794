// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include "cleandift/pipeline.hpp"
#include "support.hpp"

using namespace cleandift;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CLEANDIFT_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Csv, TablesFormatAndParse) {
  CsvTable t({"mode", "t", "pck_img", "ok"});
  t.row("student", 5, 0.123456789, true);
  t.row(std::string("noisy_teacher"), 900, 1e-9, false);
  EXPECT_EQ(t.str(), "mode,t,pck_img,ok\nstudent,5,0.12345679,true\nnoisy_teacher,900,1e-09,false\n");
  EXPECT_THROW(t.row("x"), std::logic_error);
  const auto dir = testing_support::temp_dir("csv");
  write_file_atomic(dir / "a.csv", t.str());
  auto d = read_csv(dir / "a.csv");
  EXPECT_EQ(d.col("pck_img"), 2);
  EXPECT_EQ(d.col("nope"), -1);
  ASSERT_EQ(d.rows.size(), 2u);
  EXPECT_EQ(d.rows[1][0], "noisy_teacher");
  fs::remove_all(dir);
}

TEST(RunDirs, ManifestsAndLatestCompletedRun) {
  const auto dir = testing_support::temp_dir("runs");
  auto cfg = Config::resolve("tiny", {}, {{"seed", "4"}});
  fs::path first;
  {
    RunDir r(dir, "distill", cfg);
    first = r.path();
    r.write_text("x.csv", "a\n1\n");
    r.warn("something odd");
    EXPECT_FALSE(latest_run(dir, "distill"));  // still running
    r.complete();
  }
  RunDir second(dir, "distill", cfg);
  EXPECT_NE(second.path(), first);
  EXPECT_EQ(*latest_run(dir, "distill"), first);  // second is incomplete
  second.complete();
  EXPECT_EQ(*latest_run(dir, "distill"), second.path());
  EXPECT_FALSE(latest_run(dir, "eval-pck"));
  auto m = json::parse(read_file_bytes(first / "manifest.json"));
  EXPECT_EQ(m.at("status"), "complete");
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_EQ(m.at("preset"), "tiny");
  EXPECT_EQ(m.at("outputs")[0].at("sha256"), sha256_hex("a\n1\n"));
  EXPECT_EQ(m.at("warnings")[0], "something odd");
  EXPECT_EQ(m.at("config_sha256"), sha256_hex(read_file_bytes(first / "config.ini")));
  fs::remove_all(dir);
}

TEST(RunDirs, DirectoryDigestTracksContentAndNames) {
  const auto dir = testing_support::temp_dir("digest");
  write_file_atomic(dir / "a", "1");
  write_file_atomic(dir / "b", "2");
  const auto d0 = directory_digest(dir);
  EXPECT_EQ(directory_digest(dir), d0);
  write_file_atomic(dir / "b", "3");
  EXPECT_NE(directory_digest(dir), d0);
  fs::remove_all(dir);
}

TEST(Pipeline, MissingArtifactsAreReported) {
  const auto dir = testing_support::temp_dir("empty_runs");
  PipelineEnv env;
  env.cfg = Config::resolve("tiny", {}, {});
  env.out = dir;
  std::ostringstream log;
  env.log = &log;
  EXPECT_THROW(cmd_train_teacher(env), ArtifactError);
  env.cfg.set("paths.data", (dir / "nowhere").string());
  EXPECT_THROW(cmd_train_teacher(env), std::exception);
  fs::remove_all(dir);
}

TEST(Pipeline, AblationGridsHaveSixAndEightCells) {
  AlignmentConfig base;
  auto cells = ablation_cells(base);
  int a = 0, b = 0;
  for (const auto& c : cells) {
    (c.grid == "objective" ? a : b)++;
    EXPECT_NO_THROW(c.cfg.validate()) << c.name;
  }
  EXPECT_EQ(a, 6);
  EXPECT_EQ(b, 8);
}

TEST(Cli, ExitCodesAndGenData) {
  const auto dir = testing_support::temp_dir("cli");
  const auto log = dir / "log.txt";
  EXPECT_EQ(run_cli("--help", log), 0);
  EXPECT_EQ(run_cli("bogus-command", log), 2);
  EXPECT_EQ(run_cli("gen-data --preset nonsense --out " + dir.string(), log), 2);
  EXPECT_EQ(run_cli("gen-data --distill.stpes 3 --out " + dir.string(), log), 2);
  EXPECT_NE(read_file_bytes(log).find("distill.stpes"), std::string::npos);
  EXPECT_EQ(run_cli("eval-probe --task colour --out " + dir.string(), log), 2);
  EXPECT_EQ(run_cli("train-teacher --preset tiny --out " + (dir / "runs").string(), log), 1);
  EXPECT_EQ(run_cli("gen-data --preset tiny --data.pairs=3 --out " + (dir / "runs").string(), log), 0);
  auto run = latest_run(dir / "runs", "gen-data");
  ASSERT_TRUE(run);
  auto m = json::parse(read_file_bytes(*run / "manifest.json"));
  EXPECT_EQ(m.at("datasets").at("pairs").at("pairs"), 3);
  EXPECT_TRUE(fs::exists(*run / "data/probe_test/annotations.json"));
  EXPECT_NE(read_file_bytes(*run / "config.ini").find("pairs = 3"), std::string::npos);
  fs::remove_all(dir);
}
