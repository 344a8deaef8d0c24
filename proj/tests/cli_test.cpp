#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mode_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) {
    const std::string cmd = "cd '" + dir_.string() + "' && '" MODE_CLI_PATH "' " + args + " >out.txt 2>err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string read(const std::string& name) const {
    std::ifstream f(dir_ / name, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }
  bool exists(const std::string& name) const { return fs::exists(dir_ / name); }

  static constexpr const char* kTiny =
      R"({"d_model": 16, "n_layers": 2, "n_heads": 2, "steps": 30, "batch_size": 8, "lr": 0.001})";

  fs::path dir_;
};

TEST_F(Cli, GenDataWritesDatasetAndManifest) {
  ASSERT_EQ(run("gen-data --task fork_path --n 40 --seed 7 --out d.mods"), 0) << read("err.txt");
  EXPECT_EQ(read("d.mods").substr(0, 4), "MODS");
  const auto m = nlohmann::json::parse(read("d.mods.manifest.json"));
  EXPECT_EQ(m.at("command"), "gen-data");
  EXPECT_EQ(m.at("seed"), 7);
  EXPECT_EQ(m.at("artifacts"), nlohmann::json::array({"d.mods"}));
  EXPECT_TRUE(m.contains("tool_version"));
  EXPECT_TRUE(m.contains("wall_time_s"));
}

TEST_F(Cli, TrainThenEvalProducesMetrics) {
  write("cfg.json", kTiny);
  ASSERT_EQ(run("gen-data --task two_goal_reach --n 40 --seed 1 --out d.mods"), 0);
  ASSERT_EQ(run("train --data d.mods --config cfg.json --seed 2 --out ck.modc"), 0) << read("err.txt");
  EXPECT_EQ(read("ck.modc").substr(0, 4), "MODC");
  const std::string log = read("ck.modc.log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,sm_loss,lb_loss,total,grad_norm");
  ASSERT_EQ(run("eval --ckpt ck.modc --episodes 12 --out ev.csv"), 0) << read("err.txt");
  const std::string csv = read("ev.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,episodes,successes,success_rate,mean_steps,left,right,mode_coverage");
  EXPECT_NE(csv.find("two_goal_reach,12,"), std::string::npos);
  // Cached and dynamic inference agree on the metrics.
  ASSERT_EQ(run("eval --ckpt ck.modc --episodes 12 --dynamic --out dyn.csv"), 0);
  EXPECT_EQ(read("dyn.csv"), csv);
}

TEST_F(Cli, RerunsAreBitwiseReproducible) {
  write("cfg.json", kTiny);
  for (const char* suffix : {"a", "b"}) {
    const std::string s(suffix);
    ASSERT_EQ(run("gen-data --task fork_path --n 30 --seed 4 --out d" + s + ".mods"), 0);
    ASSERT_EQ(run("train --data d" + s + ".mods --config cfg.json --seed 4 --out c" + s + ".modc"), 0);
    ASSERT_EQ(run("eval --ckpt c" + s + ".modc --episodes 8 --seed 5 --out e" + s + ".csv"), 0);
  }
  EXPECT_EQ(read("da.mods"), read("db.mods"));
  EXPECT_EQ(read("ca.modc"), read("cb.modc"));
  EXPECT_EQ(read("ca.modc.log.csv"), read("cb.modc.log.csv"));
  EXPECT_EQ(read("ea.csv"), read("eb.csv"));
}

TEST_F(Cli, FinetuneFreezesRouting) {
  write("cfg.json", kTiny);
  ASSERT_EQ(run("gen-data --task fork_path --n 30 --seed 4 --out d.mods"), 0);
  ASSERT_EQ(run("train --data d.mods --config cfg.json --out pre.modc"), 0);
  ASSERT_EQ(run("finetune --ckpt pre.modc --data d.mods --freeze-routers --steps 10 --out ft.modc"), 0)
      << read("err.txt");
  const auto m = nlohmann::json::parse(read("ft.modc.manifest.json"));
  EXPECT_EQ(m.at("config").at("lb_gamma"), 0.0);
  EXPECT_EQ(m.at("config").at("freeze_routers"), true);
  ASSERT_EQ(run("route-map --ckpt pre.modc --out a"), 0);
  ASSERT_EQ(run("route-map --ckpt ft.modc --out b"), 0);
  EXPECT_EQ(read("a.csv"), read("b.csv"));
  EXPECT_NE(run("finetune --ckpt pre.modc --data d.mods --topk 1"), 0);
}

TEST_F(Cli, BenchReportsAllModes) {
  ASSERT_EQ(run("bench --batch 4 --reps 1 --out b.csv"), 0) << read("err.txt");
  const std::string csv = read("b.csv");
  for (const char* mode : {"dense_equal_params,total", "moe_dynamic,total", "moe_cached,total"})
    EXPECT_NE(csv.find(mode), std::string::npos) << mode;
  EXPECT_TRUE(exists("b.csv.fusion.csv"));
  EXPECT_NE(read("out.txt").find("fused vs looped"), std::string::npos);
}

TEST_F(Cli, RouteMapCardinality) {
  write("cfg.json", R"({"d_model": 16, "n_layers": 3, "n_heads": 2, "n_experts": 4, "steps": 1, "batch_size": 2})");
  ASSERT_EQ(run("gen-data --task fork_path --n 5 --out d.mods"), 0);
  ASSERT_EQ(run("train --data d.mods --config cfg.json --out c.modc"), 0);
  ASSERT_EQ(run("route-map --ckpt c.modc --out rm"), 0);
  const std::string csv = read("rm.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 10 * 4);
  EXPECT_NE(read("rm.svg").find("<svg"), std::string::npos);
}

TEST_F(Cli, CheckEmitsJsonLinesAndNamesInjectedFault) {
  ASSERT_EQ(run("check --out c.jsonl"), 0) << read("err.txt");
  std::istringstream lines(read("c.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(nlohmann::json::parse(line).at("passed").get<bool>()) << line;
    ++n;
  }
  EXPECT_GE(n, 6);
  EXPECT_EQ(run("check --inject renormalization --out bad.jsonl"), 2);
  EXPECT_NE(read("err.txt").find("route_renormalization"), std::string::npos);
}

TEST_F(Cli, GradCheckPasses) {
  EXPECT_EQ(run("grad-check --out g.json"), 0) << read("err.txt");
  EXPECT_TRUE(nlohmann::json::parse(read("g.json")).at("passed").get<bool>());
}

TEST_F(Cli, BadInputsExitWithOne) {
  EXPECT_EQ(run("gen-data --task fork_path --bogus"), 1);
  EXPECT_NE(read("err.txt").find("Usage"), std::string::npos);
  EXPECT_EQ(run("frobnicate"), 1);
  write("bad.json", R"({"d_modle": 3})");
  ASSERT_EQ(run("gen-data --task fork_path --n 5 --out d.mods"), 0);
  EXPECT_EQ(run("train --data d.mods --config bad.json"), 1);
  EXPECT_NE(read("err.txt").find("d_modle"), std::string::npos);
  write("junk.modc", "MODC junk");
  EXPECT_EQ(run("eval --ckpt junk.modc"), 1);
  EXPECT_EQ(run("gen-data --task fork_path --routing sparse"), 1);
}

TEST_F(Cli, NonFiniteTrainingExitsWithTwo) {
  write("cfg.json", R"({"d_model": 16, "n_layers": 1, "n_heads": 2, "steps": 50, "batch_size": 4, "lr": 1e300})");
  ASSERT_EQ(run("gen-data --task fork_path --n 5 --out d.mods"), 0);
  EXPECT_EQ(run("train --data d.mods --config cfg.json"), 2);
  EXPECT_NE(read("err.txt").find("step"), std::string::npos);
}

}  // namespace
