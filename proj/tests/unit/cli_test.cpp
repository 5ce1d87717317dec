#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "sgpa/cli.hpp"

namespace sgpa {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class Cli : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("sgpa_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string &name, const json &j) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p.string();
  }

  static std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  }

  json small_config(const std::string &run, const std::string &attention = "sgpa-decoupled") {
    return {{"schema_version", 1},
            {"seed", 3},
            {"model", {{"attention", attention}, {"m_global", -1}, {"heads", 1}}},
            {"train", {{"epochs", 2}, {"batch_size", 16}, {"lr", 0.003}}},
            {"data", {{"source", "cluster"}, {"n", 80}, {"length", 6}}},
            {"output", {{"dir", (dir_ / run).string()}}}};
  }

  json spec(bool rotated, const std::string &split = "") {
    json j = {{"schema_version", 1},
              {"seed", 3},
              {"data", {{"source", "cluster"}, {"n", 80}, {"length", 6}, {"rotated", rotated}}}};
    if (!split.empty()) {
      j["split"] = split;
    }
    return j;
  }

  fs::path dir_;
  std::ostringstream log_;
};

TEST_F(Cli, UnknownKeyIsAConfigError) {
  json c = small_config("r");
  c["model"]["dropout"] = 0.1;
  EXPECT_EQ(cmd_train(write("c.json", c), log_), exit_code::kConfig);
  EXPECT_NE(log_.str().find("dropout"), std::string::npos) << log_.str();
}

TEST_F(Cli, UnknownAttentionModeNamesTheField) {
  json c = small_config("r");
  c["model"]["attention"] = "linear";
  EXPECT_EQ(cmd_train(write("c.json", c), log_), exit_code::kConfig);
  EXPECT_NE(log_.str().find("attention"), std::string::npos) << log_.str();
}

TEST_F(Cli, MissingSeedIsRejected) {
  json c = small_config("r");
  c.erase("seed");
  EXPECT_EQ(cmd_train(write("c.json", c), log_), exit_code::kConfig);
}

TEST_F(Cli, WrongSchemaVersionIsRejected) {
  json c = small_config("r");
  c["schema_version"] = 2;
  EXPECT_EQ(cmd_train(write("c.json", c), log_), exit_code::kConfig);
}

TEST_F(Cli, ZeroEpochsWritesCheckpointAndHeaderOnlyTrace) {
  json c = small_config("r");
  c["train"]["epochs"] = 0;
  ASSERT_EQ(cmd_train(write("c.json", c), log_), exit_code::kOk) << log_.str();
  EXPECT_TRUE(fs::exists(dir_ / "r" / "checkpoint.json"));
  const std::string trace = slurp(dir_ / "r" / "trace.csv");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 1) << trace;
}

TEST_F(Cli, ResolvedConfigRecordsAutoGlobalCount) {
  ASSERT_EQ(cmd_train(write("c.json", small_config("r")), log_), exit_code::kOk) << log_.str();
  const json resolved = json::parse(slurp(dir_ / "r" / "config.resolved.json"));
  // Six tokens per sequence, one head.
  EXPECT_EQ(resolved["model"]["m_global"], 6);
  const json manifest = json::parse(slurp(dir_ / "r" / "data.json"));
  EXPECT_EQ(manifest["size"], 80);
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(cmd_train(write("a.json", small_config("a")), log_), exit_code::kOk);
  ASSERT_EQ(cmd_train(write("b.json", small_config("b")), log_), exit_code::kOk);
  EXPECT_EQ(slurp(dir_ / "a" / "trace.csv"), slurp(dir_ / "b" / "trace.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "checkpoint.json"), slurp(dir_ / "b" / "checkpoint.json"));
}

TEST_F(Cli, EvalWritesMetricsAndReliability) {
  ASSERT_EQ(cmd_train(write("c.json", small_config("r")), log_), exit_code::kOk);
  const std::string ckpt = (dir_ / "r" / "checkpoint.json").string();
  ASSERT_EQ(cmd_eval(ckpt, write("s.json", spec(false, "test")), (dir_ / "e").string(), 4, log_),
            exit_code::kOk)
      << log_.str();
  const json m = json::parse(slurp(dir_ / "e" / "metrics.json"));
  EXPECT_EQ(m["n_records"], 8);
  EXPECT_EQ(m["mc_samples"], 4);
  for (const char *key : {"accuracy", "nll", "ece", "mce", "data_checksum"}) {
    EXPECT_TRUE(m.contains(key)) << key;
  }
  const std::string rel = slurp(dir_ / "e" / "reliability.csv");
  EXPECT_EQ(std::count(rel.begin(), rel.end(), '\n'), 16);
  const std::string preds = slurp(dir_ / "e" / "predictions.csv");
  EXPECT_EQ(std::count(preds.begin(), preds.end(), '\n'), 9);
}

TEST_F(Cli, EvalRejectsIncompatibleData) {
  ASSERT_EQ(cmd_train(write("c.json", small_config("r")), log_), exit_code::kOk);
  json s = spec(false);
  s["data"]["d_in"] = 5;
  EXPECT_EQ(cmd_eval((dir_ / "r" / "checkpoint.json").string(), write("s.json", s),
                     (dir_ / "e").string(), 2, log_),
            exit_code::kConfig);
}

TEST_F(Cli, MissingCheckpointIsAConfigError) {
  EXPECT_EQ(cmd_eval((dir_ / "nope.json").string(), write("s.json", spec(false)),
                     (dir_ / "e").string(), 2, log_),
            exit_code::kConfig);
}

TEST_F(Cli, OodWritesScoresAndHistogram) {
  ASSERT_EQ(cmd_train(write("c.json", small_config("r")), log_), exit_code::kOk);
  ASSERT_EQ(cmd_ood((dir_ / "r" / "checkpoint.json").string(), write("in.json", spec(false, "test")),
                    write("out.json", spec(true, "test")), (dir_ / "o").string(), 3, log_),
            exit_code::kOk)
      << log_.str();
  const json r = json::parse(slurp(dir_ / "o" / "ood.json"));
  EXPECT_GE(r["auroc"].get<double>(), 0.0);
  EXPECT_LE(r["auroc"].get<double>(), 1.0);
  const std::string scores = slurp(dir_ / "o" / "scores.csv");
  EXPECT_EQ(std::count(scores.begin(), scores.end(), '\n'), 17);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "entropy_histogram.csv"));
}

TEST_F(Cli, OodWithEmptySetIsRejected) {
  ASSERT_EQ(cmd_train(write("c.json", small_config("r")), log_), exit_code::kOk);
  json empty = spec(true);
  empty["data"]["n"] = 0;
  EXPECT_EQ(cmd_ood((dir_ / "r" / "checkpoint.json").string(), write("in.json", spec(false)),
                    write("out.json", empty), (dir_ / "o").string(), 2, log_),
            exit_code::kConfig);
}

TEST_F(Cli, GradcheckPassesOnTinyModel) {
  json c = small_config("g");
  c["model"] = {{"attention", "sgpa-decoupled"}, {"max_len", 6}, {"layers", 1}, {"heads", 2},
                {"d_k", 2}, {"d_v", 2}, {"mlp_hidden", 4}, {"m_global", 2}};
  c["data"]["length"] = 4;
  EXPECT_EQ(cmd_gradcheck(write("c.json", c), false, log_), exit_code::kOk) << log_.str();
}

TEST_F(Cli, GradcheckRejectsLargeDims) {
  json c = small_config("g");
  c["model"]["max_len"] = 16;
  EXPECT_EQ(cmd_gradcheck(write("c.json", c), false, log_), exit_code::kConfig);
}

TEST_F(Cli, BenchWritesOneRowPerLength) {
  const std::string out = (dir_ / "bench.csv").string();
  ASSERT_EQ(cmd_bench("kernel", {8, 16}, 1, 4, out, log_), exit_code::kOk) << log_.str();
  const std::string csv = slurp(out);
  EXPECT_EQ(csv.rfind("mode,T,batch,median_seconds,reps\n", 0), 0u) << csv;
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(cmd_bench("sdp", {8, 16}, 1, 4, out, log_), exit_code::kConfig);
}

TEST_F(Cli, ShippedConfigsParse) {
  const fs::path root = SGPA_SOURCE_DIR;
  for (const char *name : {"cluster_sgpa.json", "cluster_kernel.json", "gradcheck_tiny.json"}) {
    EXPECT_NO_THROW(load_run_config((root / "configs" / name).string())) << name;
  }
  for (const char *name : {"cluster_test.json", "cluster_rotated.json"}) {
    EXPECT_NO_THROW(load_data_spec((root / "configs" / "data" / name).string())) << name;
  }
}

} // namespace
} // namespace sgpa
