#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spectra/cli/commands.hpp"

namespace cli = spectra::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "spectra-bench");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json base_config(const std::string& kind = "softmax_attn") {
  return {{"model",
           {{"mixer_kind", kind},
            {"depth", 1},
            {"model_dim", 8},
            {"state_dim", 2},
            {"heads", 2},
            {"vocab_size", 16},
            {"max_seq_len", 8},
            {"mlp_hidden", 16},
            {"seed", 1}}},
          {"train", {{"steps", 10}, {"batch_size", 4}, {"peak_lr", 1e-3}, {"eval_every", 5}, {"seed", 1}}},
          {"task", {{"num_kv", 2}, {"seq_len", 8}, {"vocab_size", 16}, {"num_examples", 32}, {"seed", 0},
                    {"eval_examples", 16}}},
          {"spectra", {{"eval_batch", 4}}}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("spectra_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const json& j) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump();
    return p;
  }

  fs::path dir_;
};

TEST_F(CliTest, MissingFieldIsAConfigErrorWithPointer) {
  json c = base_config();
  c["model"].erase("model_dim");
  const auto r = run({"train", "--config", write("c.json", c).string(), "--out", (dir_ / "run").string()});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("/model/model_dim"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingConfigFileIsAMissingArtifact) {
  const auto r = run({"train", "--config", (dir_ / "absent.json").string(), "--out", (dir_ / "run").string()});
  EXPECT_EQ(r.code, cli::kExitMissingArtifact);
}

TEST_F(CliTest, UnknownOptionIsAUsageError) {
  EXPECT_EQ(run({"train", "--bogus"}).code, cli::kExitConfig);
  EXPECT_EQ(run({}).code, cli::kExitConfig);
}

TEST_F(CliTest, TrainWritesCheckpointsAndIsSeedDeterministic) {
  const fs::path cfg = write("c.json", base_config());
  const fs::path a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", a.string()}).code, cli::kExitOk);
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", b.string()}).code, cli::kExitOk);
  for (const char* f : {"init.ckpt", "trained.ckpt", "run.json"}) EXPECT_TRUE(fs::is_regular_file(a / f)) << f;
  const json ma = json::parse(slurp(a / "run.json")), mb = json::parse(slurp(b / "run.json"));
  EXPECT_EQ(ma.at("history"), mb.at("history"));
  EXPECT_EQ(ma.at("history").size(), 3u);
  EXPECT_TRUE(ma.at("complete").get<bool>());
  EXPECT_EQ(slurp(a / "trained.ckpt"), slurp(b / "trained.ckpt"));

  const fs::path c = dir_ / "c";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", c.string(), "--seed", "9"}).code, cli::kExitOk);
  EXPECT_NE(slurp(a / "init.ckpt"), slurp(c / "init.ckpt"));
}

TEST_F(CliTest, SpectraBothPhasesShareTheModel) {
  const fs::path cfg = write("c.json", base_config("lti_ssm"));
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", run_dir.string()}).code, cli::kExitOk);
  const fs::path out = dir_ / "spectra.json";
  ASSERT_EQ(run({"spectra", "--run", run_dir.string(), "--phase", "both", "--out", out.string()}).code, cli::kExitOk);
  const json doc = json::parse(slurp(out));
  ASSERT_EQ(doc.at("records").size(), 2u);
  const auto& init = doc["records"][0];
  const auto& trained = doc["records"][1];
  EXPECT_EQ(init.at("phase"), "init");
  EXPECT_EQ(trained.at("phase"), "trained");
  EXPECT_EQ(init.at("model_id"), trained.at("model_id"));
  // A time-invariant mixer yields the same eigenvalues for every sequence.
  for (const auto& rec : {init, trained}) {
    for (const auto& panel : rec.at("layers")) {
      const auto& seqs = panel.at("sequences");
      ASSERT_EQ(seqs.size(), 4u);
      for (const auto& s : seqs) EXPECT_EQ(s, seqs[0]);
    }
  }
}

TEST_F(CliTest, ZeroQkSpectrumIsTheCausalAverage) {
  json c = base_config();
  c["model"]["zero_qk_init"] = true;
  c["model"]["max_seq_len"] = 4;
  c["task"] = {{"num_kv", 1}, {"seq_len", 4}, {"vocab_size", 16}, {"num_examples", 8}, {"seed", 0},
               {"eval_examples", 4}};
  c["train"]["steps"] = 0;
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", write("c.json", c).string(), "--out", run_dir.string()}).code, cli::kExitOk);
  const fs::path out = dir_ / "s.json";
  ASSERT_EQ(run({"spectra", "--run", run_dir.string(), "--phase", "init", "--out", out.string()}).code, cli::kExitOk);
  const json doc = json::parse(slurp(out));
  for (const auto& panel : doc["records"][0]["layers"]) {
    for (const auto& s : panel["sequences"]) {
      std::vector<double> mags = s.get<std::vector<double>>();
      std::sort(mags.begin(), mags.end());
      ASSERT_EQ(mags.size(), 3u);
      EXPECT_NEAR(mags[0], 0.5, 1e-12);
      EXPECT_NEAR(mags[1], 2.0 / 3.0, 1e-12);
      EXPECT_NEAR(mags[2], 0.75, 1e-12);
    }
  }
}

TEST_F(CliTest, SpectraWithoutCheckpointIsAMissingArtifact) {
  const fs::path cfg = write("c.json", base_config());
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", run_dir.string()}).code, cli::kExitOk);
  fs::remove(run_dir / "trained.ckpt");
  const auto r = run({"spectra", "--run", run_dir.string(), "--phase", "trained", "--out", (dir_ / "s").string()});
  EXPECT_EQ(r.code, cli::kExitMissingArtifact);
  EXPECT_EQ(run({"spectra", "--run", (dir_ / "nowhere").string(), "--out", (dir_ / "s").string()}).code,
            cli::kExitMissingArtifact);
}

TEST_F(CliTest, ReportRejectsMixedBins) {
  const fs::path cfg = write("c.json", base_config());
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", cfg.string(), "--out", run_dir.string()}).code, cli::kExitOk);
  const fs::path spectra = dir_ / "s.json";
  ASSERT_EQ(run({"spectra", "--run", run_dir.string(), "--out", spectra.string()}).code, cli::kExitOk);
  const fs::path fine = dir_ / "fine.json", svg = dir_ / "r.svg";
  ASSERT_EQ(run({"report", "--spectra", spectra.string(), "--bins", "fine", "--json", fine.string()}).code,
            cli::kExitOk);
  EXPECT_EQ(run({"report", "--spectra", fine.string(), "--bins", "default", "--svg", svg.string()}).code,
            cli::kExitIncompatible);
  ASSERT_EQ(run({"report", "--spectra", spectra.string(), spectra.string(), "--svg", svg.string()}).code,
            cli::kExitOk);
  EXPECT_NE(slurp(svg).find("</svg>"), std::string::npos);
}

TEST_F(CliTest, FineBinsRefinePseudoLtiPanelsNearOne) {
  json c = base_config("mamba2_pseudo_lti");
  c["train"]["steps"] = 0;
  const fs::path run_dir = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", write("c.json", c).string(), "--out", run_dir.string()}).code, cli::kExitOk);
  const fs::path spectra = dir_ / "s.json", rep = dir_ / "r.json";
  ASSERT_EQ(run({"spectra", "--run", run_dir.string(), "--phase", "init", "--out", spectra.string()}).code,
            cli::kExitOk);
  ASSERT_EQ(run({"report", "--spectra", spectra.string(), "--bins", "fine", "--json", rep.string()}).code,
            cli::kExitOk);
  const json doc = json::parse(slurp(rep));
  const auto edges = doc.at("bin_edges").get<std::vector<double>>();
  for (double e : {0.99, 0.999, 0.9999, 1.0001}) EXPECT_NE(std::find(edges.begin(), edges.end(), e), edges.end());
  ASSERT_EQ(doc.at("panels").size(), 2u);
  for (const auto& p : doc["panels"]) {
    // Input-invariant transitions: no spread across sequences in any bin.
    for (double s : p.at("init").at("std").get<std::vector<double>>()) EXPECT_EQ(s, 0.0);
  }
}

TEST_F(CliTest, NominalAndGatedSideBySide) {
  json nominal = base_config(), gated = base_config();
  gated["model"]["use_gate"] = true;
  std::vector<std::string> inputs;
  for (const auto& [name, cfg] : {std::pair{"nominal", nominal}, std::pair{"gated", gated}}) {
    const fs::path run_dir = dir_ / name;
    ASSERT_EQ(run({"train", "--config", write(std::string(name) + ".json", cfg).string(), "--out", run_dir.string()})
                  .code,
              cli::kExitOk);
    inputs.push_back((dir_ / (std::string(name) + "_s.json")).string());
    ASSERT_EQ(run({"spectra", "--run", run_dir.string(), "--out", inputs.back()}).code, cli::kExitOk);
  }
  const fs::path svg = dir_ / "cmp.svg", rep = dir_ / "cmp.json";
  ASSERT_EQ(run({"report", "--spectra", inputs[0], inputs[1], "--labels", "nominal,gated", "--svg", svg.string(),
                 "--json", rep.string()})
                .code,
            cli::kExitOk);
  const json doc = json::parse(slurp(rep));
  ASSERT_EQ(doc.at("reports").size(), 2u);
  EXPECT_EQ(doc["reports"][0].at("bin_edges"), doc["reports"][1].at("bin_edges"));
  const std::string text = slurp(svg);
  EXPECT_NE(text.find("nominal layer 0 head 0"), std::string::npos);
  EXPECT_NE(text.find("gated layer 0 head 0"), std::string::npos);
}

TEST_F(CliTest, MqarGenIsByteDeterministic) {
  const json task = {{"num_kv", 4}, {"seq_len", 16}, {"vocab_size", 32}, {"num_examples", 20}, {"seed", 5}};
  const fs::path cfg = write("t.json", task);
  ASSERT_EQ(run({"mqar-gen", "--config", cfg.string(), "--out", (dir_ / "a.jsonl").string()}).code, cli::kExitOk);
  ASSERT_EQ(run({"mqar-gen", "--config", cfg.string(), "--out", (dir_ / "b.jsonl").string()}).code, cli::kExitOk);
  const std::string a = slurp(dir_ / "a.jsonl");
  EXPECT_EQ(a, slurp(dir_ / "b.jsonl"));
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 20);
}

TEST_F(CliTest, MqarGenRejectsInfeasibleConfig) {
  const json task = {{"num_kv", 5}, {"seq_len", 16}, {"vocab_size", 32}, {"num_examples", 2}, {"seed", 0}};
  const auto r = run({"mqar-gen", "--config", write("t.json", task).string(), "--out", (dir_ / "x").string()});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("4*num_kv <= seq_len"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "x"));
}

TEST(Threads, DefaultFromEnvironment) {
  ::unsetenv("SPECTRA_BENCH_THREADS");
  EXPECT_EQ(cli::default_threads(), 1u);
  ::setenv("SPECTRA_BENCH_THREADS", "3", 1);
  EXPECT_EQ(cli::default_threads(), 3u);
  ::setenv("SPECTRA_BENCH_THREADS", "zero", 1);
  EXPECT_EQ(cli::default_threads(), 1u);
  ::unsetenv("SPECTRA_BENCH_THREADS");
}

}  // namespace
