#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace dast;
using corpus::ordered_json;

namespace {

struct Result {
  int code{-1};
  std::string out;
};

// Runs the CLI with stdout and stderr captured to a file.
Result run(const fs::path& dir, const std::string& args) {
  const fs::path log = dir / "last_output.txt";
  const std::string cmd =
      "cd '" + dir.string() + "' && '" DAST_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small corpus and a config that trains in well under a second.
class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(run(dir.path(), "gen-data --domains 3 --dialogs 16 --seed 4 --out c.json").code, 0);
    const auto c = corpus::load_corpus(dir / "c.json");
    target = c.domains[0].name;
    std::ofstream(dir / "cfg.json") << R"({"batch_size": 2, "steps_per_epoch": 2, "max_epochs": 2,
      "val_fraction": 0.2, "adapt_steps": 4, "adapt_dialogs": 3, "adapt_batch_size": 2, "adapt_eval_every": 2,
      "model": {"embed": 6, "hidden": 6, "heads": 2, "max_belief": 8, "max_act": 6, "max_response": 10}})";
  }
  Result train(const std::string& out, const std::string& extra = "") {
    return run(dir.path(), "train --corpus c.json --target " + target + " --config cfg.json --out " + out + " " + extra);
  }

  testutil::TempDir dir{"cli"};
  std::string target;
};

}  // namespace

TEST(CliUsage, NoSubcommandAndUnknownFlagAreUsageErrors) {
  testutil::TempDir dir("cli_usage");
  EXPECT_EQ(run(dir.path(), "").code, 1);
  EXPECT_EQ(run(dir.path(), "gen-data --out x.json --bogus 1").code, 1);
  EXPECT_EQ(run(dir.path(), "--help").code, 0);
}

TEST(CliGenData, DeterministicAndCounts) {
  testutil::TempDir dir("cli_gen");
  ASSERT_EQ(run(dir.path(), "gen-data --domains 4 --dialogs 100 --seed 7 --out a.json").code, 0);
  ASSERT_EQ(run(dir.path(), "gen-data --domains 4 --dialogs 100 --seed 7 --out b.json").code, 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  ASSERT_EQ(run(dir.path(), "gen-data --domains 4 --dialogs 100 --seed 8 --out d.json").code, 0);
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "d.json"));

  const auto c = corpus::load_corpus(dir / "a.json");
  ASSERT_EQ(c.domains.size(), 4u);
  EXPECT_EQ(c.dialogs.size(), 400u);
  for (const auto& d : c.domains) EXPECT_EQ(c.dialogs_in(d.name).size(), 100u);
}

TEST(CliGenData, SingleDomainIsAUsageError) {
  testutil::TempDir dir("cli_gen1");
  const auto r = run(dir.path(), "gen-data --domains 1 --dialogs 10 --out a.json");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("need >=2 domains"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "a.json"));
}

TEST_F(CliPipeline, TrainExcludesTargetAndWritesArtifacts) {
  const auto r = train("run");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string line = r.out.substr(r.out.find("training domains:"));
  const std::string sources = line.substr(0, line.find('\n'));
  EXPECT_EQ(sources.find(target), std::string::npos) << sources;
  for (const char* f : {"state.ckpt", "model.ckpt", "trace.csv", "epochs.csv", "config.json", "train.log"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  EXPECT_EQ(line_count(slurp(dir / "run" / "trace.csv")), 1u + 4u);
  EXPECT_EQ(line_count(slurp(dir / "run" / "epochs.csv")), 1u + 2u);
  const auto m = trainer::load_model(dir / "run" / "model.ckpt");
  EXPECT_EQ(m.kind, "meta");
  EXPECT_EQ(m.target, target);
  EXPECT_EQ(m.config.batch_size, 2u);
}

TEST_F(CliPipeline, FlagsOverrideConfigFile) {
  ASSERT_EQ(train("run", "--teacher off --max-epochs 1 --seed 9").code, 0);
  const auto j = ordered_json::parse(slurp(dir / "run" / "config.json"));
  EXPECT_EQ(j["teacher"], "off");
  EXPECT_EQ(j["max_epochs"], 1);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["batch_size"], 2);
  EXPECT_EQ(line_count(slurp(dir / "run" / "epochs.csv")), 2u);
}

TEST_F(CliPipeline, BadConfigAndUnknownTarget) {
  std::ofstream(dir / "bad.json") << R"({"batch_sz": 2})";
  auto r = run(dir.path(), "train --corpus c.json --target " + target + " --config bad.json --out x");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("batch_sz"), std::string::npos) << r.out;
  r = run(dir.path(), "train --corpus c.json --target nowhere --config cfg.json --out x");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run(dir.path(), "train --corpus c.json --target " + target + " --teacher maybe --out x").code, 1);
}

TEST_F(CliPipeline, ResumeReproducesUninterruptedTrace) {
  ASSERT_EQ(train("full", "--max-epochs 3").code, 0);
  ASSERT_EQ(train("part", "--max-epochs 1").code, 0);
  const auto r = run(dir.path(), "train --corpus c.json --resume part/state.ckpt --max-epochs 3 --out part");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(dir / "full" / "trace.csv"), slurp(dir / "part" / "trace.csv"));
  EXPECT_EQ(slurp(dir / "full" / "model.ckpt"), slurp(dir / "part" / "model.ckpt"));
}

TEST_F(CliPipeline, AdaptWritesOneCheckpointPerRun) {
  ASSERT_EQ(train("run").code, 0);
  auto r = run(dir.path(), "adapt --checkpoint run/model.ckpt --corpus c.json --runs 3 --out ad");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto manifest = ordered_json::parse(slurp(dir / "ad" / "manifest.json"));
  ASSERT_EQ(manifest["runs"].size(), 3u);
  std::set<std::vector<std::size_t>> samples;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto m = trainer::load_model(dir / "ad" / ("run_" + std::to_string(i) + ".ckpt"));
    EXPECT_EQ(m.kind, "adapted");
    EXPECT_EQ(m.run, i);
    EXPECT_EQ(m.adapt_dialogs.size(), 3u);
    samples.insert(m.adapt_dialogs);
  }
  EXPECT_GT(samples.size(), 1u);

  r = run(dir.path(), "adapt --checkpoint run/model.ckpt --corpus c.json --adapt-dialogs 999 --out ad2");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("exceeds"), std::string::npos) << r.out;
}

TEST_F(CliPipeline, ZeroAdaptationStepsKeepMetaParameters) {
  ASSERT_EQ(train("run").code, 0);
  ASSERT_EQ(run(dir.path(), "adapt --checkpoint run/model.ckpt --corpus c.json --runs 1 --steps 0 --out ad").code, 0);
  const auto meta = trainer::load_model(dir / "run" / "model.ckpt");
  const auto adapted = trainer::load_model(dir / "ad" / "run_0.ckpt");
  ASSERT_EQ(meta.student.names(), adapted.student.names());
  for (const auto& n : meta.student.names()) EXPECT_EQ(meta.student[n].value(), adapted.student[n].value()) << n;
}

TEST_F(CliPipeline, EvalReportsRunsPlusAverage) {
  ASSERT_EQ(train("run").code, 0);
  ASSERT_EQ(run(dir.path(), "adapt --checkpoint run/model.ckpt --corpus c.json --runs 2 --out ad").code, 0);
  auto r = run(dir.path(), "eval --checkpoints 'ad/run_*.ckpt' --corpus c.json --out rep.json --max-dialogs 3");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = ordered_json::parse(slurp(dir / "rep.json"));
  EXPECT_EQ(rep["run_count"], 2);
  for (const char* k : {"inform", "success", "bleu", "slot_f1", "act_f1"}) {
    EXPECT_GE(rep["mean"][k].get<double>(), 0.0);
    EXPECT_LE(rep["mean"][k].get<double>(), 100.0);
  }
  const std::string csv = slurp(dir / "rep.csv");
  EXPECT_EQ(line_count(csv), 1u + 2u + 1u);
  EXPECT_NE(csv.find(target + ",average,"), std::string::npos);

  r = run(dir.path(), "eval --checkpoints 'ad/none_*.ckpt' --corpus c.json --out x.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("none_*"), std::string::npos) << r.out;
}

TEST_F(CliPipeline, OracleEvaluationIsPerfect) {
  ASSERT_EQ(run(dir.path(), "eval --oracle --target " + target + " --corpus c.json --out o.json").code, 0);
  const auto rep = ordered_json::parse(slurp(dir / "o.json"));
  for (const char* k : {"inform", "success", "bleu", "slot_f1", "act_f1"})
    EXPECT_DOUBLE_EQ(rep["mean"][k].get<double>(), 100.0) << k;
}

TEST_F(CliPipeline, VisualizeWritesHtml) {
  ASSERT_EQ(train("run").code, 0);
  auto r = run(dir.path(), "visualize --checkpoint run/model.ckpt --corpus c.json --turns 0:0,1 --out v.html");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string html = slurp(dir / "v.html");
  EXPECT_NE(html.find("<html"), std::string::npos);
  EXPECT_NE(html.find("&lt;eos&gt;"), std::string::npos);
  EXPECT_NE(html.find("dialog 1 turn 0"), std::string::npos);
  EXPECT_EQ(run(dir.path(), "visualize --checkpoint run/model.ckpt --corpus c.json --turns 0:99 --out w.html").code, 2);
  EXPECT_EQ(run(dir.path(), "visualize --checkpoint run/model.ckpt --corpus c.json --turns x --out w.html").code, 1);
}

TEST(CliConvert, MultiwozSingleDomainOnly) {
  testutil::TempDir dir("cli_mwoz");
  std::ofstream(dir / "raw.json") << R"({"dialogs": [
      {"domains": ["hotel"], "turns": [{"user": "a cheap hotel", "system": "ok",
        "belief": {"pricerange": "cheap"}, "act": [["hotel", "request", "area"]], "requested": []}]},
      {"domains": ["hotel", "taxi"], "turns": []}]})";
  const auto r = run(dir.path(), "convert-multiwoz --in raw.json --out c.json");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("converted 1"), std::string::npos);
  EXPECT_NE(r.out.find("skipped 1"), std::string::npos);
  const auto c = corpus::load_corpus(dir / "c.json");
  EXPECT_EQ(c.dialogs.size(), 1u);
  EXPECT_EQ(c.dialogs[0].domain, "hotel");
}

TEST(CliData, CorruptCheckpointIsADataError) {
  testutil::TempDir dir("cli_corrupt");
  ASSERT_EQ(run(dir.path(), "gen-data --domains 2 --dialogs 4 --out c.json").code, 0);
  std::ofstream(dir / "m.ckpt") << "not a checkpoint";
  const auto r = run(dir.path(), "adapt --checkpoint m.ckpt --corpus c.json --out ad");
  EXPECT_EQ(r.code, 2);
}
