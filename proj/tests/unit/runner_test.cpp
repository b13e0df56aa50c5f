#include "kest/runner.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <gtest/gtest.h>
#include <sstream>
#include <sys/wait.h>

#include "kest/error.hpp"

namespace kest {
namespace {

namespace fs = std::filesystem;

ExperimentConfig small_config(STMode mode = STMode::kKest) {
  ExperimentConfig c;
  c.name = "runner-test";
  c.corpus.num_examples = 300;
  c.split = {0.05, 4, 20};
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.selftrain.mode = mode;
  c.selftrain.base_epochs = 3;
  c.selftrain.max_epochs = 1;
  c.evaluator.epochs = 1;
  c.eval.samples_per_class = 5;
  c.seeds = {1};
  return c;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("kest_runner_test_" + name);
  fs::remove_all(p);
  return p;
}

RunnerOptions quiet(const fs::path& out) {
  RunnerOptions o;
  o.out = out;
  o.verbose = false;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Runner, TrainWritesArtifacts) {
  const auto out = scratch("train");
  std::vector<RunRecord> records;
  const auto dir = cmd_train(small_config(), quiet(out), &records);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].config_hash, config_hash(small_config()));
  EXPECT_EQ(records[0].verifier_status, "PASS");
  const auto seed = dir / "seed_1";
  for (const auto* f : {"history.csv", "metrics.csv", "final.ckpt", "vocab.txt", "labels.txt", "generations.txt",
                        "run.json"}) {
    EXPECT_TRUE(fs::exists(seed / f)) << f;
  }
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(fs::exists(seed / "epoch_1" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(seed / "epoch_1" / "d_pt.jsonl"));
  // The stored record matches what the call returned.
  const auto runs = collect_runs({dir});
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].final_checksum, records[0].final_checksum);
  EXPECT_EQ(runs[0].history.size(), records[0].history.size());

  // Re-evaluation and sampling from the finished run.
  const auto m = cmd_eval(seed, quiet(out));
  EXPECT_DOUBLE_EQ(m.model_ppl, records[0].metrics.model_ppl);
  const auto samples = cmd_generate(seed, slurp(seed / "labels.txt").substr(0, slurp(seed / "labels.txt").find('\n')),
                                    "", 3, 1);
  EXPECT_EQ(samples.size(), 3u);
  EXPECT_THROW(cmd_generate(seed, "no-such-label", "", 1, 1), ConfigError);
  fs::remove_all(out);
}

TEST(Runner, RerunIsByteIdentical) {
  const auto out = scratch("determinism");
  auto o = quiet(out / "a");
  o.use_cache = false;
  auto c = small_config(STMode::kPtSelectPl);
  c.save_epoch_artifacts = false;
  std::vector<RunRecord> r1, r2;
  const auto d1 = cmd_train(c, o, &r1);
  o.out = out / "b";
  const auto d2 = cmd_train(c, o, &r2);
  EXPECT_EQ(slurp(d1 / "seed_1" / "history.csv"), slurp(d2 / "seed_1" / "history.csv"));
  EXPECT_EQ(slurp(d1 / "seed_1" / "generations.txt"), slurp(d2 / "seed_1" / "generations.txt"));
  EXPECT_EQ(r1[0].final_checksum, r2[0].final_checksum);
  fs::remove_all(out);
}

TEST(Runner, SeedOverrideAndCacheReuse) {
  const auto out = scratch("cache");
  auto o = quiet(out);
  o.seed = 4;
  auto c = small_config(STMode::kSupervised);
  c.save_epoch_artifacts = false;
  std::vector<RunRecord> r1, r2;
  const auto dir = cmd_train(c, o, &r1);
  ASSERT_EQ(r1.size(), 1u);
  EXPECT_EQ(r1[0].seed, 4u);
  EXPECT_TRUE(fs::exists(dir / "seed_4"));
  bool cached = false;
  for (const auto& e : fs::directory_iterator(out / "cache")) cached |= e.path().extension() == ".ckpt";
  EXPECT_TRUE(cached);
  cmd_train(c, o, &r2);
  EXPECT_EQ(r1[0].final_checksum, r2[0].final_checksum);
  fs::remove_all(out);
}

TEST(Runner, ReportAggregatesAndRefusesMixedCorpora) {
  const auto out = scratch("report");
  auto c = small_config(STMode::kSupervised);
  c.save_epoch_artifacts = false;
  c.seeds = {1, 2};
  const auto a = cmd_train(c, quiet(out));
  const auto rows = cmd_report({a}, out / "report");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].runs, 2u);
  EXPECT_EQ(rows[0].mean.size(), metrics_columns().size());
  EXPECT_TRUE(fs::exists(out / "report" / "report.csv"));

  auto other = c;
  other.corpus.seed = 99;
  other.seeds = {1};
  const auto b = cmd_train(other, quiet(out));
  EXPECT_THROW(cmd_report({a, b}, out / "report"), ConfigError);
  EXPECT_THROW(cmd_report({out / "nothing"}, out / "report"), PreconditionError);
  fs::remove_all(out);
}

TEST(Runner, SweepAndTiming) {
  const auto out = scratch("sweep");
  auto c = small_config();
  c.save_epoch_artifacts = false;
  fs::path dir;
  const auto rows = cmd_sweep(c, SweepAxis::kMaskRatio, {0.3, 0.7}, quiet(out), &dir);
  EXPECT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[1].value, 0.7);
  EXPECT_TRUE(fs::exists(dir / "sweep_p_m.csv"));
  EXPECT_TRUE(fs::exists(dir / "sweep_p_m_per_seed.csv"));
  EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
  EXPECT_EQ(parse_sweep_axis("ratio_pt"), SweepAxis::kPseudoTextRatio);

  const auto timing = cmd_timing(c, {8, 16}, quiet(out), std::nullopt, &dir);
  ASSERT_EQ(timing.size(), 2u);
  EXPECT_DOUBLE_EQ(timing[0].nag_passes_per_item, 1.0);
  EXPECT_GT(timing[1].ag_passes_per_item, timing[0].ag_passes_per_item);
  EXPECT_TRUE(fs::exists(dir / "timing.csv"));
  EXPECT_THROW(cmd_timing(c, {2}, quiet(out)), ConfigError);
  fs::remove_all(out);
}

TEST(Runner, CorpusGenerateAndSplit) {
  const auto out = scratch("corpus");
  CorpusSpec spec;
  spec.num_examples = 200;
  cmd_corpus_generate(spec, 48, out / "corpus");
  EXPECT_EQ(read_records(out / "corpus" / "corpus.jsonl").size(), 200u);
  cmd_corpus_split(out / "corpus" / "corpus.jsonl", 0.05, 4, 10, 1, out / "split");
  EXPECT_EQ(read_records(out / "split" / "labeled.jsonl").size(), 10u);
  EXPECT_EQ(read_records(out / "split" / "unlabeled.jsonl").size(), 40u);
  EXPECT_EQ(read_records(out / "split" / "validation.jsonl").size(), 10u);
  fs::remove_all(out);
}

TEST(Runner, Statistics) {
  EXPECT_DOUBLE_EQ(mean_of({1, 2, 3}), 2.0);
  EXPECT_DOUBLE_EQ(sample_stddev({1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(sample_stddev({5}), 0.0);
}

// --- command line -----------------------------------------------------------

int run_cli(const std::string& args, const fs::path& out) {
  const std::string cmd = std::string(KEST_CLI_PATH) + " --quiet --out " + out.string() + " " + args + " >" +
                          (out / "cli.log").string() + " 2>&1";
  fs::create_directories(out);
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const auto out = scratch("cli");
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "missing.json");
    cfg << R"({"corpus": {"vocab_size": 200}, "selftrain": {"mode": "KEST"}})";
  }
  EXPECT_EQ(run_cli("train " + (out / "missing.json").string(), out), kExitConfig);
  EXPECT_NE(slurp(out / "cli.log").find("corpus.num_attributes"), std::string::npos);
  EXPECT_EQ(run_cli("verify --precision float32", out), kExitConfig);
  EXPECT_EQ(run_cli("verify --mutate-mmd-sign", out), kExitVerification);
  EXPECT_NE(slurp(out / "cli.log").find("FAIL mmd.loss_plus_target_term"), std::string::npos);
  EXPECT_EQ(run_cli("verify", out), kExitOk);
  EXPECT_TRUE(fs::exists(out / "verify_report.txt"));
  EXPECT_EQ(run_cli("no-such-command", out), kExitConfig);
  EXPECT_EQ(run_cli("eval --run " + (out / "nothing").string(), out), kExitError);
  fs::remove_all(out);
}

}  // namespace
}  // namespace kest
