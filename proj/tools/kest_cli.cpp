// Command line front end: corpus, train, generate, eval, sweep, timing,
// verify and report.

#include <CLI11.hpp>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"
#include "kest/losses.hpp"
#include "kest/runner.hpp"

namespace {

using namespace kest;
namespace fs = std::filesystem;

void print_metrics(const MetricsReport& m) {
  const auto cols = metrics_columns();
  const auto vals = metrics_values(m);
  for (std::size_t i = 0; i < cols.size(); ++i) std::cout << std::left << std::setw(20) << cols[i] << vals[i] << "\n";
}

CorpusSpec load_corpus_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus spec " + path.string());
  try {
    return nlohmann::json::parse(in, nullptr, true, true).get<CorpusSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid corpus spec " + path.string() + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KEST self-training for controllable text generation"};
  app.require_subcommand(1);

  RunnerOptions options;
  std::string out;
  std::uint64_t seed = 0;
  bool quiet = false;
  app.add_option("--out", out, "Output root (default: $KEST_OUT_ROOT or ./runs)");
  auto* seed_opt = app.add_option("--seed", seed, "Run only this seed");
  app.add_option("--threads", options.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", quiet, "No progress output");
  bool no_cache = false;
  app.add_flag("--no-cache", no_cache, "Retrain base models and evaluators");

  // corpus
  auto* corpus = app.add_subcommand("corpus", "Synthetic corpus utilities");
  corpus->require_subcommand(1);
  auto* gen = corpus->add_subcommand("generate", "Generate a corpus from a spec file");
  std::string spec_path, corpus_out;
  int seq_max_len = 48;
  gen->add_option("--spec", spec_path, "Corpus spec (JSON)")->required();
  gen->add_option("--out", corpus_out, "Output directory")->required();
  gen->add_option("--max-len", seq_max_len, "Sequence length L_max");
  auto* split = corpus->add_subcommand("split", "Split a record file into D_l / D_u / validation / test");
  std::string split_in, split_out;
  double labeled_frac = 0.025;
  int unlabeled_ratio = 30, validation = 0;
  split->add_option("--in", split_in, "Record file")->required();
  split->add_option("--labeled-frac", labeled_frac, "Labeled fraction")->required();
  split->add_option("--unlabeled-ratio", unlabeled_ratio, "|D_u| / |D_l|")->required();
  split->add_option("--validation", validation, "Validation examples");
  split->add_option("--out", split_out, "Output directory")->required();

  // train / sweep / timing
  std::string config_path;
  auto* train = app.add_subcommand("train", "Run an experiment config for every seed");
  train->add_option("config", config_path, "Experiment config (JSON)")->required();

  auto* sweep = app.add_subcommand("sweep", "Sweep p_m or ratio_pt");
  std::string axis;
  std::vector<double> values;
  sweep->add_option("config", config_path, "Experiment config (JSON)")->required();
  sweep->add_option("--axis", axis, "p_m or ratio_pt")->required();
  sweep->add_option("--values", values, "Values to sweep")->required();

  auto* timing = app.add_subcommand("timing", "AG vs NAG pseudo-text generation cost");
  std::vector<int> lengths{8, 16, 32, 48};
  std::string checkpoint;
  timing->add_option("config", config_path, "Experiment config (JSON)")->required();
  timing->add_option("--lengths", lengths, "Sequence lengths (BOS/EOS included)");
  timing->add_option("--checkpoint", checkpoint, "Model checkpoint (default: base model of the first seed)");

  // generate / eval
  auto* generate = app.add_subcommand("generate", "Sample from a finished run");
  std::string run_dir, label, prompt;
  int count = 5;
  generate->add_option("--run", run_dir, "Seed directory of a finished run")->required();
  generate->add_option("--label", label, "Attribute name")->required();
  generate->add_option("--prompt", prompt, "Prompt text");
  generate->add_option("--n", count, "Number of samples");

  auto* eval = app.add_subcommand("eval", "Re-evaluate a finished run");
  eval->add_option("--run", run_dir, "Seed directory of a finished run")->required();

  // verify / report
  auto* verify = app.add_subcommand("verify", "Identity, gradient and causality checks");
  std::string precision = "float64";
  bool mutate = false;
  verify->add_option("--precision", precision, "Gradient-check precision")->check(CLI::IsMember({"float32", "float64"}));
  verify->add_flag("--mutate-mmd-sign", mutate, "Self-test: flip the sign of the kernel cross term");

  auto* report = app.add_subcommand("report", "Compare finished runs");
  std::vector<std::string> run_dirs;
  std::string report_out;
  report->add_option("runs", run_dirs, "Experiment or seed directories")->required();
  report->add_option("--report-out", report_out, "Where to write report.csv (default: --out root)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  options.out = out;
  if (*seed_opt) options.seed = seed;
  options.verbose = !quiet;
  options.use_cache = !no_cache;
  diag::set_verbose(false);

  try {
    if (*gen) {
      cmd_corpus_generate(load_corpus_spec(spec_path), seq_max_len, corpus_out);
    } else if (*split) {
      cmd_corpus_split(split_in, labeled_frac, unlabeled_ratio, validation, options.seed.value_or(1), split_out);
    } else if (*train) {
      std::vector<RunRecord> records;
      const auto dir = cmd_train(load_experiment(config_path), options, &records);
      std::cout << dir.string() << "\n";
    } else if (*sweep) {
      fs::path dir;
      cmd_sweep(load_experiment(config_path), parse_sweep_axis(axis), values, options, &dir);
      std::cout << (dir / ("sweep_" + axis + ".csv")).string() << "\n";
    } else if (*timing) {
      fs::path dir;
      const auto rows = cmd_timing(load_experiment(config_path), lengths, options,
                                   checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint), &dir);
      std::cout << "length  ag_passes/item  nag_passes/item  ag_s  nag_s\n";
      for (const auto& r : rows) {
        std::cout << r.length << "  " << r.ag_passes_per_item << "  " << r.nag_passes_per_item << "  " << r.ag_seconds
                  << "  " << r.nag_seconds << "\n";
      }
      std::cout << (dir / "timing.csv").string() << "\n";
    } else if (*generate) {
      for (const auto& line : cmd_generate(run_dir, label, prompt, count, options.seed.value_or(1))) {
        std::cout << line << "\n";
      }
    } else if (*eval) {
      print_metrics(cmd_eval(run_dir, options));
    } else if (*verify) {
      if (precision != "float64") {
        verify_gradients({.precision = Precision::kFloat32});  // throws ConfigError
      }
      mutation::set_mmd_cross_sign_flip(mutate);
      fs::path path;
      const auto r = cmd_verify(options, &path);
      std::cout << r.to_text();
      if (!r.passed()) {
        std::cerr << "verification failed; report at " << path.string() << "\n";
        return kExitVerification;
      }
    } else if (*report) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const fs::path dest = !report_out.empty() ? fs::path(report_out) : (out.empty() ? default_output_root() : fs::path(out));
      const auto rows = cmd_report(dirs, dest);
      std::cout << "mode";
      for (const auto& c : metrics_columns()) std::cout << "," << c;
      std::cout << "\n";
      for (const auto& r : rows) {
        std::cout << to_string(r.mode);
        for (std::size_t i = 0; i < r.mean.size(); ++i) std::cout << "," << r.mean[i] << "±" << r.stddev[i];
        std::cout << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitTrainingAbort;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
