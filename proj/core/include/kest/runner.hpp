#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/config.hpp"
#include "kest/corpus.hpp"
#include "kest/evaluation.hpp"
#include "kest/selftrain.hpp"
#include "kest/verify.hpp"

namespace kest {

/// CLI exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitTrainingAbort = 3;
inline constexpr int kExitVerification = 4;

/// $KEST_OUT_ROOT, or "runs" in the working directory.
std::filesystem::path default_output_root();

struct RunnerOptions {
  std::filesystem::path out;              // empty: config.output_dir, then default_output_root()
  std::optional<std::uint64_t> seed;      // replaces the config's seed list
  int threads = 1;
  bool verbose = true;                    // progress lines on stderr
  bool use_cache = true;                  // reuse base models / evaluators
};

struct TimingSummary {
  std::uint64_t forward_passes_ag = 0;
  std::uint64_t forward_passes_nag = 0;
  double base_seconds = 0;
  double selftrain_seconds = 0;
  double eval_seconds = 0;
};

/// Everything one (config, seed) run produced; stored as run.json.
struct RunRecord {
  std::string name;
  std::string config_hash;
  std::string corpus_hash;
  STMode mode = STMode::kKest;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> history;
  MetricsReport metrics;
  std::string verifier_status;  // "PASS" / "FAIL"
  double evaluator_f1 = 0;
  double reference_ppl = 0;
  std::uint64_t final_checksum = 0;
  TimingSummary timing;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

/// Corpus, evaluators and the resolved model shape for one config.
struct ExperimentContext {
  ExperimentConfig config;
  SyntheticCorpus corpus;
  ModelConfig model_config;  // vocab_size filled in
  EvaluatorBundle evaluators;
  std::filesystem::path out_root;
};

ExperimentContext prepare_experiment(const ExperimentConfig& config, const RunnerOptions& options);

DatasetBundle make_split(const ExperimentContext& ctx, std::uint64_t seed);

/// Base model for `seed`, cached under <out>/cache when enabled.
BaseResult base_model(const ExperimentContext& ctx, std::uint64_t seed, const RunnerOptions& options);

/// One seed end to end; writes its artifacts into `dir`.
RunRecord run_seed(const ExperimentContext& ctx, std::uint64_t seed, const std::filesystem::path& dir,
                   const RunnerOptions& options);

/// Runs every seed; returns the experiment directory
/// <out>/<name>-<hash>/ holding config.json and one seed_<n>/ per seed.
std::filesystem::path cmd_train(const ExperimentConfig& config, const RunnerOptions& options,
                                std::vector<RunRecord>* records = nullptr);

enum class SweepAxis { kMaskRatio, kPseudoTextRatio };
SweepAxis parse_sweep_axis(const std::string& name);  // "p_m" | "ratio_pt"
std::string to_string(SweepAxis axis);

struct SweepRow {
  double value = 0;
  std::uint64_t seed = 0;
  MetricsReport metrics;
};

/// Per value and seed; writes sweep_<axis>.csv (value, mean and std per
/// metric), sweep_<axis>_per_seed.csv and one SVG per metric.
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
                                const RunnerOptions& options, std::filesystem::path* out_dir = nullptr);

struct TimingRow {
  int length = 0;  // sequence length including BOS and EOS
  std::size_t items = 0;
  double ag_passes_per_item = 0;
  double nag_passes_per_item = 0;
  double ag_seconds = 0;
  double nag_seconds = 0;
};

/// Producing |D_l| pseudo texts per length with free-running AG decoding vs
/// one NAG pass. Uses `checkpoint` when given, else the first seed's base
/// model. Writes timing.csv and timing.svg.
std::vector<TimingRow> cmd_timing(const ExperimentConfig& config, const std::vector<int>& lengths,
                                  const RunnerOptions& options,
                                  const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                                  std::filesystem::path* out_dir = nullptr);

/// Writes verify_report.txt under the output root; `report_path` receives it.
VerifyReport cmd_verify(const RunnerOptions& options, std::filesystem::path* report_path = nullptr);

struct ReportRow {
  STMode mode = STMode::kKest;
  std::size_t runs = 0;
  std::vector<double> mean;  // metrics_columns() order
  std::vector<double> stddev;
};

/// Accepts experiment directories or single seed directories. Refuses runs
/// over different corpora. Writes report.csv and history plots into `out`.
std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& run_dirs,
                                  const std::filesystem::path& out);

std::vector<RunRecord> collect_runs(const std::vector<std::filesystem::path>& run_dirs);

// Corpus utilities.
void cmd_corpus_generate(const CorpusSpec& spec, int seq_max_len, const std::filesystem::path& out_dir);
void cmd_corpus_split(const std::filesystem::path& input, double labeled_fraction, int unlabeled_ratio,
                      int validation_count, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Samples from a seed directory's final model.
std::vector<std::string> cmd_generate(const std::filesystem::path& seed_dir, const std::string& label,
                                      const std::string& prompt, int count, std::uint64_t seed);

/// Re-evaluates a seed directory's final model.
MetricsReport cmd_eval(const std::filesystem::path& seed_dir, const RunnerOptions& options);

void write_metrics_csv(const std::filesystem::path& path, const std::string& config_hash, const std::string& run,
                       const MetricsReport& metrics);

double mean_of(const std::vector<double>& v);
double sample_stddev(const std::vector<double>& v);

}  // namespace kest
