#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/corpus.hpp"
#include "kest/decode.hpp"
#include "kest/model.hpp"
#include "kest/selftrain.hpp"

namespace kest {

/// Frozen scorers trained on the full synthetic corpus: a classifier (analog
/// of an external evaluator) and an unconditional reference LM (single label).
struct EvaluatorBundle {
  ModelF classifier;
  ModelF reference_lm;
  double classifier_test_f1 = 0;
  double reference_test_ppl = 0;
};

struct EvaluatorTraining {
  int epochs = 8;
  int batch_size = 16;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1000;
};

EvaluatorBundle build_evaluators(const SyntheticCorpus& corpus, const ModelConfig& model_config,
                                 const EvaluatorTraining& training);

void save_evaluators(const std::filesystem::path& dir, const EvaluatorBundle& bundle);
EvaluatorBundle load_evaluators(const std::filesystem::path& dir);

struct Generation {
  TokenSequence tokens;
  int label = 0;  // intended attribute
};

struct EvalSettings {
  int samples_per_class = 200;
  bool use_prompts = false;       // prompt with the leading share of test items
  double prompt_fraction = 0.25;
  DecodeConfig decode;
  int threads = 1;
};

void to_json(nlohmann::json& j, const EvalSettings& s);
void from_json(const nlohmann::json& j, EvalSettings& s);

/// samples_per_class AG generations per label, per-sequence rng streams.
std::vector<Generation> generate_samples(const ModelF& model, const EvalSettings& settings, std::uint64_t seed,
                                         const std::vector<LabeledExample>* prompts = nullptr);

struct MetricsReport {
  double model_ppl = 0;
  double output_ppl = 0;
  double macro_f1 = 0;
  double dist = 0;
  std::array<double, 4> dist_n{};
  double self_bleu = 0;
  double oracle_control_acc = 0;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

/// exp(total NLL / scored token count), conditioning on `labels`.
double perplexity(const ModelF& model, const std::vector<TokenSequence>& sequences, const std::vector<int>& labels);

double model_ppl(const ModelF& model, const std::vector<LabeledExample>& test);

/// Empty generations (BOS EOS only) are excluded ("output_ppl.empty").
double output_ppl(const ModelF& reference_lm, const std::vector<Generation>& generations);

/// Macro-F1 over `num_classes`; a class with no support and no predictions
/// counts as 0 ("control_f1.absent_class").
double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes);

double control_f1(const ModelF& evaluator, const std::vector<Generation>& generations, int num_classes);

/// Distinct / total n-grams pooled over the set; texts shorter than n are
/// skipped ("dist_n.short"). Throws PreconditionError on an empty pool.
double dist_n(const std::vector<std::vector<TokenId>>& texts, int n);
/// Geometric mean of Dist-1..4.
double dist(const std::vector<std::vector<TokenId>>& texts);

/// BLEU (n = 2..4, add-epsilon smoothing, closest-length brevity penalty) of
/// `hypothesis` against `references`.
double bleu(const std::vector<TokenId>& hypothesis, const std::vector<std::vector<TokenId>>& references);
double self_bleu(const std::vector<std::vector<TokenId>>& texts);

/// Share of generations whose intended lexicon count is strictly the largest.
double oracle_control_acc(const std::vector<Generation>& generations,
                          const std::vector<std::vector<TokenId>>& lexicons);

MetricsReport evaluate(const ModelF& model, const EvaluatorBundle& evaluators, const SyntheticCorpus& corpus,
                       const std::vector<LabeledExample>& test, const EvalSettings& settings, std::uint64_t seed,
                       std::vector<Generation>* generations_out = nullptr);

std::vector<std::string> metrics_columns();
std::vector<double> metrics_values(const MetricsReport& r);

}  // namespace kest
