#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/corpus.hpp"
#include "kest/evaluation.hpp"
#include "kest/model.hpp"
#include "kest/selftrain.hpp"

namespace kest {

struct SplitConfig {
  double labeled_fraction = 0.025;  // 30 of the default 1200 examples
  int unlabeled_ratio = 30;
  int validation_count = 60;
};

void to_json(nlohmann::json& j, const SplitConfig& c);
void from_json(const nlohmann::json& j, SplitConfig& c);

/// Everything one experiment needs. `model.vocab_size` is derived from the
/// corpus and ignored on input.
struct ExperimentConfig {
  std::string name = "experiment";
  CorpusSpec corpus;
  SplitConfig split;
  ModelConfig model;
  STConfig selftrain;
  EvaluatorTraining evaluator;
  EvalSettings eval;
  std::filesystem::path output_dir;  // empty: resolved by the runner
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  bool save_epoch_artifacts = true;

  void validate() const;  // throws ConfigError naming the field
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);

/// Requires corpus.num_attributes, corpus.vocab_size and selftrain.mode;
/// everything else falls back to the defaults above.
ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Sorted-key serialization without output_dir (which does not influence
/// results).
std::string canonical_json(const ExperimentConfig& c);
/// FNV-1a of canonical_json, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);
/// Hash of the parts that determine the corpus only.
std::string corpus_hash(const CorpusSpec& spec, int seq_max_len);

std::string fnv1a_hex(std::string_view text);

}  // namespace kest
