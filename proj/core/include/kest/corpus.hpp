#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/tokenizer.hpp"
#include "kest/types.hpp"

namespace kest {

/// Parameters of the synthetic attribute-labelled language.
///
/// Each example is drawn from one of `template_count` fixed skeletons. A
/// skeleton position is either a filler slot (a few template-specific words
/// from the shared vocabulary) or a content slot. A content slot takes a word
/// from the example's own attribute lexicon with probability
/// `lexicon_strength`, otherwise a word from a different attribute's lexicon.
struct CorpusSpec {
  int num_attributes = 2;
  int vocab_size = 200;  // word types, excluding the reserved specials
  int min_len = 6;       // content tokens, BOS/EOS excluded
  int max_len = 14;
  double lexicon_strength = 0.9;
  int template_count = 6;
  int lexicon_size = 12;  // words per attribute lexicon
  double content_fraction = 0.5;  // share of skeleton positions that are content slots
  int num_examples = 1200;
  std::uint64_t seed = 7;

  /// Throws ConfigError. `seq_max_len` is the model's L_max.
  void validate(int seq_max_len) const;
  int filler_size() const { return vocab_size - num_attributes * lexicon_size; }
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

struct SyntheticCorpus {
  CorpusSpec spec;
  Vocabulary vocab;
  std::vector<std::string> label_names;
  std::vector<std::vector<TokenId>> lexicons;  // per attribute, sorted ids
  std::vector<LabeledExample> examples;
  int seq_max_len = 0;

  /// Attribute owning `id`, or -1 for filler/special tokens.
  int lexicon_owner(TokenId id) const;
  int label_index(const std::string& name) const;  // -1 when unknown
};

SyntheticCorpus generate_corpus(const CorpusSpec& spec, int seq_max_len);

/// D_l, D_u (labels hidden), D_pl, D_pt plus held-out splits.
struct DatasetBundle {
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<LabeledExample> pseudo_labeled;
  std::vector<PseudoTextItem> pseudo_text;
  std::vector<LabeledExample> validation;
  std::vector<LabeledExample> test;

  /// Ground truth for `unlabeled`, aligned by index. Diagnostics only; never
  /// read by any training path.
  std::vector<int> hidden_labels;

  void check_ratios(int unlabeled_ratio, double ratio_pt) const;
};

/// |D_l| = round(frac * N), |D_u| = ratio * |D_l|, then `validation_count`
/// examples for model selection; everything left is test.
DatasetBundle split_semi_supervised(const std::vector<LabeledExample>& corpus,
                                    double labeled_fraction, int unlabeled_ratio,
                                    std::uint64_t seed, int validation_count = 0);

enum class SourceTag { kReal, kPseudoLabel, kPseudoText };
const char* to_string(SourceTag tag);

struct PoolItem {
  SourceTag tag;
  std::size_t index;  // into the bundle list selected by `tag`
};

/// D_l, D_pl and D_pt concatenated with source tags, shuffled by `seed`.
std::vector<PoolItem> build_training_pool(const DatasetBundle& bundle, std::uint64_t seed);

// --- line-delimited record files -------------------------------------------

struct TextRecord {
  std::string text;
  std::optional<std::string> label;
};

std::vector<TextRecord> read_records(const std::filesystem::path& path);
void write_records(const std::filesystem::path& path, const std::vector<TextRecord>& records);

std::vector<TextRecord> to_records(const std::vector<LabeledExample>& examples,
                                   const SyntheticCorpus& corpus, bool with_labels = true);

}  // namespace kest
