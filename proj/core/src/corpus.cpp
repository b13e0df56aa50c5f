#include "kest/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "kest/error.hpp"
#include "kest/rng.hpp"

namespace kest {

void CorpusSpec::validate(int seq_max_len) const {
  if (num_attributes < 2) throw ConfigError("corpus.num_attributes must be >= 2");
  if (lexicon_size < 1) throw ConfigError("corpus.lexicon_size must be >= 1");
  if (template_count < 1) throw ConfigError("corpus.template_count must be >= 1");
  if (num_examples < 1) throw ConfigError("corpus.num_examples must be >= 1");
  if (min_len < 4) throw ConfigError("corpus.min_len must be >= 4");
  if (max_len < min_len) throw ConfigError("corpus.max_len must be >= corpus.min_len");
  if (max_len > seq_max_len - 2) {
    throw ConfigError("corpus.max_len " + std::to_string(max_len) + " does not fit L_max " +
                      std::to_string(seq_max_len) + " (needs max_len <= L_max - 2)");
  }
  if (!(lexicon_strength >= 0.0 && lexicon_strength <= 1.0)) {
    throw ConfigError("corpus.lexicon_strength must be in [0, 1]");
  }
  if (!(content_fraction > 0.0 && content_fraction < 1.0)) {
    throw ConfigError("corpus.content_fraction must be in (0, 1)");
  }
  if (filler_size() < 4) {
    throw ConfigError("corpus.vocab_size " + std::to_string(vocab_size) + " cannot hold " +
                      std::to_string(num_attributes) + " disjoint lexicons of " + std::to_string(lexicon_size) +
                      " words plus at least 4 shared filler words");
  }
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = nlohmann::json{{"num_attributes", s.num_attributes}, {"vocab_size", s.vocab_size},
                     {"min_len", s.min_len},               {"max_len", s.max_len},
                     {"lexicon_strength", s.lexicon_strength}, {"template_count", s.template_count},
                     {"lexicon_size", s.lexicon_size},       {"content_fraction", s.content_fraction},     {"num_examples", s.num_examples},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.num_attributes = j.value("num_attributes", d.num_attributes);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.min_len = j.value("min_len", d.min_len);
  s.max_len = j.value("max_len", d.max_len);
  s.lexicon_strength = j.value("lexicon_strength", d.lexicon_strength);
  s.template_count = j.value("template_count", d.template_count);
  s.lexicon_size = j.value("lexicon_size", d.lexicon_size);
  s.content_fraction = j.value("content_fraction", d.content_fraction);
  s.num_examples = j.value("num_examples", d.num_examples);
  s.seed = j.value("seed", d.seed);
}

int SyntheticCorpus::lexicon_owner(TokenId id) const {
  for (std::size_t k = 0; k < lexicons.size(); ++k) {
    if (std::binary_search(lexicons[k].begin(), lexicons[k].end(), id)) return static_cast<int>(k);
  }
  return -1;
}

int SyntheticCorpus::label_index(const std::string& name) const {
  for (std::size_t k = 0; k < label_names.size(); ++k) {
    if (label_names[k] == name) return static_cast<int>(k);
  }
  return -1;
}

namespace {

struct Slot {
  bool content = false;
  std::vector<TokenId> choices;  // filler candidates
};

std::string word_name(int index, int width) {
  std::string digits = std::to_string(index);
  return "w" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') + digits;
}

}  // namespace

SyntheticCorpus generate_corpus(const CorpusSpec& spec, int seq_max_len) {
  spec.validate(seq_max_len);
  SyntheticCorpus corpus;
  corpus.spec = spec;
  corpus.seq_max_len = seq_max_len;

  // Word names carry no attribute information; ownership is a seeded
  // permutation of the word list.
  const int width = static_cast<int>(std::to_string(spec.vocab_size - 1).size());
  std::vector<std::string> words;
  for (int i = 0; i < spec.vocab_size; ++i) words.push_back(word_name(i, width));
  corpus.vocab = Vocabulary::from_tokens(words);

  Rng rng = make_rng(spec.seed, "corpus");
  std::vector<TokenId> ids(static_cast<std::size_t>(spec.vocab_size));
  std::iota(ids.begin(), ids.end(), special::kCount);
  shuffle(ids.begin(), ids.end(), rng);
  std::size_t at = 0;
  for (int k = 0; k < spec.num_attributes; ++k) {
    corpus.label_names.push_back("attr" + std::to_string(k));
    std::vector<TokenId> lex(ids.begin() + static_cast<std::ptrdiff_t>(at),
                             ids.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(spec.lexicon_size)));
    std::sort(lex.begin(), lex.end());
    corpus.lexicons.push_back(std::move(lex));
    at += static_cast<std::size_t>(spec.lexicon_size);
  }
  const std::vector<TokenId> filler(ids.begin() + static_cast<std::ptrdiff_t>(at), ids.end());

  std::vector<std::vector<Slot>> templates;
  for (int t = 0; t < spec.template_count; ++t) {
    const int len = spec.min_len + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
    std::vector<Slot> slots(static_cast<std::size_t>(len));
    const int n_content =
        std::clamp(static_cast<int>(std::lround(spec.content_fraction * len)), 1, len - 1);
    std::vector<int> positions(static_cast<std::size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    shuffle(positions.begin(), positions.end(), rng);
    for (int c = 0; c < n_content; ++c) slots[static_cast<std::size_t>(positions[static_cast<std::size_t>(c)])].content = true;
    for (auto& slot : slots) {
      if (slot.content) continue;
      const int n_choices = 3 + static_cast<int>(uniform_index(rng, 2));
      for (int c = 0; c < n_choices; ++c) slot.choices.push_back(filler[uniform_index(rng, filler.size())]);
    }
    templates.push_back(std::move(slots));
  }

  const auto lexicon_len = static_cast<std::uint64_t>(spec.lexicon_size);
  for (int e = 0; e < spec.num_examples; ++e) {
    const int label = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(spec.num_attributes)));
    const auto& slots = templates[uniform_index(rng, templates.size())];
    std::vector<TokenId> content;
    content.reserve(slots.size());
    for (const auto& slot : slots) {
      if (!slot.content) {
        content.push_back(slot.choices[uniform_index(rng, slot.choices.size())]);
        continue;
      }
      int source = label;
      if (!bernoulli(rng, spec.lexicon_strength)) {
        source = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(spec.num_attributes - 1)));
        if (source >= label) ++source;
      }
      content.push_back(corpus.lexicons[static_cast<std::size_t>(source)][uniform_index(rng, lexicon_len)]);
    }
    corpus.examples.push_back({TokenSequence::from_content(content, seq_max_len), label, static_cast<std::size_t>(e)});
  }
  return corpus;
}

void DatasetBundle::check_ratios(int unlabeled_ratio, double ratio_pt) const {
  const std::size_t nl = labeled.size();
  if (unlabeled.size() != static_cast<std::size_t>(unlabeled_ratio) * nl) {
    throw IntegrityError("|D_u| = " + std::to_string(unlabeled.size()) + " but expected " +
                         std::to_string(unlabeled_ratio) + " x |D_l| = " +
                         std::to_string(static_cast<std::size_t>(unlabeled_ratio) * nl));
  }
  if (hidden_labels.size() != unlabeled.size()) throw IntegrityError("hidden label table out of sync with D_u");
  if (!pseudo_labeled.empty() && pseudo_labeled.size() != unlabeled.size()) {
    throw IntegrityError("|D_pl| = " + std::to_string(pseudo_labeled.size()) + " but |D_u| = " +
                         std::to_string(unlabeled.size()));
  }
  const auto expected_pt = static_cast<std::size_t>(std::llround(ratio_pt * static_cast<double>(nl)));
  if (!pseudo_text.empty() && pseudo_text.size() != expected_pt) {
    throw IntegrityError("|D_pt| = " + std::to_string(pseudo_text.size()) + " but expected ratio_pt x |D_l| = " +
                         std::to_string(expected_pt));
  }
}

DatasetBundle split_semi_supervised(const std::vector<LabeledExample>& corpus, double labeled_fraction,
                                    int unlabeled_ratio, std::uint64_t seed, int validation_count) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw ConfigError("labeled_fraction must be in (0, 1]");
  if (unlabeled_ratio < 0) throw ConfigError("unlabeled_ratio must be >= 0");
  if (validation_count < 0) throw ConfigError("validation_count must be >= 0");
  const std::size_t n = corpus.size();
  const auto nl = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(n)));
  const std::size_t nu = nl * static_cast<std::size_t>(unlabeled_ratio);
  const std::size_t required = nl + nu + static_cast<std::size_t>(validation_count);
  if (nl < 1 || required > n) {
    throw SplitError("split needs " + std::to_string(std::max<std::size_t>(required, 1)) + " examples (" +
                     std::to_string(std::max<std::size_t>(nl, 1)) + " labeled + " + std::to_string(nu) +
                     " unlabeled + " + std::to_string(validation_count) + " validation) but only " +
                     std::to_string(n) + " are available");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "split");
  shuffle(order.begin(), order.end(), rng);

  DatasetBundle b;
  std::size_t i = 0;
  for (; i < nl; ++i) b.labeled.push_back(corpus[order[i]]);
  for (; i < nl + nu; ++i) {
    const auto& ex = corpus[order[i]];
    b.unlabeled.push_back({ex.tokens, ex.id});
    b.hidden_labels.push_back(ex.label);
  }
  for (; i < required; ++i) b.validation.push_back(corpus[order[i]]);
  for (; i < n; ++i) b.test.push_back(corpus[order[i]]);
  return b;
}

const char* to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::kReal: return "REAL";
    case SourceTag::kPseudoLabel: return "PSEUDO_LABEL";
    case SourceTag::kPseudoText: return "PSEUDO_TEXT";
  }
  return "?";
}

std::vector<PoolItem> build_training_pool(const DatasetBundle& bundle, std::uint64_t seed) {
  std::vector<PoolItem> pool;
  pool.reserve(bundle.labeled.size() + bundle.pseudo_labeled.size() + bundle.pseudo_text.size());
  for (std::size_t i = 0; i < bundle.labeled.size(); ++i) pool.push_back({SourceTag::kReal, i});
  for (std::size_t i = 0; i < bundle.pseudo_labeled.size(); ++i) pool.push_back({SourceTag::kPseudoLabel, i});
  for (std::size_t i = 0; i < bundle.pseudo_text.size(); ++i) pool.push_back({SourceTag::kPseudoText, i});
  Rng rng = make_rng(seed, "pool");
  shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

std::vector<TextRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot open record file " + path.string());
  std::vector<TextRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": record needs a string \"text\" field");
    }
    TextRecord r;
    r.text = j["text"].get<std::string>();
    if (j.contains("label")) r.label = j["label"].get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<TextRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write record file " + path.string());
  for (const auto& r : records) {
    nlohmann::json j;
    j["text"] = r.text;
    if (r.label) j["label"] = *r.label;
    out << j.dump() << '\n';
  }
}

std::vector<TextRecord> to_records(const std::vector<LabeledExample>& examples, const SyntheticCorpus& corpus,
                                   bool with_labels) {
  std::vector<TextRecord> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    TextRecord r;
    r.text = decode(ex.tokens, corpus.vocab);
    if (with_labels) r.label = corpus.label_names.at(static_cast<std::size_t>(ex.label));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace kest
