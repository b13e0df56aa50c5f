#include "kest/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <gtest/gtest.h>
#include <set>

#include "kest/error.hpp"

namespace kest {
namespace {

SyntheticCorpus small_corpus(std::uint64_t seed = 7) {
  CorpusSpec spec;
  spec.num_examples = 300;
  spec.seed = seed;
  return generate_corpus(spec, 16);
}

TEST(Corpus, ShapeAndLengths) {
  const auto c = small_corpus();
  ASSERT_EQ(c.examples.size(), 300u);
  EXPECT_EQ(c.vocab.size(), special::kCount + c.spec.vocab_size);
  EXPECT_EQ(c.label_names, (std::vector<std::string>{"attr0", "attr1"}));
  for (const auto& ex : c.examples) {
    EXPECT_NO_THROW(ex.tokens.validate());
    EXPECT_GE(ex.tokens.content_length(), c.spec.min_len);
    EXPECT_LE(ex.tokens.content_length(), c.spec.max_len);
    EXPECT_EQ(ex.tokens.max_len(), 16);
    for (TokenId id : ex.tokens.content()) EXPECT_GE(id, special::kCount);
  }
}

TEST(Corpus, LexiconsDisjointAndSorted) {
  const auto c = small_corpus();
  ASSERT_EQ(c.lexicons.size(), 2u);
  std::set<TokenId> seen;
  for (std::size_t k = 0; k < c.lexicons.size(); ++k) {
    EXPECT_EQ(static_cast<int>(c.lexicons[k].size()), c.spec.lexicon_size);
    EXPECT_TRUE(std::is_sorted(c.lexicons[k].begin(), c.lexicons[k].end()));
    for (TokenId id : c.lexicons[k]) {
      EXPECT_TRUE(seen.insert(id).second);
      EXPECT_EQ(c.lexicon_owner(id), static_cast<int>(k));
    }
  }
  EXPECT_EQ(c.lexicon_owner(special::kBos), -1);
}

TEST(Corpus, LabelsCarriedByLexicon) {
  // Own-lexicon words should dominate: strength 0.9 with two attributes.
  const auto c = small_corpus();
  int own = 0, other = 0;
  for (const auto& ex : c.examples) {
    for (TokenId id : ex.tokens.content()) {
      const int owner = c.lexicon_owner(id);
      if (owner < 0) continue;
      (owner == ex.label ? own : other)++;
    }
  }
  const double share = static_cast<double>(own) / (own + other);
  EXPECT_NEAR(share, c.spec.lexicon_strength, 0.03);
}

TEST(Corpus, DeterministicPerSeed) {
  const auto a = small_corpus(3), b = small_corpus(3), c = small_corpus(4);
  ASSERT_EQ(a.examples.size(), b.examples.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    EXPECT_EQ(a.examples[i].tokens, b.examples[i].tokens);
    EXPECT_EQ(a.examples[i].label, b.examples[i].label);
  }
  EXPECT_NE(a.lexicons, c.lexicons);
}

TEST(Corpus, SpecValidation) {
  CorpusSpec spec;
  spec.num_attributes = 1;
  EXPECT_THROW(spec.validate(48), ConfigError);
  spec = {};
  spec.max_len = 60;
  EXPECT_THROW(spec.validate(48), ConfigError);
  spec = {};
  spec.vocab_size = 20;  // two lexicons of 12 do not fit
  EXPECT_THROW(spec.validate(48), ConfigError);
  spec = {};
  spec.content_fraction = 1.0;
  EXPECT_THROW(spec.validate(48), ConfigError);
  EXPECT_NO_THROW(CorpusSpec{}.validate(48));
}

TEST(Corpus, SpecJsonRoundTrip) {
  CorpusSpec spec;
  spec.vocab_size = 321;
  spec.lexicon_strength = 0.75;
  const nlohmann::json j = spec;
  const auto back = j.get<CorpusSpec>();
  EXPECT_EQ(back.vocab_size, 321);
  EXPECT_DOUBLE_EQ(back.lexicon_strength, 0.75);
}

TEST(Split, SizesAndDisjointness) {
  const auto c = small_corpus();
  const auto b = split_semi_supervised(c.examples, 0.05, 4, 1, 20);
  EXPECT_EQ(b.labeled.size(), 15u);
  EXPECT_EQ(b.unlabeled.size(), 60u);
  EXPECT_EQ(b.validation.size(), 20u);
  EXPECT_EQ(b.test.size(), 300u - 95u);
  EXPECT_EQ(b.hidden_labels.size(), b.unlabeled.size());
  std::set<std::size_t> ids;
  for (const auto& e : b.labeled) ids.insert(e.id);
  for (const auto& e : b.unlabeled) ids.insert(e.id);
  for (const auto& e : b.validation) ids.insert(e.id);
  for (const auto& e : b.test) ids.insert(e.id);
  EXPECT_EQ(ids.size(), 300u);
  for (std::size_t i = 0; i < b.unlabeled.size(); ++i) {
    EXPECT_EQ(b.hidden_labels[i], c.examples[b.unlabeled[i].id].label);
  }
  EXPECT_NO_THROW(b.check_ratios(4, 1.0));
  EXPECT_THROW(b.check_ratios(5, 1.0), IntegrityError);
}

TEST(Split, TooSmallCorpus) {
  const auto c = small_corpus();
  EXPECT_THROW(split_semi_supervised(c.examples, 0.5, 30, 1), SplitError);
  EXPECT_THROW(split_semi_supervised(c.examples, 0.0, 1, 1), ConfigError);
}

TEST(Split, SeedChangesPartition) {
  const auto c = small_corpus();
  const auto a = split_semi_supervised(c.examples, 0.05, 4, 1);
  const auto b = split_semi_supervised(c.examples, 0.05, 4, 1);
  const auto d = split_semi_supervised(c.examples, 0.05, 4, 2);
  EXPECT_EQ(a.labeled.front().id, b.labeled.front().id);
  std::vector<std::size_t> ia, id;
  for (const auto& e : a.labeled) ia.push_back(e.id);
  for (const auto& e : d.labeled) id.push_back(e.id);
  EXPECT_NE(ia, id);
}

TEST(Pool, ContainsEverySourceOnce) {
  DatasetBundle b;
  b.labeled.resize(3);
  b.pseudo_labeled.resize(4);
  b.pseudo_text.resize(2);
  const auto pool = build_training_pool(b, 9);
  ASSERT_EQ(pool.size(), 9u);
  std::set<std::pair<int, std::size_t>> seen;
  for (const auto& p : pool) seen.insert({static_cast<int>(p.tag), p.index});
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_STREQ(to_string(SourceTag::kPseudoText), "PSEUDO_TEXT");
}

TEST(Records, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "kest_records_test.jsonl";
  write_records(path, {{"a b", "attr0"}, {"c", std::nullopt}});
  const auto back = read_records(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text, "a b");
  EXPECT_EQ(back[0].label, "attr0");
  EXPECT_FALSE(back[1].label.has_value());
  std::filesystem::remove(path);
}

TEST(Records, MalformedLineNamesLocation) {
  const auto path = std::filesystem::temp_directory_path() / "kest_records_bad.jsonl";
  {
    std::ofstream out(path);
    out << "{\"text\": \"ok\"}\n{\"label\": \"x\"}\n";
  }
  try {
    read_records(path);
    FAIL() << "expected IntegrityError";
  } catch (const IntegrityError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Records, FromExamples) {
  const auto c = small_corpus();
  const std::vector<LabeledExample> two(c.examples.begin(), c.examples.begin() + 2);
  const auto recs = to_records(two, c);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].label, c.label_names[static_cast<std::size_t>(two[0].label)]);
  EXPECT_EQ(recs[0].text, decode(two[0].tokens, c.vocab));
  EXPECT_FALSE(to_records(two, c, false)[0].label.has_value());
}

}  // namespace
}  // namespace kest
