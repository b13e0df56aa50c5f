#include "kest/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"
#include "kest/losses.hpp"
#include "parallel.hpp"

namespace kest {

EvaluatorBundle build_evaluators(const SyntheticCorpus& corpus, const ModelConfig& model_config,
                                 const EvaluatorTraining& training) {
  std::vector<LabeledExample> all = corpus.examples;
  Rng rng = make_rng(training.seed, "evaluator-split");
  shuffle(all.begin(), all.end(), rng);
  const auto n_hold = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(training.holdout_fraction * static_cast<double>(all.size()))));
  if (n_hold >= all.size()) throw SplitError("corpus too small to hold out evaluator test data");
  const std::vector<LabeledExample> holdout(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_hold));
  const std::vector<LabeledExample> train(all.begin() + static_cast<std::ptrdiff_t>(n_hold), all.end());

  STConfig cfg;
  cfg.base_epochs = training.epochs;
  cfg.batch_size = training.batch_size;
  cfg.lr_base = training.lr;
  cfg.p_m_base = 0.5;

  DatasetBundle data;
  data.labeled = train;
  cfg.weights_base = {1.0, 0.0, 0.0};
  cfg.seed = derive_seed(training.seed, "classifier");
  ModelF classifier = train_base(data, model_config, cfg).model;

  ModelConfig lm_config = model_config;
  lm_config.num_labels = 1;
  for (auto& ex : data.labeled) ex.label = 0;
  cfg.weights_base = {0.0, 1.0, 0.0};
  cfg.seed = derive_seed(training.seed, "reference-lm");
  ModelF lm = train_base(data, lm_config, cfg).model;

  EvaluatorBundle out{std::move(classifier), std::move(lm), 0.0, 0.0};
  std::vector<int> pred, truth;
  std::vector<TokenSequence> seqs;
  for (const auto& ex : holdout) {
    const auto p = out.classifier.forward_cls(ex.tokens);
    pred.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    truth.push_back(ex.label);
    seqs.push_back(ex.tokens);
  }
  out.classifier_test_f1 = macro_f1(pred, truth, model_config.num_labels);
  out.reference_test_ppl = perplexity(out.reference_lm, seqs, std::vector<int>(seqs.size(), 0));
  return out;
}

void save_evaluators(const std::filesystem::path& dir, const EvaluatorBundle& bundle) {
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "classifier.ckpt", bundle.classifier, {{"test_macro_f1", bundle.classifier_test_f1}});
  save_checkpoint(dir / "reference_lm.ckpt", bundle.reference_lm, {{"test_ppl", bundle.reference_test_ppl}});
}

EvaluatorBundle load_evaluators(const std::filesystem::path& dir) {
  nlohmann::json m1, m2;
  auto classifier = load_checkpoint(dir / "classifier.ckpt", std::nullopt, &m1);
  auto lm = load_checkpoint(dir / "reference_lm.ckpt", std::nullopt, &m2);
  return {std::move(classifier), std::move(lm), m1.value("test_macro_f1", 0.0), m2.value("test_ppl", 0.0)};
}

void to_json(nlohmann::json& j, const EvalSettings& s) {
  j = nlohmann::json{{"samples_per_class", s.samples_per_class},
                     {"use_prompts", s.use_prompts},
                     {"prompt_fraction", s.prompt_fraction},
                     {"decode", s.decode}};
}

void from_json(const nlohmann::json& j, EvalSettings& s) {
  EvalSettings d;
  s.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  s.use_prompts = j.value("use_prompts", d.use_prompts);
  s.prompt_fraction = j.value("prompt_fraction", d.prompt_fraction);
  s.decode = j.value("decode", d.decode);
}

std::vector<Generation> generate_samples(const ModelF& model, const EvalSettings& settings, std::uint64_t seed,
                                         const std::vector<LabeledExample>* prompts) {
  const int k = model.config().num_labels;
  const auto per = static_cast<std::size_t>(settings.samples_per_class);
  std::vector<Generation> out(per * static_cast<std::size_t>(k));
  detail::parallel_for(out.size(), settings.threads, [&](std::size_t i) {
    const int label = static_cast<int>(i / per);
    Rng rng = make_rng(seed, "eval-generate", i);
    std::vector<TokenId> prompt;
    if (settings.use_prompts && prompts && !prompts->empty()) {
      const auto content = (*prompts)[i % prompts->size()].tokens.content();
      const auto n = static_cast<std::size_t>(std::floor(settings.prompt_fraction * static_cast<double>(content.size())));
      prompt.assign(content.begin(), content.begin() + static_cast<std::ptrdiff_t>(
                                                           std::min<std::size_t>(n, settings.decode.max_len - 1)));
    }
    out[i] = {generate_ag(model, label, prompt, settings.decode, rng), label};
  });
  return out;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"model_ppl", r.model_ppl}, {"output_ppl", r.output_ppl}, {"macro_f1", r.macro_f1},
                     {"dist", r.dist},           {"dist_n", r.dist_n},         {"self_bleu", r.self_bleu},
                     {"oracle_control_acc", r.oracle_control_acc}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.model_ppl = j.at("model_ppl").get<double>();
  r.output_ppl = j.at("output_ppl").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.dist = j.at("dist").get<double>();
  r.dist_n = j.at("dist_n").get<std::array<double, 4>>();
  r.self_bleu = j.at("self_bleu").get<double>();
  r.oracle_control_acc = j.at("oracle_control_acc").get<double>();
}

double perplexity(const ModelF& model, const std::vector<TokenSequence>& sequences, const std::vector<int>& labels) {
  if (sequences.size() != labels.size()) throw IntegrityError("perplexity: sequences and labels differ in size");
  double nll = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    if (s.length < 2) continue;
    // Log-softmax in double so a flat model scores exactly log V.
    nll += loss_ag_value(model.forward_ag(s, labels[i]).cast<double>(), s);
    tokens += static_cast<std::size_t>(s.length - 1);
  }
  if (tokens == 0) throw PreconditionError("perplexity over zero tokens");
  return std::exp(nll / static_cast<double>(tokens));
}

double model_ppl(const ModelF& model, const std::vector<LabeledExample>& test) {
  if (test.empty()) throw PreconditionError("model_ppl needs a non-empty test set");
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;
  for (const auto& ex : test) {
    seqs.push_back(ex.tokens);
    labels.push_back(ex.label);
  }
  return perplexity(model, seqs, labels);
}

double output_ppl(const ModelF& reference_lm, const std::vector<Generation>& generations) {
  std::vector<TokenSequence> seqs;
  for (const auto& g : generations) {
    if (g.tokens.content_length() == 0) {
      diag::warn("output_ppl.empty");
      continue;
    }
    seqs.push_back(g.tokens);
  }
  if (seqs.empty()) throw PreconditionError("output_ppl: no non-empty generations");
  return perplexity(reference_lm, seqs, std::vector<int>(seqs.size(), 0));
}

double macro_f1(const std::vector<int>& predicted, const std::vector<int>& truth, int num_classes) {
  if (predicted.size() != truth.size()) throw IntegrityError("macro_f1: prediction/truth size mismatch");
  double total = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool p = predicted[i] == c;
      const bool t = truth[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    if (tp + fn == 0) diag::warn("control_f1.absent_class");
    if (tp == 0) continue;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    total += 2.0 * precision * recall / (precision + recall);
  }
  return total / num_classes;
}

double control_f1(const ModelF& evaluator, const std::vector<Generation>& generations, int num_classes) {
  std::vector<int> pred, truth;
  for (const auto& g : generations) {
    const auto p = evaluator.forward_cls(g.tokens);
    pred.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    truth.push_back(g.label);
  }
  return macro_f1(pred, truth, num_classes);
}

double dist_n(const std::vector<std::vector<TokenId>>& texts, int n) {
  if (n < 1) throw ConfigError("dist_n needs n >= 1");
  std::set<std::vector<TokenId>> distinct;
  std::size_t total = 0;
  for (const auto& t : texts) {
    if (static_cast<int>(t.size()) < n) {
      diag::warn("dist_n.short");
      continue;
    }
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
      distinct.emplace(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  if (total == 0) throw PreconditionError("dist_n over an empty n-gram pool");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double dist(const std::vector<std::vector<TokenId>>& texts) {
  double log_sum = 0;
  for (int n = 1; n <= 4; ++n) log_sum += std::log(dist_n(texts, n));
  return std::exp(log_sum / 4.0);
}

namespace {

using NgramCounts = std::map<std::vector<TokenId>, int>;

NgramCounts count_ngrams(const std::vector<TokenId>& t, int n) {
  NgramCounts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++c[std::vector<TokenId>(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return c;
}

constexpr double kBleuEpsilon = 1e-9;

}  // namespace

double bleu(const std::vector<TokenId>& hypothesis, const std::vector<std::vector<TokenId>>& references) {
  if (references.empty()) throw PreconditionError("bleu needs at least one reference");
  double log_p = 0;
  for (int n = 2; n <= 4; ++n) {
    const auto hyp = count_ngrams(hypothesis, n);
    NgramCounts max_ref;
    for (const auto& r : references) {
      for (const auto& [gram, c] : count_ngrams(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    int clipped = 0;
    int total = 0;
    for (const auto& [gram, c] : hyp) {
      total += c;
      const auto it = max_ref.find(gram);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    const double p = total > 0 && clipped > 0 ? static_cast<double>(clipped) / total : kBleuEpsilon;
    log_p += std::log(p);
  }
  const auto c = static_cast<double>(hypothesis.size());
  double r = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (const auto& ref : references) {
    const auto len = static_cast<double>(ref.size());
    const double gap = std::abs(len - c);
    if (gap < best_gap || (gap == best_gap && len < r)) {
      best_gap = gap;
      r = len;
    }
  }
  const double bp = c == 0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
  return bp * std::exp(log_p / 3.0);
}

double self_bleu(const std::vector<std::vector<TokenId>>& texts) {
  if (texts.size() < 2) throw PreconditionError("self_bleu needs at least 2 generations");
  double total = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<std::vector<TokenId>> refs;
    refs.reserve(texts.size() - 1);
    for (std::size_t j = 0; j < texts.size(); ++j) {
      if (j != i) refs.push_back(texts[j]);
    }
    total += bleu(texts[i], refs);
  }
  return total / static_cast<double>(texts.size());
}

double oracle_control_acc(const std::vector<Generation>& generations,
                          const std::vector<std::vector<TokenId>>& lexicons) {
  if (generations.empty()) throw PreconditionError("oracle_control_acc needs generations");
  std::size_t correct = 0;
  for (const auto& g : generations) {
    std::vector<int> counts(lexicons.size(), 0);
    for (TokenId id : g.tokens.content()) {
      for (std::size_t k = 0; k < lexicons.size(); ++k) {
        if (std::binary_search(lexicons[k].begin(), lexicons[k].end(), id)) ++counts[k];
      }
    }
    const int own = counts.at(static_cast<std::size_t>(g.label));
    bool strict = true;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (static_cast<int>(k) != g.label && counts[k] >= own) strict = false;
    }
    correct += strict;
  }
  return static_cast<double>(correct) / static_cast<double>(generations.size());
}

MetricsReport evaluate(const ModelF& model, const EvaluatorBundle& evaluators, const SyntheticCorpus& corpus,
                       const std::vector<LabeledExample>& test, const EvalSettings& settings, std::uint64_t seed,
                       std::vector<Generation>* generations_out) {
  const auto gens = generate_samples(model, settings, seed, &test);
  std::vector<std::vector<TokenId>> texts;
  for (const auto& g : gens) texts.push_back(g.tokens.content());
  MetricsReport r;
  r.model_ppl = model_ppl(model, test);
  r.output_ppl = output_ppl(evaluators.reference_lm, gens);
  r.macro_f1 = control_f1(evaluators.classifier, gens, model.config().num_labels);
  for (int n = 1; n <= 4; ++n) r.dist_n[static_cast<std::size_t>(n - 1)] = dist_n(texts, n);
  r.dist = dist(texts);
  r.self_bleu = self_bleu(texts);
  r.oracle_control_acc = oracle_control_acc(gens, corpus.lexicons);
  if (generations_out) *generations_out = gens;
  return r;
}

std::vector<std::string> metrics_columns() {
  return {"model_ppl", "output_ppl", "macro_f1", "dist", "dist_1", "dist_2", "dist_3", "dist_4", "self_bleu",
          "oracle_control_acc"};
}

std::vector<double> metrics_values(const MetricsReport& r) {
  return {r.model_ppl, r.output_ppl, r.macro_f1, r.dist, r.dist_n[0], r.dist_n[1], r.dist_n[2], r.dist_n[3],
          r.self_bleu, r.oracle_control_acc};
}

}  // namespace kest
