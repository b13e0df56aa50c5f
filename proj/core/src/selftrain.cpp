#include "kest/selftrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"
#include "parallel.hpp"

namespace kest {

namespace {

struct ModeName {
  STMode mode;
  const char* name;
};

constexpr ModeName kModeNames[] = {
    {STMode::kKest, "KEST"},
    {STMode::kKestHard, "KEST_HARD"},
    {STMode::kPt, "PT"},
    {STMode::kPtNoise, "PT_NOISE"},
    {STMode::kPtNoisePl, "PT_NOISE_PL"},
    {STMode::kPtSelectPl, "PT_SELECT_PL"},
    {STMode::kSupervised, "SUPERVISED"},
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool uses_pseudo_labels(STMode m) {
  return m == STMode::kKest || m == STMode::kKestHard || m == STMode::kPtNoisePl || m == STMode::kPtSelectPl;
}

bool uses_fixed_labeler(STMode m) { return m == STMode::kPtNoisePl || m == STMode::kPtSelectPl; }

bool uses_noise(STMode m) {
  return m == STMode::kPtNoise || m == STMode::kPtNoisePl || m == STMode::kPtSelectPl;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw TrainingAbort(std::string("non-finite ") + what + " loss");
}

ag::Var<float> mean_of(ag::Tape<float>& tape, const std::vector<ag::Var<float>>& parts) {
  if (parts.empty()) return tape.constant(Matrix<float>::Zero(1, 1));
  ag::Var<float> acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = ag::add(acc, parts[i]);
  return ag::scale(acc, 1.0f / static_cast<float>(parts.size()));
}

struct ItemView {
  const TokenSequence* tokens;
  int label;
};

ItemView resolve(const DatasetBundle& bundle, const PoolItem& item) {
  switch (item.tag) {
    case SourceTag::kReal: {
      const auto& ex = bundle.labeled.at(item.index);
      return {&ex.tokens, ex.label};
    }
    case SourceTag::kPseudoLabel: {
      const auto& ex = bundle.pseudo_labeled.at(item.index);
      return {&ex.tokens, ex.label};
    }
    case SourceTag::kPseudoText: {
      const auto& pt = bundle.pseudo_text.at(item.index);
      return {&pt.hard_tokens, pt.label};
    }
  }
  throw IntegrityError("unknown source tag");
}

}  // namespace

std::string to_string(STMode mode) {
  for (const auto& m : kModeNames) {
    if (m.mode == mode) return m.name;
  }
  return "?";
}

STMode parse_mode(const std::string& name) {
  for (const auto& m : kModeNames) {
    if (name == m.name) return m.mode;
  }
  std::string known;
  for (const auto& m : kModeNames) known += std::string(known.empty() ? "" : ", ") + m.name;
  throw ConfigError("unknown self-training mode '" + name + "' (expected one of " + known + ")");
}

std::vector<STMode> all_modes() {
  std::vector<STMode> out;
  for (const auto& m : kModeNames) out.push_back(m.mode);
  return out;
}

void NoiseConfig::validate() const {
  if (!(drop_rate >= 0.0 && drop_rate <= 1.0)) throw ConfigError("noise.drop_rate must be in [0, 1]");
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("noise.mask_rate must be in [0, 1]");
  if (!(shuffle_k >= 0.0)) throw ConfigError("noise.shuffle_k must be >= 0");
}

void SelectConfig::validate() const {
  if (!(overgen_factor >= 1.0)) throw ConfigError("select.overgen_factor must be >= 1");
  if (mc_passes < 2) throw ConfigError("select.mc_passes must be >= 2");
  if (!(epsilon > 0.0)) throw ConfigError("select.epsilon must be > 0");
}

void STConfig::validate(int seq_max_len) const {
  for (double p : {p_m_base, p_m_st}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("selftrain mask ratios must be in [0, 1]");
  }
  if (!(ratio_pt >= 0.0)) throw ConfigError("selftrain.ratio_pt must be >= 0");
  if (max_epochs < 0) throw ConfigError("selftrain.max_epochs must be >= 0");
  if (base_epochs < 1) throw ConfigError("selftrain.base_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("selftrain.batch_size must be >= 1");
  if (!(lr_base > 0.0) || !(lr_st > 0.0)) throw ConfigError("selftrain learning rates must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("selftrain.weight_decay must be >= 0");
  if (kernel_m < 0) throw ConfigError("selftrain.kernel_m must be >= 0");
  if (mmd_min_group < 2) throw ConfigError("selftrain.mmd_min_group must be >= 2");
  if (!(prompt_fraction >= 0.0 && prompt_fraction < 1.0)) throw ConfigError("selftrain.prompt_fraction must be in [0, 1)");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  weights_base.validate();
  weights_st.validate();
  noise.validate();
  select.validate();
  pt_decode.validate(seq_max_len);
}

void to_json(nlohmann::json& j, const NoiseConfig& c) {
  j = nlohmann::json{{"drop_rate", c.drop_rate}, {"mask_rate", c.mask_rate}, {"shuffle_k", c.shuffle_k}};
}
void from_json(const nlohmann::json& j, NoiseConfig& c) {
  NoiseConfig d;
  c.drop_rate = j.value("drop_rate", d.drop_rate);
  c.mask_rate = j.value("mask_rate", d.mask_rate);
  c.shuffle_k = j.value("shuffle_k", d.shuffle_k);
}
void to_json(nlohmann::json& j, const SelectConfig& c) {
  j = nlohmann::json{{"overgen_factor", c.overgen_factor}, {"mc_passes", c.mc_passes}, {"epsilon", c.epsilon}};
}
void from_json(const nlohmann::json& j, SelectConfig& c) {
  SelectConfig d;
  c.overgen_factor = j.value("overgen_factor", d.overgen_factor);
  c.mc_passes = j.value("mc_passes", d.mc_passes);
  c.epsilon = j.value("epsilon", d.epsilon);
}

void to_json(nlohmann::json& j, const STConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"p_m_base", c.p_m_base},
                     {"p_m_st", c.p_m_st},
                     {"ratio_pt", c.ratio_pt},
                     {"max_epochs", c.max_epochs},
                     {"weights_base", c.weights_base},
                     {"weights_st", c.weights_st},
                     {"noise", c.noise},
                     {"select", c.select},
                     {"base_epochs", c.base_epochs},
                     {"batch_size", c.batch_size},
                     {"lr_base", c.lr_base},
                     {"lr_st", c.lr_st},
                     {"weight_decay", c.weight_decay},
                     {"kernel_m", c.kernel_m},
                     {"mmd_min_group", c.mmd_min_group},
                     {"prompt_fraction", c.prompt_fraction},
                     {"pt_decode", c.pt_decode},
                     {"freeze_embedding", c.freeze_embedding}};
}

void from_json(const nlohmann::json& j, STConfig& c) {
  STConfig d;
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.p_m_base = j.value("p_m_base", d.p_m_base);
  c.p_m_st = j.value("p_m_st", d.p_m_st);
  c.ratio_pt = j.value("ratio_pt", d.ratio_pt);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.weights_base = j.value("weights_base", d.weights_base);
  c.weights_st = j.value("weights_st", d.weights_st);
  c.noise = j.value("noise", d.noise);
  c.select = j.value("select", d.select);
  c.base_epochs = j.value("base_epochs", d.base_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_base = j.value("lr_base", d.lr_base);
  c.lr_st = j.value("lr_st", d.lr_st);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.kernel_m = j.value("kernel_m", d.kernel_m);
  c.mmd_min_group = j.value("mmd_min_group", d.mmd_min_group);
  c.prompt_fraction = j.value("prompt_fraction", d.prompt_fraction);
  c.pt_decode = j.value("pt_decode", d.pt_decode);
  c.freeze_embedding = j.value("freeze_embedding", d.freeze_embedding);
}

// --- base phase -------------------------------------------------------------

double joint_loss(const ModelF& model, const std::vector<LabeledExample>& examples, const LossWeights& weights,
                  double p_m, std::uint64_t seed) {
  if (examples.empty()) throw PreconditionError("joint_loss on an empty set");
  double total = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    ag::Tape<float> tape(false);
    Rng rng = make_rng(seed, "joint-loss-mask", i);
    const auto mask = sample_mask(ex.tokens.content_length(), p_m, rng);
    const double lc = weights.c > 0 ? loss_cls(model.forward_cls(tape, ex.tokens), ex.label).scalar() : 0.0;
    const double la = weights.ag > 0 ? loss_ag(model.forward_ag(tape, ex.tokens, ex.label), ex.tokens).scalar() : 0.0;
    const double ln =
        weights.nag > 0
            ? loss_nag(model.forward_nag(tape, apply_mask(ex.tokens, mask), ex.label), ex.tokens, mask).scalar()
            : 0.0;
    total += loss_joint(lc, la, ln, weights);
  }
  return total / static_cast<double>(examples.size());
}

BaseResult train_base(const DatasetBundle& bundle, const ModelConfig& model_config, const STConfig& config) {
  if (bundle.labeled.empty()) throw PreconditionError("train_base needs a non-empty D_l");
  const auto t0 = std::chrono::steady_clock::now();
  ModelF model = ModelF::initialized(model_config, derive_seed(config.seed, "base-init"));
  AdamW<float> opt(model.parameters(), {0.9, 0.999, 1e-8, config.weight_decay});

  const std::size_t n = bundle.labeled.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const double total_steps = static_cast<double>(steps_per_epoch) * config.base_epochs;
  const double warmup = static_cast<double>(steps_per_epoch);

  BaseResult result{model, {}, {}, 0, 0.0, 0, 0};
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;
  std::vector<std::size_t> order(n);
  for (int epoch = 1; epoch <= config.base_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng = make_rng(config.seed, "base-order", static_cast<std::uint64_t>(epoch));
    shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      Rng drop = make_rng(config.seed, "base-dropout", step);
      Rng mask_rng = make_rng(config.seed, "base-mask", step);
      ForwardOptions fo{true, &drop};
      ag::Tape<float> tape;
      std::vector<ag::Var<float>> lcs, lags, lnags;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) {
        const auto& ex = bundle.labeled[order[k]];
        const auto mask = sample_mask(ex.tokens.content_length(), config.p_m_base, mask_rng);
        // Zero-weighted terms are skipped (evaluator and reference-LM training).
        if (config.weights_base.c > 0) lcs.push_back(loss_cls(model.forward_cls(tape, ex.tokens, fo), ex.label));
        if (config.weights_base.ag > 0) {
          lags.push_back(loss_ag(model.forward_ag(tape, ex.tokens, ex.label, fo), ex.tokens));
        }
        if (config.weights_base.nag > 0) {
          lnags.push_back(
              loss_nag(model.forward_nag(tape, apply_mask(ex.tokens, mask), ex.label, fo), ex.tokens, mask));
        }
      }
      auto loss = loss_joint(mean_of(tape, lcs), mean_of(tape, lags), mean_of(tape, lnags), config.weights_base);
      check_finite(loss.scalar(), "base-phase");
      epoch_loss += loss.scalar();
      model.zero_grad();
      tape.backward(loss);
      // Linear warm-up over the first epoch, then linear decay.
      const double s = static_cast<double>(step);
      const double scale = s < warmup ? (s + 1.0) / warmup : std::max(0.0, (total_steps - s) / (total_steps - warmup));
      opt.step(config.lr_base * scale);
      ++step;
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    if (!bundle.validation.empty()) {
      const double v = joint_loss(model, bundle.validation, config.weights_base, config.p_m_base,
                                  derive_seed(config.seed, "validation"));
      check_finite(v, "validation");
      result.validation_loss.push_back(v);
      if (v < best_val) {
        best_val = v;
        result.model = model;
        result.best_epoch = epoch;
      }
    }
  }
  if (bundle.validation.empty()) {
    result.model = model;
    result.best_epoch = config.base_epochs;
  }
  result.model.zero_grad();
  result.forward_passes_ag = model.ag_passes();
  result.forward_passes_nag = model.nag_passes();
  result.wall_clock_s = seconds_since(t0);
  return result;
}

void to_json(nlohmann::json& j, const BaseResult& r) {
  j = nlohmann::json{{"train_loss", r.train_loss},
                     {"validation_loss", r.validation_loss},
                     {"best_epoch", r.best_epoch},
                     {"wall_clock_s", r.wall_clock_s},
                     {"forward_passes_ag", r.forward_passes_ag},
                     {"forward_passes_nag", r.forward_passes_nag}};
}

BaseResult base_result_from_json(const nlohmann::json& j, ModelF model) {
  BaseResult r{std::move(model), {}, {}, 0, 0.0, 0, 0};
  r.train_loss = j.at("train_loss").get<std::vector<double>>();
  r.validation_loss = j.at("validation_loss").get<std::vector<double>>();
  r.best_epoch = j.at("best_epoch").get<int>();
  r.wall_clock_s = j.at("wall_clock_s").get<double>();
  r.forward_passes_ag = j.at("forward_passes_ag").get<std::uint64_t>();
  r.forward_passes_nag = j.at("forward_passes_nag").get<std::uint64_t>();
  return r;
}

// --- pseudo data ------------------------------------------------------------

std::vector<LabeledExample> pseudo_label(const ModelF& model, const std::vector<UnlabeledExample>& unlabeled,
                                         int threads) {
  std::vector<LabeledExample> out(unlabeled.size());
  detail::parallel_for(unlabeled.size(), threads, [&](std::size_t i) {
    const auto probs = model.forward_cls(unlabeled[i].tokens);
    const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
    out[i] = {unlabeled[i].tokens, static_cast<int>(best), unlabeled[i].id};
  });
  return out;
}

std::vector<LabeledExample> sample_pseudo_subset(const std::vector<LabeledExample>& candidates, std::size_t count,
                                                 int num_labels, std::uint64_t seed) {
  if (count == 0) return {};
  if (candidates.empty()) throw PreconditionError("cannot sample pseudo-text sources from an empty set");
  Rng rng = make_rng(seed, "d-pseudo");
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(num_labels));
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    by_label.at(static_cast<std::size_t>(candidates[i].label)).push_back(i);
  }
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < by_label.size(); ++k) {
    if (!by_label[k].empty()) present.push_back(k);
  }
  // Equal share per represented label; the remainder goes to a random
  // subset of labels.
  std::vector<std::size_t> quota(by_label.size(), 0);
  for (std::size_t k : present) quota[k] = count / present.size();
  std::vector<std::size_t> extra = present;
  shuffle(extra.begin(), extra.end(), rng);
  for (std::size_t r = 0; r < count % present.size(); ++r) ++quota[extra[r]];

  std::vector<LabeledExample> out;
  for (std::size_t k : present) {
    auto pool = by_label[k];
    shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t q = 0; q < quota[k]; ++q) {
      // Without replacement while the label pool lasts, then cycle.
      out.push_back(candidates[pool[q % pool.size()]]);
    }
  }
  return out;
}

std::vector<PseudoTextItem> pseudo_text(const ModelF& model, const std::vector<LabeledExample>& d_pseudo, double p_m,
                                        bool soft, std::uint64_t seed, double top_p, int threads) {
  std::vector<PseudoTextItem> out(d_pseudo.size());
  detail::parallel_for(d_pseudo.size(), threads, [&](std::size_t i) {
    const auto& src = d_pseudo[i];
    Rng rng = make_rng(seed, "pseudo-text", i);
    const auto mask = sample_mask(src.tokens.content_length(), p_m, rng);
    out[i] = generate_nag(model, src.tokens, mask, src.label, rng, soft, top_p);
    out[i].source_example_id = src.id;
  });
  return out;
}

TokenSequence noise_corrupt(const TokenSequence& tokens, const NoiseConfig& noise, Rng& rng) {
  const auto content = tokens.content();
  if (content.empty()) return tokens;
  std::vector<TokenId> kept;
  for (TokenId t : content) {
    if (!bernoulli(rng, noise.drop_rate)) kept.push_back(t);
  }
  if (kept.empty()) kept.push_back(content[uniform_index(rng, content.size())]);

  std::vector<std::pair<double, std::size_t>> keys;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    keys.emplace_back(static_cast<double>(i) + uniform01(rng) * noise.shuffle_k, i);
  }
  std::stable_sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<TokenId> shuffled;
  for (const auto& k : keys) shuffled.push_back(kept[k.second]);

  for (auto& t : shuffled) {
    if (bernoulli(rng, noise.mask_rate)) t = special::kMask;
  }
  return TokenSequence::from_content(shuffled, tokens.max_len());
}

double bald_uncertainty(const ModelF& model, const TokenSequence& tokens, int passes, Rng& rng) {
  if (passes < 2) throw ConfigError("BALD needs at least 2 Monte-Carlo passes");
  auto entropy = [](const std::vector<double>& p) {
    double h = 0;
    for (double v : p) {
      if (v > 0) h -= v * std::log(v);
    }
    return h;
  };
  std::vector<double> mean;
  double mean_entropy = 0;
  for (int t = 0; t < passes; ++t) {
    const auto p = model.forward_cls(tokens, ForwardOptions{true, &rng});
    if (mean.empty()) mean.assign(p.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k] / passes;
    mean_entropy += entropy(p) / passes;
  }
  return entropy(mean) - mean_entropy;
}

double selection_score(double confidence, double uncertainty, double epsilon) {
  return confidence + epsilon / std::max(uncertainty, 1e-12);
}

namespace {

/// AG pseudo text for the PT baselines: prompts are the leading share of D_l
/// items visited in a seeded order.
std::vector<PseudoTextItem> ag_pseudo_text(const ModelF& model, const std::vector<LabeledExample>& labeled,
                                           std::size_t count, const STConfig& config, std::uint64_t seed,
                                           bool noisy) {
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), 0);
  Rng order_rng = make_rng(seed, "pt-order");
  shuffle(order.begin(), order.end(), order_rng);
  std::vector<PseudoTextItem> out(count);
  detail::parallel_for(count, config.threads, [&](std::size_t i) {
    const auto& src = labeled[order[i % order.size()]];
    Rng rng = make_rng(seed, "pt-generate", i);
    const auto content = src.tokens.content();
    auto n_prompt = static_cast<std::size_t>(std::floor(config.prompt_fraction * static_cast<double>(content.size())));
    n_prompt = std::min<std::size_t>(n_prompt, static_cast<std::size_t>(std::max(0, config.pt_decode.max_len - 1)));
    const std::vector<TokenId> prompt(content.begin(), content.begin() + static_cast<std::ptrdiff_t>(n_prompt));
    auto tokens = generate_ag(model, src.label, prompt, config.pt_decode, rng);
    if (noisy) tokens = noise_corrupt(tokens, config.noise, rng);
    PseudoTextItem item;
    item.hard_tokens = tokens;
    item.masked_input = tokens;
    item.label = src.label;
    item.source_example_id = src.id;
    out[i] = std::move(item);
  });
  return out;
}

std::vector<PseudoTextItem> select_pseudo_text(const ModelF& labeler, std::vector<PseudoTextItem> candidates,
                                               std::size_t keep, const STConfig& config, std::uint64_t seed) {
  std::vector<double> score(candidates.size());
  detail::parallel_for(candidates.size(), config.threads, [&](std::size_t i) {
    const auto probs = labeler.forward_cls(candidates[i].hard_tokens);
    const double conf = *std::max_element(probs.begin(), probs.end());
    Rng rng = make_rng(seed, "bald", i);
    const double u = bald_uncertainty(labeler, candidates[i].hard_tokens, config.select.mc_passes, rng);
    score[i] = selection_score(conf, u, config.select.epsilon);
  });
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::vector<PseudoTextItem> out;
  for (std::size_t r = 0; r < std::min(keep, order.size()); ++r) out.push_back(std::move(candidates[order[r]]));
  return out;
}

}  // namespace

// --- kernel-loss plumbing ---------------------------------------------------

template <typename T>
ag::Var<T> nag_soft_output(ag::Tape<T>& tape, const Model<T>& model, const PseudoTextItem& item,
                           const ForwardOptions& opts) {
  const int len = item.masked_input.length;
  const int vocab = model.config().vocab_size;
  auto logits = model.forward_nag(tape, item.masked_input, item.label, opts);
  ag::SoftmaxMask sm;
  sm.banned_columns = banned_interior_tokens(vocab, true);
  auto probs = ag::softmax_rows(logits, sm);
  Matrix<T> keep = Matrix<T>::Zero(len, vocab);
  Matrix<T> fixed = Matrix<T>::Zero(len, vocab);
  for (int pos = 0; pos < len; ++pos) {
    if (item.mask.masked_position(pos)) {
      keep.row(pos).setOnes();
    } else {
      fixed(pos, item.masked_input.ids[static_cast<std::size_t>(pos)]) = T(1);
    }
  }
  auto rows = ag::add(ag::mul_const(probs, keep), tape.constant(std::move(fixed)));
  return pad_soft_rows(soft_embed(tape, rows, model), model);
}

template <typename T>
ag::Var<T> ag_soft_output(ag::Tape<T>& tape, const Model<T>& model, const PseudoTextItem& item,
                          const ForwardOptions& opts) {
  const auto& tokens = item.hard_tokens;
  const int len = tokens.length;
  const int vocab = model.config().vocab_size;
  auto logits = model.forward_ag(tape, tokens, item.label, opts);
  ag::SoftmaxMask sm;
  sm.banned_columns = banned_interior_tokens(vocab, false);
  auto next = ag::softmax_rows(ag::slice_rows(logits, 0, len - 1), sm);
  Matrix<T> bos = Matrix<T>::Zero(1, vocab);
  bos(0, tokens.ids[0]) = T(1);
  auto rows = ag::concat_rows<T>({tape.constant(std::move(bos)), next});
  return pad_soft_rows(soft_embed(tape, rows, model), model);
}

template ag::Var<float> nag_soft_output(ag::Tape<float>&, const Model<float>&, const PseudoTextItem&,
                                        const ForwardOptions&);
template ag::Var<double> nag_soft_output(ag::Tape<double>&, const Model<double>&, const PseudoTextItem&,
                                         const ForwardOptions&);
template ag::Var<float> ag_soft_output(ag::Tape<float>&, const Model<float>&, const PseudoTextItem&,
                                       const ForwardOptions&);
template ag::Var<double> ag_soft_output(ag::Tape<double>&, const Model<double>&, const PseudoTextItem&,
                                        const ForwardOptions&);

GroupLoss mmd_group_loss(ag::Tape<float>& tape, const ModelF& model, const std::vector<PseudoTextItem>& pseudo_text,
                         const std::vector<std::size_t>& group, int kernel_m, const ForwardOptions& opts,
                         const std::function<void(MmdBatchDump&&)>& dump) {
  if (group.size() < 2) throw PreconditionError("kernel loss needs a group of at least 2 items");
  std::vector<Matrix<float>> targets;
  std::vector<ag::Var<float>> o_ag, o_nag;
  const int label = pseudo_text.at(group.front()).label;
  for (std::size_t idx : group) {
    const auto& item = pseudo_text.at(idx);
    if (item.label != label) throw IntegrityError("kernel-loss group mixes labels");
    if (!item.soft) throw IntegrityError("kernel loss on a pseudo-text item without a soft sequence");
    targets.push_back(item.soft->matrix);
    o_nag.push_back(nag_soft_output(tape, model, item, opts));
    o_ag.push_back(ag_soft_output(tape, model, item, opts));
  }
  auto score = [&](const std::vector<ag::Var<float>>& d_o, const char* branch) {
    std::vector<Matrix<float>> values;
    for (const auto& v : d_o) values.push_back(v.value());
    const auto bank = median_bandwidths(values, targets, kernel_m);
    auto loss = loss_mmd(d_o, targets, bank);
    if (dump) {
      MmdBatchDump d;
      d.branch = branch;
      d.label = label;
      for (const auto& v : values) d.d_o.push_back(v.cast<double>());
      for (const auto& t : targets) d.d_pt.push_back(t.cast<double>());
      d.bandwidths = bank;
      d.value = static_cast<double>(loss.scalar());
      dump(std::move(d));
    }
    return loss;
  };
  return {score(o_ag, "ag"), score(o_nag, "nag")};
}

BatchLoss batch_loss(ag::Tape<float>& tape, const ModelF& model, const DatasetBundle& bundle,
                     std::span<const PoolItem> items, const std::vector<std::vector<std::size_t>>& mmd_groups,
                     const STConfig& config, bool soft_pseudo_text, Rng& mask_rng, Rng* dropout_rng,
                     const std::function<void(MmdBatchDump&&)>& dump) {
  const ForwardOptions fo{dropout_rng != nullptr, dropout_rng};
  const LossWeights& w = config.weights_st;
  std::vector<ag::Var<float>> lcs, lags, lnags;
  for (const auto& it : items) {
    const auto view = resolve(bundle, it);
    lcs.push_back(loss_cls(model.forward_cls(tape, *view.tokens, fo), view.label));
    if (it.tag == SourceTag::kPseudoText && soft_pseudo_text) continue;
    lags.push_back(loss_ag(model.forward_ag(tape, *view.tokens, view.label, fo), *view.tokens));
    const auto mask = sample_mask(view.tokens->content_length(), config.p_m_st, mask_rng);
    lnags.push_back(
        loss_nag(model.forward_nag(tape, apply_mask(*view.tokens, mask), view.label, fo), *view.tokens, mask));
  }
  BatchLoss out;
  std::vector<ag::Var<float>> terms;
  if (!lcs.empty()) terms.push_back(ag::scale(mean_of(tape, lcs), static_cast<float>(w.c)));
  if (!lags.empty()) terms.push_back(ag::scale(mean_of(tape, lags), static_cast<float>(w.ag)));
  if (!lnags.empty()) terms.push_back(ag::scale(mean_of(tape, lnags), static_cast<float>(w.nag)));
  for (const auto& t : terms) out.ce += static_cast<double>(t.scalar());
  for (const auto& g : mmd_groups) {
    auto gl = mmd_group_loss(tape, model, bundle.pseudo_text, g, config.kernel_m, fo, dump);
    auto weighted = ag::add(ag::scale(gl.ag, static_cast<float>(w.ag)), ag::scale(gl.nag, static_cast<float>(w.nag)));
    out.mmd += static_cast<double>(weighted.scalar());
    terms.push_back(weighted);
    ++out.groups;
  }
  if (terms.empty()) {
    out.total = tape.constant(Matrix<float>::Zero(1, 1));
    return out;
  }
  out.total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = ag::add(out.total, terms[i]);
  return out;
}

// --- self-training epochs ---------------------------------------------------

SelfTrainer::SelfTrainer(ModelF& model, const STConfig& config, const ModelF* labeler)
    : model_(model),
      config_(config),
      labeler_(labeler),
      optimizer_(model.parameters(), {0.9, 0.999, 1e-8, config.weight_decay}) {
  if (uses_fixed_labeler(config.mode) && labeler == nullptr) {
    throw PreconditionError(to_string(config.mode) + " needs a fixed pseudo labeler");
  }
}

EpochRecord SelfTrainer::epoch(DatasetBundle& bundle, int epoch, const STHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const STMode mode = config_.mode;
  if (mode == STMode::kSupervised) throw PreconditionError("SUPERVISED mode has no self-training epochs");
  const auto ep = static_cast<std::uint64_t>(epoch);
  const std::uint64_t seed = derive_seed(config_.seed, "st-epoch", ep);

  model_.reset_counters();
  const ModelF snapshot = model_;  // frozen epoch-1 model

  EpochRecord rec;
  rec.epoch = epoch;
  rec.mode = mode;
  rec.snapshot_checksum = snapshot.checksum();

  // (a) pseudo labels
  if (uses_fixed_labeler(mode)) {
    bundle.pseudo_labeled = pseudo_label(*labeler_, bundle.unlabeled, config_.threads);
  } else if (uses_pseudo_labels(mode)) {
    bundle.pseudo_labeled = pseudo_label(snapshot, bundle.unlabeled, config_.threads);
  } else {
    bundle.pseudo_labeled.clear();
  }
  if (!bundle.pseudo_labeled.empty()) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < bundle.pseudo_labeled.size(); ++i) {
      correct += bundle.pseudo_labeled[i].label == bundle.hidden_labels.at(i);
    }
    rec.pl_accuracy = static_cast<double>(correct) / static_cast<double>(bundle.pseudo_labeled.size());
  }

  // (b) pseudo text
  const auto n_pt = static_cast<std::size_t>(std::llround(config_.ratio_pt * static_cast<double>(bundle.labeled.size())));
  const bool soft = mode == STMode::kKest;
  if (mode == STMode::kKest || mode == STMode::kKestHard) {
    std::vector<LabeledExample> candidates = bundle.labeled;
    candidates.insert(candidates.end(), bundle.pseudo_labeled.begin(), bundle.pseudo_labeled.end());
    const auto d_pseudo = sample_pseudo_subset(candidates, n_pt, model_.config().num_labels, derive_seed(seed, "d-pseudo"));
    bundle.pseudo_text = pseudo_text(snapshot, d_pseudo, config_.p_m_st, soft, derive_seed(seed, "pseudo-text"),
                                     config_.pt_decode.top_p, config_.threads);
  } else if (mode == STMode::kPtSelectPl) {
    const auto over = static_cast<std::size_t>(std::ceil(config_.select.overgen_factor * static_cast<double>(n_pt)));
    auto candidates = ag_pseudo_text(snapshot, bundle.labeled, over, config_, derive_seed(seed, "pt"), true);
    bundle.pseudo_text = select_pseudo_text(*labeler_, std::move(candidates), n_pt, config_, derive_seed(seed, "select"));
  } else {
    bundle.pseudo_text = ag_pseudo_text(snapshot, bundle.labeled, n_pt, config_, derive_seed(seed, "pt"), uses_noise(mode));
  }
  bundle.check_ratios(bundle.labeled.empty() ? 0 : static_cast<int>(bundle.unlabeled.size() / bundle.labeled.size()),
                      config_.ratio_pt);
  rec.pseudo_labeled = bundle.pseudo_labeled.size();
  rec.pseudo_text = bundle.pseudo_text.size();

  // (c) one pass over the pool
  const auto pool = build_training_pool(bundle, derive_seed(seed, "pool"));
  rec.pool_size = pool.size();
  const auto bs = static_cast<std::size_t>(config_.batch_size);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, (pool.size() + bs - 1) / bs);
  PseudoTextGroups groups(model_.config().num_labels, config_.mmd_min_group);
  std::function<void(MmdBatchDump&&)> dump;
  if (hooks.on_mmd) {
    dump = [&](MmdBatchDump&& d) {
      d.epoch = epoch;
      hooks.on_mmd(d);
    };
  }

  double ce_sum = 0;
  double mmd_sum = 0;
  std::size_t ce_steps = 0;
  std::uint64_t local_step = 0;
  auto optimize = [&](std::span<const PoolItem> items, const std::vector<std::vector<std::size_t>>& ready) {
    Rng drop = make_rng(seed, "dropout", local_step);
    Rng mask_rng = make_rng(seed, "mask", local_step);
    ag::Tape<float> tape;
    auto bl = batch_loss(tape, model_, bundle, items, ready, config_, soft, mask_rng, &drop, dump);
    check_finite(bl.total.scalar(), "self-training");
    if (!items.empty()) {
      ce_sum += bl.ce;
      ++ce_steps;
    }
    mmd_sum += bl.mmd;
    rec.mmd_groups += bl.groups;
    model_.zero_grad();
    tape.backward(bl.total);
    const double warm = static_cast<double>(steps_per_epoch);
    const double scale = std::min(1.0, static_cast<double>(step_ + 1) / warm);
    optimizer_.step(config_.lr_st * scale);
    ++step_;
    ++local_step;
  };

  for (std::size_t start = 0; start < pool.size(); start += bs) {
    const std::span<const PoolItem> items(pool.data() + start, std::min(bs, pool.size() - start));
    if (soft) {
      for (const auto& it : items) {
        if (it.tag == SourceTag::kPseudoText) groups.add(bundle.pseudo_text[it.index].label, it.index);
      }
    }
    optimize(items, soft ? groups.take_ready() : std::vector<std::vector<std::size_t>>{});
  }
  if (soft) {
    auto rest = groups.flush(&rec.dropped_singletons);
    if (!rest.empty()) optimize({}, rest);
  }

  rec.ce_loss = ce_steps ? ce_sum / static_cast<double>(ce_steps) : 0.0;
  rec.mmd_loss = rec.mmd_groups ? mmd_sum / static_cast<double>(rec.mmd_groups) : 0.0;
  rec.forward_passes_ag = model_.ag_passes() + snapshot.ag_passes();
  rec.forward_passes_nag = model_.nag_passes() + snapshot.nag_passes();
  rec.end_checksum = model_.checksum();
  rec.embedding_checksum = model_.embedding_checksum();
  rec.wall_clock_s = seconds_since(t0);
  if (hooks.on_epoch) hooks.on_epoch(epoch, bundle, model_);
  return rec;
}

EpochRecord kest_epoch(ModelF& model, DatasetBundle& bundle, const STConfig& config, int epoch,
                       const ModelF* labeler, const STHooks& hooks) {
  SelfTrainer trainer(model, config, labeler);
  return trainer.epoch(bundle, epoch, hooks);
}

RunResult run(const DatasetBundle& bundle, const ModelConfig& model_config, const STConfig& config,
              const BaseResult* base, const STHooks& hooks) {
  BaseResult local{ModelF(model_config), {}, {}, 0, 0.0, 0, 0};
  if (base == nullptr) {
    local = train_base(bundle, model_config, config);
    base = &local;
  }
  RunResult result{base->model, {}};
  EpochRecord base_rec;
  base_rec.epoch = 0;
  base_rec.mode = config.mode;
  base_rec.ce_loss = base->train_loss.empty() ? 0.0 : base->train_loss[static_cast<std::size_t>(std::max(0, base->best_epoch - 1))];
  base_rec.wall_clock_s = base->wall_clock_s;
  base_rec.forward_passes_ag = base->forward_passes_ag;
  base_rec.forward_passes_nag = base->forward_passes_nag;
  base_rec.end_checksum = base->model.checksum();
  base_rec.snapshot_checksum = base_rec.end_checksum;
  base_rec.embedding_checksum = base->model.embedding_checksum();
  base_rec.pool_size = bundle.labeled.size();
  result.history.push_back(base_rec);
  if (config.mode == STMode::kSupervised) return result;

  result.model.set_embedding_frozen(config.freeze_embedding);
  result.model.reset_counters();
  DatasetBundle working = bundle;
  working.pseudo_labeled.clear();
  working.pseudo_text.clear();
  const ModelF labeler = base->model;
  SelfTrainer trainer(result.model, config, &labeler);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) result.history.push_back(trainer.epoch(working, epoch, hooks));
  result.model.zero_grad();
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history,
                       const std::string& config_hash, bool include_wall_clock) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << "# config_hash=" << config_hash << '\n';
  out << "epoch,mode,ce_loss,mmd_loss,pl_accuracy,wall_clock_s,forward_passes_ag,forward_passes_nag\n";
  for (const auto& r : history) {
    std::ostringstream line;
    line << std::setprecision(10);
    line << r.epoch << ',' << to_string(r.mode) << ',' << r.ce_loss << ',' << r.mmd_loss << ',';
    if (r.pl_accuracy) {
      line << *r.pl_accuracy;
    } else {
      line << "NA";
    }
    line << ',';
    if (include_wall_clock) {
      line << std::fixed << std::setprecision(3) << r.wall_clock_s << std::defaultfloat;
    } else {
      line << "NA";
    }
    line << ',' << r.forward_passes_ag << ',' << r.forward_passes_nag << '\n';
    out << line.str();
  }
}

}  // namespace kest
