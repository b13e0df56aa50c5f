#include "kest/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"

namespace kest {

void DecodeConfig::validate(int seq_max_len) const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("decode.top_p must be in (0, 1]");
  if (min_len < 0) throw ConfigError("decode.min_len must be >= 0");
  if (max_len < 1) throw ConfigError("decode.max_len must be >= 1");
  if (min_len > max_len) throw ConfigError("decode.min_len must be <= decode.max_len");
  if (max_len > seq_max_len - 2) throw ConfigError("decode.max_len must be <= L_max - 2");
  if (!(repetition_penalty > 0.0)) throw ConfigError("decode.repetition_penalty must be > 0");
  if (no_repeat_ngram < 0) throw ConfigError("decode.no_repeat_ngram must be >= 0");
}

void to_json(nlohmann::json& j, const DecodeConfig& c) {
  j = nlohmann::json{{"top_p", c.top_p},
                     {"min_len", c.min_len},
                     {"max_len", c.max_len},
                     {"repetition_penalty", c.repetition_penalty},
                     {"no_repeat_ngram", c.no_repeat_ngram},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DecodeConfig& c) {
  DecodeConfig d;
  c.top_p = j.value("top_p", d.top_p);
  c.min_len = j.value("min_len", d.min_len);
  c.max_len = j.value("max_len", d.max_len);
  c.repetition_penalty = j.value("repetition_penalty", d.repetition_penalty);
  c.no_repeat_ngram = j.value("no_repeat_ngram", d.no_repeat_ngram);
  c.seed = j.value("seed", d.seed);
}

std::vector<TokenId> nucleus(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
  std::vector<TokenId> order;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) order.push_back(static_cast<TokenId>(i));
  }
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  double cum = 0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs[static_cast<std::size_t>(order[keep])];
    ++keep;
    // Tolerance so that e.g. 0.6 + 0.3 counts as reaching 0.9.
    if (cum + 1e-9 >= p) break;
  }
  order.resize(keep);
  return order;
}

TokenId sample_top_p(std::span<const double> logits, double p, Rng& rng, std::span<const char> banned) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
  if (!banned.empty() && banned.size() != logits.size()) throw IntegrityError("banned mask has wrong width");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw IntegrityError("non-finite logit");
    if (banned.empty() || !banned[i]) mx = std::max(mx, logits[i]);
  }
  if (!std::isfinite(mx)) {
    diag::warn("decode.all_banned");
    return special::kEos;
  }
  std::vector<double> probs(logits.size(), 0.0);
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (banned.empty() || !banned[i]) {
      probs[i] = std::exp(logits[i] - mx);
      z += probs[i];
    }
  }
  for (auto& v : probs) v /= z;
  const auto keep = nucleus(probs, p);
  double mass = 0;
  for (TokenId id : keep) mass += probs[static_cast<std::size_t>(id)];
  double u = uniform01(rng) * mass;
  for (TokenId id : keep) {
    u -= probs[static_cast<std::size_t>(id)];
    if (u < 0) return id;
  }
  return keep.back();
}

std::vector<TokenId> blocked_ngram_tokens(std::span<const TokenId> sequence, int n) {
  std::vector<TokenId> out;
  const int len = static_cast<int>(sequence.size());
  if (n < 1 || len < n - 1) return out;
  if (n == 1) return {sequence.begin(), sequence.end()};
  // The last n-1 tokens form the prefix the next token would extend.
  const auto tail = sequence.subspan(static_cast<std::size_t>(len - (n - 1)));
  for (int start = 0; start + n <= len; ++start) {
    if (std::equal(tail.begin(), tail.end(), sequence.begin() + start)) {
      out.push_back(sequence[static_cast<std::size_t>(start + n - 1)]);
    }
  }
  return out;
}

template <typename T>
TokenSequence generate_ag(const Model<T>& model, int label, std::span<const TokenId> prompt,
                          const DecodeConfig& config, Rng& rng) {
  const int lmax = model.config().max_len;
  config.validate(lmax);
  if (static_cast<int>(prompt.size()) >= config.max_len) {
    throw PreconditionError("prompt of " + std::to_string(prompt.size()) + " tokens leaves no room under max_len " +
                            std::to_string(config.max_len));
  }
  const int vocab = model.config().vocab_size;
  std::vector<TokenId> seq{special::kBos};
  seq.insert(seq.end(), prompt.begin(), prompt.end());

  TokenSequence buf;
  buf.ids.assign(static_cast<std::size_t>(lmax), special::kPad);
  std::vector<double> row(static_cast<std::size_t>(vocab));
  while (static_cast<int>(seq.size()) - 1 < config.max_len) {
    std::copy(seq.begin(), seq.end(), buf.ids.begin());
    buf.length = static_cast<int>(seq.size());
    const Matrix<T> logits = model.forward_ag(buf, label);
    const Index last = buf.length - 1;
    for (int v = 0; v < vocab; ++v) row[static_cast<std::size_t>(v)] = static_cast<double>(logits(last, v));

    const int content = static_cast<int>(seq.size()) - 1;
    auto banned = banned_interior_tokens(vocab, content < config.min_len);
    if (config.repetition_penalty != 1.0) {
      std::vector<char> seen(static_cast<std::size_t>(vocab), 0);
      for (std::size_t i = 1; i < seq.size(); ++i) seen[static_cast<std::size_t>(seq[i])] = 1;
      for (int v = 0; v < vocab; ++v) {
        if (!seen[static_cast<std::size_t>(v)]) continue;
        auto& x = row[static_cast<std::size_t>(v)];
        x = x > 0 ? x / config.repetition_penalty : x * config.repetition_penalty;
      }
    }
    if (config.no_repeat_ngram > 0) {
      for (TokenId id : blocked_ngram_tokens(seq, config.no_repeat_ngram)) banned[static_cast<std::size_t>(id)] = 1;
    }
    const TokenId next = sample_top_p(row, config.top_p, rng, banned);
    if (next == special::kEos) {
      break;
    }
    seq.push_back(next);
  }
  std::vector<TokenId> content(seq.begin() + 1, seq.end());
  return TokenSequence::from_content(content, lmax);
}

MaskVector sample_mask(int maskable, double p_m, Rng& rng) {
  if (!(p_m >= 0.0 && p_m <= 1.0)) throw ConfigError("p_m must be in [0, 1]");
  if (maskable < 0) throw PreconditionError("negative maskable count");
  MaskVector m;
  m.bits.resize(static_cast<std::size_t>(maskable));
  for (auto& b : m.bits) b = bernoulli(rng, p_m) ? 1 : 0;
  if (p_m > 0.0 && maskable > 0 && m.count() == 0) {
    m.bits[uniform_index(rng, static_cast<std::uint64_t>(maskable))] = 1;
  }
  return m;
}

template <typename T>
PseudoTextItem generate_nag(const Model<T>& model, const TokenSequence& original, const MaskVector& mask, int label,
                            Rng& rng, bool soft, double top_p) {
  PseudoTextItem item;
  item.mask = mask;
  item.label = label;
  item.masked_input = apply_mask(original, mask);
  const Matrix<T> logits = model.forward_nag(item.masked_input, label);
  const int vocab = model.config().vocab_size;
  const auto banned = banned_interior_tokens(vocab, true);

  item.hard_tokens = original;
  Matrix<T> probs = Matrix<T>::Zero(original.length, vocab);
  ag::SoftmaxMask smask;
  smask.banned_columns = banned;
  const Matrix<T> masked_probs = ag::softmax_rows_value<T>(logits, smask);
  std::vector<double> row(static_cast<std::size_t>(vocab));
  for (int pos = 0; pos < original.length; ++pos) {
    if (!mask.masked_position(pos)) {
      probs(pos, original.ids[static_cast<std::size_t>(pos)]) = T(1);
      continue;
    }
    probs.row(pos) = masked_probs.row(pos);
    TokenId chosen;
    if (soft) {
      Index arg = 0;
      probs.row(pos).maxCoeff(&arg);
      chosen = static_cast<TokenId>(arg);
    } else {
      for (int v = 0; v < vocab; ++v) row[static_cast<std::size_t>(v)] = static_cast<double>(logits(pos, v));
      chosen = sample_top_p(row, top_p, rng, banned);
    }
    item.hard_tokens.ids[static_cast<std::size_t>(pos)] = chosen;
  }
  if (soft) {
    ag::Tape<T> tape(false);
    auto embedded = pad_soft_rows(soft_embed(tape, tape.constant(probs), model), model);
    SoftSequence s;
    s.matrix = embedded.value().template cast<float>();
    s.length = original.length;
    item.soft = std::move(s);
  }
  return item;
}

template TokenSequence generate_ag(const Model<float>&, int, std::span<const TokenId>, const DecodeConfig&, Rng&);
template TokenSequence generate_ag(const Model<double>&, int, std::span<const TokenId>, const DecodeConfig&, Rng&);
template PseudoTextItem generate_nag(const Model<float>&, const TokenSequence&, const MaskVector&, int, Rng&, bool,
                                     double);
template PseudoTextItem generate_nag(const Model<double>&, const TokenSequence&, const MaskVector&, int, Rng&, bool,
                                     double);

}  // namespace kest
