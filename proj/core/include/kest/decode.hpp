#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/model.hpp"
#include "kest/rng.hpp"
#include "kest/types.hpp"

namespace kest {

/// Lengths count content tokens (BOS/EOS excluded).
struct DecodeConfig {
  double top_p = 0.9;
  int min_len = 4;
  int max_len = 16;
  double repetition_penalty = 1.0;
  int no_repeat_ngram = 4;  // 0 disables
  std::uint64_t seed = 0;

  void validate(int seq_max_len) const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const DecodeConfig& c);
void from_json(const nlohmann::json& j, DecodeConfig& c);

/// Token ids of the top-p nucleus of `probs`: sorted by probability
/// descending (ties by ascending id), smallest prefix whose mass reaches p.
/// Zero-probability entries never enter the nucleus.
std::vector<TokenId> nucleus(std::span<const double> probs, double p);

/// Softmax over non-banned entries, then a draw from the renormalized
/// nucleus. Throws ConfigError for p outside (0, 1]. Returns EOS when every
/// entry is banned.
TokenId sample_top_p(std::span<const double> logits, double p, Rng& rng,
                     std::span<const char> banned = {});

/// Ids whose emission would repeat an n-gram already present in `sequence`.
std::vector<TokenId> blocked_ngram_tokens(std::span<const TokenId> sequence, int n);

/// Autoregressive sampling from BOS + prompt. One forward_ag pass per
/// sampled token; stops on a sampled EOS or when the content reaches
/// config.max_len (EOS is then appended without another pass).
template <typename T>
TokenSequence generate_ag(const Model<T>& model, int label, std::span<const TokenId> prompt,
                          const DecodeConfig& config, Rng& rng);

/// Independent Bernoulli(p_m) bits over `maskable` positions; when the draw
/// is empty and p_m > 0, one uniformly chosen position is forced on.
MaskVector sample_mask(int maskable, double p_m, Rng& rng);

/// One forward_nag pass over the masked input. Hard mode samples masked
/// positions with top-p; soft mode keeps the full distributions, stores
/// e(x) = P E and takes the row argmax as hard tokens.
template <typename T>
PseudoTextItem generate_nag(const Model<T>& model, const TokenSequence& original, const MaskVector& mask, int label,
                            Rng& rng, bool soft, double top_p = 0.9);

}  // namespace kest
