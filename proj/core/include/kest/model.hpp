#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/rng.hpp"
#include "kest/tensor.hpp"
#include "kest/tokenizer.hpp"
#include "kest/types.hpp"

namespace kest {

enum class AttentionMode { kCausal, kBidirectional };

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_label = 16;
  int d_ff = 0;  // 0 means 4 * d_model
  int vocab_size = 0;
  int max_len = 48;
  int num_labels = 2;
  double dropout = 0.1;

  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;  // throws ConfigError

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Dropout is applied only when `train` is set and an rng is supplied.
struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;
};

/// Parameters of one pre-LN transformer block. The fusion projection maps
/// concat(attention output, label embedding) back to d_model.
template <typename T>
struct BlockParams {
  Parameter<T> ln1_gain, ln1_bias;
  Parameter<T> w_qkv, b_qkv;
  Parameter<T> w_out, b_out;
  Parameter<T> w_fuse, b_fuse;
  Parameter<T> ln2_gain, ln2_bias;
  Parameter<T> w_ff1, b_ff1;
  Parameter<T> w_ff2, b_ff2;
};

/// Shared generator/classifier. One set of transformer blocks serves three
/// branches: causal label-conditioned generation (AG), bidirectional
/// label-conditioned infilling (NAG) and unconditioned classification pooled
/// at BOS. The output projection is tied to the token embedding E.
template <typename T>
class Model {
 public:
  /// All parameters zero except layer-norm gains (one) and the fusion
  /// projection ([I | 0]).
  explicit Model(ModelConfig config);
  static Model initialized(ModelConfig config, std::uint64_t seed);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&& other) noexcept;
  Model& operator=(Model&& other) noexcept;

  const ModelConfig& config() const { return config_; }

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;

  const Parameter<T>& token_embedding() const { return tok_emb_; }
  Parameter<T>& token_embedding() { return tok_emb_; }
  void set_embedding_frozen(bool frozen) { tok_emb_.frozen = frozen; }
  bool embedding_frozen() const { return tok_emb_.frozen; }

  void zero_grad() const;

  // Differentiable branches. Only the first `length` positions are computed;
  // PAD positions carry no logits and are never scored.

  /// Causal, label-fused; row j scores the token at position j + 1.
  ag::Var<T> forward_ag(ag::Tape<T>& tape, const TokenSequence& tokens, int label,
                        const ForwardOptions& opts = {}) const;
  /// Bidirectional, label-fused; exactly one pass for all positions.
  ag::Var<T> forward_nag(ag::Tape<T>& tape, const TokenSequence& masked_tokens, int label,
                         const ForwardOptions& opts = {}) const;
  /// 1 x K class probabilities.
  ag::Var<T> forward_cls(ag::Tape<T>& tape, const TokenSequence& tokens,
                         const ForwardOptions& opts = {}) const;

  /// Final-layer hidden states (length x d) for the given mode and label
  /// (label < 0 disables fusion). Does not bump pass counters.
  ag::Var<T> encode(ag::Tape<T>& tape, std::span<const TokenId> ids, AttentionMode mode, int label,
                    const ForwardOptions& opts = {}) const;
  /// hidden * E^T + output bias.
  ag::Var<T> lm_logits(ag::Tape<T>& tape, ag::Var<T> hidden) const;

  /// concat(attention_output, label_embedding) -> linear projection of `layer`.
  ag::Var<T> fuse_label(ag::Tape<T>& tape, ag::Var<T> attention_output, int label, int layer) const;

  // Inference conveniences on a private no-grad tape.
  Matrix<T> forward_ag(const TokenSequence& tokens, int label) const;
  Matrix<T> forward_nag(const TokenSequence& masked_tokens, int label) const;
  std::vector<double> forward_cls(const TokenSequence& tokens, const ForwardOptions& opts = {}) const;

  std::uint64_t ag_passes() const { return ag_passes_.load(); }
  std::uint64_t nag_passes() const { return nag_passes_.load(); }
  std::uint64_t cls_passes() const { return cls_passes_.load(); }
  void reset_counters() const;

  /// FNV-1a over every parameter value, in parameter order.
  std::uint64_t checksum() const;
  std::uint64_t embedding_checksum() const;

  const BlockParams<T>& block(int layer) const { return blocks_[static_cast<std::size_t>(layer)]; }
  BlockParams<T>& block(int layer) { return blocks_[static_cast<std::size_t>(layer)]; }

  template <typename U>
  Model<U> cast() const;

 private:
  template <typename U>
  friend class Model;

  void build();
  void check_ids(std::span<const TokenId> ids) const;
  ag::Var<T> maybe_dropout(ag::Var<T> x, const ForwardOptions& opts) const;

  ModelConfig config_;
  Parameter<T> tok_emb_;  // V x d, also the output projection
  Parameter<T> pos_emb_;  // L_max x d
  std::vector<BlockParams<T>> blocks_;
  Parameter<T> lnf_gain_, lnf_bias_;
  Parameter<T> lm_bias_;    // 1 x V
  Parameter<T> label_emb_;  // K x d_label
  Parameter<T> cls_w1_, cls_b1_, cls_w2_, cls_b2_;

  mutable std::atomic<std::uint64_t> ag_passes_{0};
  mutable std::atomic<std::uint64_t> nag_passes_{0};
  mutable std::atomic<std::uint64_t> cls_passes_{0};
};

extern template class Model<float>;
extern template class Model<double>;

using ModelF = Model<float>;
using ModelD = Model<double>;

/// e(x) = P E for a row-stochastic P (rows x V). E is a constant when frozen.
/// Throws PreconditionError when a row does not sum to one.
template <typename T>
ag::Var<T> soft_embed(ag::Tape<T>& tape, ag::Var<T> probabilities, const Model<T>& model);

/// Non-differentiable soft_embed on plain matrices.
template <typename T>
Matrix<T> soft_embed(const Matrix<T>& probabilities, const Model<T>& model);

/// Pads `rows` (n x d) to the full L_max x d shape with the PAD embedding row.
template <typename T>
ag::Var<T> pad_soft_rows(ag::Var<T> rows, const Model<T>& model);

/// Column mask banning ids that can never appear at an interior position
/// (PAD, MASK, BOS, UNK and, when `ban_eos`, EOS).
std::vector<char> banned_interior_tokens(int vocab_size, bool ban_eos);

/// AdamW with decoupled weight decay. Frozen parameters are skipped
/// entirely, including weight decay.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  AdamW(std::vector<Parameter<T>*> params, Options options);

  void step(double lr);
  std::uint64_t steps() const { return step_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Matrix<T>> m_, v_;
  std::vector<bool> decay_;
  Options options_;
  std::uint64_t step_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

// Checkpoints: magic, format version, model config as JSON, then every
// parameter as (name, rows, cols, float64 values).
void save_checkpoint(const std::filesystem::path& path, const ModelF& model,
                     const nlohmann::json& metadata = {});
/// Rejects files whose stored config differs from `expected` when given.
ModelF load_checkpoint(const std::filesystem::path& path,
                       const std::optional<ModelConfig>& expected = std::nullopt,
                       nlohmann::json* metadata = nullptr);

}  // namespace kest
