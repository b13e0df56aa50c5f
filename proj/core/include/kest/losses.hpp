#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "kest/tensor.hpp"
#include "kest/tokenizer.hpp"
#include "kest/types.hpp"

namespace kest {

struct LossWeights {
  double c = 1.0;
  double ag = 1.0;
  double nag = 1.0;

  void validate() const;  // throws ConfigError
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

inline constexpr LossWeights kBaseWeights{5.0, 1.0, 1.0};
inline constexpr LossWeights kSelfTrainWeights{1.0, 1.0, 1.0};

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kBandwidthFloor = 1e-8;

// --- cross-entropy terms (per sample; callers take the batch mean) ---------

/// Next-token NLL summed over scored positions: row j of `logits` predicts
/// targets.ids[j + 1] for j + 1 < targets.length. Extra rows are ignored, as
/// are MASK targets (noise-corrupted pseudo text).
/// A sequence with nothing to score yields 0 and bumps "loss_ag.empty".
template <typename T>
ag::Var<T> loss_ag(ag::Var<T> logits, const TokenSequence& targets);

/// NLL at masked positions only; row j of `logits` scores position j. MASK
/// targets are skipped.
/// Throws PreconditionError when the mask does not match the sequence.
template <typename T>
ag::Var<T> loss_nag(ag::Var<T> logits, const TokenSequence& original, const MaskVector& mask);

/// -log probs[label], clamped at 1e-12 ("loss_cls.clamped").
template <typename T>
ag::Var<T> loss_cls(ag::Var<T> probs, int label);

double loss_joint(double l_c, double l_ag, double l_nag, const LossWeights& w);

template <typename T>
ag::Var<T> loss_joint(ag::Var<T> l_c, ag::Var<T> l_ag, ag::Var<T> l_nag, const LossWeights& w);

// Plain-value conveniences used by evaluation and tests.
double loss_ag_value(const Matrix<double>& logits, const TokenSequence& targets);
double loss_nag_value(const Matrix<double>& logits, const TokenSequence& original, const MaskVector& mask);
double loss_cls_value(std::span<const double> probs, int label);

// --- kernel loss ------------------------------------------------------------

struct KernelConfig {
  int M = 2;
  std::vector<double> bandwidths;  // filled per batch by median_bandwidths

  void validate() const;  // throws ConfigError on sigma <= 0 or a wrong count
};

double squared_distance(const Matrix<double>& a, const Matrix<double>& b);

/// Sum over the bank of exp(-|a - b|^2 / (2 sigma^2)).
double rbf_kernel(const Matrix<double>& a, const Matrix<double>& b, std::span<const double> bandwidths);

/// H = mean squared cross distance over all |D_o| x |D_pt| pairs; returns
/// (2^a H) for a = -M..M, floored at 1e-8 ("bandwidth.degenerate" when H is 0).
template <typename T>
std::vector<double> median_bandwidths(const std::vector<Matrix<T>>& d_o, const std::vector<Matrix<T>>& d_pt, int M);

/// (1/(N(N-1))) sum_{i!=j} k(o_i, o_j) - (2/N^2) sum_{i,j} k(o_i, t_j).
double loss_mmd(const std::vector<Matrix<double>>& d_o, const std::vector<Matrix<double>>& d_pt,
                std::span<const double> bandwidths);

/// Differentiable in `d_o` only; `d_pt` and the bandwidths are constants.
template <typename T>
ag::Var<T> loss_mmd(const std::vector<ag::Var<T>>& d_o, const std::vector<Matrix<T>>& d_pt,
                    std::span<const double> bandwidths);

namespace mutation {
/// Fault injection for the verifier self-test: flips the sign of the cross
/// term in every loss_mmd evaluation while enabled.
void set_mmd_cross_sign_flip(bool enabled);
bool mmd_cross_sign_flip();
}  // namespace mutation

// --- pseudo-text grouping ---------------------------------------------------

/// Collects pseudo-text items per label across minibatches. A label group is
/// released for scoring once it holds `min_group` (>= 2) items; smaller
/// groups carry over to the next batch.
class PseudoTextGroups {
 public:
  PseudoTextGroups(int num_labels, int min_group = 2);

  void add(int label, std::size_t item);
  /// Groups ready to be scored, in label order. Released items are removed.
  std::vector<std::vector<std::size_t>> take_ready();
  /// End of epoch: releases every group with at least two items and drops
  /// singletons ("pseudo_text.dropped_singleton"), reporting how many.
  std::vector<std::vector<std::size_t>> flush(std::size_t* dropped = nullptr);
  std::size_t pending() const;

 private:
  int min_group_;
  std::vector<std::vector<std::size_t>> groups_;
};

}  // namespace kest
