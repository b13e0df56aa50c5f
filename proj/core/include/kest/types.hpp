#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kest/tensor.hpp"
#include "kest/tokenizer.hpp"

namespace kest {

struct LabeledExample {
  TokenSequence tokens;
  int label = 0;
  std::size_t id = 0;  // stable example identity within a corpus
};

struct UnlabeledExample {
  TokenSequence tokens;
  std::size_t id = 0;
};

/// Bernoulli mask over the interior positions [1, length - 1) of a sequence;
/// bits[i] refers to sequence position i + 1. BOS, EOS and PAD are never
/// maskable.
struct MaskVector {
  std::vector<std::uint8_t> bits;

  int size() const { return static_cast<int>(bits.size()); }
  int count() const;
  bool masked_position(int position) const;  // sequence position
  std::string to_string() const;             // "0110..."
  static MaskVector from_string(const std::string& s);

  friend bool operator==(const MaskVector&, const MaskVector&) = default;
};

/// Probability-weighted embedding e(x) = P(x) E of a sequence, stored at the
/// full L_max x d shape. Rows at positions >= length hold the PAD embedding.
template <typename T>
struct BasicSoftSequence {
  Matrix<T> matrix;
  int length = 0;
};
using SoftSequence = BasicSoftSequence<float>;

struct PseudoTextItem {
  TokenSequence hard_tokens;
  std::optional<SoftSequence> soft;
  TokenSequence masked_input;  // x with MASK written at masked positions
  MaskVector mask;
  int label = 0;
  std::size_t source_example_id = 0;
};

/// Writes MASK at every masked interior position.
TokenSequence apply_mask(const TokenSequence& tokens, const MaskVector& mask);

}  // namespace kest
