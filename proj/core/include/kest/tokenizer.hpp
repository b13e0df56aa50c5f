#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kest {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

/// Fixed-length token-id sequence: BOS, content, EOS, then PAD up to the
/// configured maximum. `length` counts every non-PAD position.
struct TokenSequence {
  std::vector<TokenId> ids;
  int length = 0;

  int max_len() const { return static_cast<int>(ids.size()); }
  /// Number of interior positions, i.e. excluding BOS and EOS.
  int content_length() const { return length >= 2 ? length - 2 : 0; }
  std::vector<TokenId> content() const;

  /// Builds BOS + content + EOS padded to max_len. Content is truncated to
  /// max_len - 2 tokens.
  static TokenSequence from_content(const std::vector<TokenId>& content, int max_len);

  /// Throws IntegrityError when the PAD layout invariant does not hold.
  void validate() const;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

class Vocabulary {
 public:
  Vocabulary();

  /// Deterministic: distinct tokens are sorted, then numbered after the
  /// five reserved ids.
  static Vocabulary build(const std::vector<std::string>& texts);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  TokenId id(std::string_view token) const;  // UNK when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

TokenSequence encode(std::string_view text, const Vocabulary& vocab, int max_len);
std::string decode(const TokenSequence& seq, const Vocabulary& vocab);

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace kest
