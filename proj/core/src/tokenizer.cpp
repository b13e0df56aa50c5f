#include "kest/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kest/error.hpp"

namespace kest {
namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> tokens = {"<pad>", "<mask>", "<bos>", "<eos>", "<unk>"};
  return tokens;
}

}  // namespace

std::vector<TokenId> TokenSequence::content() const {
  if (length < 2) return {};
  return {ids.begin() + 1, ids.begin() + (length - 1)};
}

TokenSequence TokenSequence::from_content(const std::vector<TokenId>& content, int max_len) {
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(max_len), special::kPad);
  const int n = std::min<int>(static_cast<int>(content.size()), max_len - 2);
  seq.ids[0] = special::kBos;
  for (int i = 0; i < n; ++i) seq.ids[static_cast<std::size_t>(i + 1)] = content[static_cast<std::size_t>(i)];
  seq.ids[static_cast<std::size_t>(n + 1)] = special::kEos;
  seq.length = n + 2;
  return seq;
}

void TokenSequence::validate() const {
  if (length < 0 || length > max_len()) {
    throw IntegrityError("token sequence length " + std::to_string(length) +
                         " outside [0, " + std::to_string(max_len()) + "]");
  }
  for (int i = 0; i < max_len(); ++i) {
    const bool pad = ids[static_cast<std::size_t>(i)] == special::kPad;
    if (i < length && pad) throw IntegrityError("PAD inside sequence at position " + std::to_string(i));
    if (i >= length && !pad) throw IntegrityError("non-PAD after sequence end at position " + std::to_string(i));
  }
}

Vocabulary::Vocabulary() : id_to_token_(special_tokens()) {
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  for (auto& t : tokens) {
    if (v.token_to_id_.contains(t)) throw IntegrityError("duplicate vocabulary token '" + t + "'");
    v.token_to_id_.emplace(t, static_cast<TokenId>(v.id_to_token_.size()));
    v.id_to_token_.push_back(std::move(t));
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> distinct;
  for (const auto& text : texts) {
    for (auto& tok : split_whitespace(text)) distinct.insert(std::move(tok));
  }
  for (const auto& s : special_tokens()) distinct.erase(s);
  return from_tokens({distinct.begin(), distinct.end()});
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IntegrityError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write vocabulary file " + path.string());
  for (std::size_t i = special::kCount; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? special::kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw IntegrityError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab, int max_len) {
  std::vector<TokenId> content;
  for (const auto& tok : split_whitespace(text)) content.push_back(vocab.id(tok));
  return TokenSequence::from_content(content, max_len);
}

std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int i = 0; i < seq.length; ++i) {
    const TokenId id = seq.ids[static_cast<std::size_t>(i)];
    const std::string& tok = vocab.token(id);
    if (id == special::kPad || id == special::kBos || id == special::kEos) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

}  // namespace kest
