#include "kest/types.hpp"

#include "kest/error.hpp"

namespace kest {

int MaskVector::count() const {
  int n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

bool MaskVector::masked_position(int position) const {
  const int i = position - 1;
  return i >= 0 && i < size() && bits[static_cast<std::size_t>(i)] != 0;
}

std::string MaskVector::to_string() const {
  std::string s;
  s.reserve(bits.size());
  for (auto b : bits) s.push_back(b ? '1' : '0');
  return s;
}

MaskVector MaskVector::from_string(const std::string& s) {
  MaskVector m;
  m.bits.reserve(s.size());
  for (char c : s) {
    if (c != '0' && c != '1') throw IntegrityError("mask string may contain only 0 and 1");
    m.bits.push_back(c == '1');
  }
  return m;
}

TokenSequence apply_mask(const TokenSequence& tokens, const MaskVector& mask) {
  if (mask.size() != tokens.content_length()) {
    throw PreconditionError("mask covers " + std::to_string(mask.size()) + " positions but the sequence has " +
                            std::to_string(tokens.content_length()) + " maskable positions");
  }
  TokenSequence out = tokens;
  for (int i = 0; i < mask.size(); ++i) {
    if (mask.bits[static_cast<std::size_t>(i)]) out.ids[static_cast<std::size_t>(i + 1)] = special::kMask;
  }
  return out;
}

}  // namespace kest
