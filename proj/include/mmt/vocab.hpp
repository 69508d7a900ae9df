#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/common.hpp"

namespace mmt {

/// Word-level vocabulary. Ids 0..3 are <pad>, <unk>, <bos>, <eos>; the rest
/// are sorted by descending frequency, ties broken alphabetically.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecials = 4;

  Vocab();
  explicit Vocab(std::vector<std::string> tokens);  // specials must lead

  static Vocab build(std::span<const TokenSeq> corpus, int min_count = 2);

  int size() const { return static_cast<int>(tokens_.size()); }
  std::optional<int> find(const std::string& token) const;
  int id(const std::string& token) const;  // <unk> when absent
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Maps tokens to ids. With strict = true an unknown token is an error;
  /// otherwise it maps to <unk>.
  std::vector<int> encode(const TokenSeq& tokens, bool strict = false) const;
  /// Stops at <eos>; drops <pad> and <bos>.
  TokenSeq decode(std::span<const int> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace mmt
