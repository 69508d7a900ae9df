#pragma once

#include <cstdint>
#include <string>

#include "mmt/common.hpp"

namespace mmt {

inline constexpr const char* kUnkToken = "<unk>";

struct CorruptionConfig {
  double p = 0.1;
  std::string unk_token = kUnkToken;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Replaces each position independently with `unk_token` with probability p.
/// Exactly one uniform draw per position, consumed left to right.
TokenSeq word_dropout(const TokenSeq& tokens, const CorruptionConfig& config, Rng& rng);

}  // namespace mmt
