#include "mmt/corruption.hpp"

namespace mmt {

void CorruptionConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw Error("word dropout p must lie in [0, 1]");
  if (unk_token.empty()) throw Error("word dropout needs a non-empty unk token");
}

TokenSeq word_dropout(const TokenSeq& tokens, const CorruptionConfig& config, Rng& rng) {
  config.validate();
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  TokenSeq out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    const double u = uniform(rng);
    // generate_canonical may round up to 1.0, so p = 1 is pinned explicitly.
    const bool drop = u < config.p || config.p >= 1.0;
    out.push_back(drop ? config.unk_token : t);
  }
  return out;
}

}  // namespace mmt
