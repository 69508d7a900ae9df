#include "mmt/vocab.hpp"

#include <algorithm>

namespace mmt {

namespace {
const std::vector<std::string> kSpecials = {"<pad>", "<unk>", "<bos>", "<eos>"};
}

Vocab::Vocab() : Vocab(kSpecials) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kSpecials.size() ||
      !std::equal(kSpecials.begin(), kSpecials.end(), tokens_.begin())) {
    throw Error("vocabulary must start with <pad> <unk> <bos> <eos>");
  }
  for (int i = 0; i < size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) throw Error("duplicate vocabulary entry '" + tokens_[i] + "'");
  }
}

Vocab Vocab::build(std::span<const TokenSeq> corpus, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) ++counts[t];
  }
  std::vector<std::pair<std::string, int>> entries;
  for (auto& [t, c] : counts) {
    if (c >= min_count && std::find(kSpecials.begin(), kSpecials.end(), t) == kSpecials.end()) {
      entries.emplace_back(t, c);
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  auto tokens = kSpecials;
  for (auto& [t, c] : entries) tokens.push_back(t);
  return Vocab(std::move(tokens));
}

std::optional<int> Vocab::find(const std::string& token) const {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  return std::nullopt;
}

int Vocab::id(const std::string& token) const { return find(token).value_or(kUnk); }

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw Error("vocabulary id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const TokenSeq& tokens, bool strict) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto found = find(t);
    if (!found && strict) throw Error("token '" + t + "' is not in the vocabulary");
    ids.push_back(found.value_or(kUnk));
  }
  return ids;
}

TokenSeq Vocab::decode(std::span<const int> ids) const {
  TokenSeq out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

}  // namespace mmt
