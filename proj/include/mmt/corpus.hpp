#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmt/common.hpp"

namespace mmt {

struct Caption {
  std::string id;
  std::string text;
  std::optional<std::string> image_id;
};

/// One pseudo-parallel unit: ambiguous source, original English target.
struct ParallelExample {
  std::string id;
  TokenSeq source;
  TokenSeq target;
  std::optional<std::string> image_id;

  friend bool operator==(const ParallelExample&, const ParallelExample&) = default;
};

struct GenderLexicon {
  std::set<std::string> gendered_nouns;
  std::set<std::string> skewed_professions;
  std::set<std::string> male_pronouns{"he", "him", "his", "himself"};
  std::set<std::string> female_pronouns{"she", "her", "hers", "herself"};

  bool is_pronoun(const std::string& token) const {
    return male_pronouns.count(token) > 0 || female_pronouns.count(token) > 0;
  }

  /// Throws if an entry is not lowercase or the pronoun sets overlap.
  void validate() const;

  /// Plain text, one lowercase entry per line, '#' starts a comment.
  /// Entries go to gendered_nouns until a "[skewed_professions]" header;
  /// "[gendered_nouns]" switches back.
  static GenderLexicon load(const std::filesystem::path& path);
};

struct CorpusStats {
  std::size_t n_sentences = 0;
  std::size_t n_words = 0;
  std::size_t n_gender_pronouns = 0;

  CorpusStats& operator+=(const CorpusStats& o) {
    n_sentences += o.n_sentences;
    n_words += o.n_words;
    n_gender_pronouns += o.n_gender_pronouns;
    return *this;
  }
  friend CorpusStats operator+(CorpusStats a, const CorpusStats& b) { return a += b; }
  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

/// Lowercases ASCII, splits on whitespace, detaches leading/trailing
/// punctuation (one token per character) and the clitics
/// 's 're 've 'll 'd 'm n't. Internal punctuation ("t-shirt") is kept.
TokenSeq tokenize(std::string_view text);

std::string join_tokens(const TokenSeq& tokens);

/// True when `tokens` contains `phrase` as a contiguous run.
bool contains_phrase(const TokenSeq& tokens, const TokenSeq& phrase);

std::vector<Caption> filter_gendered(const std::vector<Caption>& corpus,
                                     const GenderLexicon& lexicon);

/// Candidates whose pronoun-bearing sentences use one pronoun gender with
/// frequency >= threshold. Sentences carrying both genders count towards the
/// denominator only.
std::set<std::string> detect_skewed_professions(const std::vector<Caption>& corpus,
                                                const std::set<std::string>& candidates,
                                                double threshold,
                                                const GenderLexicon& lexicon = {});

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

/// Seeded partition into (train, val, test). Each partition keeps the
/// corpus's relative order.
template <typename T>
Split<T> split(const std::vector<T>& corpus, std::size_t n_val, std::size_t n_test,
               std::uint64_t seed) {
  if (n_val + n_test > corpus.size()) {
    throw Error("split: requested n_val + n_test = " + std::to_string(n_val + n_test) +
                " items but the corpus has only " + std::to_string(corpus.size()));
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
    std::sort(idx.begin(), idx.end());
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(corpus[i]);
    return out;
  };
  Split<T> s;
  s.val = take(0, n_val);
  s.test = take(n_val, n_val + n_test);
  s.train = take(n_val + n_test, order.size());
  return s;
}

/// Counts over the target side. Punctuation-only tokens are not words.
CorpusStats corpus_stats(const std::vector<ParallelExample>& corpus,
                         const GenderLexicon& lexicon = {});

bool is_punctuation_token(const std::string& token);

// JSON-lines I/O. Caption records: {id, text, image_id?}. Parallel records:
// {id, source, target, image_id?} with space-joined token strings.
std::vector<Caption> read_captions(const std::filesystem::path& path);
void write_captions(const std::filesystem::path& path, const std::vector<Caption>& corpus);
std::vector<ParallelExample> read_parallel(const std::filesystem::path& path);
void write_parallel(const std::filesystem::path& path,
                    const std::vector<ParallelExample>& corpus);

std::string stats_to_json(const CorpusStats& stats);

}  // namespace mmt
