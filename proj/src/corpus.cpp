#include "mmt/corpus.hpp"

#include <array>
#include <cctype>
#include <deque>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace mmt {

namespace {

constexpr std::array<std::string_view, 7> kClitics = {"n't", "'s", "'re", "'ve",
                                                      "'ll", "'d",  "'m"};

bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

bool is_clitic(std::string_view w) {
  return std::find(kClitics.begin(), kClitics.end(), w) != kClitics.end();
}

bool is_lowercase(std::string_view s) {
  return std::none_of(s.begin(), s.end(),
                      [](char c) { return std::isupper(static_cast<unsigned char>(c)); });
}

void tokenize_chunk(std::string w, TokenSeq& out) {
  std::deque<std::string> trailing;
  while (!w.empty() && is_punct(w.back()) && !is_clitic(w)) {
    trailing.emplace_front(1, w.back());
    w.pop_back();
  }
  while (!w.empty() && is_punct(w.front()) && !is_clitic(w)) {
    out.emplace_back(1, w.front());
    w.erase(w.begin());
  }
  if (!w.empty()) {
    bool split_done = false;
    for (auto clitic : kClitics) {
      if (w.size() > clitic.size() && w.ends_with(clitic)) {
        out.push_back(w.substr(0, w.size() - clitic.size()));
        out.emplace_back(clitic);
        split_done = true;
        break;
      }
    }
    if (!split_done) out.push_back(std::move(w));
  }
  for (auto& t : trailing) out.push_back(std::move(t));
}

nlohmann::json parse_line(const std::string& line, const std::filesystem::path& path,
                          std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

void GenderLexicon::validate() const {
  for (const auto* set : {&gendered_nouns, &skewed_professions, &male_pronouns, &female_pronouns}) {
    for (const auto& e : *set) {
      if (!is_lowercase(e)) throw Error("lexicon entry is not lowercase: '" + e + "'");
    }
  }
  for (const auto& p : male_pronouns) {
    if (female_pronouns.count(p)) throw Error("pronoun in both gender sets: '" + p + "'");
  }
}

GenderLexicon GenderLexicon::load(const std::filesystem::path& path) {
  auto in = open_in(path);
  GenderLexicon lex;
  auto* target = &lex.gendered_nouns;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    if (line == "[gendered_nouns]") {
      target = &lex.gendered_nouns;
    } else if (line == "[skewed_professions]") {
      target = &lex.skewed_professions;
    } else {
      target->insert(line);
    }
  }
  lex.validate();
  return lex;
}

TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::string chunk;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!chunk.empty()) tokenize_chunk(std::exchange(chunk, {}), out);
    } else {
      chunk.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!chunk.empty()) tokenize_chunk(std::move(chunk), out);
  return out;
}

std::string join_tokens(const TokenSeq& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

bool contains_phrase(const TokenSeq& tokens, const TokenSeq& phrase) {
  if (phrase.empty()) return false;
  return std::search(tokens.begin(), tokens.end(), phrase.begin(), phrase.end()) != tokens.end();
}

std::vector<Caption> filter_gendered(const std::vector<Caption>& corpus,
                                     const GenderLexicon& lexicon) {
  std::vector<TokenSeq> phrases;
  for (const auto& p : lexicon.skewed_professions) phrases.push_back(tokenize(p));

  std::vector<Caption> kept;
  for (const auto& caption : corpus) {
    auto tokens = tokenize(caption.text);
    bool hit = std::any_of(tokens.begin(), tokens.end(),
                           [&](const Token& t) { return lexicon.gendered_nouns.count(t) > 0; });
    hit = hit || std::any_of(phrases.begin(), phrases.end(),
                             [&](const TokenSeq& p) { return contains_phrase(tokens, p); });
    if (!hit) kept.push_back(caption);
  }
  return kept;
}

std::set<std::string> detect_skewed_professions(const std::vector<Caption>& corpus,
                                                const std::set<std::string>& candidates,
                                                double threshold,
                                                const GenderLexicon& lexicon) {
  if (threshold < 0.0 || threshold > 1.0) throw Error("threshold must lie in [0, 1]");
  if (candidates.empty()) throw Error("detect_skewed_professions: no candidate phrases");

  std::vector<TokenSeq> sentences;
  sentences.reserve(corpus.size());
  for (const auto& c : corpus) sentences.push_back(tokenize(c.text));

  std::set<std::string> skewed;
  for (const auto& phrase : candidates) {
    const auto pt = tokenize(phrase);
    std::size_t cooccur = 0, male = 0, female = 0;
    for (const auto& s : sentences) {
      if (!contains_phrase(s, pt)) continue;
      bool m = std::any_of(s.begin(), s.end(),
                           [&](const Token& t) { return lexicon.male_pronouns.count(t) > 0; });
      bool f = std::any_of(s.begin(), s.end(),
                           [&](const Token& t) { return lexicon.female_pronouns.count(t) > 0; });
      if (!m && !f) continue;
      ++cooccur;
      if (m && !f) ++male;
      if (f && !m) ++female;
    }
    if (cooccur == 0) continue;
    double freq = static_cast<double>(std::max(male, female)) / static_cast<double>(cooccur);
    if (freq >= threshold) skewed.insert(phrase);
  }
  return skewed;
}

bool is_punctuation_token(const std::string& token) {
  return !token.empty() && std::all_of(token.begin(), token.end(), is_punct);
}

CorpusStats corpus_stats(const std::vector<ParallelExample>& corpus, const GenderLexicon& lexicon) {
  CorpusStats stats;
  stats.n_sentences = corpus.size();
  for (const auto& ex : corpus) {
    for (const auto& t : ex.target) {
      if (is_punctuation_token(t)) continue;
      ++stats.n_words;
      if (lexicon.is_pronoun(t)) ++stats.n_gender_pronouns;
    }
  }
  return stats;
}

std::vector<Caption> read_captions(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Caption> out;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = parse_line(line, path, lineno);
    Caption c;
    c.id = j.at("id").get<std::string>();
    c.text = j.at("text").get<std::string>();
    if (j.contains("image_id") && !j["image_id"].is_null()) c.image_id = j["image_id"].get<std::string>();
    if (tokenize(c.text).empty()) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": empty caption text");
    }
    if (!seen.emplace(c.id, lineno).second) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": duplicate caption id '" + c.id + "'");
    }
    out.push_back(std::move(c));
  }
  return out;
}

void write_captions(const std::filesystem::path& path, const std::vector<Caption>& corpus) {
  auto out = open_out(path);
  for (const auto& c : corpus) {
    nlohmann::ordered_json j;
    j["id"] = c.id;
    j["text"] = c.text;
    if (c.image_id) j["image_id"] = *c.image_id;
    out << j.dump() << '\n';
  }
}

std::vector<ParallelExample> read_parallel(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<ParallelExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = parse_line(line, path, lineno);
    ParallelExample ex;
    ex.id = j.at("id").get<std::string>();
    ex.source = tokenize(j.at("source").get<std::string>());
    ex.target = tokenize(j.at("target").get<std::string>());
    if (j.contains("image_id") && !j["image_id"].is_null()) ex.image_id = j["image_id"].get<std::string>();
    if (ex.source.empty() || ex.target.empty()) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": empty source or target");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void write_parallel(const std::filesystem::path& path, const std::vector<ParallelExample>& corpus) {
  auto out = open_out(path);
  for (const auto& ex : corpus) {
    nlohmann::ordered_json j;
    j["id"] = ex.id;
    j["source"] = join_tokens(ex.source);
    j["target"] = join_tokens(ex.target);
    if (ex.image_id) j["image_id"] = *ex.image_id;
    out << j.dump() << '\n';
  }
}

std::string stats_to_json(const CorpusStats& stats) {
  nlohmann::ordered_json j;
  j["n_sentences"] = stats.n_sentences;
  j["n_words"] = stats.n_words;
  j["n_gender_pronouns"] = stats.n_gender_pronouns;
  return j.dump(2);
}

}  // namespace mmt
