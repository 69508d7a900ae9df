#include <set>

#include "doctest.h"
#include "mmt/corpus.hpp"
#include "test_support.hpp"

using namespace mmt;

namespace {

std::vector<Caption> captions(std::initializer_list<const char*> texts) {
  std::vector<Caption> out;
  int i = 0;
  for (const char* t : texts) out.push_back({"c" + std::to_string(i++), t, std::nullopt});
  return out;
}

ParallelExample target_only(const std::string& text) { return {"x", {"o"}, tokenize(text), std::nullopt}; }

GenderLexicon toy_lexicon() { return GenderLexicon::load(testing::data_dir() / "toy_lexicon.txt"); }

}  // namespace

TEST_CASE("tokenize separates punctuation and clitics") {
  CHECK(tokenize("He reads.") == TokenSeq{"he", "reads", "."});
  CHECK(tokenize("").empty());
  CHECK(tokenize("   \t ").empty());
  CHECK(tokenize("A man's dog") == TokenSeq{"a", "man", "'s", "dog"});
  CHECK(tokenize("She isn't here!") == TokenSeq{"she", "is", "n't", "here", "!"});
  CHECK(tokenize("\"Quoted,\" he said...") == TokenSeq{"\"", "quoted", ",", "\"", "he", "said", ".", ".", "."});
  CHECK(tokenize("a t-shirt") == TokenSeq{"a", "t-shirt"});
  CHECK(tokenize("We'll go, they've left") == TokenSeq{"we", "'ll", "go", ",", "they", "'ve", "left"});
}

TEST_CASE("tokenize is deterministic and lowercases") {
  const std::string s = "The DOCTOR's Bag, Again.";
  CHECK(tokenize(s) == tokenize(s));
  for (const auto& t : tokenize(s)) {
    for (char c : t) CHECK_FALSE((c >= 'A' && c <= 'Z'));
  }
}

TEST_CASE("filter_gendered drops lexicon hits and keeps order") {
  GenderLexicon lex;
  lex.gendered_nouns = {"man"};
  auto kept = filter_gendered(captions({"a man walking", "a person walking"}), lex);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].text == "a person walking");

  const auto clean = captions({"a dog", "he runs", "she sings"});
  const auto same = filter_gendered(clean, lex);
  REQUIRE(same.size() == clean.size());
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i].id == clean[i].id);
}

TEST_CASE("filter_gendered on a five sentence corpus") {
  GenderLexicon lex;
  lex.gendered_nouns = {"woman", "king"};
  lex.skewed_professions = {"football player"};
  // Hits: sentence 1 (woman), sentence 3 (football player). Pronouns are kept.
  const auto corpus = captions({"A woman waves.", "He waves.", "The football player runs.",
                                "A football fan cheers.", "Kingdom of birds."});
  const auto kept = filter_gendered(corpus, lex);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].id == "c1");
  CHECK(kept[1].id == "c3");
  CHECK(kept[2].id == "c4");
}

TEST_CASE("detect_skewed_professions") {
  SUBCASE("always male") {
    std::vector<Caption> corpus;
    for (int i = 0; i < 10; ++i) corpus.push_back({"f" + std::to_string(i), "The football player kicks his ball.", {}});
    corpus.push_back({"n", "The football player rests.", {}});  // no pronoun: ignored
    CHECK(detect_skewed_professions(corpus, {"football player"}, 0.95) == std::set<std::string>{"football player"});
  }
  SUBCASE("one female in ten is below threshold 1.0") {
    std::vector<Caption> corpus;
    for (int i = 0; i < 9; ++i) corpus.push_back({"m" + std::to_string(i), "A pilot checks his watch.", {}});
    corpus.push_back({"f", "A pilot checks her watch.", {}});
    CHECK(detect_skewed_professions(corpus, {"pilot"}, 1.0).empty());
    CHECK(detect_skewed_professions(corpus, {"pilot"}, 0.9) == std::set<std::string>{"pilot"});
  }
  SUBCASE("no co-occurrence is excluded") {
    CHECK(detect_skewed_professions(captions({"a baker bakes"}), {"baker"}, 0.0).empty());
  }
  SUBCASE("mixed sentences only enlarge the denominator") {
    // male 2, female 0, mixed 1: frequency 2/3.
    auto corpus = captions({"the nurse and his cat", "the nurse and his dog", "the nurse saw her and him"});
    CHECK(detect_skewed_professions(corpus, {"nurse"}, 0.66).size() == 1);
    CHECK(detect_skewed_professions(corpus, {"nurse"}, 0.67).empty());
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(detect_skewed_professions({}, {"x"}, 1.5), Error);
    CHECK_THROWS_AS(detect_skewed_professions({}, {}, 0.5), Error);
  }
}

TEST_CASE("toy corpus counts") {
  // Reference values come from a separate script that re-tokenizes the file.
  const auto corpus = read_captions(testing::data_dir() / "toy_captions.jsonl");
  REQUIRE(corpus.size() == 100);
  auto lex = toy_lexicon();
  const auto skewed = detect_skewed_professions(corpus, {"football player", "singer", "chef"}, 0.95, lex);
  CHECK(skewed == std::set<std::string>{"football player"});

  std::vector<ParallelExample> before;
  for (const auto& c : filter_gendered(corpus, lex)) before.push_back(target_only(c.text));
  CHECK(corpus_stats(before, lex) == CorpusStats{90, 547, 100});

  lex.skewed_professions = skewed;
  std::vector<ParallelExample> after;
  for (const auto& c : filter_gendered(corpus, lex)) after.push_back(target_only(c.text));
  CHECK(corpus_stats(after, lex) == CorpusStats{80, 487, 90});
}

TEST_CASE("split partitions deterministically") {
  std::vector<int> items(10);
  std::iota(items.begin(), items.end(), 0);
  const auto s = split(items, 2, 2, 7);
  CHECK(s.train.size() == 6);
  CHECK(s.val.size() == 2);
  CHECK(s.test.size() == 2);
  std::set<int> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 10);
  CHECK(std::is_sorted(s.train.begin(), s.train.end()));

  const auto again = split(items, 2, 2, 7);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(again.test == s.test);

  const auto whole = split(items, 0, 0, 3);
  CHECK(whole.train == items);
  CHECK(whole.val.empty());
  CHECK(whole.test.empty());
}

TEST_CASE("split names the counts on a size violation") {
  std::vector<int> items(5);
  try {
    split(items, 3, 3, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find('6') != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
}

TEST_CASE("corpus_stats") {
  CHECK(corpus_stats({}) == CorpusStats{0, 0, 0});
  const std::vector<ParallelExample> toy{target_only("he sits"), target_only("she reads her book"),
                                         target_only("a dog runs")};
  CHECK(corpus_stats(toy) == CorpusStats{3, 9, 3});
  // Punctuation tokens are not words.
  CHECK(corpus_stats({target_only("He sits.")}) == CorpusStats{1, 2, 1});
}

TEST_CASE("corpus_stats is additive over splits") {
  std::vector<ParallelExample> corpus;
  for (const auto& c : read_captions(testing::data_dir() / "toy_captions.jsonl")) corpus.push_back(target_only(c.text));
  const auto whole = corpus_stats(corpus);
  CHECK(whole.n_gender_pronouns <= whole.n_words);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = split(corpus, seed % 30, (seed * 7) % 40, seed);
    CHECK(corpus_stats(s.train) + corpus_stats(s.val) + corpus_stats(s.test) == whole);
  }
}

TEST_CASE("lexicon loading and validation") {
  const auto lex = toy_lexicon();
  CHECK(lex.gendered_nouns.count("king") == 1);
  CHECK(lex.gendered_nouns.size() == 8);
  CHECK(lex.skewed_professions.empty());
  CHECK(lex.is_pronoun("hers"));
  CHECK_FALSE(lex.is_pronoun("o"));

  GenderLexicon bad;
  bad.gendered_nouns = {"Man"};
  CHECK_THROWS_AS(bad.validate(), Error);
  GenderLexicon overlap;
  overlap.female_pronouns.insert("his");
  CHECK_THROWS_AS(overlap.validate(), Error);
  CHECK_THROWS(GenderLexicon::load(testing::data_dir() / "does_not_exist.txt"));
}

TEST_CASE("jsonl round trips") {
  const auto dir = testing::scratch_dir("corpus-io");
  std::vector<Caption> caps{{"a", "A dog.", std::string("img-1")}, {"b", "He runs.", std::nullopt}};
  write_captions(dir / "caps.jsonl", caps);
  const auto back = read_captions(dir / "caps.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == std::optional<std::string>("img-1"));
  CHECK_FALSE(back[1].image_id.has_value());
  CHECK(back[1].text == "He runs.");

  std::vector<ParallelExample> par{{"p", {"o", "koşuyor", "."}, {"he", "runs", "."}, std::string("i")}};
  write_parallel(dir / "par.jsonl", par);
  CHECK(read_parallel(dir / "par.jsonl") == par);
}

TEST_CASE("read_captions rejects empty text and duplicate ids") {
  const auto dir = testing::scratch_dir("corpus-bad");
  testing::spit(dir / "empty.jsonl", "{\"id\": \"a\", \"text\": \"  \"}\n");
  CHECK_THROWS_AS(read_captions(dir / "empty.jsonl"), Error);
  testing::spit(dir / "dup.jsonl", "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n");
  CHECK_THROWS_AS(read_captions(dir / "dup.jsonl"), Error);
}
