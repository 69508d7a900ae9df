#include <regex>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mmt/cli.hpp"
#include "test_support.hpp"

using namespace mmt;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(testing::slurp(p)); }

std::vector<std::string> model_flags() {
  return {"--enc-layers", "1", "--dec-layers", "1", "--heads", "2", "--d-model", "16", "--d-ffn", "32",
          "--warmup", "10", "--max-tokens", "128", "--min-count", "1", "--max-epochs", "2", "--seed", "3"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// make-synthetic followed by build-dataset, shared by the training cases.
const fs::path& synthetic_dataset() {
  static const fs::path root = [] {
    const auto dir = testing::scratch_dir("cli-synthetic");
    auto r = run({"--log-level", "warn", "make-synthetic", "--out", (dir / "syn").string(), "--store",
                  (dir / "store").string(), "--n-captions", "120", "--n-images", "8", "--seed", "3"});
    REQUIRE(r.code == 0);
    r = run({"--log-level", "warn", "build-dataset", "--corpus", (dir / "syn" / "captions.jsonl").string(),
             "--lexicon", (dir / "syn" / "lexicon.txt").string(), "--out", (dir / "data").string(), "--run-dir",
             (dir / "data" / "run").string(), "--n-val", "20", "--n-test", "20", "--seed", "3"});
    REQUIRE(r.code == 0);
    return dir;
  }();
  return root;
}

}  // namespace

TEST_CASE("run directories carry a UTC timestamp and the seed") {
  const auto p = resolve_run_dir("runs", "", 42);
  CHECK(p.parent_path() == fs::path("runs"));
  CHECK(std::regex_match(p.filename().string(), std::regex(R"(\d{8}T\d{6}Z-seed42)")));
  CHECK(resolve_run_dir("runs", "exact/dir", 42) == fs::path("exact/dir"));
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"no-such-command"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
  CHECK(run({"train", "--help"}).code == kExitOk);
  const auto dir = testing::scratch_dir("cli-usage");
  const auto data = testing::data_dir();
  const auto missing = run({"build-dataset", "--corpus", (data / "toy_captions.jsonl").string(), "--lexicon",
                            (dir / "absent.txt").string(), "--out", dir.string()});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("absent.txt") != std::string::npos);
  CHECK(run({"build-dataset", "--corpus", (data / "toy_captions.jsonl").string(), "--lexicon",
             (data / "toy_lexicon.txt").string(), "--out", dir.string(), "--engine", "carrier-pigeon"})
            .code == kExitUsage);
  CHECK(run({"build-dataset", "--corpus", (data / "toy_captions.jsonl").string(), "--lexicon",
             (data / "toy_lexicon.txt").string(), "--out", dir.string(), "--engine", "http"})
            .code == kExitUsage);
}

TEST_CASE("build-dataset on the toy corpus") {
  const auto dir = testing::scratch_dir("cli-build");
  const auto data = testing::data_dir();
  auto args = [&](const std::string& run_dir) {
    return std::vector<std::string>{"--log-level", "warn", "build-dataset", "--corpus",
                                    (data / "toy_captions.jsonl").string(), "--lexicon",
                                    (data / "toy_lexicon.txt").string(), "--professions",
                                    (data / "toy_professions.txt").string(), "--out", dir.string(), "--run-dir",
                                    (dir / run_dir).string(), "--n-val", "10", "--n-test", "10", "--seed", "5"};
  };
  const auto first = run(args("a"));
  REQUIRE(first.code == 0);
  CHECK(first.out.find("examples train 60 val 10 test 10") != std::string::npos);
  // 33 distinct kept texts in chunks of 32.
  CHECK(first.out.find("translation engine_calls 2 cache_hits 0") != std::string::npos);

  const auto stats = read_json(dir / "a" / "stats.json");
  CHECK(stats["total"]["n_sentences"] == 80);
  CHECK(stats["total"]["n_words"] == 487);
  CHECK(stats["total"]["n_gender_pronouns"] == 90);
  CHECK(stats["input_captions"] == 100);
  CHECK(stats["filtered_out"] == 20);
  CHECK(stats["translation_failures"] == 0);
  CHECK(stats["detected_skewed_professions"] == nlohmann::json::array({"football player"}));
  CHECK(stats["train"]["n_sentences"] == 60);

  std::istringstream drops(testing::slurp(dir / "a" / "drops.jsonl"));
  int n_drops = 0;
  for (std::string line; std::getline(drops, line);) {
    CHECK(nlohmann::json::parse(line)["stage"] == "filter");
    ++n_drops;
  }
  CHECK(n_drops == 20);

  const auto second = run(args("b"));
  REQUIRE(second.code == 0);
  CHECK(second.out.find("translation engine_calls 0 cache_hits 80") != std::string::npos);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "stats.json", "drops.jsonl"}) {
    CAPTURE(f);
    CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
  }
}

TEST_CASE("train and evaluate a text-only model") {
  const auto& root = synthetic_dataset();
  const auto run_dir = root / "train-none";
  const auto t = run(concat({"--log-level", "warn", "train", "--data", (root / "data" / "run").string(), "--out",
                             root.string(), "--run-dir", run_dir.string(), "--word-dropout", "0.1"},
                            model_flags()));
  REQUIRE(t.code == 0);
  CHECK(t.out.find("epochs 2") != std::string::npos);
  CHECK(fs::exists(run_dir / "checkpoint_avg.bin"));
  CHECK(fs::exists(run_dir / "checkpoint002.bin"));
  const auto cfg = read_json(run_dir / "run_config.json");
  CHECK(cfg["word_dropout"] == 0.1);
  CHECK(cfg["model"]["d_model"] == 16);
  std::istringstream log(testing::slurp(run_dir / "train_log.jsonl"));
  int epochs = 0;
  for (std::string line; std::getline(log, line); ++epochs) CHECK(nlohmann::json::parse(line)["word_dropout"] == 0.1);
  CHECK(epochs == 2);

  auto eval_args = [&](const std::string& name) {
    return std::vector<std::string>{"--log-level", "warn", "evaluate", "--model",
                                    (run_dir / "checkpoint_avg.bin").string(), "--test",
                                    (root / "data" / "run" / "test.jsonl").string(), "--out", root.string(),
                                    "--run-dir", (root / name).string(), "--seeds", "1", "2", "3", "--beam", "2",
                                    "--max-len", "20"};
  };
  const auto e = run(eval_args("eval-a"));
  REQUIRE(e.code == 0);
  for (const char* s : {"incongruent decode seed 1 ", "incongruent decode seed 2 ", "incongruent decode seed 3 "}) {
    CHECK(e.out.find(s) != std::string::npos);
  }
  CHECK(e.out.find("BLEU") != std::string::npos);
  const auto report = read_json(root / "eval-a" / "report.json");
  CHECK(report["awareness_bleu"] == 0.0);
  CHECK(report["n_seeds"] == 3);
  CHECK(report["n_examples"] == 20);
  CHECK(fs::exists(root / "eval-a" / "hyp_shuffled_seed2.txt"));

  REQUIRE(run(eval_args("eval-b")).code == 0);
  for (const char* f : {"report.json", "report.txt", "hyp_congruent.txt", "hyp_shuffled_seed3.txt"}) {
    CAPTURE(f);
    CHECK(testing::slurp(root / "eval-a" / f) == testing::slurp(root / "eval-b" / f));
  }

  const auto defaults = run({"--log-level", "warn", "evaluate", "--model", (run_dir / "checkpoint_avg.bin").string(),
                             "--test", (root / "data" / "run" / "test.jsonl").string(), "--out", root.string(),
                             "--run-dir", (root / "eval-c").string(), "--beam", "1", "--max-len", "8",
                             "--shuffle-seed", "10", "--n-shuffles", "2"});
  REQUIRE(defaults.code == 0);
  CHECK(read_json(root / "eval-c" / "report.json")["per_seed"][1]["seed"] == 11);
  CHECK(run({"evaluate", "--model", (run_dir / "checkpoint_avg.bin").string(), "--test",
             (root / "data" / "run" / "test.jsonl").string(), "--out", root.string(), "--metric", "rouge"})
            .code == kExitUsage);
}

TEST_CASE("gated models need a feature store") {
  const auto& root = synthetic_dataset();
  const auto no_store = root / "train-gated-nostore";
  const auto bad = run(concat({"--log-level", "warn", "train", "--data", (root / "data" / "run").string(), "--out",
                               root.string(), "--run-dir", no_store.string(), "--fusion", "gated"},
                              model_flags()));
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("--store") != std::string::npos);
  CHECK_FALSE(fs::exists(no_store));

  const auto run_dir = root / "train-gated";
  const auto t = run(concat({"--log-level", "warn", "train", "--data", (root / "data" / "run").string(), "--out",
                             root.string(), "--run-dir", run_dir.string(), "--fusion", "gated", "--store",
                             (root / "store").string()},
                            model_flags()));
  REQUIRE(t.code == 0);
  const std::vector<std::string> eval{"--log-level", "warn", "evaluate", "--model",
                                      (run_dir / "checkpoint_avg.bin").string(), "--test",
                                      (root / "data" / "run" / "test.jsonl").string(), "--out", root.string(),
                                      "--run-dir", (root / "eval-gated").string(), "--seeds", "1", "2",
                                      "--beam", "2", "--max-len", "20"};
  CHECK(run(eval).code == kExitUsage);
  const auto e = run(concat(eval, {"--store", (root / "store").string()}));
  REQUIRE(e.code == 0);
  CHECK(read_json(root / "eval-gated" / "report.json")["model"] == "gated");
}

TEST_CASE("config files supply defaults that flags override") {
  const auto& root = synthetic_dataset();
  testing::spit(root / "train.ini", "[train]\nmax-epochs = 1\nd-model = 32\nlabel-smoothing = 0.2\n");
  const auto run_dir = root / "train-config";
  const auto t = run(concat({"--log-level", "warn", "--config", (root / "train.ini").string(), "train", "--data",
                             (root / "data" / "run").string(), "--out", root.string(), "--run-dir", run_dir.string(),
                             "--enc-layers", "1", "--dec-layers", "1", "--heads", "2", "--d-ffn", "32",
                             "--min-count", "1", "--d-model", "16"},
                            {}));
  REQUIRE(t.code == 0);
  const auto cfg = read_json(run_dir / "run_config.json");
  CHECK(cfg["model"]["d_model"] == 16);
  CHECK(cfg["train"]["max_epochs"] == 1);
  CHECK(cfg["train"]["label_smoothing"] == 0.2);
}

TEST_CASE("validate-store") {
  const auto& root = synthetic_dataset();
  const auto ok = run({"validate-store", "--store", (root / "store").string(), "--data",
                       (root / "data" / "run" / "train.jsonl").string()});
  CHECK(ok.code == kExitOk);
  CHECK(ok.out.find("records 8") != std::string::npos);
  CHECK(ok.out.find("\nok\n") != std::string::npos);

  testing::spit(root / "extra.jsonl",
                "{\"id\": \"z\", \"source\": \"o\", \"target\": \"he\", \"image_id\": \"img-nowhere\"}\n");
  const auto bad = run({"validate-store", "--store", (root / "store").string(), "--data",
                        (root / "extra.jsonl").string()});
  CHECK(bad.code == kExitFailure);
  CHECK(bad.out.find("missing img-nowhere") != std::string::npos);
  CHECK(bad.out.find("invalid") != std::string::npos);
}
