#include "mmt/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/corpus.hpp"
#include "mmt/eval.hpp"
#include "mmt/http_engine.hpp"
#include "mmt/mt_client.hpp"
#include "mmt/synthetic.hpp"
#include "mmt/trainer.hpp"

namespace mmt {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

class UsageError : public Error {
 public:
  using Error::Error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("short write to " + path.string());
}

void write_lines(const fs::path& path, const std::vector<TokenSeq>& lines) {
  std::string text;
  for (const auto& l : lines) text += join_tokens(l) + "\n";
  write_text(path, text);
}

std::set<std::string> required_images(const std::vector<ParallelExample>& data) {
  std::set<std::string> ids;
  for (const auto& ex : data) {
    if (ex.image_id) ids.insert(*ex.image_id);
  }
  return ids;
}

void check_store(const FeatureStore& store, const std::vector<ParallelExample>& data) {
  for (const auto& ex : data) {
    if (!ex.image_id) throw Error("example '" + ex.id + "' has no image_id but the model needs images");
  }
  const auto v = store.validate(required_images(data));
  if (!v.missing.empty()) {
    throw Error("feature store " + store.root().string() + " lacks " + std::to_string(v.missing.size()) +
                " image(s), first: '" + v.missing.front() + "'");
  }
  if (!v.integrity_errors.empty()) throw Error(v.integrity_errors.front());
}

// ---------------------------------------------------------------- make-synthetic

struct SyntheticArgs {
  SyntheticOptions options;
  fs::path out;
  fs::path store;
};

constexpr const char* kDefaultGenderedNouns[] = {
    "man",    "men",    "woman",   "women",  "boy",     "boys",   "girl",     "girls",    "lady",
    "ladies", "gentleman", "gentlemen", "king", "queen", "father", "mother",  "son",      "daughter",
    "brother", "sister", "husband", "wife",   "actress", "waitress", "businessman", "businesswoman"};

int cmd_make_synthetic(const SyntheticArgs& a, std::ostream& out) {
  fs::create_directories(a.out);
  const auto corpus = make_synthetic_corpus(a.options);
  write_captions(a.out / "captions.jsonl", corpus.captions);
  std::string lexicon = "[gendered_nouns]\n";
  for (const char* n : kDefaultGenderedNouns) lexicon += std::string(n) + "\n";
  lexicon += "[skewed_professions]\n";
  write_text(a.out / "lexicon.txt", lexicon);
  out << "wrote " << corpus.captions.size() << " captions to " << (a.out / "captions.jsonl").string() << "\n";
  if (!a.store.empty()) {
    FeatureStore store(a.store);
    write_feature_bank(store, corpus.images, a.options.noise_sigma, a.options.seed);
    out << "wrote " << corpus.images.size() << " feature records to " << a.store.string() << "\n";
  }
  return kExitOk;
}

// ----------------------------------------------------------------- build-dataset

struct BuildArgs {
  fs::path corpus, lexicon, out, run_dir, cache, professions;
  double skew_threshold = 0.95;
  std::string engine = "mock";
  std::string engine_url, api_key;
  std::string src_lang = "en", tgt_lang = "tr";
  std::size_t n_val = 1000, n_test = 1000;
  std::size_t chunk_size = 32, max_in_flight = 4;
  int max_retries = 3;
  std::uint64_t seed = 1;
};

int cmd_build_dataset(const BuildArgs& a, std::ostream& out) {
  if (a.engine == "http" && a.engine_url.empty()) throw UsageError("--engine http requires --engine-url");
  auto lexicon = GenderLexicon::load(a.lexicon);
  const auto captions = read_captions(a.corpus);

  std::set<std::string> detected;
  if (!a.professions.empty()) {
    std::set<std::string> candidates;
    std::ifstream in(a.professions);
    if (!in) throw Error("cannot read " + a.professions.string());
    for (std::string line; std::getline(in, line);) {
      const auto tokens = tokenize(line);
      if (!tokens.empty() && tokens.front() != "#") candidates.insert(join_tokens(tokens));
    }
    detected = detect_skewed_professions(captions, candidates, a.skew_threshold, lexicon);
    lexicon.skewed_professions.insert(detected.begin(), detected.end());
  }
  const auto kept = filter_gendered(captions, lexicon);
  std::set<std::string> kept_ids;
  for (const auto& c : kept) kept_ids.insert(c.id);

  std::unique_ptr<TranslationEngine> engine;
  if (a.engine == "mock") {
    engine = std::make_unique<MockNeutralizingEngine>(lexicon);
  } else {
    HttpTranslationEngine::Options options;
    options.base_url = a.engine_url;
    options.api_key = a.api_key;
    engine = std::make_unique<HttpTranslationEngine>(options);
  }
  const auto cache_path = a.cache.empty() ? a.out / "translation_cache.jsonl" : a.cache;
  fs::create_directories(cache_path.parent_path().empty() ? fs::path(".") : cache_path.parent_path());
  TranslationCache cache(cache_path);
  ClientConfig client;
  client.chunk_size = a.chunk_size;
  client.max_in_flight = a.max_in_flight;
  client.max_retries = a.max_retries;
  auto pp = build_pseudo_parallel(kept, *engine, cache, client, a.src_lang, a.tgt_lang);
  if (pp.batch.rate_limited) {
    spdlog::warn("translation quota exhausted; {} captions were not translated, rerun after {} ms",
                 pp.dropped_ids.size(), pp.batch.pause.count());
  }
  const auto parts = split(pp.examples, a.n_val, a.n_test, a.seed);

  const auto run_dir = resolve_run_dir(a.out, a.run_dir, a.seed);
  fs::create_directories(run_dir);
  write_parallel(run_dir / "train.jsonl", parts.train);
  write_parallel(run_dir / "val.jsonl", parts.val);
  write_parallel(run_dir / "test.jsonl", parts.test);

  const auto s_train = corpus_stats(parts.train, lexicon);
  const auto s_val = corpus_stats(parts.val, lexicon);
  const auto s_test = corpus_stats(parts.test, lexicon);
  ojson stats;
  stats["train"] = ojson::parse(stats_to_json(s_train));
  stats["val"] = ojson::parse(stats_to_json(s_val));
  stats["test"] = ojson::parse(stats_to_json(s_test));
  stats["total"] = ojson::parse(stats_to_json(s_train + s_val + s_test));
  stats["input_captions"] = captions.size();
  stats["filtered_out"] = captions.size() - kept.size();
  stats["translation_failures"] = pp.dropped_ids.size();
  stats["detected_skewed_professions"] = detected;
  write_text(run_dir / "stats.json", stats.dump(2) + "\n");

  std::string drops;
  for (const auto& c : captions) {
    if (!kept_ids.count(c.id)) drops += ojson{{"id", c.id}, {"stage", "filter"}}.dump() + "\n";
  }
  for (const auto& id : pp.dropped_ids) drops += ojson{{"id", id}, {"stage", "translate"}}.dump() + "\n";
  write_text(run_dir / "drops.jsonl", drops);

  out << "run_dir " << run_dir.string() << "\n"
      << "examples train " << parts.train.size() << " val " << parts.val.size() << " test " << parts.test.size()
      << "\n"
      << "translation engine_calls " << pp.batch.engine_calls << " cache_hits " << pp.batch.cache_hits << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------------- train

struct TrainArgs {
  fs::path data, store, out, run_dir;
  std::string fusion = "none";
  ModelConfig model;
  TrainConfig train;
  std::string early_stop = "val_loss";
  double word_dropout = 0.0;
  int min_count = 2;
  bool double_precision = false;
};

template <typename Scalar>
TrainResult run_training(const TrainArgs& a, const ModelConfig& mc, const Vocab& sv, const Vocab& tv,
                         const std::vector<ParallelExample>& train_set, const std::vector<ParallelExample>& val_set,
                         const FeatureSource* features, const std::optional<CorruptionConfig>& corruption,
                         const fs::path& run_dir) {
  TranslationModel<Scalar> model(mc, sv, tv, a.train.seed);
  return train(model, train_set, val_set, features, a.train, corruption, run_dir);
}

int cmd_train(TrainArgs a, std::ostream& out) {
  a.model.fusion_mode = parse_fusion_mode(a.fusion);
  a.train.early_stop_metric = a.early_stop == "val_bleu" ? EarlyStopMetric::val_bleu : EarlyStopMetric::val_loss;
  if (a.model.fusion_mode != FusionMode::none && a.store.empty()) {
    throw UsageError("--fusion " + a.fusion + " requires --store");
  }
  a.train.validate();
  std::optional<CorruptionConfig> corruption;
  if (a.word_dropout > 0.0) {
    CorruptionConfig c;
    c.p = a.word_dropout;
    c.seed = derive_seed(a.train.seed, "word_dropout");
    c.validate();
    corruption = c;
  }

  const auto train_set = read_parallel(a.data / "train.jsonl");
  const auto val_set = read_parallel(a.data / "val.jsonl");
  std::unique_ptr<FeatureStore> store;
  if (a.model.fusion_mode != FusionMode::none) {
    store = std::make_unique<FeatureStore>(a.store);
    check_store(*store, train_set);
    check_store(*store, val_set);
  }

  std::vector<TokenSeq> src, tgt;
  for (const auto& ex : train_set) {
    src.push_back(ex.source);
    tgt.push_back(ex.target);
  }
  const auto sv = Vocab::build(src, a.min_count);
  const auto tv = Vocab::build(tgt, a.min_count);
  auto mc = a.model;
  mc.src_vocab = sv.size();
  mc.tgt_vocab = tv.size();
  mc.validate();

  const auto run_dir = resolve_run_dir(a.out, a.run_dir, a.train.seed);
  fs::create_directories(run_dir);
  ojson cfg;
  cfg["model"] = config_to_json(mc);
  cfg["train"] = {{"beta1", a.train.beta1},
                  {"beta2", a.train.beta2},
                  {"adam_eps", a.train.adam_eps},
                  {"warmup_steps", a.train.warmup_steps},
                  {"lr_init", a.train.lr_init},
                  {"lr_peak", a.train.lr_peak},
                  {"max_tokens_per_batch", a.train.max_tokens_per_batch},
                  {"dropout", a.train.dropout},
                  {"label_smoothing", a.train.label_smoothing},
                  {"patience", a.train.patience},
                  {"avg_last_k", a.train.avg_last_k},
                  {"max_epochs", a.train.max_epochs},
                  {"early_stop_metric", a.early_stop},
                  {"seed", a.train.seed}};
  cfg["word_dropout"] = a.word_dropout;
  cfg["data"] = a.data.string();
  cfg["store"] = a.store.string();
  write_text(run_dir / "run_config.json", cfg.dump(2) + "\n");

  const auto result = a.double_precision
                          ? run_training<double>(a, mc, sv, tv, train_set, val_set, store.get(), corruption, run_dir)
                          : run_training<float>(a, mc, sv, tv, train_set, val_set, store.get(), corruption, run_dir);
  out << "run_dir " << run_dir.string() << "\n"
      << "epochs " << result.log.size() << (result.stopped_early ? " (early stop)" : "") << "\n"
      << "final_val_loss " << result.log.back().val_loss << "\n"
      << "model " << result.averaged_checkpoint.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------- evaluate

struct EvalArgs {
  fs::path model, test, store, out, run_dir;
  std::vector<std::uint64_t> seeds;
  std::uint64_t shuffle_seed = 1;
  std::size_t n_shuffles = 5;
  std::vector<std::string> metrics{"bleu", "gender"};
  int beam = 5;
  int max_len = 64;
};

template <typename Scalar>
int evaluate_model(const EvalArgs& a, const CheckpointData& ckpt, std::ostream& out) {
  const auto model = from_checkpoint<Scalar>(ckpt);
  const auto test = read_parallel(a.test);
  std::unique_ptr<FeatureStore> store;
  if (model.multimodal()) {
    if (a.store.empty()) throw UsageError("the model uses images; --store is required");
    store = std::make_unique<FeatureStore>(a.store);
    check_store(*store, test);
  } else if (!a.store.empty()) {
    store = std::make_unique<FeatureStore>(a.store);
  }

  std::vector<std::uint64_t> seeds = a.seeds;
  if (seeds.empty()) {
    for (std::size_t i = 0; i < a.n_shuffles; ++i) seeds.push_back(a.shuffle_seed + i);
  }
  EvalOptions opts;
  opts.beam = {a.beam, a.max_len};
  opts.bleu = std::count(a.metrics.begin(), a.metrics.end(), "bleu") > 0;
  opts.gender = std::count(a.metrics.begin(), a.metrics.end(), "gender") > 0;
  const auto result = adversarial_eval(model, test, store.get(), seeds, opts);

  const auto run_dir = resolve_run_dir(a.out, a.run_dir, seeds.empty() ? 0 : seeds.front());
  fs::create_directories(run_dir);
  write_text(run_dir / "report.json", report_to_json(result.report) + "\n");
  std::vector<EvalReport> one{result.report};
  write_text(run_dir / "report.txt", report_table(one));
  write_lines(run_dir / "hyp_congruent.txt", result.congruent);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    write_lines(run_dir / ("hyp_shuffled_seed" + std::to_string(seeds[i]) + ".txt"), result.shuffled[i]);
  }

  out << "run_dir " << run_dir.string() << "\n";
  for (const auto& s : result.report.per_seed) {
    out << "incongruent decode seed " << s.seed << " bleu " << s.bleu;
    if (s.gender_accuracy) out << " gender_acc " << *s.gender_accuracy;
    out << " changed " << s.changed_hypotheses << "\n";
  }
  out << report_table(one);
  return kExitOk;
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
  for (const auto& m : a.metrics) {
    if (m != "bleu" && m != "gender") throw UsageError("unknown metric '" + m + "'");
  }
  const auto ckpt = read_checkpoint(a.model);
  return evaluate_model<float>(a, ckpt, out);
}

// ---------------------------------------------------------------- validate-store

struct StoreArgs {
  fs::path store;
  std::vector<fs::path> data;
};

int cmd_validate_store(const StoreArgs& a, std::ostream& out) {
  FeatureStore store(a.store);
  std::set<std::string> required;
  for (const auto& path : a.data) {
    for (const auto& ex : read_parallel(path)) {
      if (ex.image_id) required.insert(*ex.image_id);
    }
  }
  const auto v = store.validate(required);
  out << "records " << store.size() << " required " << required.size() << "\n";
  for (const auto& id : v.missing) out << "missing " << id << "\n";
  for (const auto& msg : v.integrity_errors) out << "integrity " << msg << "\n";
  for (const auto& f : v.orphan_files) out << "orphan " << f << "\n";
  out << (v.ok() ? "ok" : "invalid") << "\n";
  return v.ok() ? kExitOk : kExitFailure;
}

}  // namespace

fs::path resolve_run_dir(const fs::path& out, const fs::path& explicit_dir, std::uint64_t seed) {
  if (!explicit_dir.empty()) return explicit_dir;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << "-seed" << seed;
  return out / name.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal translation toolkit: dataset construction, training and adversarial evaluation"};
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags win");
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

  SyntheticArgs syn;
  auto* s_cmd = app.add_subcommand("make-synthetic", "Write a templated caption corpus and matching synthetic features");
  s_cmd->add_option("--out", syn.out, "Output directory")->required();
  s_cmd->add_option("--store", syn.store, "Feature store to fill");
  s_cmd->add_option("--n-captions", syn.options.n_captions)->capture_default_str();
  s_cmd->add_option("--n-images", syn.options.n_images)->capture_default_str();
  s_cmd->add_option("--sigma", syn.options.noise_sigma, "Feature noise")->capture_default_str();
  s_cmd->add_option("--seed", syn.options.seed)->capture_default_str();

  BuildArgs build;
  auto* b_cmd = app.add_subcommand("build-dataset", "Filter, back-translate and split a caption corpus");
  b_cmd->add_option("--corpus", build.corpus, "Caption JSONL")->required()->check(CLI::ExistingFile);
  b_cmd->add_option("--lexicon", build.lexicon, "Gender lexicon")->required()->check(CLI::ExistingFile);
  b_cmd->add_option("--out", build.out, "Output root")->required();
  b_cmd->add_option("--run-dir", build.run_dir, "Exact output directory");
  b_cmd->add_option("--cache", build.cache, "Translation cache (default <out>/translation_cache.jsonl)");
  b_cmd->add_option("--professions", build.professions, "Candidate profession phrases, one per line")
      ->check(CLI::ExistingFile);
  b_cmd->add_option("--skew-threshold", build.skew_threshold)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  b_cmd->add_option("--engine", build.engine)->capture_default_str()->check(CLI::IsMember({"mock", "http"}));
  b_cmd->add_option("--engine-url", build.engine_url, "scheme://host[:port] of the HTTP engine");
  b_cmd->add_option("--api-key", build.api_key)->envname("MMT_TRANSLATE_API_KEY");
  b_cmd->add_option("--src-lang", build.src_lang)->capture_default_str();
  b_cmd->add_option("--tgt-lang", build.tgt_lang)->capture_default_str();
  b_cmd->add_option("--n-val", build.n_val)->capture_default_str();
  b_cmd->add_option("--n-test", build.n_test)->capture_default_str();
  b_cmd->add_option("--chunk-size", build.chunk_size)->capture_default_str();
  b_cmd->add_option("--max-in-flight", build.max_in_flight)->capture_default_str();
  b_cmd->add_option("--max-retries", build.max_retries)->capture_default_str();
  b_cmd->add_option("--seed", build.seed)->capture_default_str();

  TrainArgs tr;
  auto* t_cmd = app.add_subcommand("train", "Train a model and average its last checkpoints");
  t_cmd->add_option("--data", tr.data, "Directory with train.jsonl and val.jsonl")
      ->required()
      ->check(CLI::ExistingDirectory);
  t_cmd->add_option("--store", tr.store, "Feature store")->check(CLI::ExistingDirectory);
  t_cmd->add_option("--out", tr.out, "Output root")->required();
  t_cmd->add_option("--run-dir", tr.run_dir, "Exact output directory");
  t_cmd->add_option("--fusion", tr.fusion)->capture_default_str()->check(CLI::IsMember({"none", "gated", "concat"}));
  t_cmd->add_option("--enc-layers", tr.model.n_enc_layers)->capture_default_str();
  t_cmd->add_option("--dec-layers", tr.model.n_dec_layers)->capture_default_str();
  t_cmd->add_option("--heads", tr.model.n_heads)->capture_default_str();
  t_cmd->add_option("--d-model", tr.model.d_model)->capture_default_str();
  t_cmd->add_option("--d-ffn", tr.model.d_ffn)->capture_default_str();
  t_cmd->add_option("--max-positions", tr.model.max_positions)->capture_default_str();
  t_cmd->add_option("--min-count", tr.min_count, "Vocabulary frequency cutoff")->capture_default_str();
  t_cmd->add_option("--warmup", tr.train.warmup_steps)->capture_default_str();
  t_cmd->add_option("--lr-init", tr.train.lr_init)->capture_default_str();
  t_cmd->add_option("--lr-peak", tr.train.lr_peak)->capture_default_str();
  t_cmd->add_option("--max-tokens", tr.train.max_tokens_per_batch)->capture_default_str();
  t_cmd->add_option("--dropout", tr.train.dropout)->capture_default_str();
  t_cmd->add_option("--label-smoothing", tr.train.label_smoothing)->capture_default_str();
  t_cmd->add_option("--patience", tr.train.patience)->capture_default_str();
  t_cmd->add_option("--avg-last-k", tr.train.avg_last_k)->capture_default_str();
  t_cmd->add_option("--max-epochs", tr.train.max_epochs)->capture_default_str();
  t_cmd->add_option("--early-stop", tr.early_stop)
      ->capture_default_str()
      ->check(CLI::IsMember({"val_loss", "val_bleu"}));
  t_cmd->add_flag("--val-bleu", tr.train.compute_val_bleu, "Log greedy validation BLEU every epoch");
  t_cmd->add_option("--word-dropout", tr.word_dropout, "Source word dropout rate; 0 disables")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  t_cmd->add_flag("--double", tr.double_precision, "Train in double precision");
  t_cmd->add_option("--seed", tr.train.seed)->capture_default_str();

  EvalArgs ev;
  auto* e_cmd = app.add_subcommand("evaluate", "Decode with congruent and shuffled images and report metrics");
  e_cmd->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  e_cmd->add_option("--test", ev.test, "Test JSONL")->required()->check(CLI::ExistingFile);
  e_cmd->add_option("--store", ev.store, "Feature store")->check(CLI::ExistingDirectory);
  e_cmd->add_option("--out", ev.out, "Output root")->required();
  e_cmd->add_option("--run-dir", ev.run_dir, "Exact output directory");
  e_cmd->add_option("--seeds", ev.seeds, "Shuffle seeds, one incongruent decode each");
  e_cmd->add_option("--shuffle-seed", ev.shuffle_seed, "First shuffle seed when --seeds is absent")
      ->capture_default_str();
  e_cmd->add_option("--n-shuffles", ev.n_shuffles, "Number of consecutive shuffle seeds")->capture_default_str();
  e_cmd->add_option("--metric", ev.metrics, "bleu and/or gender")->capture_default_str();
  e_cmd->add_option("--beam", ev.beam)->capture_default_str()->check(CLI::PositiveNumber);
  e_cmd->add_option("--max-len", ev.max_len)->capture_default_str()->check(CLI::PositiveNumber);

  StoreArgs st;
  auto* v_cmd = app.add_subcommand("validate-store", "Check a feature store against the ids a dataset needs");
  v_cmd->add_option("--store", st.store, "Feature store")->required()->check(CLI::ExistingDirectory);
  v_cmd->add_option("--data", st.data, "Parallel JSONL files whose image ids must resolve")
      ->check(CLI::ExistingFile);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  spdlog::set_level(spdlog::level::from_str(log_level));
  try {
    if (*s_cmd) return cmd_make_synthetic(syn, out);
    if (*b_cmd) return cmd_build_dataset(build, out);
    if (*t_cmd) return cmd_train(tr, out);
    if (*e_cmd) return cmd_evaluate(ev, out);
    if (*v_cmd) return cmd_validate_store(st, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    const std::string stage = *s_cmd ? "make-synthetic" : *b_cmd ? "build-dataset" : *t_cmd ? "train"
                            : *e_cmd ? "evaluate" : "validate-store";
    err << stage << " failed: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mmt
