#include "mmt/mt_client.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "json.hpp"

namespace mmt {

void TranslationRequest::validate() const {
  if (src_lang == tgt_lang) throw Error("translation request with src_lang == tgt_lang (" + src_lang + ")");
  if (text.empty()) throw Error("translation request with empty text");
}

std::string to_string(TranslationStatus status) {
  switch (status) {
    case TranslationStatus::ok: return "ok";
    case TranslationStatus::unreachable: return "unreachable";
    case TranslationStatus::quota_exceeded: return "quota_exceeded";
    case TranslationStatus::rejected: return "rejected";
  }
  return "unknown";
}

MockNeutralizingEngine::MockNeutralizingEngine(GenderLexicon lexicon) : lexicon_(std::move(lexicon)) {}

std::string MockNeutralizingEngine::neutralize(std::string_view text) const {
  auto tokens = tokenize(text);
  for (auto& t : tokens) {
    if (lexicon_.is_pronoun(t)) t = "o";
  }
  return join_tokens(tokens);
}

void MockNeutralizingEngine::fail_permanently(std::string text) {
  std::lock_guard lock(mutex_);
  permanent_.insert(std::move(text));
}

void MockNeutralizingEngine::fail_transiently(std::string text, int times) {
  std::lock_guard lock(mutex_);
  transient_[std::move(text)] = times;
}

void MockNeutralizingEngine::set_quota(std::size_t calls) {
  std::lock_guard lock(mutex_);
  quota_ = calls;
}

std::vector<EngineResult> MockNeutralizingEngine::translate(std::span<const TranslationRequest> chunk) {
  const auto call_index = calls_.fetch_add(1);
  std::vector<EngineResult> out(chunk.size());
  std::lock_guard lock(mutex_);
  if (quota_ && call_index >= *quota_) {
    for (auto& r : out) r = {TranslationStatus::quota_exceeded, {}, "quota exhausted"};
    return out;
  }
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    const auto& text = chunk[i].text;
    if (permanent_.count(text)) {
      out[i] = {TranslationStatus::rejected, {}, "injected permanent failure"};
      continue;
    }
    if (auto it = transient_.find(text); it != transient_.end() && it->second > 0) {
      --it->second;
      out[i] = {TranslationStatus::unreachable, {}, "injected transient failure"};
      continue;
    }
    out[i] = {TranslationStatus::ok, neutralize(text), {}};
    items_.fetch_add(1);
  }
  return out;
}

TranslationCache::TranslationCache(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(*file_);
  if (!in) return;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("translation").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      // A torn final write from an interrupted run; everything before it is intact.
      spdlog::warn("translation cache {}: skipping unreadable line {}", file_->string(), lineno);
    }
  }
}

std::string TranslationCache::key(std::string_view engine_id, const TranslationRequest& request) {
  std::string material;
  for (std::string_view part : {engine_id, std::string_view(request.src_lang),
                                std::string_view(request.tgt_lang), std::string_view(request.text)}) {
    material += std::to_string(part.size());
    material.push_back(':');
    material += part;
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(material.data(), material.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::optional<std::string> TranslationCache::get(const std::string& key) const {
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  return std::nullopt;
}

void TranslationCache::put(const std::string& key, const std::string& translation) {
  entries_[key] = translation;
  if (!file_) return;
  std::ofstream out(*file_, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot append to translation cache " + file_->string());
  nlohmann::ordered_json j;
  j["key"] = key;
  j["translation"] = translation;
  j["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  out << j.dump() << '\n';
}

std::chrono::milliseconds backoff_delay(const ClientConfig& config, int attempt) {
  auto delay = config.backoff_initial;
  for (int i = 1; i < attempt && delay < config.backoff_cap; ++i) delay *= 2;
  return std::min(delay, config.backoff_cap);
}

namespace {

struct ChunkOutcome {
  std::vector<EngineResult> results;
  std::size_t calls = 0;
};

ChunkOutcome run_chunk(TranslationEngine& engine, std::span<const TranslationRequest> chunk,
                       const ClientConfig& config) {
  ChunkOutcome outcome;
  outcome.results.assign(chunk.size(), {TranslationStatus::unreachable, {}, "not attempted"});
  std::vector<std::size_t> pending(chunk.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) pending[i] = i;

  for (int attempt = 0; !pending.empty(); ++attempt) {
    if (attempt > 0) {
      auto delay = backoff_delay(config, attempt);
      if (config.sleep) {
        config.sleep(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
    }
    std::vector<TranslationRequest> sub;
    sub.reserve(pending.size());
    for (auto i : pending) sub.push_back(chunk[i]);

    std::vector<EngineResult> got;
    try {
      got = engine.translate(sub);
      if (got.size() != sub.size()) throw Error("engine returned a misaligned result vector");
    } catch (const std::exception& e) {
      got.assign(sub.size(), {TranslationStatus::unreachable, {}, e.what()});
    }
    ++outcome.calls;

    std::vector<std::size_t> retry;
    for (std::size_t k = 0; k < pending.size(); ++k) {
      outcome.results[pending[k]] = got[k];
      if (got[k].status == TranslationStatus::unreachable) retry.push_back(pending[k]);
    }
    if (attempt >= config.max_retries) break;
    pending = std::move(retry);
  }
  return outcome;
}

}  // namespace

BatchResult translate_batch(TranslationEngine& engine, std::span<const TranslationRequest> requests,
                            TranslationCache& cache, const ClientConfig& config) {
  BatchResult batch;
  batch.items.resize(requests.size());

  // Cache lookups first; identical misses are sent once.
  std::vector<std::string> keys(requests.size());
  std::vector<TranslationRequest> misses;
  std::unordered_map<std::string, std::size_t> miss_index;
  std::vector<std::size_t> item_to_miss(requests.size(), SIZE_MAX);
  for (std::size_t i = 0; i < requests.size(); ++i) {
    requests[i].validate();
    keys[i] = TranslationCache::key(engine.id(), requests[i]);
    if (auto hit = cache.get(keys[i])) {
      batch.items[i] = {TranslationStatus::ok, *hit, {}, true};
      ++batch.cache_hits;
      continue;
    }
    auto [it, inserted] = miss_index.emplace(keys[i], misses.size());
    if (inserted) misses.push_back(requests[i]);
    item_to_miss[i] = it->second;
  }

  const std::size_t chunk_size = std::max<std::size_t>(1, config.chunk_size);
  const std::size_t n_chunks = (misses.size() + chunk_size - 1) / chunk_size;
  std::vector<ChunkOutcome> outcomes(n_chunks);
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.max_in_flight, n_chunks));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t c; (c = next.fetch_add(1)) < n_chunks;) {
      auto begin = c * chunk_size;
      auto len = std::min(chunk_size, misses.size() - begin);
      outcomes[c] = run_chunk(engine, std::span(misses).subspan(begin, len), config);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  std::vector<EngineResult> miss_results;
  miss_results.reserve(misses.size());
  for (auto& o : outcomes) {
    batch.engine_calls += o.calls;
    for (auto& r : o.results) miss_results.push_back(std::move(r));
  }

  // Single writer: cache appends happen here, in request order.
  std::vector<bool> written(misses.size(), false);
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (item_to_miss[i] == SIZE_MAX) continue;
    const auto m = item_to_miss[i];
    const auto& r = miss_results[m];
    auto& item = batch.items[i];
    item.status = r.status;
    if (r.status == TranslationStatus::ok) {
      item.translation = r.text;
      if (!written[m]) {
        cache.put(keys[i], r.text);
        written[m] = true;
      }
    } else {
      item.error = to_string(r.status) + (r.message.empty() ? "" : ": " + r.message);
      if (r.status == TranslationStatus::quota_exceeded) batch.rate_limited = true;
    }
  }
  if (batch.rate_limited) batch.pause = config.quota_pause;
  return batch;
}

PseudoParallelResult build_pseudo_parallel(const std::vector<Caption>& corpus,
                                           TranslationEngine& engine, TranslationCache& cache,
                                           const ClientConfig& config, const std::string& src_lang,
                                           const std::string& tgt_lang) {
  std::vector<TranslationRequest> requests;
  requests.reserve(corpus.size());
  for (const auto& c : corpus) requests.push_back({c.text, src_lang, tgt_lang});

  PseudoParallelResult result;
  result.batch = translate_batch(engine, requests, cache, config);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& item = result.batch.items[i];
    ParallelExample ex{corpus[i].id, tokenize(item.translation), tokenize(corpus[i].text),
                       corpus[i].image_id};
    if (!item.ok() || ex.source.empty()) {
      result.dropped_ids.push_back(corpus[i].id);
      continue;
    }
    result.examples.push_back(std::move(ex));
  }
  if (!result.dropped_ids.empty()) {
    spdlog::warn("back-translation dropped {} of {} captions", result.dropped_ids.size(),
                 corpus.size());
  }
  return result;
}

}  // namespace mmt
