#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/corpus.hpp"

namespace mmt {

struct TranslationRequest {
  std::string text;
  std::string src_lang;
  std::string tgt_lang;

  void validate() const;
};

enum class TranslationStatus {
  ok,
  unreachable,     // transport failure, retried with backoff
  quota_exceeded,  // caller should pause; not retried inside the batch
  rejected,        // permanent per-item failure
};

std::string to_string(TranslationStatus status);

struct EngineResult {
  TranslationStatus status = TranslationStatus::ok;
  std::string text;
  std::string message;
};

/// Adapter interface. One call is one request/response exchange for a chunk;
/// the result vector is aligned with the chunk. Implementations must be safe
/// to call from several threads.
class TranslationEngine {
 public:
  virtual ~TranslationEngine() = default;
  virtual std::string id() const = 0;
  virtual std::vector<EngineResult> translate(std::span<const TranslationRequest> chunk) = 0;
};

/// Offline engine: copies the sentence (tokenized) and maps every gender
/// pronoun to "o". Supports fault injection for tests.
class MockNeutralizingEngine : public TranslationEngine {
 public:
  explicit MockNeutralizingEngine(GenderLexicon lexicon = {});

  std::string id() const override { return "mock-neutralizing"; }
  std::vector<EngineResult> translate(std::span<const TranslationRequest> chunk) override;

  /// Texts that always come back as `rejected`.
  void fail_permanently(std::string text);
  /// The next `times` exchanges containing `text` fail as unreachable.
  void fail_transiently(std::string text, int times);
  /// Every exchange after the first `calls` returns quota_exceeded.
  void set_quota(std::size_t calls);

  std::size_t calls() const { return calls_.load(); }
  std::size_t items_translated() const { return items_.load(); }

  std::string neutralize(std::string_view text) const;

 private:
  GenderLexicon lexicon_;
  mutable std::mutex mutex_;
  std::set<std::string> permanent_;
  std::map<std::string, int> transient_;
  std::optional<std::size_t> quota_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> items_{0};
};

/// Append-only translation cache. Each line is {"key", "translation",
/// "timestamp"}; the key is SHA-256 over (engine id, src, tgt, text).
class TranslationCache {
 public:
  TranslationCache() = default;  // in-memory only
  explicit TranslationCache(std::filesystem::path file);

  static std::string key(std::string_view engine_id, const TranslationRequest& request);

  std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const std::string& translation);

  std::size_t size() const { return entries_.size(); }
  const std::optional<std::filesystem::path>& file() const { return file_; }

 private:
  std::optional<std::filesystem::path> file_;
  std::unordered_map<std::string, std::string> entries_;
};

struct ClientConfig {
  std::size_t chunk_size = 32;
  std::chrono::milliseconds request_timeout{30000};
  int max_retries = 3;
  std::size_t max_in_flight = 4;
  std::chrono::milliseconds backoff_initial{500};
  std::chrono::milliseconds backoff_cap{8000};
  std::chrono::milliseconds quota_pause{60000};
  /// Injected for tests; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleep;
};

struct TranslationOutcome {
  TranslationStatus status = TranslationStatus::ok;
  std::string translation;
  std::string error;
  bool from_cache = false;

  bool ok() const { return status == TranslationStatus::ok; }
};

struct BatchResult {
  std::vector<TranslationOutcome> items;  // aligned with the requests
  std::size_t engine_calls = 0;
  std::size_t cache_hits = 0;
  /// Set when the engine reported an exhausted quota; the caller should
  /// wait `pause` before resubmitting the affected items.
  bool rate_limited = false;
  std::chrono::milliseconds pause{0};
};

/// Backoff before retry `attempt` (1-based): initial * 2^(attempt-1), capped.
std::chrono::milliseconds backoff_delay(const ClientConfig& config, int attempt);

BatchResult translate_batch(TranslationEngine& engine, std::span<const TranslationRequest> requests,
                            TranslationCache& cache, const ClientConfig& config = {});

struct PseudoParallelResult {
  std::vector<ParallelExample> examples;
  std::vector<std::string> dropped_ids;
  BatchResult batch;
};

/// Back-translation corpus: source = engine(caption), target = caption.
PseudoParallelResult build_pseudo_parallel(const std::vector<Caption>& corpus,
                                           TranslationEngine& engine, TranslationCache& cache,
                                           const ClientConfig& config = {},
                                           const std::string& src_lang = "en",
                                           const std::string& tgt_lang = "tr");

}  // namespace mmt
