#pragma once

#include <chrono>
#include <string>

#include "mmt/mt_client.hpp"

namespace mmt {

/// Adapter for a Google-Translate-v2-shaped HTTP service.
///
/// Request:  POST <path> {"q": [...], "source": "en", "target": "tr", "format": "text"}
///           (plus "key" when an API key is configured)
/// Response: {"data": {"translations": [{"translatedText": "..."}, ...]}}
///
/// Transport errors and 5xx map to `unreachable`, 429 and 403 to
/// `quota_exceeded`, other non-2xx statuses and malformed bodies to `rejected`.
class HttpTranslationEngine : public TranslationEngine {
 public:
  struct Options {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/language/translate/v2";
    std::string api_key;
    std::chrono::milliseconds timeout{30000};
  };

  explicit HttpTranslationEngine(Options options);

  std::string id() const override { return "http:" + options_.base_url + options_.path; }
  std::vector<EngineResult> translate(std::span<const TranslationRequest> chunk) override;

 private:
  Options options_;
};

}  // namespace mmt
