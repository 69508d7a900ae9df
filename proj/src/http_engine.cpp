#include "mmt/http_engine.hpp"

#include "httplib.h"
#include "json.hpp"

namespace mmt {

HttpTranslationEngine::HttpTranslationEngine(Options options) : options_(std::move(options)) {
  if (options_.base_url.empty()) throw Error("http engine: base_url is required");
}

std::vector<EngineResult> HttpTranslationEngine::translate(std::span<const TranslationRequest> chunk) {
  std::vector<EngineResult> out(chunk.size());
  if (chunk.empty()) return out;
  // One exchange carries one language pair; mixed chunks are split by the caller.
  for (const auto& r : chunk) {
    if (r.src_lang != chunk.front().src_lang || r.tgt_lang != chunk.front().tgt_lang) {
      throw Error("http engine: chunk mixes language pairs");
    }
  }

  nlohmann::json body;
  body["q"] = nlohmann::json::array();
  for (const auto& r : chunk) body["q"].push_back(r.text);
  body["source"] = chunk.front().src_lang;
  body["target"] = chunk.front().tgt_lang;
  body["format"] = "text";
  if (!options_.api_key.empty()) body["key"] = options_.api_key;

  httplib::Client client(options_.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());

  auto fill = [&](TranslationStatus status, const std::string& message) {
    for (auto& r : out) r = {status, {}, message};
    return out;
  };

  auto res = client.Post(options_.path, body.dump(), "application/json");
  if (!res) return fill(TranslationStatus::unreachable, httplib::to_string(res.error()));
  if (res->status == 429 || res->status == 403) {
    return fill(TranslationStatus::quota_exceeded, "HTTP " + std::to_string(res->status));
  }
  if (res->status >= 500) return fill(TranslationStatus::unreachable, "HTTP " + std::to_string(res->status));
  if (res->status < 200 || res->status >= 300) {
    return fill(TranslationStatus::rejected, "HTTP " + std::to_string(res->status));
  }

  try {
    auto j = nlohmann::json::parse(res->body);
    const auto& translations = j.at("data").at("translations");
    if (translations.size() != chunk.size()) {
      return fill(TranslationStatus::rejected, "response has " + std::to_string(translations.size()) +
                                                   " translations for " + std::to_string(chunk.size()) +
                                                   " inputs");
    }
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out[i] = {TranslationStatus::ok, translations[i].at("translatedText").get<std::string>(), {}};
    }
  } catch (const nlohmann::json::exception& e) {
    return fill(TranslationStatus::rejected, std::string("malformed response: ") + e.what());
  }
  return out;
}

}  // namespace mmt
