#pragma once

// Single-turn text completion client with retry, backoff and request logs.

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <string>

#include "midilm/annotate.h"
#include "midilm/error.h"

namespace midilm::llm {

enum class LlmErrc { Transport, Auth, RateLimited, Timeout, BadResponse };
using LlmError = KindedError<LlmErrc>;

inline constexpr const char* kApiKeyEnv = "MIDILM_LLM_API_KEY";

struct HttpResult {
  int status = 0;  // 0 when no response arrived
  std::string body;
  bool timed_out = false;
  std::string error;  // transport-level description when status == 0
};

/// Moves one JSON request body to the endpoint.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(const std::string& body, const std::string& api_key) = 0;
};

struct EndpointConfig {
  std::string url = "https://api.openai.com/v1/completions";
  std::string model = "gpt-4o";
  double timeout_s = 60.0;
  int max_attempts = 3;
  double backoff_initial_s = 1.0;
  std::string api_key_env = kApiKeyEnv;
};

/// HTTP(S) transport for `config.url`.
std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config);

/// Receives one JSON line per attempt.
using LogSink = std::function<void(const std::string&)>;

class LlmClient {
 public:
  LlmClient(EndpointConfig config, std::unique_ptr<Transport> transport);

  /// Replaces the sleep used between attempts (tests pass a no-op).
  void set_sleep(std::function<void(std::chrono::duration<double>)> sleep) { sleep_ = std::move(sleep); }
  void set_log_sink(LogSink sink) { log_ = std::move(sink); }

  /// Reads the credential, then posts with up to `max_attempts` tries. 429,
  /// 5xx, timeouts and transport failures are retried with doubling delay;
  /// 401/403 fail immediately.
  std::string complete(const annotate::LlmRequest& request, const std::string& source_digest = {});

  /// Request body sent for `request`.
  std::string request_body(const annotate::LlmRequest& request) const;

  /// Completion text from `text`, `choices[0].text` or
  /// `choices[0].message.content`.
  static std::string extract_text(const std::string& response_body);

  const EndpointConfig& config() const { return config_; }

 private:
  void log(const std::string& line);

  EndpointConfig config_;
  std::unique_ptr<Transport> transport_;
  std::function<void(std::chrono::duration<double>)> sleep_;
  LogSink log_;
  std::mutex log_mutex_;
};

/// Free-function form used by the pipeline.
inline std::string llm_complete(const annotate::LlmRequest& request, LlmClient& client,
                                const std::string& source_digest = {}) {
  return client.complete(request, source_digest);
}

/// Replaces each question with an LLM paraphrase. Empty or multi-line
/// replies keep the template question.
void paraphrase_questions(std::vector<annotate::QaPair>& pairs, LlmClient& client);

}  // namespace midilm::llm
