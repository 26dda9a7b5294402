#include "midilm/llm.h"

#include <cstdlib>
#include <thread>

#include "json.hpp"

namespace midilm::llm {

LlmClient::LlmClient(EndpointConfig config, std::unique_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
  sleep_ = [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
}

std::string LlmClient::request_body(const annotate::LlmRequest& request) const {
  nlohmann::ordered_json j;
  j["model"] = config_.model;
  j["prompt"] = request.prompt;
  j["temperature"] = request.temperature;
  j["max_tokens"] = request.max_tokens;
  return j.dump();
}

void LlmClient::log(const std::string& line) {
  if (!log_) return;
  std::lock_guard lock(log_mutex_);
  log_(line);
}

std::string LlmClient::complete(const annotate::LlmRequest& request, const std::string& source_digest) {
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (key == nullptr || *key == '\0')
    throw LlmError(LlmErrc::Auth, "credential environment variable " + config_.api_key_env + " is not set");
  const std::string body = request_body(request);
  const int attempts = std::max(1, config_.max_attempts);
  double delay = config_.backoff_initial_s;
  LlmErrc last_kind = LlmErrc::Transport;
  std::string last_what;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    HttpResult r = transport_->post(body, key);
    nlohmann::ordered_json entry;
    entry["source_digest"] = source_digest;
    entry["attempt"] = attempt;
    entry["request"] = body;
    entry["status"] = r.status;
    entry["timed_out"] = r.timed_out;
    entry["response"] = r.status != 0 ? r.body : r.error;
    log(entry.dump());

    if (r.status == 401 || r.status == 403)
      throw LlmError(LlmErrc::Auth, "endpoint rejected the credential (HTTP " + std::to_string(r.status) + ")");
    if (r.status >= 200 && r.status < 300) return extract_text(r.body);
    if (r.timed_out) {
      last_kind = LlmErrc::Timeout;
      last_what = "request timed out";
    } else if (r.status == 429) {
      last_kind = LlmErrc::RateLimited;
      last_what = "rate limited (HTTP 429)";
    } else if (r.status == 0 || r.status >= 500) {
      last_kind = LlmErrc::Transport;
      last_what = r.status == 0 ? "transport failure: " + r.error : "server error (HTTP " + std::to_string(r.status) + ")";
    } else {
      throw LlmError(LlmErrc::Transport, "request failed (HTTP " + std::to_string(r.status) + "): " + r.body);
    }
    if (attempt < attempts) {
      sleep_(std::chrono::duration<double>(delay));
      delay *= 2.0;
    }
  }
  throw LlmError(last_kind, last_what + " after " + std::to_string(attempts) + " attempts");
}

std::string LlmClient::extract_text(const std::string& response_body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(response_body);
  } catch (const nlohmann::json::exception& e) {
    throw LlmError(LlmErrc::BadResponse, std::string("response body is not JSON: ") + e.what());
  }
  if (j.is_object()) {
    if (j.contains("text") && j["text"].is_string()) return j["text"].get<std::string>();
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
      const auto& c = j["choices"][0];
      if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
      if (c.contains("message") && c["message"].is_object() && c["message"].contains("content") &&
          c["message"]["content"].is_string())
        return c["message"]["content"].get<std::string>();
    }
  }
  throw LlmError(LlmErrc::BadResponse, "response body has no completion text");
}

void paraphrase_questions(std::vector<annotate::QaPair>& pairs, LlmClient& client) {
  for (auto& p : pairs) {
    annotate::LlmRequest req;
    req.prompt = "Rewrite the following question about a piece of music in different words. "
                 "Keep its meaning. Reply with the question only, on one line.\n\n" + p.question + "\n";
    req.max_tokens = 64;
    std::string reply = client.complete(req);
    while (!reply.empty() && std::isspace(static_cast<unsigned char>(reply.back()))) reply.pop_back();
    std::size_t b = 0;
    while (b < reply.size() && std::isspace(static_cast<unsigned char>(reply[b]))) ++b;
    reply.erase(0, b);
    if (!reply.empty() && reply.find('\n') == std::string::npos) p.question = reply;
  }
}

}  // namespace midilm::llm
