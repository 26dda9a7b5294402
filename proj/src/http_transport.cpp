#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
#include "midilm/llm.h"

namespace midilm::llm {
namespace {

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(const EndpointConfig& config) {
    const std::string& url = config.url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw LlmError(LlmErrc::Transport, "endpoint url lacks a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    base_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
    timeout_s_ = config.timeout_s;
  }

  HttpResult post(const std::string& body, const std::string& api_key) override {
    httplib::Client client(base_);
    const auto sec = static_cast<time_t>(timeout_s_);
    const auto usec = static_cast<time_t>((timeout_s_ - static_cast<double>(sec)) * 1e6);
    client.set_connection_timeout(sec, usec);
    client.set_read_timeout(sec, usec);
    client.set_write_timeout(sec, usec);
    httplib::Headers headers = {{"Authorization", "Bearer " + api_key}};
    auto res = client.Post(path_, headers, body, "application/json");
    HttpResult out;
    if (!res) {
      out.timed_out = res.error() == httplib::Error::Read || res.error() == httplib::Error::Write ||
                      res.error() == httplib::Error::ConnectionTimeout;
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    return out;
  }

 private:
  std::string base_;
  std::string path_;
  double timeout_s_ = 60.0;
};

}  // namespace

std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config) {
  return std::make_unique<HttpTransport>(config);
}

}  // namespace midilm::llm
