#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>

#include "defgrade/cot.hpp"
#include "defgrade/promptkit.hpp"
#include "json.hpp"

namespace defgrade::gateway {

struct InferenceParams {
  double temperature = 0.0;
  int max_tokens = 2048;
};

struct ModelEndpoint {
  std::string id;        // model name sent on the wire, e.g. "gpt-5-chat"
  std::string base_url;  // e.g. https://api.openai.com/v1, or sim://local
  std::string api_key_env;
  InferenceParams params;
  int max_in_flight = 4;
};

struct Usage {
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

struct ModelResponse {
  std::string raw_text;
  double latency_ms = 0.0;
  std::optional<Usage> usage;
  std::string endpoint_id;
  std::string fingerprint;
  int attempts = 1;
  bool from_fixture = false;
};

class AuthError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};
class RetriesExhausted : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};
class PayloadTooLarge : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};
class MissingFixture : public PrerequisiteError {
 public:
  using PrerequisiteError::PrerequisiteError;
};

struct HttpRequest {
  std::string url;
  std::map<std::string, std::string> headers;
  std::string body;
  std::chrono::milliseconds timeout{120000};
};

struct HttpResult {
  int status = 0;  // 0: transport-level failure (timeout, refused, ...)
  std::string body;
  std::string error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(const HttpRequest& request) = 0;
};

// HTTPS/HTTP via cpp-httplib.
class HttpTransport final : public Transport {
 public:
  HttpResult post(const HttpRequest& request) override;
};

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds base_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};
  std::size_t max_payload_bytes = 32u << 20;
};

// Hash of the canonical request: model, inference parameters, the bundle and
// the content hash of every referenced image. Key order in the bundle JSON
// does not affect it.
std::string request_fingerprint(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                const std::filesystem::path& image_root);
nlohmann::json canonical_request(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                 const std::filesystem::path& image_root);

// OpenAI-compatible chat-completions body with images embedded as base64
// data URLs.
nlohmann::json build_wire_request(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                  const std::filesystem::path& image_root);

// Shareable across threads; at most endpoint.max_in_flight requests are
// outstanding at once, the rest wait.
class ChatClient {
 public:
  ChatClient(ModelEndpoint endpoint, std::shared_ptr<Transport> transport, RetryPolicy retry,
             std::filesystem::path image_root);

  ModelResponse complete(const promptkit::PromptBundle& bundle);
  [[nodiscard]] const ModelEndpoint& endpoint() const { return endpoint_; }
  [[nodiscard]] const std::filesystem::path& image_root() const { return image_root_; }

 private:
  std::string resolve_credential() const;

  ModelEndpoint endpoint_;
  std::shared_ptr<Transport> transport_;
  RetryPolicy retry_;
  std::filesystem::path image_root_;
  std::unique_ptr<std::counting_semaphore<1024>> limiter_;
};

enum class FixtureMode {
  replay,  // strict: a missing fixture is an error
  record,  // replay when present, otherwise call live and store
  live,    // always call live, never store
};
FixtureMode fixture_mode_from(std::string_view s);
std::string_view to_string(FixtureMode m);

// Directory of <fingerprint>.json files holding the canonical request and
// the raw response.
class FixtureStore {
 public:
  FixtureStore(std::filesystem::path dir, FixtureMode mode);

  ModelResponse replay_complete(ChatClient& client, const promptkit::PromptBundle& bundle);
  // Replay only; usable without a live client.
  ModelResponse replay_complete(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                const std::filesystem::path& image_root);

  [[nodiscard]] std::filesystem::path path_for(const std::string& fingerprint) const;
  [[nodiscard]] FixtureMode mode() const { return mode_; }
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

 private:
  std::optional<ModelResponse> load(const std::string& fingerprint, const std::string& endpoint_id) const;
  void store(const nlohmann::json& request, const ModelResponse& response) const;

  std::filesystem::path dir_;
  FixtureMode mode_;
};

// Strict JSON parse of the first JSON object in `raw`; otherwise scan for the
// last (longest) grade label. Never throws.
CoTResult parse_cot(std::string_view raw, const dtree::DecisionTree& tree);

// Extracts "choices[0].message.content" and usage from a chat-completions
// response body.
std::pair<std::string, std::optional<Usage>> parse_completion_body(std::string_view body);

}  // namespace defgrade::gateway
