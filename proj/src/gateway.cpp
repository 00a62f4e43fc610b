#include "httplib.h"

#include "defgrade/gateway.hpp"

#include <cctype>
#include <cstdlib>
#include <regex>
#include <thread>

#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::gateway {

namespace {

std::string mime_type(const std::string& path) {
  auto ext = util::to_lower(fs::path(path).extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".pgm") return "image/x-portable-graymap";
  return "image/x-portable-pixmap";
}

fs::path resolve_image(const fs::path& root, const std::string& payload) {
  fs::path p = payload;
  return p.is_absolute() ? p : root / p;
}

}  // namespace

json canonical_request(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                       const fs::path& image_root) {
  json images = json::object();
  for (const auto& s : bundle.segments) {
    if (s.kind != promptkit::Segment::Kind::image || images.contains(s.payload)) continue;
    images[s.payload] = util::sha256_file_hex(resolve_image(image_root, s.payload));
  }
  return {{"model", endpoint.id},
          {"temperature", endpoint.params.temperature},
          {"max_tokens", endpoint.params.max_tokens},
          {"bundle", bundle.to_json()},
          {"images", std::move(images)}};
}

std::string request_fingerprint(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                const fs::path& image_root) {
  return util::sha256_hex(canonical_request(endpoint, bundle, image_root).dump());
}

json build_wire_request(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                        const fs::path& image_root) {
  json parts = json::array();
  for (const auto& s : bundle.segments) {
    if (s.kind == promptkit::Segment::Kind::text) {
      parts.push_back({{"type", "text"}, {"text", s.payload}});
    } else {
      auto bytes = util::read_file(resolve_image(image_root, s.payload));
      parts.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + mime_type(s.payload) + ";base64," + util::base64_encode(bytes)}}}});
    }
  }
  return {{"model", endpoint.id},
          {"temperature", endpoint.params.temperature},
          {"max_tokens", endpoint.params.max_tokens},
          {"messages", json::array({{{"role", "system"}, {"content", bundle.system}},
                                    {{"role", "user"}, {"content", std::move(parts)}}})}};
}

std::pair<std::string, std::optional<Usage>> parse_completion_body(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    throw RuntimeFailure("endpoint returned a non-JSON body");
  }
  std::string text;
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) {
      text = content.get<std::string>();
    } else if (content.is_array()) {
      for (const auto& part : content)
        if (part.value("type", "") == "text") text += part.value("text", "");
    }
    // null content (refusal) stays empty and later counts as a parse failure.
  } catch (const json::exception&) {
    throw RuntimeFailure("endpoint response has no choices[0].message.content");
  }
  std::optional<Usage> usage;
  if (j.contains("usage") && j["usage"].is_object()) {
    usage = Usage{j["usage"].value("prompt_tokens", 0L), j["usage"].value("completion_tokens", 0L)};
  }
  return {text, usage};
}

HttpResult HttpTransport::post(const HttpRequest& request) {
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(request.url, m, kUrl)) return {0, {}, "unsupported URL " + request.url};
  httplib::Client cli(m[1].str());
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
  cli.set_connection_timeout(std::chrono::seconds(10));
  cli.set_read_timeout(secs);
  cli.set_write_timeout(secs);
  httplib::Headers headers;
  std::string content_type = "application/json";
  for (const auto& [k, v] : request.headers) {
    if (util::to_lower(k) == "content-type")
      content_type = v;
    else
      headers.emplace(k, v);
  }
  auto res = cli.Post(m[2].matched ? m[2].str() : "/", headers, request.body, content_type);
  if (!res) return {0, {}, httplib::to_string(res.error())};
  return {res->status, res->body, {}};
}

ChatClient::ChatClient(ModelEndpoint endpoint, std::shared_ptr<Transport> transport, RetryPolicy retry,
                       fs::path image_root)
    : endpoint_(std::move(endpoint)),
      transport_(std::move(transport)),
      retry_(retry),
      image_root_(std::move(image_root)),
      limiter_(std::make_unique<std::counting_semaphore<1024>>(std::clamp(endpoint_.max_in_flight, 1, 1024))) {
  if (!transport_) throw InvalidArgument("ChatClient needs a transport");
  if (endpoint_.params.temperature != 0.0)
    throw ConfigError("endpoint " + endpoint_.id + ": pipeline calls run at temperature 0");
}

std::string ChatClient::resolve_credential() const {
  if (endpoint_.api_key_env.empty()) return {};
  const char* v = std::getenv(endpoint_.api_key_env.c_str());
  if (!v || !*v) {
    throw ConfigError("endpoint " + endpoint_.id + ": credential variable " + endpoint_.api_key_env + " is not set");
  }
  return v;
}

ModelResponse ChatClient::complete(const promptkit::PromptBundle& bundle) {
  const auto credential = resolve_credential();
  HttpRequest req;
  req.url = endpoint_.base_url + "/chat/completions";
  req.headers["Content-Type"] = "application/json";
  if (!credential.empty()) req.headers["Authorization"] = "Bearer " + credential;
  req.body = build_wire_request(endpoint_, bundle, image_root_).dump();
  if (req.body.size() > retry_.max_payload_bytes) {
    throw PayloadTooLarge("request for " + endpoint_.id + " is " + std::to_string(req.body.size()) +
                          " bytes, above the " + std::to_string(retry_.max_payload_bytes) + " byte limit");
  }

  limiter_->acquire();
  struct Release {
    std::counting_semaphore<1024>* s;
    ~Release() { s->release(); }
  } release{limiter_.get()};

  const auto start = std::chrono::steady_clock::now();
  auto backoff = retry_.base_backoff;
  for (int attempt = 0;; ++attempt) {
    auto res = transport_->post(req);
    if (res.status >= 200 && res.status < 300) {
      auto [text, usage] = parse_completion_body(res.body);
      ModelResponse out;
      out.raw_text = std::move(text);
      out.usage = usage;
      out.endpoint_id = endpoint_.id;
      out.fingerprint = request_fingerprint(endpoint_, bundle, image_root_);
      out.attempts = attempt + 1;
      out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      return out;
    }
    if (res.status == 401 || res.status == 403)
      throw AuthError("endpoint " + endpoint_.id + " rejected the credential (HTTP " + std::to_string(res.status) + ")");
    if (res.status == 413) throw PayloadTooLarge("endpoint " + endpoint_.id + " rejected the payload as too large");
    const bool transient = res.status == 0 || res.status == 408 || res.status == 429 || res.status >= 500;
    if (!transient) {
      throw RuntimeFailure("endpoint " + endpoint_.id + " returned HTTP " + std::to_string(res.status) + ": " +
                           res.body.substr(0, 200));
    }
    if (attempt >= retry_.max_retries) {
      throw RetriesExhausted("endpoint " + endpoint_.id + ": giving up after " + std::to_string(attempt + 1) +
                             " attempts (last: " + (res.status ? "HTTP " + std::to_string(res.status) : res.error) + ")");
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::min(retry_.max_backoff,
                       std::chrono::milliseconds(static_cast<long>(backoff.count() * retry_.multiplier)));
  }
}

FixtureMode fixture_mode_from(std::string_view s) {
  if (s == "replay") return FixtureMode::replay;
  if (s == "record") return FixtureMode::record;
  if (s == "live") return FixtureMode::live;
  throw InvalidArgument("unknown fixture mode '" + std::string(s) + "' (replay | record | live)");
}

std::string_view to_string(FixtureMode m) {
  switch (m) {
    case FixtureMode::replay: return "replay";
    case FixtureMode::record: return "record";
    case FixtureMode::live: return "live";
  }
  return "replay";
}

FixtureStore::FixtureStore(fs::path dir, FixtureMode mode) : dir_(std::move(dir)), mode_(mode) {}

fs::path FixtureStore::path_for(const std::string& fingerprint) const { return dir_ / (fingerprint + ".json"); }

std::optional<ModelResponse> FixtureStore::load(const std::string& fingerprint, const std::string& endpoint_id) const {
  auto p = path_for(fingerprint);
  if (!fs::exists(p)) return std::nullopt;
  json j;
  try {
    j = json::parse(util::read_file(p));
  } catch (const json::parse_error& e) {
    throw RuntimeFailure("corrupt fixture " + p.string() + ": " + e.what());
  }
  ModelResponse r;
  const auto& resp = j.at("response");
  r.raw_text = resp.at("raw_text").get<std::string>();
  if (resp.contains("usage"))
    r.usage = Usage{resp["usage"].value("prompt_tokens", 0L), resp["usage"].value("completion_tokens", 0L)};
  r.latency_ms = resp.value("latency_ms", 0.0);
  r.endpoint_id = endpoint_id;
  r.fingerprint = fingerprint;
  r.attempts = 0;
  r.from_fixture = true;
  return r;
}

void FixtureStore::store(const json& request, const ModelResponse& response) const {
  json resp{{"raw_text", response.raw_text}, {"endpoint_id", response.endpoint_id}};
  if (response.usage)
    resp["usage"] = {{"prompt_tokens", response.usage->prompt_tokens},
                     {"completion_tokens", response.usage->completion_tokens}};
  json doc{{"fingerprint", response.fingerprint}, {"request", request}, {"response", std::move(resp)}};
  util::write_file_atomic(path_for(response.fingerprint), doc.dump(1) + "\n");
}

ModelResponse FixtureStore::replay_complete(ChatClient& client, const promptkit::PromptBundle& bundle) {
  if (mode_ == FixtureMode::live) return client.complete(bundle);
  const auto request = canonical_request(client.endpoint(), bundle, client.image_root());
  const auto fp = util::sha256_hex(request.dump());
  if (auto hit = load(fp, client.endpoint().id)) return *hit;
  if (mode_ == FixtureMode::replay)
    throw MissingFixture("no fixture " + fp + " for model " + client.endpoint().id + " in " + dir_.string());
  auto live = client.complete(bundle);
  store(request, live);
  return live;
}

ModelResponse FixtureStore::replay_complete(const ModelEndpoint& endpoint, const promptkit::PromptBundle& bundle,
                                            const fs::path& image_root) {
  const auto fp = request_fingerprint(endpoint, bundle, image_root);
  if (auto hit = load(fp, endpoint.id)) return *hit;
  throw MissingFixture("no fixture " + fp + " for model " + endpoint.id + " in " + dir_.string());
}

namespace {

// Span of the first balanced {...} starting at or after `from`, honouring
// JSON string escapes.
std::optional<std::pair<std::size_t, std::size_t>> next_object(std::string_view s, std::size_t from) {
  auto start = s.find('{', from);
  while (start != std::string_view::npos) {
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = start; i < s.size(); ++i) {
      char c = s[i];
      if (in_string) {
        if (escaped)
          escaped = false;
        else if (c == '\\')
          escaped = true;
        else if (c == '"')
          in_string = false;
        continue;
      }
      if (c == '"')
        in_string = true;
      else if (c == '{')
        ++depth;
      else if (c == '}' && --depth == 0)
        return std::make_pair(start, i + 1);
    }
    start = s.find('{', start + 1);
  }
  return std::nullopt;
}

std::optional<Grade> match_grade(const std::string& text, const dtree::DecisionTree& tree) {
  auto t = util::to_lower(util::trim(text));
  for (const auto& g : tree.grades())
    if (util::to_lower(g) == t) return g;
  return std::nullopt;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }

}  // namespace

CoTResult parse_cot(std::string_view raw, const dtree::DecisionTree& tree) {
  std::size_t from = 0;
  while (auto span = next_object(raw, from)) {
    from = span->first + 1;
    json j;
    try {
      j = json::parse(raw.substr(span->first, span->second - span->first));
    } catch (const json::parse_error&) {
      continue;
    }
    if (!j.is_object()) continue;
    const json* g = nullptr;
    for (const char* key : {"grade", "final_grade", "defect_grade"})
      if (j.contains(key) && j[key].is_string()) {
        g = &j[key];
        break;
      }
    if (!g) continue;
    auto grade = match_grade(g->get<std::string>(), tree);
    if (!grade) break;  // first object has an unusable grade; fall back to scanning

    CoTResult out;
    out.grade = *grade;
    out.parse_status = ParseStatus::ok;
    if (j.contains("steps") && j["steps"].is_array()) {
      for (const auto& js : j["steps"]) {
        if (!js.is_object()) {
          out.parse_status = ParseStatus::repaired;
          continue;
        }
        const json* id = js.contains("node") ? &js["node"] : js.contains("step") ? &js["step"] : nullptr;
        auto answer = js.contains("answer") && js["answer"].is_string()
                          ? parse_answer(js["answer"].get<std::string>())
                          : std::nullopt;
        if (!id || !answer) {
          out.parse_status = ParseStatus::repaired;
          continue;
        }
        CoTStep step;
        step.node_id = id->is_string() ? id->get<std::string>() : id->dump();
        step.answer = *answer;
        if (js.contains("evidence") && js["evidence"].is_string()) step.evidence = js["evidence"].get<std::string>();
        out.steps.push_back(std::move(step));
      }
    }
    return out;
  }

  // Fallback: the last mention of a grade label wins; the longest label wins
  // among mentions starting at the same offset.
  const auto lower = util::to_lower(raw);
  std::optional<Grade> best;
  std::size_t best_pos = 0, best_len = 0;
  for (const auto& g : tree.grades()) {
    const auto needle = util::to_lower(g);
    for (auto pos = lower.find(needle); pos != std::string::npos; pos = lower.find(needle, pos + 1)) {
      bool left_ok = pos == 0 || !is_word_char(lower[pos - 1]);
      bool right_ok = pos + needle.size() >= lower.size() || !is_word_char(lower[pos + needle.size()]);
      if (!left_ok || !right_ok) continue;
      if (!best || pos > best_pos || (pos == best_pos && needle.size() > best_len)) {
        best = g;
        best_pos = pos;
        best_len = needle.size();
      }
    }
  }
  CoTResult out;
  if (best) {
    out.grade = *best;
    out.parse_status = ParseStatus::repaired;
  } else {
    out.grade = std::string(kParseFailureGrade);
    out.parse_status = ParseStatus::failed;
  }
  return out;
}

}  // namespace defgrade::gateway
