#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "defgrade/gateway.hpp"
#include "defgrade/image.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace defgrade;
using namespace defgrade::gateway;
using nlohmann::json;

namespace {

std::string completion(const std::string& text) {
  return json{{"choices", json::array({{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}}})},
              {"usage", {{"prompt_tokens", 10}, {"completion_tokens", 3}}}}
      .dump();
}

struct Scripted : Transport {
  std::vector<HttpResult> script;
  std::mutex mu;
  std::vector<HttpRequest> seen;
  HttpResult post(const HttpRequest& r) override {
    std::lock_guard lock(mu);
    seen.push_back(r);
    const auto i = std::min(seen.size() - 1, script.size() - 1);
    return script[i];
  }
  std::size_t calls() {
    std::lock_guard lock(mu);
    return seen.size();
  }
};

struct Fixture {
  testing::TempDir dir;
  promptkit::PromptBundle bundle;
  ModelEndpoint endpoint{"model-a", "http://localhost:1", "", {}, 4};
  RetryPolicy retry;

  Fixture() {
    image::Image img(4, 3, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 7);
    image::write(dir / "img/a.ppm", img);
    bundle.system = "system text";
    bundle.segments = {{promptkit::Segment::Kind::text, promptkit::Component::task, "grade this"},
                       {promptkit::Segment::Kind::image, promptkit::Component::objective_image, "img/a.ppm"},
                       {promptkit::Segment::Kind::text, promptkit::Component::question, "what grade?"}};
    retry.base_backoff = std::chrono::milliseconds(20);
    retry.max_retries = 3;
  }
};

}  // namespace

TEST_CASE("parse_cot handles JSON, prose and garbage") {
  const auto t = testing::task_tree("task3");
  const std::string good = R"(Here you go: {"steps": [{"node": "1", "answer": "Exists"}, {"node": "2", "answer": "Yes"},
      {"node": "3", "answer": "Yes"}, {"node": "4B", "answer": "No"}], "grade": "Major"} thanks)";
  auto c = parse_cot(good, t);
  CHECK(c.parse_status == ParseStatus::ok);
  CHECK(c.steps.size() == 4);
  CHECK(c.grade == "Major");
  CHECK(dtree::validate_cot(t, c).verified());

  c = parse_cot("After checking, the defect grade is Kind.", t);
  CHECK(c.parse_status == ParseStatus::repaired);
  CHECK(c.grade == "Kind");
  CHECK(c.steps.empty());

  c = parse_cot("", t);
  CHECK(c.parse_status == ParseStatus::failed);
  CHECK(c.grade == kParseFailureGrade);

  c = parse_cot("Kind at first sight, but really Urgent", t);
  CHECK(c.grade == "Urgent");
}

TEST_CASE("parse_cot inverts serialize_cot and keeps grades in the set") {
  const auto t = testing::task_tree("task3");
  for (const auto& p : dtree::enumerate_paths(t)) {
    CoTResult c;
    c.grade = p.grade;
    for (std::size_t k = 0; k < p.nodes.size(); ++k)
      c.steps.push_back({p.nodes[k], p.answers[k], k % 2 ? std::optional<std::string>("seen \"x\"") : std::nullopt});
    CHECK(parse_cot(serialize_cot(c), t) == c);
  }
  util::Rng rng(8);
  const std::vector<std::string> words{"Else", "Kind", "Major", "Urgent", "{", "}", "\"grade\"", ":", "steps", "x", " "};
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    for (int k = 0, n = static_cast<int>(rng.below(12)); k < n; ++k) s += words[rng.below(words.size())];
    const auto c = parse_cot(s, t);
    if (c.parse_status != ParseStatus::failed) CHECK(t.has_grade(c.grade));
    else CHECK(c.grade == kParseFailureGrade);
  }
}

TEST_CASE("wire request embeds images as data URLs") {
  Fixture f;
  const auto wire = build_wire_request(f.endpoint, f.bundle, f.dir.path());
  CHECK(wire.at("model") == "model-a");
  CHECK(wire.at("temperature") == 0.0);
  const auto& user = wire.at("messages").at(1).at("content");
  REQUIRE(user.size() == 3);
  const auto url = user.at(1).at("image_url").at("url").get<std::string>();
  CHECK(url.rfind("data:image/", 0) == 0);
  CHECK(url.find(";base64,") != std::string::npos);
}

TEST_CASE("fingerprint is canonical and content addressed") {
  Fixture f;
  const auto fp = request_fingerprint(f.endpoint, f.bundle, f.dir.path());
  // Reordering keys in the serialized bundle does not matter.
  const auto j = f.bundle.to_json();
  json reordered = json::parse(j.dump());
  std::string text = reordered.dump();
  const auto back = promptkit::PromptBundle::from_json(json::parse(text));
  CHECK(request_fingerprint(f.endpoint, back, f.dir.path()) == fp);
  // Image bytes are part of the request.
  auto img = image::read(f.dir / "img/a.ppm");
  img.pixels[0] ^= 1;
  image::write(f.dir / "img/a.ppm", img);
  CHECK(request_fingerprint(f.endpoint, f.bundle, f.dir.path()) != fp);
  auto e2 = f.endpoint;
  e2.params.max_tokens = 17;
  CHECK(request_fingerprint(e2, f.bundle, f.dir.path()) != request_fingerprint(f.endpoint, f.bundle, f.dir.path()));
}

TEST_CASE("transient failure then success is retried with backoff") {
  Fixture f;
  auto t = std::make_shared<Scripted>();
  t->script = {{429, "slow down", ""}, {200, completion("hello"), ""}};
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  const auto r = client.complete(f.bundle);
  CHECK(r.raw_text == "hello");
  CHECK(r.attempts == 2);
  CHECK(t->calls() == 2);
  CHECK(r.latency_ms >= 20.0);
  CHECK(r.fingerprint == request_fingerprint(f.endpoint, f.bundle, f.dir.path()));
  REQUIRE(r.usage.has_value());
  CHECK(r.usage->completion_tokens == 3);
}

TEST_CASE("auth failure is not retried") {
  Fixture f;
  auto t = std::make_shared<Scripted>();
  t->script = {{401, "bad key", ""}};
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  CHECK_THROWS_AS(client.complete(f.bundle), AuthError);
  CHECK(t->calls() == 1);
}

TEST_CASE("retries are bounded") {
  Fixture f;
  f.retry.base_backoff = std::chrono::milliseconds(1);
  auto t = std::make_shared<Scripted>();
  t->script = {{503, "", ""}};
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  CHECK_THROWS_AS(client.complete(f.bundle), RetriesExhausted);
  CHECK(t->calls() == 4);

  auto t2 = std::make_shared<Scripted>();
  t2->script = {{400, "bad request", ""}};
  ChatClient c2(f.endpoint, t2, f.retry, f.dir.path());
  CHECK_THROWS_AS(c2.complete(f.bundle), RuntimeFailure);
  CHECK(t2->calls() == 1);
}

TEST_CASE("payload limit is enforced before sending") {
  Fixture f;
  f.retry.max_payload_bytes = 64;
  auto t = std::make_shared<Scripted>();
  t->script = {{200, completion("x"), ""}};
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  CHECK_THROWS_AS(client.complete(f.bundle), PayloadTooLarge);
  CHECK(t->calls() == 0);
}

TEST_CASE("credentials come from the environment") {
  Fixture f;
  auto t = std::make_shared<Scripted>();
  t->script = {{200, completion("x"), ""}};
  f.endpoint.api_key_env = "DEFGRADE_TEST_KEY_UNSET_42";
  ::unsetenv("DEFGRADE_TEST_KEY_UNSET_42");
  ChatClient missing(f.endpoint, t, f.retry, f.dir.path());
  CHECK_THROWS_AS(missing.complete(f.bundle), ConfigError);
  ::setenv("DEFGRADE_TEST_KEY_UNSET_42", "sekrit", 1);
  ChatClient ok(f.endpoint, t, f.retry, f.dir.path());
  ok.complete(f.bundle);
  CHECK(t->seen.back().headers.at("Authorization") == "Bearer sekrit");
  ::unsetenv("DEFGRADE_TEST_KEY_UNSET_42");

  auto warm = f.endpoint;
  warm.api_key_env.clear();
  warm.params.temperature = 0.7;
  CHECK_THROWS_AS(ChatClient(warm, t, f.retry, f.dir.path()), ConfigError);
}

TEST_CASE("in-flight requests are capped per endpoint") {
  Fixture f;
  struct Slow : Transport {
    std::atomic<int> now{0}, peak{0};
    HttpResult post(const HttpRequest&) override {
      const int n = ++now;
      int p = peak.load();
      while (n > p && !peak.compare_exchange_weak(p, n)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(15));
      --now;
      return {200, completion("ok"), ""};
    }
  };
  auto t = std::make_shared<Slow>();
  f.endpoint.max_in_flight = 2;
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i) pool.emplace_back([&] { client.complete(f.bundle); });
  for (auto& th : pool) th.join();
  CHECK(t->peak.load() <= 2);
  CHECK(t->peak.load() >= 1);
}

TEST_CASE("fixture store modes") {
  Fixture f;
  auto t = std::make_shared<Scripted>();
  t->script = {{200, completion("first answer"), ""}, {200, completion("second answer"), ""}};
  ChatClient client(f.endpoint, t, f.retry, f.dir.path());
  const auto fixtures = f.dir / "fixtures";

  FixtureStore strict(fixtures, FixtureMode::replay);
  CHECK_THROWS_AS(strict.replay_complete(client, f.bundle), MissingFixture);
  CHECK_THROWS_AS(strict.replay_complete(f.endpoint, f.bundle, f.dir.path()), MissingFixture);
  CHECK(t->calls() == 0);

  FixtureStore rec(fixtures, FixtureMode::record);
  const auto a = rec.replay_complete(client, f.bundle);
  const auto b = rec.replay_complete(client, f.bundle);
  CHECK(t->calls() == 1);
  CHECK(a.raw_text == "first answer");
  CHECK(b.raw_text == "first answer");
  CHECK(b.from_fixture);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(fixtures)) ++files;
  CHECK(files == 1);

  const auto c = strict.replay_complete(f.endpoint, f.bundle, f.dir.path());
  CHECK(c.raw_text == "first answer");
  CHECK(c.fingerprint == a.fingerprint);

  FixtureStore live(f.dir / "live-fixtures", FixtureMode::live);
  CHECK(live.replay_complete(client, f.bundle).raw_text == "second answer");
  CHECK_FALSE(std::filesystem::exists(f.dir / "live-fixtures"));
  CHECK_THROWS_AS(fixture_mode_from("sometimes"), InvalidArgument);
}

TEST_CASE("completion bodies") {
  auto [text, usage] = parse_completion_body(completion("abc"));
  CHECK(text == "abc");
  CHECK(usage.has_value());
  CHECK_THROWS_AS(parse_completion_body("{}"), RuntimeFailure);
}
