#include "defgrade/gateway.hpp"
#include "defgrade/simulator.hpp"
#include "defgrade/util.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace defgrade;
using namespace defgrade::gateway;
using nlohmann::json;

namespace {

struct Fixture {
  json profile = json::parse(util::read_file(testing::assets_dir() / "sim/accuracy_profile.json"));
  std::map<std::string, dtree::DecisionTree> trees{{"task1", testing::task_tree("task1")},
                                                   {"task3", testing::task_tree("task3")}};
  std::vector<std::string> bytes;
  std::vector<Grade> truth;
  std::vector<std::string> ids;

  SimulatedModelServer make(const std::string& task, std::size_t n) {
    SimulatedModelServer s(profile, trees);
    const auto grades = trees.at(task).grades();
    bytes.clear();
    truth.clear();
    ids.clear();
    for (std::size_t i = 0; i < n; ++i) {
      bytes.push_back(task + " image " + std::to_string(i));
      truth.push_back(grades[i % grades.size()]);
      ids.push_back(task + "_" + std::to_string(i));
      s.add_record(util::sha256_hex(bytes.back()), {task, ids.back(), truth.back()});
    }
    s.set_eval_set(task, ids);
    return s;
  }
};

json image_part(const std::string& raw) {
  return {{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + util::base64_encode(raw)}}}};
}

json text_part(const std::string& t) { return {{"type", "text"}, {"text", t}}; }

// Case 4, corresponding layout: a reference image precedes the objective one.
json case4_parts(const std::string& objective, const std::string& extra = "") {
  return json::array({text_part("Answer with {\"steps\": [...], \"grade\": \"...\"}"), image_part("ref"),
                      text_part("Objective image:"), image_part(objective), text_part(extra + "Which grade?")});
}

}  // namespace

TEST_CASE("correct count equals the rounded configured accuracy") {
  Fixture f;
  for (const auto& [task, model] : std::vector<std::pair<std::string, std::string>>{
           {"task1", "GPT-5-chat"}, {"task3", "Qwen3-VL-plus"}, {"task3", "GPT-4o-2024-11-20"}}) {
    for (std::size_t n : {21u, 40u, 46u}) {
      auto server = f.make(task, n);
      const double pct = f.profile["accuracy"][model][task][3].get<double>();
      const auto bp = static_cast<std::uint64_t>(std::llround(pct * 100));
      const auto expected = util::div_round_half_up(bp * n, 10000);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto cot = parse_cot(server.answer(model, case4_parts(f.bytes[i])), f.trees.at(task));
        correct += cot.grade == f.truth[i];
      }
      CHECK(correct == expected);
    }
  }
}

TEST_CASE("answers are deterministic and traces follow the tree") {
  Fixture f;
  auto server = f.make("task3", 30);
  for (std::size_t i = 0; i < 30; ++i) {
    const auto a = server.answer("Gemini-2.5-pro", case4_parts(f.bytes[i]));
    CHECK(a == server.answer("Gemini-2.5-pro", case4_parts(f.bytes[i])));
    const auto cot = parse_cot(a, f.trees.at("task3"));
    if (cot.parse_status == defgrade::ParseStatus::ok) CHECK(dtree::validate_cot(f.trees.at("task3"), cot).verified());
  }
}

TEST_CASE("result-only prompts get a bare grade") {
  Fixture f;
  auto server = f.make("task1", 5);
  const auto parts = json::array({text_part("Reply with the grade only."), image_part(f.bytes[0])});
  const auto j = json::parse(server.answer("GPT-5-chat", parts));
  CHECK(j.contains("grade"));
}

TEST_CASE("generation prompts echo the given grade") {
  Fixture f;
  f.profile["qa_mismatch_rate"] = 0.0;
  auto server = f.make("task3", 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto hint = "Real defect grade of the objective image: \"" + f.truth[i] + "\"\n";
    const auto cot = parse_cot(server.answer("Qwen3-VL-plus", case4_parts(f.bytes[i], hint)), f.trees.at("task3"));
    CHECK(cot.grade == f.truth[i]);
    CHECK(dtree::validate_cot(f.trees.at("task3"), cot).verified());
  }
}

TEST_CASE("HTTP surface") {
  Fixture f;
  auto server = f.make("task1", 3);
  auto body = [&](const std::string& model, const json& parts) {
    return json{{"model", model}, {"messages", json::array({{{"role", "user"}, {"content", parts}}})}}.dump();
  };
  auto r = server.post({"sim://x", {}, body("GPT-5-chat", case4_parts(f.bytes[0]))});
  CHECK(r.status == 200);
  CHECK(json::parse(r.body)["choices"][0]["message"]["content"].is_string());
  CHECK(server.post({"sim://x", {}, body("nobody", case4_parts(f.bytes[0]))}).status == 404);
  CHECK(server.post({"sim://x", {}, body("GPT-5-chat", json::array({text_part("hi")}))}).status == 400);
  CHECK(server.post({"sim://x", {}, body("GPT-5-chat", case4_parts("unknown bytes"))}).status == 400);
  CHECK(server.post({"sim://x", {}, "{not json"}).status == 400);
}
