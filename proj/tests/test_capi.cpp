#include <cstdlib>
#include <string>
#include <vector>

#include "defgrade/defgrade.h"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using nlohmann::json;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  dg_string_free(s);
  return out;
}

struct ScriptIo {
  std::vector<std::string> lines;
  std::size_t next = 0;
  std::string output;
};

long read_line(void* user, char* buf, size_t cap) {
  auto* io = static_cast<ScriptIo*>(user);
  if (io->next >= io->lines.size()) return -1;
  const auto& l = io->lines[io->next++];
  const auto n = std::min(l.size(), cap);
  std::copy_n(l.data(), n, buf);
  return static_cast<long>(n);
}

void write_text(void* user, const char* text, size_t len) { static_cast<ScriptIo*>(user)->output.append(text, len); }

const char* kTree = R"(task: demo
name: Demo
grades: Bad, Good

1. Crack: is a crack visible?
  ⊢ Yes → grade result is "Bad"
  ⊢ No → 2
2. Rust: does rust exist?
  ⊢ Exists → grade result is "Bad"
  ⊢ Not Exists → grade result is "Good"
)";

}  // namespace

TEST_CASE("tree functions") {
  dg_tree* tree = nullptr;
  REQUIRE_MESSAGE(dg_tree_parse(kTree, &tree) == DG_OK, dg_last_error());
  char* out = nullptr;
  REQUIRE(dg_tree_evaluate(tree, R"(["No", "Not Exists"])", &out) == DG_OK);
  CHECK(take(out) == "Good");
  REQUIRE(dg_tree_evaluate(tree, R"(["yes"])", &out) == DG_OK);
  CHECK(take(out) == "Bad");
  CHECK(dg_tree_evaluate(tree, R"(["maybe"])", &out) == DG_ERR_USAGE);
  CHECK(std::string(dg_last_error()).find("maybe") != std::string::npos);
  CHECK(dg_tree_evaluate(tree, R"({"a": 1})", &out) == DG_ERR_USAGE);

  REQUIRE(dg_tree_render(tree, &out) == DG_OK);
  CHECK(take(out).find("Crack") != std::string::npos);

  REQUIRE(dg_tree_validate(tree, R"({"steps": [{"node": "1", "answer": "No"}, {"node": "2", "answer": "Exists"}], "grade": "Bad"})",
                           &out) == DG_OK);
  CHECK(json::parse(take(out))["verified"] == true);
  REQUIRE(dg_tree_validate(tree, R"({"steps": [{"node": "1", "answer": "No"}], "grade": "Bad"})", &out) == DG_OK);
  CHECK(json::parse(take(out))["verified"] == false);

  REQUIRE(dg_parse_answer(tree, "Looks fine, the grade is Good.", &out) == DG_OK);
  const auto parsed = json::parse(take(out));
  CHECK(parsed["grade"] == "Good");
  CHECK(parsed["parse_status"] == "repaired");
  dg_tree_free(tree);

  CHECK(dg_tree_parse("1. broken", &tree) != DG_OK);
  CHECK(dg_tree_load("/nonexistent/tree.txt", &tree) != DG_OK);
  CHECK(dg_tree_parse(nullptr, &tree) == DG_ERR_USAGE);
}

TEST_CASE("resize and metrics") {
  uint32_t w = 0, h = 0;
  REQUIRE(dg_resize_dims(1920, 1080, &w, &h) == DG_OK);
  CHECK(w == 1280);
  CHECK(h == 720);
  CHECK(dg_resize_dims(0, 10, &w, &h) == DG_ERR_USAGE);
  char* out = nullptr;
  REQUIRE(dg_metrics(R"({"predicted": ["A", "B", "B"], "truth": ["A", "A", "B"]})", &out) == DG_OK);
  const auto m = json::parse(take(out));
  CHECK(m["acc_exact"] == "2/3");
  CHECK(m["mf1_exact"] == "2/3");
  CHECK(dg_metrics(R"({"predicted": ["A"], "truth": []})", &out) == DG_ERR_USAGE);
  CHECK(dg_metrics("not json", &out) == DG_ERR_USAGE);
}

TEST_CASE("project lifecycle and status codes") {
  testing::TempDir dir;
  char* out = nullptr;
  const json synth{{"out_dir", (dir / "p").string()},
                   {"assets_dir", testing::assets_dir().string()},
                   {"large_images", false},
                   {"per_grade_total", {{"task1", 4}, {"task2", 4}, {"task3", 4}}}};
  REQUIRE(dg_synth_project(synth.dump().c_str(), &out) == DG_OK);
  const auto config = json::parse(take(out))["config"].get<std::string>();
  CHECK(dg_synth_project(synth.dump().c_str(), &out) == DG_ERR_CONFIG);

  dg_project* project = nullptr;
  CHECK(dg_project_open((dir / "missing.json").c_str(), nullptr, &project) == DG_ERR_CONFIG);
  CHECK(project == nullptr);
  REQUIRE(dg_project_open(config.c_str(), R"({"pipeline": {"per_grade": 2}})", &project) == DG_OK);
  REQUIRE(dg_project_config(project, &out) == DG_OK);
  CHECK(json::parse(take(out))["pipeline"]["per_grade"] == 2);

  const char* opts = R"({"tasks": ["task3"]})";
  CHECK(dg_run_stage(project, "select", opts, &out) == DG_ERR_PREREQUISITE);
  CHECK(dg_run_stage(project, "bogus", opts, &out) == DG_ERR_USAGE);
  CHECK(dg_run_stage(project, "prep", "[1]", &out) == DG_ERR_USAGE);
  REQUIRE(dg_run_stage(project, "prep", opts, &out) == DG_OK);
  CHECK(json::parse(take(out))["tasks"]["task3"]["train"] == 8);
  REQUIRE(dg_run_stage(project, "eval", R"({"tasks": ["task3"], "models": ["GPT-5-chat"], "mode": "record"})", &out) ==
          DG_OK);
  dg_string_free(out);
  REQUIRE(dg_run_stage(project, "select", opts, &out) == DG_OK);
  CHECK(json::parse(take(out))["tasks"]["task3"]["model"] == "GPT-5-chat");
  REQUIRE(dg_run_stage(project, "genqa", R"({"tasks": ["task3"], "mode": "record"})", &out) == DG_OK);
  dg_string_free(out);

  ScriptIo io;
  io.lines = {"?", "a", "r unclear", "q"};
  REQUIRE(dg_review(project, opts, read_line, write_text, &io, &out) == DG_OK);
  const auto counts = json::parse(take(out))["counts"];
  CHECK(counts["approved"] == 1);
  CHECK(counts["rejected"] == 1);
  CHECK(counts["pending"] == 6);
  CHECK(io.output.find("> ") != std::string::npos);

  REQUIRE(dg_run_stage(project, "export", opts, &out) == DG_OK);
  CHECK(json::parse(take(out))["manifest"]["records"] == 1);
  dg_project_close(project);
  CHECK(std::string(dg_version()).size() > 0);
}
