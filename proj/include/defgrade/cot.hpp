#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "defgrade/dtree.hpp"

namespace defgrade {

// Grade carried by a response that could not be parsed at all. It is never a
// member of any grade set, so it always scores as incorrect.
inline constexpr std::string_view kParseFailureGrade = "<parse-failure>";

enum class ParseStatus { ok, repaired, failed };
std::string_view to_string(ParseStatus s);
ParseStatus parse_status_from(std::string_view s);

struct CoTStep {
  NodeId node_id;
  Answer answer;
  std::optional<std::string> evidence;
  bool operator==(const CoTStep&) const = default;
};

// A step-by-step grading answer: one step per decision node visited plus the
// final grade.
struct CoTResult {
  std::vector<CoTStep> steps;
  Grade grade;
  ParseStatus parse_status = ParseStatus::ok;
  bool operator==(const CoTResult&) const = default;
};

// Wire form produced for prompts and SFT targets:
// {"grade": "...", "steps": [{"answer": "...", "evidence": "...", "node": "..."}]}
nlohmann::json cot_to_json(const CoTResult& cot);
std::string serialize_cot(const CoTResult& cot);
// Strict decoding of the wire form (status is taken from the optional
// "parse_status" key when present, otherwise ok). Throws InvalidArgument.
CoTResult cot_from_json(const nlohmann::json& j);

struct ValidationReport {
  bool path_consistent = false;
  bool grade_consistent = false;
  bool complete = false;
  std::optional<Grade> derived_grade;
  std::vector<std::string> messages;

  [[nodiscard]] bool verified() const { return path_consistent && grade_consistent && complete; }
};

namespace dtree {
// Inconsistencies are reported, never thrown.
ValidationReport validate_cot(const DecisionTree& tree, const CoTResult& cot);
}  // namespace dtree

}  // namespace defgrade
