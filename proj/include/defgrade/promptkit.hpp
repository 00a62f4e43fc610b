#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "defgrade/cot.hpp"
#include "json.hpp"

namespace defgrade::promptkit {

enum class Placement { front, corresponding, end };
std::string_view to_string(Placement p);
Placement placement_from(std::string_view s);

struct PromptCase {
  int id = 4;
  bool include_cot = true;
  bool include_reference_images = true;

  // 1: grade only, 2: CoT, 3: grade only + reference images, 4: CoT + reference images.
  static PromptCase from_id(int id);
  bool operator==(const PromptCase&) const = default;
};

// Which prompt component a segment realises. Kept alongside the payload so
// bundles can be compared component by component.
enum class Component {
  task,
  decision_tree,
  format,
  reference_caption,
  reference_image,
  reference_annotation,
  objective_caption,
  objective_image,
  grade_result,
  question,
};
std::string_view to_string(Component c);
Component component_from(std::string_view s);

struct Segment {
  enum class Kind { text, image };
  Kind kind = Kind::text;
  Component component = Component::task;
  std::string payload;  // text, or image path relative to the project root

  bool operator==(const Segment&) const = default;
  auto operator<=>(const Segment&) const = default;
};

struct PromptBundle {
  std::string system;
  std::vector<Segment> segments;
  int case_id = 4;
  Placement placement = Placement::corresponding;

  [[nodiscard]] std::size_t image_count() const;
  // Chat-completion shaped: {"case", "placement", "messages": [{"role":
  // "system", "content": ...}, {"role": "user", "content": [parts...]}]}.
  [[nodiscard]] nlohmann::json to_json() const;
  // Canonical bytes (sorted keys, no whitespace).
  [[nodiscard]] std::string serialize() const;
  static PromptBundle from_json(const nlohmann::json& j);
  bool operator==(const PromptBundle&) const = default;
};

// Rough size measure: whitespace-separated words of all text plus a fixed
// per-image cost. Not tied to any real tokenizer.
inline constexpr std::size_t kImageTokenCost = 64;
std::size_t token_count(const PromptBundle& b);

struct ReferenceExample {
  std::string image_path;
  Grade grade;
  std::optional<CoTResult> cot;
};

struct PromptComponents {
  std::string role;            // system prompt
  std::string task;
  std::string decision_tree;   // dtree::render_prompt_text output
  std::string format_cot;      // output schema when step-by-step answers are requested
  std::string format_result;   // output schema for grade-only answers
  std::vector<Grade> grades;   // the task's grade set, in canonical order
  std::vector<ReferenceExample> references;
  std::string objective_image;
  std::optional<Grade> grade_result;  // ground truth; only for Q&A-generation prompts
  std::string question_grading;
  std::string question_generation;
};

struct BuildOptions {
  // Drop the decision-tree text too when the case carries no CoT.
  bool drop_tree_without_cot = false;
};

// Grading prompt: role | task, tree, format, references, objective image, Q1.
PromptBundle build_dg_prompt(const PromptComponents& c, const PromptCase& pc, Placement placement,
                             const BuildOptions& opts = {});
// Q&A-generation prompt: as the grading prompt, plus the ground-truth grade
// before the question, and Q2 in place of Q1.
PromptBundle build_qa_prompt(const PromptComponents& c, const PromptCase& pc = PromptCase::from_id(4),
                             Placement placement = Placement::corresponding, const BuildOptions& opts = {});

std::string render_reference_annotation(const ReferenceExample& ref, bool include_cot);
std::string render_grade_result(const Grade& g);

// Prompt templates for one task, read from a directory holding role.txt,
// task.txt, format_cot.txt, format_result.txt, question_grading.txt and
// question_generation.txt. `{{name}}`, `{{grades}}` and `{{task}}` are
// substituted.
struct TemplateSet {
  std::string role, task, format_cot, format_result, question_grading, question_generation;
};
TemplateSet load_templates(const std::filesystem::path& dir, const std::map<std::string, std::string>& vars);
std::string substitute(std::string_view text, const std::map<std::string, std::string>& vars);

}  // namespace defgrade::promptkit
