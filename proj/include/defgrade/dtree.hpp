#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "defgrade/error.hpp"

namespace defgrade {

using Grade = std::string;
using NodeId = std::string;

enum class Answer { yes, no, exists, not_exists };

std::string_view to_string(Answer a);
// Case-insensitive, with synonyms ("y", "true", "not", "does not exist", ...).
std::optional<Answer> parse_answer(std::string_view text);
bool is_affirmative(Answer a);

}  // namespace defgrade

namespace defgrade::dtree {

struct Branch {
  Answer answer;
  // Exactly one of these is set.
  std::optional<NodeId> next;
  std::optional<Grade> grade;

  [[nodiscard]] bool terminal() const { return grade.has_value(); }
  bool operator==(const Branch&) const = default;
};

struct Node {
  NodeId id;
  std::string title;
  std::string question;
  std::vector<Branch> branches;  // authored order

  // Branch taken for `answer`. Falls back to the branch with the same
  // polarity (Yes ~ Exists, No ~ Not Exists) when the node has exactly one.
  [[nodiscard]] const Branch* resolve(Answer answer) const;
  bool operator==(const Node&) const = default;
};

class SyntaxError : public InvalidArgument {
 public:
  SyntaxError(int line, int column, const std::string& what);
  int line;
  int column;
};

class SemanticError : public InvalidArgument {
 public:
  explicit SemanticError(const std::string& what) : InvalidArgument("tree: " + what) {}
};

// Immutable once built; construct through parse_tree or DecisionTree::build.
class DecisionTree {
 public:
  static DecisionTree build(std::string task_id, std::vector<Grade> grades,
                            std::vector<Node> nodes, std::string name = {});

  [[nodiscard]] const std::string& task_id() const { return task_id_; }
  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] const std::vector<Grade>& grades() const { return grades_; }
  [[nodiscard]] const std::vector<Node>& nodes() const { return nodes_; }
  [[nodiscard]] const Node& root() const { return nodes_[root_index_]; }
  [[nodiscard]] const Node* find(std::string_view id) const;
  [[nodiscard]] bool has_grade(std::string_view g) const;
  [[nodiscard]] std::size_t leaf_count() const;
  [[nodiscard]] std::size_t depth() const;

 private:
  DecisionTree() = default;

  std::string task_id_;
  std::string name_;
  std::vector<Grade> grades_;
  std::vector<Node> nodes_;
  std::map<NodeId, std::size_t, std::less<>> index_;
  std::size_t root_index_ = 0;
};

// Accepts the line-oriented tree format or its JSON rendering (a document
// whose first non-blank character is '{').
DecisionTree parse_tree(std::string_view source);
DecisionTree load_tree(const std::string& path);

std::string to_json_text(const DecisionTree& tree);

enum class TraceErrorKind { incomplete, unknown_answer, surplus };

class TraceError : public InvalidArgument {
 public:
  TraceError(TraceErrorKind kind, const std::string& what) : InvalidArgument(what), kind(kind) {}
  TraceErrorKind kind;
};

struct AnswerTrace {
  std::vector<std::pair<NodeId, Answer>> steps;
  std::optional<Grade> derived_grade;  // empty while the trace is incomplete

  [[nodiscard]] bool complete() const { return derived_grade.has_value(); }
};

// Walks from the root consuming one answer per visited node. Throws
// TraceError on a short, surplus or unusable answer list.
Grade evaluate(const DecisionTree& tree, std::span<const Answer> answers);
AnswerTrace trace(const DecisionTree& tree, std::span<const Answer> answers);

struct PathOutcome {
  std::vector<Answer> answers;
  std::vector<NodeId> nodes;
  Grade grade;
};

// One entry per leaf, ordered lexicographically by answer-label sequence.
std::vector<PathOutcome> enumerate_paths(const DecisionTree& tree);

// Deterministic rendering used both as the decision-tree prompt component
// and as a canonical source document: parse_tree accepts it back.
std::string render_prompt_text(const DecisionTree& tree);

}  // namespace defgrade::dtree
