#include "defgrade/dtree.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <regex>
#include <set>
#include <sstream>

#include "defgrade/util.hpp"
#include "json.hpp"

namespace defgrade {

namespace {

std::string normalize_label(std::string_view text) {
  std::string s;
  s.reserve(text.size());
  bool space = false;
  for (char c : text) {
    auto uc = static_cast<unsigned char>(c);
    if (c == '_' || c == '-' || std::isspace(uc)) {
      space = !s.empty();
      continue;
    }
    if (space) s.push_back(' ');
    space = false;
    s.push_back(static_cast<char>(std::tolower(uc)));
  }
  while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == ',')) s.pop_back();
  return s;
}

}  // namespace

std::string_view to_string(Answer a) {
  switch (a) {
    case Answer::yes: return "Yes";
    case Answer::no: return "No";
    case Answer::exists: return "Exists";
    case Answer::not_exists: return "Not Exists";
  }
  return "?";
}

std::optional<Answer> parse_answer(std::string_view text) {
  static const std::map<std::string, Answer, std::less<>> kSynonyms = {
      {"yes", Answer::yes},
      {"y", Answer::yes},
      {"true", Answer::yes},
      {"no", Answer::no},
      {"n", Answer::no},
      {"false", Answer::no},
      {"exists", Answer::exists},
      {"exist", Answer::exists},
      {"existing", Answer::exists},
      {"present", Answer::exists},
      {"not exists", Answer::not_exists},
      {"not exist", Answer::not_exists},
      {"not", Answer::not_exists},
      {"notexists", Answer::not_exists},
      {"not present", Answer::not_exists},
      {"does not exist", Answer::not_exists},
      {"absent", Answer::not_exists},
  };
  auto it = kSynonyms.find(normalize_label(text));
  if (it == kSynonyms.end()) return std::nullopt;
  return it->second;
}

bool is_affirmative(Answer a) { return a == Answer::yes || a == Answer::exists; }

}  // namespace defgrade

namespace defgrade::dtree {

using util::trim;

const Branch* Node::resolve(Answer answer) const {
  for (const auto& b : branches)
    if (b.answer == answer) return &b;
  const Branch* same_polarity = nullptr;
  int count = 0;
  for (const auto& b : branches) {
    if (is_affirmative(b.answer) == is_affirmative(answer)) {
      same_polarity = &b;
      ++count;
    }
  }
  return count == 1 ? same_polarity : nullptr;
}

SyntaxError::SyntaxError(int line, int column, const std::string& what)
    : InvalidArgument("tree syntax error at " + std::to_string(line) + ":" +
                      std::to_string(column) + ": " + what),
      line(line),
      column(column) {}

DecisionTree DecisionTree::build(std::string task_id, std::vector<Grade> grades,
                                 std::vector<Node> nodes, std::string name) {
  DecisionTree t;
  t.task_id_ = std::move(task_id);
  t.name_ = std::move(name);
  t.grades_ = std::move(grades);
  t.nodes_ = std::move(nodes);

  if (t.grades_.empty()) throw SemanticError("no grades declared");
  std::set<std::string, std::less<>> grade_set;
  for (const auto& g : t.grades_) {
    if (g.empty() || g.find_first_of("\",\n") != std::string::npos)
      throw SemanticError("invalid grade label '" + g + "'");
    if (!grade_set.insert(g).second) throw SemanticError("duplicate grade '" + g + "'");
  }
  if (t.nodes_.empty()) throw SemanticError("no decision nodes");

  for (std::size_t i = 0; i < t.nodes_.size(); ++i) {
    const auto& n = t.nodes_[i];
    if (n.id.empty()) throw SemanticError("node with empty id");
    if (n.title.find_first_of(":\n") != std::string::npos || n.question.find('\n') != std::string::npos)
      throw SemanticError("node " + n.id + ": title must not contain ':' or newlines");
    if (!t.index_.emplace(n.id, i).second) throw SemanticError("duplicate node id " + n.id);
  }

  std::map<NodeId, int, std::less<>> in_degree;
  for (const auto& n : t.nodes_) {
    if (n.branches.size() < 2) throw SemanticError("node " + n.id + " has fewer than two branches");
    std::set<Answer> seen;
    for (const auto& b : n.branches) {
      if (!seen.insert(b.answer).second)
        throw SemanticError("node " + n.id + " repeats answer '" + std::string(to_string(b.answer)) + "'");
      if (b.next.has_value() == b.grade.has_value())
        throw SemanticError("node " + n.id + ": branch must have exactly one of next node or grade");
      if (b.grade && !grade_set.contains(*b.grade))
        throw SemanticError("node " + n.id + " yields undeclared grade '" + *b.grade + "'");
      if (b.next) {
        if (!t.index_.contains(*b.next))
          throw SemanticError("node " + n.id + " branches to undefined node " + *b.next);
        if (++in_degree[*b.next] > 1)
          throw SemanticError("node " + *b.next + " is referenced by more than one branch");
      }
    }
  }

  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < t.nodes_.size(); ++i)
    if (!in_degree.contains(t.nodes_[i].id)) roots.push_back(i);
  if (roots.size() != 1) {
    throw SemanticError(roots.empty() ? std::string("no root node (cycle)")
                                      : "multiple root nodes (" + t.nodes_[roots[0]].id + ", " +
                                            t.nodes_[roots[1]].id + ")");
  }
  t.root_index_ = roots.front();

  std::set<std::size_t> visited;
  std::set<Grade> reached;
  std::function<void(std::size_t)> walk = [&](std::size_t i) {
    if (!visited.insert(i).second) throw SemanticError("cycle through node " + t.nodes_[i].id);
    for (const auto& b : t.nodes_[i].branches) {
      if (b.grade)
        reached.insert(*b.grade);
      else
        walk(t.index_.at(*b.next));
    }
  };
  walk(t.root_index_);
  if (visited.size() != t.nodes_.size()) {
    for (std::size_t i = 0; i < t.nodes_.size(); ++i)
      if (!visited.contains(i)) throw SemanticError("node " + t.nodes_[i].id + " is part of a cycle");
  }
  for (const auto& g : t.grades_)
    if (!reached.contains(g)) throw SemanticError("grade '" + g + "' is unreachable");
  return t;
}

const Node* DecisionTree::find(std::string_view id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &nodes_[it->second];
}

bool DecisionTree::has_grade(std::string_view g) const {
  return std::find(grades_.begin(), grades_.end(), g) != grades_.end();
}

std::size_t DecisionTree::leaf_count() const {
  std::size_t n = 0;
  for (const auto& node : nodes_)
    for (const auto& b : node.branches) n += b.terminal() ? 1 : 0;
  return n;
}

std::size_t DecisionTree::depth() const {
  std::function<std::size_t(const Node&)> rec = [&](const Node& n) -> std::size_t {
    std::size_t best = 0;
    for (const auto& b : n.branches)
      if (b.next) best = std::max(best, rec(*find(*b.next)));
    return best + 1;
  };
  return rec(root());
}

namespace {

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  return util::to_lower(s.substr(0, prefix.size())) == prefix;
}

constexpr std::string_view kTurnstile = "⊢";  // ⊢
constexpr std::string_view kArrow = "→";       // →

DecisionTree parse_json_tree(std::string_view source) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(source);
  } catch (const nlohmann::json::parse_error& e) {
    throw SyntaxError(1, static_cast<int>(e.byte), "invalid JSON tree document");
  }
  try {
    std::vector<Node> nodes;
    for (const auto& jn : j.at("nodes")) {
      Node n;
      n.id = jn.at("id").is_string() ? jn.at("id").get<std::string>() : jn.at("id").dump();
      n.title = jn.value("title", "");
      n.question = jn.value("question", "");
      for (const auto& jb : jn.at("branches")) {
        Branch b{};
        auto label = jb.at("answer").get<std::string>();
        auto a = parse_answer(label);
        if (!a) throw SemanticError("node " + n.id + ": unknown answer label '" + label + "'");
        b.answer = *a;
        if (jb.contains("grade")) b.grade = jb.at("grade").get<std::string>();
        if (jb.contains("next")) {
          const auto& nx = jb.at("next");
          b.next = nx.is_string() ? nx.get<std::string>() : nx.dump();
        }
        n.branches.push_back(std::move(b));
      }
      nodes.push_back(std::move(n));
    }
    return DecisionTree::build(j.value("task", ""), j.at("grades").get<std::vector<Grade>>(),
                               std::move(nodes), j.value("name", ""));
  } catch (const nlohmann::json::exception& e) {
    throw SemanticError(std::string("malformed JSON tree: ") + e.what());
  }
}

// Branch target text: a node id, or a quoted grade optionally introduced by
// `grade` / `grade result is`.
struct Target {
  bool is_grade = false;
  std::string value;
};

Target parse_target(std::string_view text, int line, int column) {
  static const std::regex kGrade(R"re(^(?:grade(?:\s+result\s+is)?\s*)?"([^"]+)"$)re",
                                 std::regex::icase);
  static const std::regex kId(R"(^[A-Za-z0-9_]+$)");
  std::string t = trim(text);
  std::smatch m;
  if (std::regex_match(t, m, kGrade)) return {true, m[1].str()};
  if (std::regex_match(t, kId)) return {false, t};
  throw SyntaxError(line, column, "branch target must be a node id or a quoted grade, got '" + t + "'");
}

}  // namespace

DecisionTree parse_tree(std::string_view source) {
  auto first = source.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && source[first] == '{') return parse_json_tree(source);

  static const std::regex kNodeHeader(R"(^([A-Za-z0-9_]+)\.\s+(.*)$)");
  std::string task, name;
  std::vector<Grade> grades;
  std::vector<Node> nodes;

  std::istringstream in{std::string(source)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    std::string t = trim(raw);
    if (t.empty() || t.front() == '#') continue;
    const int indent = static_cast<int>(raw.find_first_not_of(" \t"));
    const int col0 = indent + 1;

    if (starts_with_ci(t, "execute the check")) continue;
    if (starts_with_ci(t, "task:")) {
      task = trim(t.substr(5));
      continue;
    }
    if (starts_with_ci(t, "name:")) {
      name = trim(t.substr(5));
      continue;
    }
    if (starts_with_ci(t, "grades:")) {
      grades.clear();
      for (auto& g : util::split(t.substr(7), ',')) {
        auto gt = trim(g);
        if (gt.size() >= 2 && gt.front() == '"' && gt.back() == '"') gt = gt.substr(1, gt.size() - 2);
        if (gt.empty()) throw SyntaxError(line_no, col0, "empty grade label");
        grades.push_back(gt);
      }
      continue;
    }

    std::string body;
    bool is_branch = false;
    if (t.starts_with(kTurnstile)) {
      body = t.substr(kTurnstile.size());
      is_branch = true;
    } else if (t.starts_with("|-")) {
      body = t.substr(2);
      is_branch = true;
    } else if (t.starts_with("- ")) {
      body = t.substr(2);
      is_branch = true;
    }
    if (is_branch) {
      if (nodes.empty()) throw SyntaxError(line_no, col0, "branch before any node");
      auto arrow = body.find(kArrow);
      std::size_t arrow_len = kArrow.size();
      if (arrow == std::string::npos) {
        arrow = body.find("->");
        arrow_len = 2;
      }
      const int body_col = col0 + static_cast<int>(t.size() - body.size());
      if (arrow == std::string::npos) throw SyntaxError(line_no, body_col, "branch is missing an arrow");
      auto label = trim(body.substr(0, arrow));
      auto answer = parse_answer(label);
      if (!answer) throw SyntaxError(line_no, body_col, "unknown answer label '" + label + "'");
      const int target_col = body_col + static_cast<int>(arrow + arrow_len);
      auto target = parse_target(body.substr(arrow + arrow_len), line_no, target_col);
      Branch b{};
      b.answer = *answer;
      if (target.is_grade)
        b.grade = target.value;
      else
        b.next = target.value;
      nodes.back().branches.push_back(std::move(b));
      continue;
    }

    std::smatch m;
    if (std::regex_match(t, m, kNodeHeader)) {
      std::string rest = m[2].str();
      auto colon = rest.find(':');
      if (colon == std::string::npos)
        throw SyntaxError(line_no, col0 + static_cast<int>(m.position(2)), "node line needs 'title: question'");
      Node n;
      n.id = m[1].str();
      n.title = trim(rest.substr(0, colon));
      n.question = trim(rest.substr(colon + 1));
      nodes.push_back(std::move(n));
      continue;
    }
    throw SyntaxError(line_no, col0, "unrecognized line '" + t + "'");
  }
  if (grades.empty()) throw SyntaxError(line_no, 1, "missing 'grades:' declaration");
  return DecisionTree::build(task, grades, std::move(nodes), name);
}

DecisionTree load_tree(const std::string& path) {
  try {
    return parse_tree(util::read_file(path));
  } catch (const InvalidArgument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string to_json_text(const DecisionTree& tree) {
  nlohmann::json j;
  j["task"] = tree.task_id();
  j["name"] = tree.name();
  j["grades"] = tree.grades();
  auto& jn = j["nodes"] = nlohmann::json::array();
  for (const auto& n : tree.nodes()) {
    nlohmann::json node{{"id", n.id}, {"title", n.title}, {"question", n.question}};
    auto& jb = node["branches"] = nlohmann::json::array();
    for (const auto& b : n.branches) {
      nlohmann::json branch{{"answer", to_string(b.answer)}};
      if (b.grade)
        branch["grade"] = *b.grade;
      else
        branch["next"] = *b.next;
      jb.push_back(std::move(branch));
    }
    jn.push_back(std::move(node));
  }
  return j.dump(2);
}

AnswerTrace trace(const DecisionTree& tree, std::span<const Answer> answers) {
  AnswerTrace out;
  const Node* node = &tree.root();
  std::size_t i = 0;
  while (true) {
    if (i == answers.size()) return out;
    const Branch* b = node->resolve(answers[i]);
    if (!b) {
      throw TraceError(TraceErrorKind::unknown_answer,
                       "answer '" + std::string(to_string(answers[i])) + "' has no branch at node " + node->id);
    }
    out.steps.emplace_back(node->id, b->answer);
    ++i;
    if (b->terminal()) {
      if (i != answers.size()) {
        throw TraceError(TraceErrorKind::surplus, std::to_string(answers.size() - i) +
                                                      " surplus answer(s) after reaching a grade at node " +
                                                      node->id);
      }
      out.derived_grade = *b->grade;
      return out;
    }
    node = tree.find(*b->next);
  }
}

Grade evaluate(const DecisionTree& tree, std::span<const Answer> answers) {
  auto t = trace(tree, answers);
  if (!t.complete()) {
    throw TraceError(TraceErrorKind::incomplete,
                     "incomplete trace: " + std::to_string(answers.size()) + " answer(s) end before a grade");
  }
  return *t.derived_grade;
}

std::vector<PathOutcome> enumerate_paths(const DecisionTree& tree) {
  std::vector<PathOutcome> out;
  PathOutcome cur;
  std::function<void(const Node&)> walk = [&](const Node& n) {
    for (const auto& b : n.branches) {
      cur.answers.push_back(b.answer);
      cur.nodes.push_back(n.id);
      if (b.terminal()) {
        out.push_back({cur.answers, cur.nodes, *b.grade});
      } else {
        walk(*tree.find(*b.next));
      }
      cur.answers.pop_back();
      cur.nodes.pop_back();
    }
  };
  walk(tree.root());
  auto key = [](const PathOutcome& p) {
    std::vector<std::string_view> k;
    for (auto a : p.answers) k.push_back(to_string(a));
    return k;
  };
  std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
  return out;
}

namespace {

std::string step_number(const NodeId& id) {
  std::size_t n = 0;
  while (n < id.size() && std::isdigit(static_cast<unsigned char>(id[n]))) ++n;
  return n == 0 ? id : id.substr(0, n);
}

}  // namespace

std::string render_prompt_text(const DecisionTree& tree) {
  std::ostringstream out;
  const auto& nodes = tree.nodes();
  if (nodes.size() == 1) {
    out << "Execute the check in step " << nodes.front().id << ".";
  } else {
    out << "Execute the checks in steps " << step_number(nodes.front().id) << kArrow
        << step_number(nodes.back().id) << " in order.";
  }
  out << " As soon as a branch gives a grade result, stop and skip the remaining checks.\n";
  out << "Grades: ";
  for (std::size_t i = 0; i < tree.grades().size(); ++i) out << (i ? ", " : "") << tree.grades()[i];
  out << "\n";
  for (const auto& n : nodes) {
    out << "\n" << n.id << ". " << n.title << ": " << n.question << "\n";
    for (const auto& b : n.branches) {
      out << "  " << kTurnstile << " " << to_string(b.answer) << " " << kArrow << " ";
      if (b.grade)
        out << "grade result is \"" << *b.grade << "\"";
      else
        out << *b.next;
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace defgrade::dtree
