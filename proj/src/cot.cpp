#include "defgrade/cot.hpp"

#include <set>

namespace defgrade {

std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::repaired: return "repaired";
    case ParseStatus::failed: return "failed";
  }
  return "failed";
}

ParseStatus parse_status_from(std::string_view s) {
  if (s == "ok") return ParseStatus::ok;
  if (s == "repaired") return ParseStatus::repaired;
  if (s == "failed") return ParseStatus::failed;
  throw InvalidArgument("unknown parse status '" + std::string(s) + "'");
}

nlohmann::json cot_to_json(const CoTResult& cot) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : cot.steps) {
    nlohmann::json js{{"node", s.node_id}, {"answer", to_string(s.answer)}};
    if (s.evidence) js["evidence"] = *s.evidence;
    steps.push_back(std::move(js));
  }
  return {{"steps", std::move(steps)}, {"grade", cot.grade}};
}

std::string serialize_cot(const CoTResult& cot) { return cot_to_json(cot).dump(); }

CoTResult cot_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("CoT result must be a JSON object");
  CoTResult out;
  try {
    out.grade = j.at("grade").get<std::string>();
    if (j.contains("steps")) {
      for (const auto& js : j.at("steps")) {
        CoTStep step;
        const auto& id = js.contains("node") ? js.at("node") : js.at("step");
        step.node_id = id.is_string() ? id.get<std::string>() : id.dump();
        auto label = js.at("answer").get<std::string>();
        auto a = parse_answer(label);
        if (!a) throw InvalidArgument("unknown answer label '" + label + "'");
        step.answer = *a;
        if (js.contains("evidence") && js.at("evidence").is_string())
          step.evidence = js.at("evidence").get<std::string>();
        out.steps.push_back(std::move(step));
      }
    }
    if (j.contains("parse_status")) out.parse_status = parse_status_from(j.at("parse_status").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed CoT result: ") + e.what());
  }
  return out;
}

namespace dtree {

ValidationReport validate_cot(const DecisionTree& tree, const CoTResult& cot) {
  ValidationReport r;
  r.path_consistent = true;
  r.complete = true;

  std::set<NodeId> seen;
  for (const auto& s : cot.steps) {
    if (!tree.find(s.node_id)) {
      r.path_consistent = false;
      r.messages.push_back("step references unknown node " + s.node_id);
    }
    if (!seen.insert(s.node_id).second) {
      r.path_consistent = false;
      r.messages.push_back("node " + s.node_id + " answered more than once");
    }
  }

  // Walk the tree along the recorded answers.
  const Node* node = &tree.root();
  std::size_t visited = 0;
  std::vector<NodeId> path;
  while (node != nullptr) {
    auto it = std::find_if(cot.steps.begin(), cot.steps.end(),
                           [&](const CoTStep& s) { return s.node_id == node->id; });
    if (it == cot.steps.end()) {
      r.complete = false;
      r.messages.push_back("missing step for node " + node->id);
      break;
    }
    if (static_cast<std::size_t>(it - cot.steps.begin()) != visited) {
      r.path_consistent = false;
      r.messages.push_back("step for node " + node->id + " is out of order");
    }
    const Branch* b = node->resolve(it->answer);
    if (!b) {
      r.path_consistent = false;
      r.messages.push_back("answer '" + std::string(to_string(it->answer)) + "' is not a branch of node " +
                           node->id);
      break;
    }
    path.push_back(node->id);
    ++visited;
    if (b->terminal()) {
      r.derived_grade = *b->grade;
      node = nullptr;
    } else {
      node = tree.find(*b->next);
    }
  }

  for (const auto& s : cot.steps) {
    if (std::find(path.begin(), path.end(), s.node_id) == path.end() && r.derived_grade) {
      r.complete = false;
      r.messages.push_back("surplus step for node " + s.node_id + " after the grade was reached");
    }
  }

  if (!tree.has_grade(cot.grade)) r.messages.push_back("claimed grade '" + cot.grade + "' is not in the grade set");
  r.grade_consistent = r.derived_grade.has_value() && *r.derived_grade == cot.grade;
  if (r.derived_grade && !r.grade_consistent)
    r.messages.push_back("trace implies '" + *r.derived_grade + "' but the claimed grade is '" + cot.grade + "'");
  return r;
}

}  // namespace dtree

}  // namespace defgrade
