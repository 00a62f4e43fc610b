#include "defgrade/promptkit.hpp"

#include <algorithm>
#include <sstream>

#include "defgrade/error.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;

namespace defgrade::promptkit {

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::front: return "front";
    case Placement::corresponding: return "corresponding";
    case Placement::end: return "end";
  }
  return "corresponding";
}

Placement placement_from(std::string_view s) {
  auto l = util::to_lower(s);
  if (l == "front") return Placement::front;
  if (l == "corresponding") return Placement::corresponding;
  if (l == "end") return Placement::end;
  throw InvalidArgument("unknown image placement '" + std::string(s) + "' (front | corresponding | end)");
}

PromptCase PromptCase::from_id(int id) {
  switch (id) {
    case 1: return {1, false, false};
    case 2: return {2, true, false};
    case 3: return {3, false, true};
    case 4: return {4, true, true};
    default: throw InvalidArgument("prompt case must be 1-4, got " + std::to_string(id));
  }
}

namespace {

constexpr std::pair<Component, std::string_view> kComponentNames[] = {
    {Component::task, "task"},
    {Component::decision_tree, "decision_tree"},
    {Component::format, "format"},
    {Component::reference_caption, "reference_caption"},
    {Component::reference_image, "reference_image"},
    {Component::reference_annotation, "reference_annotation"},
    {Component::objective_caption, "objective_caption"},
    {Component::objective_image, "objective_image"},
    {Component::grade_result, "grade_result"},
    {Component::question, "question"},
};

}  // namespace

std::string_view to_string(Component c) {
  for (auto [k, v] : kComponentNames)
    if (k == c) return v;
  return "task";
}

Component component_from(std::string_view s) {
  for (auto [k, v] : kComponentNames)
    if (v == s) return k;
  throw InvalidArgument("unknown prompt component '" + std::string(s) + "'");
}

std::size_t PromptBundle::image_count() const {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(),
                                                [](const Segment& s) { return s.kind == Segment::Kind::image; }));
}

nlohmann::json PromptBundle::to_json() const {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& s : segments) {
    if (s.kind == Segment::Kind::text)
      parts.push_back({{"type", "text"}, {"text", s.payload}, {"component", to_string(s.component)}});
    else
      parts.push_back({{"type", "image"}, {"image", s.payload}, {"component", to_string(s.component)}});
  }
  return {{"case", case_id},
          {"placement", to_string(placement)},
          {"messages",
           {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", std::move(parts)}}}}};
}

std::string PromptBundle::serialize() const { return to_json().dump(); }

PromptBundle PromptBundle::from_json(const nlohmann::json& j) {
  PromptBundle b;
  try {
    b.case_id = j.at("case").get<int>();
    b.placement = placement_from(j.at("placement").get<std::string>());
    for (const auto& m : j.at("messages")) {
      const auto role = m.at("role").get<std::string>();
      if (role == "system") {
        b.system = m.at("content").get<std::string>();
        continue;
      }
      for (const auto& p : m.at("content")) {
        Segment s;
        const auto type = p.at("type").get<std::string>();
        s.component = component_from(p.at("component").get<std::string>());
        if (type == "text") {
          s.kind = Segment::Kind::text;
          s.payload = p.at("text").get<std::string>();
        } else if (type == "image") {
          s.kind = Segment::Kind::image;
          s.payload = p.at("image").get<std::string>();
        } else {
          throw InvalidArgument("unknown content part type '" + type + "'");
        }
        b.segments.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed prompt bundle: ") + e.what());
  }
  return b;
}

std::size_t token_count(const PromptBundle& b) {
  auto words = [](const std::string& s) {
    std::istringstream in(s);
    std::string w;
    std::size_t n = 0;
    while (in >> w) ++n;
    return n;
  };
  std::size_t n = words(b.system);
  for (const auto& s : b.segments) n += s.kind == Segment::Kind::text ? words(s.payload) : kImageTokenCost;
  return n;
}

std::string render_reference_annotation(const ReferenceExample& ref, bool include_cot) {
  if (!include_cot) return "Grade: " + ref.grade;
  if (!ref.cot) throw InvalidArgument("reference for grade '" + ref.grade + "' has no CoT annotation");
  return cot_to_json(*ref.cot).dump(2);
}

std::string render_grade_result(const Grade& g) { return "Real defect grade of the objective image: \"" + g + "\""; }

namespace {

std::vector<const ReferenceExample*> ordered_references(const PromptComponents& c, bool include_cot) {
  std::vector<const ReferenceExample*> out;
  for (const auto& g : c.grades) {
    const ReferenceExample* found = nullptr;
    for (const auto& r : c.references) {
      if (r.grade != g) continue;
      if (found) throw InvalidArgument("more than one reference example for grade '" + g + "'");
      found = &r;
    }
    if (!found) throw InvalidArgument("reference set does not cover grade '" + g + "'");
    if (include_cot && !found->cot)
      throw InvalidArgument("reference for grade '" + g + "' has no CoT annotation");
    out.push_back(found);
  }
  if (out.size() != c.references.size()) throw InvalidArgument("reference example with a grade outside the task's grade set");
  return out;
}

PromptBundle assemble(const PromptComponents& c, const PromptCase& pc, Placement placement,
                      const BuildOptions& opts, bool generation) {
  if (c.grades.empty()) throw InvalidArgument("prompt components carry no grade set");
  if (c.objective_image.empty()) throw InvalidArgument("missing objective image");
  if (c.task.empty()) throw InvalidArgument("missing task description");
  if (pc.include_cot ? c.format_cot.empty() : c.format_result.empty())
    throw InvalidArgument("missing output-format text for case " + std::to_string(pc.id));
  const bool keep_tree = pc.include_cot || !opts.drop_tree_without_cot;
  if (keep_tree && c.decision_tree.empty()) throw InvalidArgument("missing decision-tree text");
  const auto& question = generation ? c.question_generation : c.question_grading;
  if (question.empty()) throw InvalidArgument("missing question text");
  auto refs = ordered_references(c, pc.include_cot);

  using K = Segment::Kind;
  std::vector<Segment> logical;
  logical.push_back({K::text, Component::task, c.task});
  if (keep_tree) logical.push_back({K::text, Component::decision_tree, c.decision_tree});
  logical.push_back({K::text, Component::format, pc.include_cot ? c.format_cot : c.format_result});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto n = std::to_string(i + 1);
    if (pc.include_reference_images) {
      logical.push_back({K::text, Component::reference_caption, "Reference image " + n + ":"});
      logical.push_back({K::image, Component::reference_image, refs[i]->image_path});
    } else {
      logical.push_back({K::text, Component::reference_caption, "Reference example " + n + ":"});
    }
    logical.push_back({K::text, Component::reference_annotation, render_reference_annotation(*refs[i], pc.include_cot)});
  }
  logical.push_back({K::text, Component::objective_caption, "Objective image:"});
  logical.push_back({K::image, Component::objective_image, c.objective_image});
  if (generation) logical.push_back({K::text, Component::grade_result, render_grade_result(*c.grade_result)});
  logical.push_back({K::text, Component::question, question});

  PromptBundle b;
  b.system = c.role;
  b.case_id = pc.id;
  b.placement = placement;
  if (placement == Placement::corresponding) {
    b.segments = std::move(logical);
    return b;
  }
  std::vector<Segment> images, texts;
  for (auto& s : logical) (s.kind == K::image ? images : texts).push_back(std::move(s));
  auto& first = placement == Placement::front ? images : texts;
  auto& second = placement == Placement::front ? texts : images;
  b.segments = std::move(first);
  b.segments.insert(b.segments.end(), std::make_move_iterator(second.begin()), std::make_move_iterator(second.end()));
  return b;
}

}  // namespace

PromptBundle build_dg_prompt(const PromptComponents& c, const PromptCase& pc, Placement placement,
                             const BuildOptions& opts) {
  if (c.grade_result) throw InvalidArgument("grading prompts must not carry the ground-truth grade");
  return assemble(c, pc, placement, opts, false);
}

PromptBundle build_qa_prompt(const PromptComponents& c, const PromptCase& pc, Placement placement,
                             const BuildOptions& opts) {
  if (!c.grade_result) throw InvalidArgument("Q&A-generation prompt needs the ground-truth grade");
  if (std::find(c.grades.begin(), c.grades.end(), *c.grade_result) == c.grades.end())
    throw InvalidArgument("ground-truth grade '" + *c.grade_result + "' is not in the grade set");
  return assemble(c, pc, placement, opts, true);
}

std::string substitute(std::string_view text, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto open = text.find("{{", pos);
    if (open == std::string_view::npos) break;
    auto close = text.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    out.append(text.substr(pos, open - pos));
    auto key = util::trim(text.substr(open + 2, close - open - 2));
    auto it = vars.find(key);
    if (it == vars.end()) throw ConfigError("template variable '" + key + "' is not defined");
    out += it->second;
    pos = close + 2;
  }
  out.append(text.substr(pos));
  return out;
}

TemplateSet load_templates(const fs::path& dir, const std::map<std::string, std::string>& vars) {
  auto load = [&](const char* name) {
    for (const auto& candidate : {dir / name, dir.parent_path() / "common" / name}) {
      if (fs::exists(candidate)) return util::trim(substitute(util::read_file(candidate), vars));
    }
    throw ConfigError("template " + std::string(name) + " not found under " + dir.string());
  };
  TemplateSet t;
  t.role = load("role.txt");
  t.task = load("task.txt");
  t.format_cot = load("format_cot.txt");
  t.format_result = load("format_result.txt");
  t.question_grading = load("question_grading.txt");
  t.question_generation = load("question_generation.txt");
  return t;
}

}  // namespace defgrade::promptkit
