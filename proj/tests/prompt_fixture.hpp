#pragma once

#include "defgrade/dtree.hpp"
#include "defgrade/promptkit.hpp"
#include "support.hpp"

namespace testing {

// Task 3 components with one reference per grade, taken from the first
// enumerated path of that grade.
inline defgrade::promptkit::PromptComponents task3_components() {
  using namespace defgrade;
  using namespace defgrade::promptkit;
  const auto tree = testing::task_tree("task3");
  const auto t = load_templates(testing::assets_dir() / "templates/task3",
                                {{"name", tree.name()}, {"grades", "Else, Kind, Major, Urgent"}, {"task", "task3"}});
  PromptComponents c;
  c.role = t.role;
  c.task = t.task;
  c.decision_tree = dtree::render_prompt_text(tree);
  c.format_cot = t.format_cot;
  c.format_result = t.format_result;
  c.grades = tree.grades();
  c.question_grading = t.question_grading;
  c.question_generation = t.question_generation;
  for (const auto& p : dtree::enumerate_paths(tree)) {
    bool have = false;
    for (const auto& r : c.references) have = have || r.grade == p.grade;
    if (have) continue;
    CoTResult cot;
    cot.grade = p.grade;
    for (std::size_t k = 0; k < p.nodes.size(); ++k) cot.steps.push_back({p.nodes[k], p.answers[k], "observed"});
    c.references.push_back({"refs/" + p.grade + ".png", p.grade, cot});
  }
  c.objective_image = "objective/0001.png";
  return c;
}

}  // namespace testing
