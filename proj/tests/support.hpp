#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "defgrade/dtree.hpp"
#include "defgrade/synth.hpp"
#include "defgrade/util.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path assets_dir() { return DEFGRADE_TEST_ASSETS; }
inline fs::path data_dir() { return DEFGRADE_TEST_DATA; }

inline defgrade::dtree::DecisionTree task_tree(const std::string& task) {
  return defgrade::dtree::load_tree((assets_dir() / "trees" / (task + ".tree")).string());
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "defgrade-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Synthetic project with `per_grade_total` records per grade and no large
// images; returns the config path.
inline fs::path small_project(const fs::path& dir, std::size_t per_grade_total) {
  defgrade::synth::SynthOptions o;
  o.out_dir = dir;
  o.assets_dir = assets_dir();
  o.large_images = false;
  o.per_grade_total = {{"task1", per_grade_total}, {"task2", per_grade_total}, {"task3", per_grade_total}};
  defgrade::synth::synth_project(o);
  return dir / "defgrade.json";
}

// Random strict binary tree over grades G0..G{k-1}; every grade is reachable.
inline defgrade::dtree::DecisionTree random_tree(defgrade::util::Rng& rng, std::size_t grade_count,
                                                 std::size_t max_nodes) {
  using namespace defgrade;
  std::vector<Grade> grades;
  for (std::size_t i = 0; i < grade_count; ++i) grades.push_back("G" + std::to_string(i));
  const std::size_t inner = std::max<std::size_t>(grade_count - 1, 1 + rng.below(max_nodes));

  std::vector<dtree::Node> nodes(inner);
  // Open slots: (node index, branch index) awaiting a child.
  std::vector<std::pair<std::size_t, std::size_t>> open;
  for (std::size_t i = 0; i < inner; ++i) {
    auto& n = nodes[i];
    n.id = "n" + std::to_string(i);
    n.title = "Check " + std::to_string(i);
    n.question = "Is property " + std::to_string(i) + " present?";
    const bool existence = rng.below(2) == 0;
    n.branches.push_back({existence ? Answer::not_exists : Answer::no, std::nullopt, std::nullopt});
    n.branches.push_back({existence ? Answer::exists : Answer::yes, std::nullopt, std::nullopt});
    if (i > 0) {
      const auto k = rng.below(open.size());
      auto [p, b] = open[k];
      open.erase(open.begin() + static_cast<std::ptrdiff_t>(k));
      nodes[p].branches[b].next = n.id;
    }
    open.emplace_back(i, 0);
    open.emplace_back(i, 1);
  }
  rng.shuffle(open);
  for (std::size_t i = 0; i < open.size(); ++i) {
    auto [p, b] = open[i];
    nodes[p].branches[b].grade = i < grades.size() ? grades[i] : grades[rng.below(grades.size())];
  }
  return dtree::DecisionTree::build("rand", grades, std::move(nodes));
}

}  // namespace testing
