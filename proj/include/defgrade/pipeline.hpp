#pragma once

#include <cstdint>
#include <iosfwd>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "defgrade/dataprep.hpp"
#include "defgrade/dtree.hpp"
#include "defgrade/gateway.hpp"
#include "defgrade/project.hpp"
#include "defgrade/promptkit.hpp"
#include "defgrade/qastore.hpp"
#include "json.hpp"

namespace defgrade::pipeline {

struct EvalRow {
  std::string record_id;
  Grade truth;
  CoTResult cot;
  std::string fixture;  // request fingerprint
};

struct EvalRun {
  std::string model;
  std::string task_id;
  int case_id = 4;
  promptkit::Placement placement = promptkit::Placement::corresponding;
  std::string config_hash;
  std::string fixture_mode;
  bool complete = false;
  std::vector<EvalRow> rows;
  std::vector<Grade> grades;

  // Recomputed from the rows through evalharness.
  [[nodiscard]] std::int64_t correct() const;
  [[nodiscard]] double acc() const;
  [[nodiscard]] double mf1() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static EvalRun from_json(const nlohmann::json& j);
};

struct SotaCandidate {
  std::string model;
  std::string task_id;
  int case_id = 4;
  std::int64_t correct = 0;
  std::int64_t n = 1;
};

// Highest accuracy wins (compared exactly as correct / n); ties go to the
// lexicographically smaller model id. All candidates must share task and case.
std::string select_sota(const std::vector<SotaCandidate>& candidates);

struct PreparedRecord {
  dataprep::ImageRecord record;  // path: resized copy
  std::string resized;           // relative to the project root
  std::string overlay;
};

struct TaskContext {
  project::TaskConfig cfg;
  dtree::DecisionTree tree;
  dataprep::DatasetSplit split;
  std::map<std::string, PreparedRecord> records;
  promptkit::TemplateSet templates;
  std::string split_sha;

  // Prompt components with `record_id` as the objective image.
  [[nodiscard]] promptkit::PromptComponents components(const std::string& record_id, bool with_grade_result) const;
  [[nodiscard]] promptkit::PromptBundle dg_prompt(const std::string& record_id, int case_id,
                                                  promptkit::Placement placement) const;
  [[nodiscard]] promptkit::PromptBundle qa_prompt(const std::string& record_id) const;
};

// Stage options arrive as JSON (the same objects the C API and the CLI pass):
//   tasks, models, cases, placements, mode, jobs, dry_run, regenerate,
//   auto_approve_verified, script, merged, name, modules, epochs, lr,
//   layout, model, case, placement, eps.
class Pipeline {
 public:
  explicit Pipeline(project::ProjectConfig cfg);

  nlohmann::json prep(const nlohmann::json& opts);
  nlohmann::json eval(const nlohmann::json& opts);
  nlohmann::json select(const nlohmann::json& opts);
  nlohmann::json genqa(const nlohmann::json& opts);
  nlohmann::json review(const nlohmann::json& opts, std::istream& in, std::ostream& out);
  nlohmann::json export_sft(const nlohmann::json& opts);
  nlohmann::json train_toy(const nlohmann::json& opts);
  nlohmann::json gradcheck(const nlohmann::json& opts);
  nlohmann::json report(const nlohmann::json& opts);

  EvalRun run_grading_eval(const gateway::ModelEndpoint& endpoint, const TaskContext& ctx, int case_id,
                           promptkit::Placement placement, gateway::FixtureMode mode, int jobs);

  // Loaded from <work>/<task>/split.json; PrerequisiteError before prep.
  [[nodiscard]] TaskContext task_context(const std::string& task_id) const;
  [[nodiscard]] std::filesystem::path run_path(const std::string& task_id, const std::string& model, int case_id,
                                               promptkit::Placement placement) const;
  [[nodiscard]] std::vector<EvalRun> load_runs(const std::string& task_id) const;
  [[nodiscard]] const project::ProjectConfig& config() const { return cfg_; }
  [[nodiscard]] qa::QaStore& qa_store() { return *store_; }

  // Replaces the transport for every endpoint (fault injection in tests).
  void set_transport(std::shared_ptr<gateway::Transport> t);
  void set_retry_policy(const gateway::RetryPolicy& r);

 private:
  std::shared_ptr<gateway::Transport> transport_for(const gateway::ModelEndpoint& e);
  std::vector<std::string> selected_tasks(const nlohmann::json& opts) const;
  gateway::FixtureMode mode_of(const nlohmann::json& opts) const;
  int jobs_of(const nlohmann::json& opts) const;
  gateway::ModelResponse call(const gateway::ModelEndpoint& e, const promptkit::PromptBundle& b,
                              gateway::FixtureMode mode);

  project::ProjectConfig cfg_;
  std::unique_ptr<qa::QaStore> store_;
  std::shared_ptr<gateway::Transport> transport_override_;
  std::shared_ptr<gateway::Transport> sim_;
  std::map<std::string, std::shared_ptr<gateway::ChatClient>> clients_;
  std::mutex clients_mu_;
  gateway::RetryPolicy retry_;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Every index is
// attempted; the first exception (by index) is rethrown afterwards.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace defgrade::pipeline
