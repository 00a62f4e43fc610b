#pragma once

#include <map>
#include <string>
#include <vector>

#include "defgrade/gateway.hpp"

namespace defgrade::gateway {

// Offline stand-in for a fleet of chat-completion endpoints. It answers
// OpenAI-style requests by recognising the objective image (content hash) and
// replying with a decision-tree trace. Per model, task and prompt case, the
// fraction of correct answers over a task's evaluation set equals the
// configured accuracy, rounded to the nearest record.
//
// Profile JSON:
//   {"accuracy": {"<model>": {"<task>": [case1, case2, case3, case4]}},   // percent
//    "placement_factor": {"front": f, "end": f},
//    "prose_rate": p, "garble_rate": p, "qa_mismatch_rate": p}
class SimulatedModelServer final : public Transport {
 public:
  struct Record {
    std::string task_id;
    std::string record_id;
    Grade grade;
  };

  SimulatedModelServer(nlohmann::json profile, std::map<std::string, dtree::DecisionTree> trees);

  // `sha256` is the content hash of the image bytes that will be sent.
  void add_record(const std::string& sha256, Record record);
  void set_eval_set(const std::string& task_id, std::vector<std::string> record_ids);

  HttpResult post(const HttpRequest& request) override;

  // Exposed for tests: the answer text the server would produce.
  std::string answer(const std::string& model, const nlohmann::json& user_parts) const;

 private:
  double accuracy(const std::string& model, const std::string& task, int case_id, const std::string& placement) const;

  nlohmann::json profile_;
  std::map<std::string, dtree::DecisionTree> trees_;
  std::map<std::string, Record> by_sha_;
  std::map<std::string, std::vector<std::string>> eval_sets_;
};

}  // namespace defgrade::gateway
