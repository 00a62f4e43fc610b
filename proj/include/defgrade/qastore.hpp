#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "defgrade/cot.hpp"
#include "defgrade/promptkit.hpp"
#include "json.hpp"

namespace defgrade::qa {

enum class ReviewState { pending, approved, edited, rejected };
std::string_view to_string(ReviewState s);
ReviewState review_state_from(std::string_view s);

struct QAPair {
  std::string id;
  std::string task_id;
  std::string record_id;
  Grade truth;
  std::string objective_image;  // resized copy, relative to the project root
  std::string overlay_image;
  promptkit::PromptBundle prompt;  // grading-prompt form used for SFT
  CoTResult answer;
  std::string source_model;
  ReviewState review_state = ReviewState::pending;
  std::string note;
  std::vector<std::string> flags;  // machine findings at generation time
  int version = 0;

  [[nodiscard]] nlohmann::json to_json() const;
  static QAPair from_json(const nlohmann::json& j);
  // Content equality ignoring the version number.
  [[nodiscard]] bool same_content(const QAPair& o) const;
};

struct AuditEntry {
  std::string pair_id;
  int version = 0;
  std::string action;  // generate | approve | edit | reject | note
  std::string actor;   // reviewer | auto | genqa
  std::string detail;
};

// Append-only store: <dir>/<task>/<pair id>.v<N>.json plus <dir>/audit.jsonl.
// A new decision is a new version file created exclusively, so readers only
// ever see complete versions and two writers cannot claim the same number.
class QaStore {
 public:
  explicit QaStore(std::filesystem::path dir);

  // Writes `pair` as version latest + 1 (version 1 for a new id) and returns
  // the stored copy. Throws RuntimeFailure if `expected_version` is given and
  // someone else wrote in between.
  QAPair put(QAPair pair, std::optional<int> expected_version = std::nullopt);

  [[nodiscard]] std::optional<QAPair> latest(const std::string& task_id, const std::string& pair_id) const;
  [[nodiscard]] std::vector<std::string> pair_ids(const std::string& task_id) const;
  // Latest version of every pair of a task. Unreadable files raise
  // RuntimeFailure naming the file.
  [[nodiscard]] std::vector<QAPair> load_task(const std::string& task_id) const;
  [[nodiscard]] std::filesystem::path path_for(const std::string& task_id, const std::string& pair_id,
                                               int version) const;
  [[nodiscard]] int latest_version(const std::string& task_id, const std::string& pair_id) const;

  void audit(const AuditEntry& e);
  [[nodiscard]] std::vector<nlohmann::json> audit_log() const;
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::mutex audit_mu_;
};

}  // namespace defgrade::qa
