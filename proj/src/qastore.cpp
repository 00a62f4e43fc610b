#include "defgrade/qastore.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <set>

#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::qa {

std::string_view to_string(ReviewState s) {
  switch (s) {
    case ReviewState::pending: return "pending";
    case ReviewState::approved: return "approved";
    case ReviewState::edited: return "edited";
    case ReviewState::rejected: return "rejected";
  }
  return "pending";
}

ReviewState review_state_from(std::string_view s) {
  if (s == "pending") return ReviewState::pending;
  if (s == "approved") return ReviewState::approved;
  if (s == "edited") return ReviewState::edited;
  if (s == "rejected") return ReviewState::rejected;
  throw InvalidArgument("unknown review state '" + std::string(s) + "'");
}

json QAPair::to_json() const {
  auto answer_json = cot_to_json(answer);
  answer_json["parse_status"] = std::string(defgrade::to_string(answer.parse_status));
  return {{"id", id},
          {"task", task_id},
          {"record_id", record_id},
          {"truth", truth},
          {"objective_image", objective_image},
          {"overlay_image", overlay_image},
          {"prompt", prompt.to_json()},
          {"answer", std::move(answer_json)},
          {"source_model", source_model},
          {"review_state", std::string(qa::to_string(review_state))},
          {"note", note},
          {"flags", flags},
          {"version", version}};
}

QAPair QAPair::from_json(const json& j) {
  try {
    QAPair p;
    p.id = j.at("id").get<std::string>();
    p.task_id = j.at("task").get<std::string>();
    p.record_id = j.at("record_id").get<std::string>();
    p.truth = j.at("truth").get<std::string>();
    p.objective_image = j.value("objective_image", "");
    p.overlay_image = j.value("overlay_image", "");
    p.prompt = promptkit::PromptBundle::from_json(j.at("prompt"));
    p.answer = cot_from_json(j.at("answer"));
    p.source_model = j.value("source_model", "");
    p.review_state = review_state_from(j.at("review_state").get<std::string>());
    p.note = j.value("note", "");
    p.flags = j.value("flags", std::vector<std::string>{});
    p.version = j.value("version", 0);
    return p;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed QA pair: ") + e.what());
  }
}

bool QAPair::same_content(const QAPair& o) const {
  auto a = to_json();
  auto b = o.to_json();
  a.erase("version");
  b.erase("version");
  return a == b;
}

QaStore::QaStore(fs::path dir) : dir_(std::move(dir)) {}

fs::path QaStore::path_for(const std::string& task_id, const std::string& pair_id, int version) const {
  return dir_ / task_id / (pair_id + ".v" + std::to_string(version) + ".json");
}

namespace {

// (pair id, version) pairs found in a task directory.
std::vector<std::pair<std::string, int>> scan(const fs::path& dir) {
  static const std::regex re(R"(^(.+)\.v([0-9]+)\.json$)");
  std::vector<std::pair<std::string, int>> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    std::smatch m;
    if (std::regex_match(name, m, re)) out.emplace_back(m[1].str(), std::stoi(m[2].str()));
  }
  return out;
}

}  // namespace

int QaStore::latest_version(const std::string& task_id, const std::string& pair_id) const {
  int v = 0;
  for (const auto& [id, ver] : scan(dir_ / task_id))
    if (id == pair_id) v = std::max(v, ver);
  return v;
}

std::vector<std::string> QaStore::pair_ids(const std::string& task_id) const {
  std::set<std::string> ids;
  for (const auto& [id, ver] : scan(dir_ / task_id)) ids.insert(id);
  return {ids.begin(), ids.end()};
}

std::optional<QAPair> QaStore::latest(const std::string& task_id, const std::string& pair_id) const {
  const int v = latest_version(task_id, pair_id);
  if (v == 0) return std::nullopt;
  const auto path = path_for(task_id, pair_id, v);
  try {
    auto p = QAPair::from_json(json::parse(util::read_file(path)));
    p.version = v;
    return p;
  } catch (const std::exception& e) {
    throw RuntimeFailure("unreadable QA pair file " + path.string() + ": " + e.what());
  }
}

std::vector<QAPair> QaStore::load_task(const std::string& task_id) const {
  std::vector<QAPair> out;
  for (const auto& id : pair_ids(task_id)) out.push_back(*latest(task_id, id));
  return out;
}

QAPair QaStore::put(QAPair pair, std::optional<int> expected_version) {
  if (pair.id.empty() || pair.task_id.empty()) throw InvalidArgument("QA pair needs an id and a task");
  if (pair.id.find('/') != std::string::npos) throw InvalidArgument("QA pair id must not contain '/'");
  const int current = latest_version(pair.task_id, pair.id);
  if (expected_version && *expected_version != current)
    throw RuntimeFailure("QA pair " + pair.id + " changed concurrently (expected v" +
                         std::to_string(*expected_version) + ", found v" + std::to_string(current) + ")");
  pair.version = current + 1;
  if (!util::write_file_exclusive(path_for(pair.task_id, pair.id, pair.version), pair.to_json().dump(2) + "\n"))
    throw RuntimeFailure("QA pair " + pair.id + " version " + std::to_string(pair.version) +
                         " was written by another process");
  return pair;
}

void QaStore::audit(const AuditEntry& e) {
  std::lock_guard lock(audit_mu_);
  const auto path = dir_ / "audit.jsonl";
  std::size_t seq = 1;
  if (fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++seq;
  }
  json j{{"seq", seq}, {"pair", e.pair_id}, {"version", e.version}, {"action", e.action}, {"actor", e.actor}};
  if (!e.detail.empty()) j["detail"] = e.detail;
  fs::create_directories(dir_);
  util::append_line(path, j.dump());
}

std::vector<json> QaStore::audit_log() const {
  std::vector<json> out;
  std::ifstream in(dir_ / "audit.jsonl");
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

}  // namespace defgrade::qa
