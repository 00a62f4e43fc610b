#include "defgrade/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "defgrade/util.hpp"

using nlohmann::json;

namespace defgrade::gateway {

namespace {

const std::regex& grade_result_pattern() {
  static const std::regex re(R"re(Real defect grade of the objective image: "([^"]+)")re");
  return re;
}

// Deterministic draw in [0, 1) from a label.
double unit_hash(const std::string& key) {
  return static_cast<double>(util::stable_hash64(key) >> 11) * 0x1.0p-53;
}

std::string evidence_for(const dtree::Node& n, Answer a) {
  return "Checked " + util::to_lower(n.title) + ": " + util::to_lower(std::string(to_string(a))) + ".";
}

}  // namespace

SimulatedModelServer::SimulatedModelServer(json profile, std::map<std::string, dtree::DecisionTree> trees)
    : profile_(std::move(profile)), trees_(std::move(trees)) {}

void SimulatedModelServer::add_record(const std::string& sha256, Record record) {
  by_sha_[sha256] = std::move(record);
}

void SimulatedModelServer::set_eval_set(const std::string& task_id, std::vector<std::string> record_ids) {
  eval_sets_[task_id] = std::move(record_ids);
}

double SimulatedModelServer::accuracy(const std::string& model, const std::string& task, int case_id,
                                      const std::string& placement) const {
  const auto& acc = profile_.at("accuracy");
  if (!acc.contains(model) || !acc[model].contains(task)) return 0.0;
  double a = acc[model][task].at(static_cast<std::size_t>(case_id - 1)).get<double>();
  if (profile_.contains("placement_factor") && profile_["placement_factor"].contains(placement))
    a *= profile_["placement_factor"][placement].get<double>();
  return a;
}

std::string SimulatedModelServer::answer(const std::string& model, const json& parts) const {
  std::string text;
  std::vector<std::string> image_shas;
  bool first_is_image = false, last_is_image = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    const bool is_image = p.value("type", "") == "image_url";
    if (i == 0) first_is_image = is_image;
    if (i + 1 == parts.size()) last_is_image = is_image;
    if (!is_image) {
      text += p.value("text", "");
      text += '\n';
      continue;
    }
    const auto url = p.at("image_url").at("url").get<std::string>();
    const auto comma = url.find(',');
    image_shas.push_back(util::sha256_hex(util::base64_decode(url.substr(comma + 1))));
  }
  if (image_shas.empty()) throw InvalidArgument("request carries no image");
  auto it = by_sha_.find(image_shas.back());
  if (it == by_sha_.end()) throw InvalidArgument("objective image is not registered with the simulator");
  const auto& rec = it->second;
  const auto& tree = trees_.at(rec.task_id);

  std::smatch m;
  const bool generation = std::regex_search(text, m, grade_result_pattern());
  const bool wants_cot = text.find("\"steps\"") != std::string::npos;
  const int case_id = (wants_cot ? 2 : 1) + (image_shas.size() > 1 ? 2 : 0);
  const std::string placement = first_is_image && !last_is_image ? "front"
                                : last_is_image && !first_is_image ? "end"
                                                                   : "corresponding";
  const std::string key = model + "|" + rec.task_id + "|" + std::to_string(case_id) + "|" + placement + "|" +
                          (generation ? "qa" : "dg") + "|" + rec.record_id;

  bool correct;
  if (generation) {
    correct = unit_hash(key + "|mismatch") >= profile_.value("qa_mismatch_rate", 0.0);
  } else {
    const auto acc_bp = static_cast<std::uint64_t>(std::llround(accuracy(model, rec.task_id, case_id, placement) * 100));
    auto es = eval_sets_.find(rec.task_id);
    if (es != eval_sets_.end() && std::find(es->second.begin(), es->second.end(), rec.record_id) != es->second.end()) {
      const auto& ids = es->second;
      const auto k = util::div_round_half_up(acc_bp * ids.size(), 10000);
      const std::string prefix = model + "|" + rec.task_id + "|" + std::to_string(case_id) + "|" + placement + "|";
      auto rank_key = [&](const std::string& id) { return std::make_pair(util::stable_hash64(prefix + id), id); };
      const auto mine = rank_key(rec.record_id);
      std::size_t rank = 0;
      for (const auto& id : ids)
        if (rank_key(id) < mine) ++rank;
      correct = rank < k;
    } else {
      correct = unit_hash(key) * 10000 < static_cast<double>(acc_bp);
    }
  }

  Grade out_grade = rec.grade;
  if (!correct) {
    std::vector<Grade> others;
    for (const auto& g : tree.grades())
      if (g != rec.grade) others.push_back(g);
    out_grade = others.empty() ? rec.grade : others[util::stable_hash64(key + "|wrong") % others.size()];
    if (!generation) {
      const double style = unit_hash(key + "|style");
      const double garble = profile_.value("garble_rate", 0.0);
      const double prose = profile_.value("prose_rate", 0.0);
      if (style < garble) return "I am unable to assess this image with confidence.";
      if (style < garble + prose)
        return "After checking the marked equipment step by step, I conclude that the defect grade is " + out_grade + ".";
    }
  }

  if (!wants_cot && !generation) return json{{"grade", out_grade}}.dump();

  std::vector<const dtree::PathOutcome*> candidates;
  auto paths = dtree::enumerate_paths(tree);
  for (const auto& p : paths)
    if (p.grade == out_grade) candidates.push_back(&p);
  const auto& path = *candidates[util::stable_hash64(key + "|path") % candidates.size()];
  CoTResult cot;
  cot.grade = out_grade;
  for (std::size_t i = 0; i < path.nodes.size(); ++i)
    cot.steps.push_back({path.nodes[i], path.answers[i], evidence_for(*tree.find(path.nodes[i]), path.answers[i])});
  return "Following the decision procedure:\n```json\n" + cot_to_json(cot).dump(2) + "\n```";
}

HttpResult SimulatedModelServer::post(const HttpRequest& request) {
  json body;
  try {
    body = json::parse(request.body);
  } catch (const json::parse_error&) {
    return {400, R"({"error":{"message":"invalid JSON"}})", {}};
  }
  std::string model = body.value("model", "");
  if (!profile_.at("accuracy").contains(model))
    return {404, json{{"error", {{"message", "unknown model " + model}}}}.dump(), {}};
  std::string text;
  try {
    const json* parts = nullptr;
    for (const auto& m : body.at("messages"))
      if (m.value("role", "") == "user") parts = &m.at("content");
    if (!parts) throw InvalidArgument("no user message");
    text = answer(model, *parts);
  } catch (const std::exception& e) {
    return {400, json{{"error", {{"message", e.what()}}}}.dump(), {}};
  }
  const auto words = static_cast<long>(std::count(text.begin(), text.end(), ' ') + 1);
  json resp{{"id", "sim-" + util::sha256_hex(request.body).substr(0, 16)},
            {"object", "chat.completion"},
            {"model", model},
            {"choices", json::array({{{"index", 0},
                                      {"message", {{"role", "assistant"}, {"content", text}}},
                                      {"finish_reason", "stop"}}})},
            {"usage", {{"prompt_tokens", static_cast<long>(request.body.size() / 4)}, {"completion_tokens", words}}}};
  return {200, resp.dump(), {}};
}

}  // namespace defgrade::gateway
