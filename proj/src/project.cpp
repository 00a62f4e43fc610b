#include "defgrade/project.hpp"

#include <set>

#include "defgrade/dataprep.hpp"
#include "defgrade/dtree.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::project {

const TaskConfig& ProjectConfig::task(const std::string& id) const {
  for (const auto& t : tasks)
    if (t.id == id) return t;
  throw ConfigError("no task '" + id + "' in the project configuration");
}

const gateway::ModelEndpoint& ProjectConfig::endpoint(const std::string& id) const {
  for (const auto& e : endpoints)
    if (e.id == id) return e;
  throw ConfigError("no endpoint '" + id + "' in the project configuration");
}

json config_to_json(const ProjectConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.tasks)
    tasks.push_back({{"id", t.id},
                     {"name", t.name},
                     {"manifest", t.manifest},
                     {"tree", t.tree},
                     {"templates", t.templates},
                     {"grades", t.grades}});
  json endpoints = json::array();
  for (const auto& e : c.endpoints)
    endpoints.push_back({{"id", e.id},
                         {"base_url", e.base_url},
                         {"api_key_env", e.api_key_env},
                         {"temperature", e.params.temperature},
                         {"max_tokens", e.params.max_tokens},
                         {"max_in_flight", e.max_in_flight}});
  const auto& p = c.pipeline;
  const auto& l = c.lora;
  return {{"seed", c.seed},
          {"tasks", std::move(tasks)},
          {"endpoints", std::move(endpoints)},
          {"pipeline",
           {{"per_grade", p.per_grade},
            {"refs_per_grade", p.refs_per_grade},
            {"case", p.eval_case},
            {"placement", std::string(promptkit::to_string(p.placement))},
            {"select_case", p.select_case},
            {"concurrency", p.concurrency},
            {"fixture_mode", std::string(gateway::to_string(p.fixture_mode))}}},
          {"lora",
           {{"d_llm", l.model.d_llm},
            {"n_layers", l.model.n_layers},
            {"n_heads", l.model.n_heads},
            {"vocab", l.model.vocab},
            {"d_ff", l.model.d_ff},
            {"d_v", l.model.d_v},
            {"max_len", l.model.max_len},
            {"seed", l.model.seed},
            {"rank", l.rank},
            {"alpha", l.alpha},
            {"init_std", l.init_std},
            {"lr", l.lr},
            {"epochs", l.epochs},
            {"batch_size", l.batch_size},
            {"modules", l.modules},
            {"corpus_size", l.corpus_size},
            {"corpus_seed", l.corpus_seed}}},
          {"paths",
           {{"work", c.paths.work},
            {"fixtures", c.paths.fixtures},
            {"runs", c.paths.runs},
            {"qa", c.paths.qa},
            {"exports", c.paths.exports},
            {"reports", c.paths.reports}}},
          {"simulator", {{"profile", c.simulator_profile}}}};
}

ProjectConfig config_from_json(const json& j, const fs::path& root) {
  ProjectConfig c;
  c.root = root;
  try {
    c.seed = j.value("seed", c.seed);
    for (const auto& t : j.at("tasks")) {
      TaskConfig tc;
      tc.id = t.at("id").get<std::string>();
      tc.name = t.value("name", "");
      tc.manifest = t.at("manifest").get<std::string>();
      tc.tree = t.at("tree").get<std::string>();
      tc.templates = t.at("templates").get<std::string>();
      tc.grades = t.at("grades").get<std::vector<Grade>>();
      c.tasks.push_back(std::move(tc));
    }
    for (const auto& e : j.value("endpoints", json::array())) {
      gateway::ModelEndpoint ep;
      ep.id = e.at("id").get<std::string>();
      ep.base_url = e.at("base_url").get<std::string>();
      ep.api_key_env = e.value("api_key_env", "");
      ep.params.temperature = e.value("temperature", 0.0);
      ep.params.max_tokens = e.value("max_tokens", 2048);
      ep.max_in_flight = e.value("max_in_flight", 4);
      c.endpoints.push_back(std::move(ep));
    }
    if (j.contains("pipeline")) {
      const auto& p = j["pipeline"];
      c.pipeline.per_grade = p.value("per_grade", c.pipeline.per_grade);
      c.pipeline.refs_per_grade = p.value("refs_per_grade", c.pipeline.refs_per_grade);
      c.pipeline.eval_case = p.value("case", c.pipeline.eval_case);
      c.pipeline.placement = promptkit::placement_from(p.value("placement", "corresponding"));
      c.pipeline.select_case = p.value("select_case", c.pipeline.select_case);
      c.pipeline.concurrency = p.value("concurrency", c.pipeline.concurrency);
      c.pipeline.fixture_mode = gateway::fixture_mode_from(p.value("fixture_mode", "replay"));
    }
    if (j.contains("lora")) {
      const auto& l = j["lora"];
      auto& m = c.lora.model;
      m.d_llm = l.value("d_llm", m.d_llm);
      m.n_layers = l.value("n_layers", m.n_layers);
      m.n_heads = l.value("n_heads", m.n_heads);
      m.vocab = l.value("vocab", m.vocab);
      m.d_ff = l.value("d_ff", m.d_ff);
      m.d_v = l.value("d_v", m.d_v);
      m.max_len = l.value("max_len", m.max_len);
      m.seed = l.value("seed", m.seed);
      c.lora.rank = l.value("rank", c.lora.rank);
      c.lora.alpha = l.value("alpha", c.lora.alpha);
      c.lora.init_std = l.value("init_std", c.lora.init_std);
      c.lora.lr = l.value("lr", c.lora.lr);
      c.lora.epochs = l.value("epochs", c.lora.epochs);
      c.lora.batch_size = l.value("batch_size", c.lora.batch_size);
      c.lora.modules = l.value("modules", c.lora.modules);
      c.lora.corpus_size = l.value("corpus_size", c.lora.corpus_size);
      c.lora.corpus_seed = l.value("corpus_seed", c.lora.corpus_seed);
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      c.paths.work = p.value("work", c.paths.work);
      c.paths.fixtures = p.value("fixtures", c.paths.fixtures);
      c.paths.runs = p.value("runs", c.paths.runs);
      c.paths.qa = p.value("qa", c.paths.qa);
      c.paths.exports = p.value("exports", c.paths.exports);
      c.paths.reports = p.value("reports", c.paths.reports);
    }
    if (j.contains("simulator")) c.simulator_profile = j["simulator"].value("profile", "");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed project configuration: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("project configuration: ") + e.what());
  }

  std::set<std::string> ids;
  for (const auto& t : c.tasks)
    if (!ids.insert(t.id).second) throw ConfigError("duplicate task id '" + t.id + "'");
  ids.clear();
  for (const auto& e : c.endpoints)
    if (!ids.insert(e.id).second) throw ConfigError("duplicate endpoint id '" + e.id + "'");
  if (c.pipeline.concurrency < 1) throw ConfigError("pipeline.concurrency must be at least 1");
  for (int cs : {c.pipeline.eval_case, c.pipeline.select_case})
    if (cs < 1 || cs > 4) throw ConfigError("prompt case must be 1..4");
  try {
    lora::module_set_from(c.lora.modules);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

void check_config(const ProjectConfig& c) {
  if (c.tasks.empty()) throw ConfigError("the project defines no tasks");
  for (const auto& t : c.tasks) {
    for (const auto& [what, rel] : {std::pair{"manifest", t.manifest}, {"tree", t.tree}, {"templates", t.templates}})
      if (!fs::exists(c.resolve(rel))) throw ConfigError("task " + t.id + ": " + what + " '" + rel + "' does not exist");
    const auto tree = dtree::load_tree(c.resolve(t.tree).string());
    if (std::set<Grade>(tree.grades().begin(), tree.grades().end()) != std::set<Grade>(t.grades.begin(), t.grades.end()))
      throw ConfigError("task " + t.id + ": the tree's grades do not match the configured grade set");
    const auto manifest = dataprep::load_manifest(c.resolve(t.manifest), false);
    for (const auto& r : manifest.records)
      if (std::find(t.grades.begin(), t.grades.end(), r.grade) == t.grades.end())
        throw ConfigError("task " + t.id + ": manifest record " + r.id + " has grade '" + r.grade +
                          "' outside the configured grade set");
  }
  if (!c.simulator_profile.empty() && !fs::exists(c.resolve(c.simulator_profile)))
    throw ConfigError("simulator profile '" + c.simulator_profile + "' does not exist");
}

ProjectConfig load_config(const fs::path& path, const json& overrides) {
  if (!fs::exists(path)) throw ConfigError("configuration file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(util::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("configuration file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!overrides.is_null() && !overrides.empty()) j.merge_patch(overrides);
  auto root = fs::absolute(path).parent_path();
  auto c = config_from_json(j, root);
  check_config(c);
  return c;
}

void save_config(const ProjectConfig& c, const fs::path& path) {
  util::write_file_atomic(path, config_to_json(c).dump(2) + "\n");
}

}  // namespace defgrade::project
