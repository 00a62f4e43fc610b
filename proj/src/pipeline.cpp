#include "defgrade/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <set>
#include <thread>

#include "defgrade/evalharness.hpp"
#include "defgrade/simulator.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::pipeline {

using promptkit::Placement;

// ---- EvalRun ---------------------------------------------------------------

namespace {

std::vector<evalharness::LabeledPair> pairs_of(const EvalRun& r) {
  std::vector<evalharness::LabeledPair> p;
  for (const auto& row : r.rows) p.push_back({row.cot.grade, row.truth});
  return p;
}

}  // namespace

std::int64_t EvalRun::correct() const {
  std::int64_t c = 0;
  for (const auto& row : rows)
    if (row.cot.grade == row.truth) ++c;
  return c;
}

double EvalRun::acc() const { return evalharness::accuracy(pairs_of(*this)); }

double EvalRun::mf1() const { return evalharness::macro_f1(pairs_of(*this), grades); }

json EvalRun::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    auto cot = cot_to_json(r.cot);
    cot["parse_status"] = std::string(to_string(r.cot.parse_status));
    rows_j.push_back({{"record_id", r.record_id}, {"truth", r.truth}, {"cot", std::move(cot)}, {"fixture", r.fixture}});
  }
  json j{{"model", model},
         {"task", task_id},
         {"case", case_id},
         {"placement", std::string(promptkit::to_string(placement))},
         {"config_hash", config_hash},
         {"fixture_mode", fixture_mode},
         {"complete", complete},
         {"grades", grades},
         {"rows", std::move(rows_j)}};
  if (complete && !rows.empty())
    j["summary"] = {{"acc", acc()}, {"mf1", mf1()}, {"n", rows.size()}, {"correct", correct()}};
  return j;
}

EvalRun EvalRun::from_json(const json& j) {
  try {
    EvalRun r;
    r.model = j.at("model").get<std::string>();
    r.task_id = j.at("task").get<std::string>();
    r.case_id = j.at("case").get<int>();
    r.placement = promptkit::placement_from(j.at("placement").get<std::string>());
    r.config_hash = j.value("config_hash", "");
    r.fixture_mode = j.value("fixture_mode", "");
    r.complete = j.value("complete", false);
    r.grades = j.at("grades").get<std::vector<Grade>>();
    for (const auto& row : j.at("rows"))
      r.rows.push_back({row.at("record_id").get<std::string>(), row.at("truth").get<std::string>(),
                        cot_from_json(row.at("cot")), row.value("fixture", "")});
    return r;
  } catch (const json::exception& e) {
    throw RuntimeFailure(std::string("malformed run file: ") + e.what());
  }
}

std::string select_sota(const std::vector<SotaCandidate>& candidates) {
  if (candidates.empty()) throw PrerequisiteError("SOTA selection needs at least one evaluation run");
  const auto* best = &candidates.front();
  for (const auto& c : candidates) {
    if (c.task_id != best->task_id || c.case_id != best->case_id)
      throw InvalidArgument("SOTA candidates must share task and case");
    if (c.n <= 0) throw InvalidArgument("candidate " + c.model + " has no evaluated records");
    const auto lhs = static_cast<__int128>(c.correct) * best->n;
    const auto rhs = static_cast<__int128>(best->correct) * c.n;
    if (lhs > rhs || (lhs == rhs && c.model < best->model)) best = &c;
  }
  return best->model;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- TaskContext -----------------------------------------------------------

promptkit::PromptComponents TaskContext::components(const std::string& record_id, bool with_grade_result) const {
  auto it = records.find(record_id);
  if (it == records.end()) throw InvalidArgument("record " + record_id + " is not part of task " + cfg.id);
  promptkit::PromptComponents c;
  c.role = templates.role;
  c.task = templates.task;
  c.decision_tree = dtree::render_prompt_text(tree);
  c.format_cot = templates.format_cot;
  c.format_result = templates.format_result;
  c.grades = tree.grades();
  c.question_grading = templates.question_grading;
  c.question_generation = templates.question_generation;
  for (const auto& g : tree.grades()) {
    auto refs = split.references.find(g);
    if (refs == split.references.end()) continue;
    for (const auto& id : refs->second) {
      const auto& r = records.at(id);
      c.references.push_back({r.overlay, g, r.record.reference_cot});
    }
  }
  c.objective_image = it->second.overlay;
  if (with_grade_result) c.grade_result = it->second.record.grade;
  return c;
}

promptkit::PromptBundle TaskContext::dg_prompt(const std::string& record_id, int case_id, Placement placement) const {
  return promptkit::build_dg_prompt(components(record_id, false), promptkit::PromptCase::from_id(case_id), placement);
}

promptkit::PromptBundle TaskContext::qa_prompt(const std::string& record_id) const {
  return promptkit::build_qa_prompt(components(record_id, true));
}

// ---- Pipeline basics -------------------------------------------------------

Pipeline::Pipeline(project::ProjectConfig cfg)
    : cfg_(std::move(cfg)), store_(std::make_unique<qa::QaStore>(cfg_.resolve(cfg_.paths.qa))) {}

std::vector<std::string> Pipeline::selected_tasks(const json& opts) const {
  std::vector<std::string> out;
  if (opts.contains("tasks") && !opts["tasks"].empty()) {
    for (const auto& t : opts["tasks"]) out.push_back(cfg_.task(t.get<std::string>()).id);
  } else {
    for (const auto& t : cfg_.tasks) out.push_back(t.id);
  }
  return out;
}

gateway::FixtureMode Pipeline::mode_of(const json& opts) const {
  if (opts.contains("mode") && opts["mode"].is_string()) return gateway::fixture_mode_from(opts["mode"].get<std::string>());
  return cfg_.pipeline.fixture_mode;
}

int Pipeline::jobs_of(const json& opts) const {
  const int j = opts.value("jobs", 0);
  return j > 0 ? j : cfg_.pipeline.concurrency;
}

fs::path Pipeline::run_path(const std::string& task_id, const std::string& model, int case_id,
                            Placement placement) const {
  return cfg_.resolve(cfg_.paths.runs) / task_id /
         (model + "__case" + std::to_string(case_id) + "__" + std::string(promptkit::to_string(placement)) + ".json");
}

TaskContext Pipeline::task_context(const std::string& task_id) const {
  const auto& tc = cfg_.task(task_id);
  const auto split_path = cfg_.resolve(cfg_.paths.work) / task_id / "split.json";
  if (!fs::exists(split_path)) throw PrerequisiteError("task " + task_id + " has not been prepared; run prep first");
  const auto text = util::read_file(split_path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw RuntimeFailure("corrupt " + split_path.string() + ": " + e.what());
  }
  auto tree = dtree::load_tree(cfg_.resolve(tc.tree).string());
  TaskContext ctx{tc, tree, {}, {}, {}, util::sha256_hex(text)};
  auto& s = ctx.split;
  s.task_id = task_id;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.per_grade = j.at("per_grade").get<std::size_t>();
  s.grades = j.at("grades").get<std::vector<Grade>>();
  s.train = j.at("train").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  s.references = j.at("references").get<std::map<Grade, std::vector<std::string>>>();
  s.short_grades = j.value("short_grades", std::vector<Grade>{});
  s.warnings = j.value("warnings", std::vector<std::string>{});
  for (const auto& rj : j.at("records")) {
    PreparedRecord pr;
    pr.record = dataprep::record_from_json(rj, task_id, cfg_.root);
    pr.resized = rj.at("path").get<std::string>();
    pr.overlay = rj.at("overlay").get<std::string>();
    ctx.records.emplace(pr.record.id, std::move(pr));
  }
  const auto name = tc.name.empty() ? tree.name() : tc.name;
  std::string grades;
  for (const auto& g : tree.grades()) grades += (grades.empty() ? "" : ", ") + g;
  ctx.templates = promptkit::load_templates(cfg_.resolve(tc.templates),
                                            {{"name", name}, {"grades", grades}, {"task", task_id}});
  return ctx;
}

std::shared_ptr<gateway::Transport> Pipeline::transport_for(const gateway::ModelEndpoint& e) {
  if (transport_override_) return transport_override_;
  if (e.base_url.rfind("sim://", 0) != 0) return std::make_shared<gateway::HttpTransport>();
  if (sim_) return sim_;
  if (cfg_.simulator_profile.empty())
    throw ConfigError("endpoint " + e.id + " uses sim:// but no simulator profile is configured");
  auto profile = json::parse(util::read_file(cfg_.resolve(cfg_.simulator_profile)));
  std::map<std::string, dtree::DecisionTree> trees;
  for (const auto& t : cfg_.tasks) trees.emplace(t.id, dtree::load_tree(cfg_.resolve(t.tree).string()));
  auto sim = std::make_shared<gateway::SimulatedModelServer>(std::move(profile), std::move(trees));
  for (const auto& t : cfg_.tasks) {
    if (!fs::exists(cfg_.resolve(cfg_.paths.work) / t.id / "split.json")) continue;
    auto ctx = task_context(t.id);
    for (const auto& [id, pr] : ctx.records)
      sim->add_record(util::sha256_file_hex(cfg_.resolve(pr.overlay)), {t.id, id, pr.record.grade});
    sim->set_eval_set(t.id, ctx.split.test);
  }
  sim_ = sim;
  return sim_;
}

void Pipeline::set_transport(std::shared_ptr<gateway::Transport> t) {
  std::lock_guard lock(clients_mu_);
  transport_override_ = std::move(t);
  clients_.clear();
}

void Pipeline::set_retry_policy(const gateway::RetryPolicy& r) {
  std::lock_guard lock(clients_mu_);
  retry_ = r;
  clients_.clear();
}

gateway::ModelResponse Pipeline::call(const gateway::ModelEndpoint& e, const promptkit::PromptBundle& b,
                                      gateway::FixtureMode mode) {
  gateway::FixtureStore store(cfg_.resolve(cfg_.paths.fixtures), mode);
  if (mode == gateway::FixtureMode::replay) return store.replay_complete(e, b, cfg_.root);
  std::shared_ptr<gateway::ChatClient> client;
  {
    std::lock_guard lock(clients_mu_);
    auto& slot = clients_[e.id];
    if (!slot) slot = std::make_shared<gateway::ChatClient>(e, transport_for(e), retry_, cfg_.root);
    client = slot;
  }
  return store.replay_complete(*client, b);
}

// ---- prep ------------------------------------------------------------------

json Pipeline::prep(const json& opts) {
  const auto tasks = selected_tasks(opts);
  const bool dry = opts.value("dry_run", false);
  json out{{"stage", "prep"}, {"dry_run", dry}, {"tasks", json::object()}};
  for (const auto& task_id : tasks) {
    const auto& tc = cfg_.task(task_id);
    const auto manifest = dataprep::load_manifest(cfg_.resolve(tc.manifest));
    const auto tree = dtree::load_tree(cfg_.resolve(tc.tree).string());
    const auto seed = cfg_.seed ^ util::stable_hash64("split:" + task_id);
    auto split = dataprep::stratified_split(manifest.records, tc.grades, cfg_.pipeline.per_grade,
                                            cfg_.pipeline.refs_per_grade, seed);
    split.task_id = task_id;
    const auto work = cfg_.resolve(cfg_.paths.work) / task_id;

    json summary{{"records", manifest.records.size()},
                 {"train", split.train.size()},
                 {"test", split.test.size()},
                 {"short_grades", split.short_grades},
                 {"warnings", split.warnings},
                 {"output", util::portable_relative(work, cfg_.root)}};
    if (dry) {
      out["tasks"][task_id] = summary;
      continue;
    }

    std::set<std::string> names;
    for (const auto& r : manifest.records)
      if (!names.insert(r.path.filename().string()).second)
        throw ConfigError("task " + task_id + ": two records share the file name " + r.path.filename().string());

    // Reference annotations must follow the tree whenever a case uses them.
    for (const auto& [g, ids] : split.references)
      for (const auto& id : ids)
        for (const auto& r : manifest.records)
          if (r.id == id && r.reference_cot) {
            auto rep = dtree::validate_cot(tree, *r.reference_cot);
            if (!rep.verified() || r.reference_cot->grade != r.grade)
              throw ConfigError("task " + task_id + ": reference annotation of " + id + " does not follow the tree");
          }

    std::vector<PreparedRecord> prepared(manifest.records.size());
    std::vector<std::vector<std::string>> warnings(manifest.records.size());
    parallel_for(manifest.records.size(), jobs_of(opts), [&](std::size_t i) {
      auto resized = dataprep::resize_image(manifest.records[i], work / "resized");
      auto overlay = dataprep::overlay_boxes(resized.record, {}, work / "overlays");
      prepared[i].record = resized.record;
      prepared[i].resized = util::portable_relative(resized.record.path, cfg_.root);
      prepared[i].overlay = util::portable_relative(overlay, cfg_.root);
      for (auto& w : resized.warnings) warnings[i].push_back(manifest.records[i].id + ": " + w);
    });

    json records = json::array();
    for (const auto& p : prepared) {
      auto rj = dataprep::record_to_json(p.record, cfg_.root);
      rj["overlay"] = p.overlay;
      records.push_back(std::move(rj));
    }
    std::vector<std::string> all_warnings = split.warnings;
    for (auto& w : warnings) all_warnings.insert(all_warnings.end(), w.begin(), w.end());
    json split_j{{"task", task_id},
                 {"seed", split.seed},
                 {"per_grade", split.per_grade},
                 {"grades", split.grades},
                 {"train", split.train},
                 {"references", split.references},
                 {"test", split.test},
                 {"short_grades", split.short_grades},
                 {"warnings", all_warnings},
                 {"records", std::move(records)}};
    util::write_file_atomic(work / "split.json", split_j.dump(1) + "\n");
    summary["warnings"] = all_warnings;
    out["tasks"][task_id] = summary;
  }
  sim_.reset();
  return out;
}

// ---- eval ------------------------------------------------------------------

EvalRun Pipeline::run_grading_eval(const gateway::ModelEndpoint& endpoint, const TaskContext& ctx, int case_id,
                                   Placement placement, gateway::FixtureMode mode, int jobs) {
  if (ctx.split.test.empty()) throw PrerequisiteError("task " + ctx.cfg.id + " has an empty test subset");
  const auto path = run_path(ctx.cfg.id, endpoint.id, case_id, placement);

  EvalRun run;
  run.model = endpoint.id;
  run.task_id = ctx.cfg.id;
  run.case_id = case_id;
  run.placement = placement;
  run.grades = ctx.tree.grades();
  run.fixture_mode = std::string(gateway::to_string(mode));
  const auto probe = ctx.dg_prompt(ctx.split.test.front(), case_id, placement);
  run.config_hash = util::sha256_hex(json{{"model", endpoint.id},
                                          {"temperature", endpoint.params.temperature},
                                          {"max_tokens", endpoint.params.max_tokens},
                                          {"task", ctx.cfg.id},
                                          {"case", case_id},
                                          {"placement", std::string(promptkit::to_string(placement))},
                                          {"split", ctx.split_sha},
                                          {"system", probe.system},
                                          {"tree", dtree::render_prompt_text(ctx.tree)}}
                                         .dump());

  // Resume: keep rows of an earlier run with the same configuration.
  std::map<std::string, EvalRow> done;
  if (fs::exists(path)) {
    auto prev = EvalRun::from_json(json::parse(util::read_file(path)));
    if (prev.config_hash == run.config_hash)
      for (auto& r : prev.rows) done.emplace(r.record_id, std::move(r));
  }

  std::vector<std::string> todo;
  for (const auto& id : ctx.split.test)
    if (!done.count(id)) todo.push_back(id);
  std::vector<std::optional<EvalRow>> fresh(todo.size());
  std::exception_ptr failure;
  try {
    parallel_for(todo.size(), jobs, [&](std::size_t i) {
      const auto& id = todo[i];
      auto resp = call(endpoint, ctx.dg_prompt(id, case_id, placement), mode);
      fresh[i] = EvalRow{id, ctx.records.at(id).record.grade, gateway::parse_cot(resp.raw_text, ctx.tree),
                         resp.fingerprint};
    });
  } catch (...) {
    failure = std::current_exception();
  }
  for (std::size_t i = 0; i < todo.size(); ++i)
    if (fresh[i]) done.emplace(todo[i], std::move(*fresh[i]));
  for (const auto& id : ctx.split.test) {
    auto it = done.find(id);
    if (it != done.end()) run.rows.push_back(it->second);
  }
  run.complete = run.rows.size() == ctx.split.test.size();
  util::write_file_atomic(path, run.to_json().dump(1) + "\n");
  if (failure) std::rethrow_exception(failure);
  return run;
}

json Pipeline::eval(const json& opts) {
  const auto tasks = selected_tasks(opts);
  std::vector<std::string> models;
  if (opts.contains("models") && !opts["models"].empty()) {
    for (const auto& m : opts["models"]) models.push_back(cfg_.endpoint(m.get<std::string>()).id);
  } else {
    for (const auto& e : cfg_.endpoints) models.push_back(e.id);
  }
  if (models.empty()) throw ConfigError("no endpoints configured");
  std::vector<int> cases{cfg_.pipeline.eval_case};
  if (opts.contains("cases") && !opts["cases"].empty()) cases = opts["cases"].get<std::vector<int>>();
  for (int c : cases)
    if (c < 1 || c > 4) throw InvalidArgument("prompt case must be 1..4");
  std::vector<Placement> placements{cfg_.pipeline.placement};
  if (opts.contains("placements") && !opts["placements"].empty()) {
    placements.clear();
    for (const auto& p : opts["placements"]) placements.push_back(promptkit::placement_from(p.get<std::string>()));
  }
  const auto mode = mode_of(opts);
  const bool dry = opts.value("dry_run", false);

  json out{{"stage", "eval"}, {"dry_run", dry}, {"mode", std::string(gateway::to_string(mode))}, {"runs", json::array()}};
  for (const auto& task_id : tasks) {
    auto ctx = task_context(task_id);
    for (const auto& model : models)
      for (int c : cases)
        for (auto p : placements) {
          json entry{{"task", task_id},
                     {"model", model},
                     {"case", c},
                     {"placement", std::string(promptkit::to_string(p))},
                     {"path", util::portable_relative(run_path(task_id, model, c, p), cfg_.root)}};
          if (dry) {
            entry["records"] = ctx.split.test.size();
          } else {
            auto run = run_grading_eval(cfg_.endpoint(model), ctx, c, p, mode, jobs_of(opts));
            entry["acc"] = run.acc();
            entry["mf1"] = run.mf1();
            entry["n"] = run.rows.size();
            entry["correct"] = run.correct();
          }
          out["runs"].push_back(std::move(entry));
        }
  }
  return out;
}

std::vector<EvalRun> Pipeline::load_runs(const std::string& task_id) const {
  std::vector<EvalRun> runs;
  const auto dir = cfg_.resolve(cfg_.paths.runs) / task_id;
  if (!fs::is_directory(dir)) return runs;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) runs.push_back(EvalRun::from_json(json::parse(util::read_file(f))));
  return runs;
}

// ---- select ----------------------------------------------------------------

json Pipeline::select(const json& opts) {
  const int case_id = opts.value("case", cfg_.pipeline.select_case);
  const auto placement = cfg_.pipeline.placement;
  const bool dry = opts.value("dry_run", false);
  json out{{"stage", "select"}, {"dry_run", dry}, {"case", case_id}, {"tasks", json::object()}};
  for (const auto& task_id : selected_tasks(opts)) {
    std::vector<SotaCandidate> cands;
    json table = json::array();
    for (const auto& r : load_runs(task_id)) {
      if (r.case_id != case_id || r.placement != placement || !r.complete) continue;
      cands.push_back({r.model, task_id, case_id, r.correct(), static_cast<std::int64_t>(r.rows.size())});
      table.push_back({{"model", r.model}, {"acc", r.acc()}, {"correct", r.correct()}, {"n", r.rows.size()}});
    }
    if (cands.empty())
      throw PrerequisiteError("task " + task_id + ": no complete case-" + std::to_string(case_id) +
                              " evaluation runs; run eval first");
    if (dry) {
      out["tasks"][task_id] = {{"candidates", table}};
      continue;
    }
    const auto best = select_sota(cands);
    json sota{{"task", task_id}, {"case", case_id}, {"model", best}, {"candidates", table}};
    util::write_file_atomic(cfg_.resolve(cfg_.paths.work) / task_id / "sota.json", sota.dump(1) + "\n");
    out["tasks"][task_id] = sota;
  }
  return out;
}

}  // namespace defgrade::pipeline
