#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "defgrade/pipeline.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::pipeline {

using promptkit::Placement;
using qa::QAPair;
using qa::ReviewState;

namespace {

// Reasons a stored answer cannot be used as a training target.
std::vector<std::string> answer_problems(const dtree::DecisionTree& tree, const QAPair& p) {
  std::vector<std::string> out;
  if (p.answer.parse_status == ParseStatus::failed) {
    out.push_back("the model output could not be parsed");
    return out;
  }
  const auto rep = dtree::validate_cot(tree, p.answer);
  if (!rep.verified()) {
    std::string msg = "invalid trace";
    for (const auto& m : rep.messages) msg += ": " + m;
    out.push_back(msg);
  }
  if (p.answer.grade != p.truth) out.push_back("grade " + p.answer.grade + " differs from the ground truth " + p.truth);
  return out;
}

bool is_accepted(ReviewState s) { return s == ReviewState::approved || s == ReviewState::edited; }

// Walks the tree from the root using `overrides` first and the existing
// steps second. Evidence is kept for steps whose answer did not change.
std::optional<CoTResult> rebuild_trace(const dtree::DecisionTree& tree, const CoTResult& base,
                                       const std::map<NodeId, Answer>& overrides, std::string& why) {
  std::map<NodeId, const CoTStep*> existing;
  for (const auto& s : base.steps) existing.emplace(s.node_id, &s);
  CoTResult out;
  const dtree::Node* node = &tree.root();
  for (std::size_t guard = 0; guard <= tree.nodes().size(); ++guard) {
    std::optional<Answer> ans;
    auto ov = overrides.find(node->id);
    auto ex = existing.find(node->id);
    if (ov != overrides.end()) ans = ov->second;
    else if (ex != existing.end()) ans = ex->second->answer;
    if (!ans) {
      why = "no answer for node " + node->id;
      return std::nullopt;
    }
    const auto* br = node->resolve(*ans);
    if (!br) {
      why = "answer " + std::string(to_string(*ans)) + " is not a branch of node " + node->id;
      return std::nullopt;
    }
    CoTStep step{node->id, *ans, std::nullopt};
    if (ex != existing.end() && ex->second->answer == *ans) step.evidence = ex->second->evidence;
    out.steps.push_back(std::move(step));
    if (br->terminal()) {
      out.grade = *br->grade;
      return out;
    }
    node = tree.find(*br->next);
  }
  why = "the tree walk did not terminate";
  return std::nullopt;
}

void show_pair(std::ostream& os, const QAPair& p, const dtree::DecisionTree& tree) {
  os << "\n== " << p.task_id << "/" << p.id << " (v" << p.version << ", " << qa::to_string(p.review_state) << ")\n";
  os << "image: " << p.overlay_image << "\ntruth: " << p.truth << "\nmodel: " << p.source_model << "\n";
  for (const auto& f : p.flags) os << "flag: " << f << "\n";
  for (const auto& s : p.answer.steps) {
    os << "  " << s.node_id << " -> " << to_string(s.answer);
    if (s.evidence) os << "  (" << *s.evidence << ")";
    os << "\n";
  }
  os << "grade: " << p.answer.grade << " [" << to_string(p.answer.parse_status) << "]\n";
  const auto problems = answer_problems(tree, p);
  if (problems.empty()) os << "check: verified\n";
  for (const auto& m : problems) os << "check: " << m << "\n";
}

constexpr const char* kReviewHelp =
    "commands:\n"
    "  a                  approve (only when the trace checks out)\n"
    "  r [reason]         reject\n"
    "  e node=answer ...  change answers and re-walk the tree\n"
    "  v node text        replace the evidence of a step\n"
    "  n text             attach a note\n"
    "  s                  skip\n"
    "  q                  quit\n";

json segments_to_content(const promptkit::PromptBundle& b) {
  json parts = json::array();
  for (const auto& s : b.segments) {
    if (s.kind == promptkit::Segment::Kind::image) parts.push_back({{"type", "image"}, {"image", s.payload}});
    else parts.push_back({{"type", "text"}, {"text", s.payload}});
  }
  return parts;
}

}  // namespace

// ---- genqa -----------------------------------------------------------------

json Pipeline::genqa(const json& opts) {
  const auto mode = mode_of(opts);
  const bool dry = opts.value("dry_run", false);
  const bool regenerate = opts.value("regenerate", false);
  json out{{"stage", "genqa"}, {"dry_run", dry}, {"mode", std::string(gateway::to_string(mode))}, {"tasks", json::object()}};
  for (const auto& task_id : selected_tasks(opts)) {
    const auto sota_path = cfg_.resolve(cfg_.paths.work) / task_id / "sota.json";
    if (!fs::exists(sota_path))
      throw PrerequisiteError("task " + task_id + " has no selected model; run select first");
    const auto model = json::parse(util::read_file(sota_path)).at("model").get<std::string>();
    const auto& endpoint = cfg_.endpoint(model);
    auto ctx = task_context(task_id);

    std::vector<std::string> todo;
    std::size_t kept = 0;
    for (const auto& id : ctx.split.train) {
      auto prev = store_->latest(task_id, id);
      if (prev && prev->review_state != ReviewState::pending && !regenerate) ++kept;
      else todo.push_back(id);
    }
    json summary{{"model", model}, {"train", ctx.split.train.size()}, {"to_generate", todo.size()}, {"kept_reviewed", kept}};
    if (dry) {
      out["tasks"][task_id] = summary;
      continue;
    }

    std::vector<std::string> outcome(todo.size());
    std::exception_ptr failure;
    try {
      parallel_for(todo.size(), jobs_of(opts), [&](std::size_t i) {
        const auto& id = todo[i];
        const auto& pr = ctx.records.at(id);
        QAPair p;
        p.id = id;
        p.task_id = task_id;
        p.record_id = id;
        p.truth = pr.record.grade;
        p.objective_image = pr.resized;
        p.overlay_image = pr.overlay;
        p.prompt = ctx.dg_prompt(id, 4, Placement::corresponding);
        p.source_model = model;
        std::exception_ptr err;
        try {
          auto resp = call(endpoint, ctx.qa_prompt(id), mode);
          p.answer = gateway::parse_cot(resp.raw_text, ctx.tree);
          if (p.answer.parse_status == ParseStatus::failed) p.flags.push_back("parse failure");
          if (p.answer.parse_status == ParseStatus::repaired) p.flags.push_back("repaired parse");
          if (p.answer.parse_status != ParseStatus::failed) {
            const auto rep = dtree::validate_cot(ctx.tree, p.answer);
            if (!rep.verified())
              for (const auto& m : rep.messages) p.flags.push_back("invalid trace: " + m);
            if (p.answer.grade != p.truth) p.flags.push_back("grade mismatch");
          }
        } catch (...) {
          err = std::current_exception();
          p.answer = CoTResult{{}, std::string(kParseFailureGrade), ParseStatus::failed};
          p.flags.push_back("generation failed");
        }
        auto prev = store_->latest(task_id, id);
        if (prev && prev->same_content([&] {
              auto q = p;
              q.version = prev->version;
              return q;
            }())) {
          outcome[i] = "unchanged";
        } else {
          auto stored = store_->put(p, prev ? prev->version : 0);
          store_->audit({id, stored.version, "generate", "genqa", model});
          outcome[i] = p.flags.empty() ? "clean" : "flagged";
        }
        if (err) std::rethrow_exception(err);
      });
    } catch (...) {
      failure = std::current_exception();
    }
    for (const char* k : {"clean", "flagged", "unchanged"})
      summary[k] = std::count(outcome.begin(), outcome.end(), k);
    out["tasks"][task_id] = summary;
    if (failure) std::rethrow_exception(failure);
  }
  return out;
}

// ---- review ----------------------------------------------------------------

json Pipeline::review(const json& opts, std::istream& in, std::ostream& os) {
  const bool auto_approve = opts.value("auto_approve_verified", false);
  std::ifstream script;
  std::istream* input = &in;
  if (opts.contains("script") && opts["script"].is_string()) {
    script.open(opts["script"].get<std::string>());
    if (!script) throw ConfigError("cannot open review script " + opts["script"].get<std::string>());
    input = &script;
  }
  json counts{{"approved", 0}, {"edited", 0}, {"rejected", 0}, {"skipped", 0}, {"pending", 0}};
  bool quit = false;

  for (const auto& task_id : selected_tasks(opts)) {
    const auto tree = dtree::load_tree(cfg_.resolve(cfg_.task(task_id).tree).string());
    for (auto pair : store_->load_task(task_id)) {
      if (pair.review_state != ReviewState::pending) continue;
      if (quit) {
        counts["pending"] = counts["pending"].get<int>() + 1;
        continue;
      }
      if (auto_approve) {
        if (answer_problems(tree, pair).empty()) {
          pair.review_state = ReviewState::approved;
          auto stored = store_->put(pair, pair.version);
          store_->audit({pair.id, stored.version, "approve", "auto", ""});
          counts["approved"] = counts["approved"].get<int>() + 1;
        } else {
          counts["pending"] = counts["pending"].get<int>() + 1;
        }
        continue;
      }

      show_pair(os, pair, tree);
      bool dirty = false;
      bool done = false;
      while (!done) {
        os << "> " << std::flush;
        std::string line;
        if (!std::getline(*input, line)) {
          quit = true;
          break;
        }
        std::istringstream ls(util::trim(line));
        std::string cmd;
        ls >> cmd;
        std::string rest;
        std::getline(ls, rest);
        rest = util::trim(rest);

        auto commit = [&](ReviewState state, const std::string& action, const std::string& detail) {
          const int base = pair.version;
          pair.review_state = state;
          pair = store_->put(pair, base);
          store_->audit({pair.id, pair.version, action, "reviewer", detail});
        };

        if (cmd == "a" || cmd == "approve") {
          const auto problems = answer_problems(tree, pair);
          if (!problems.empty()) {
            for (const auto& m : problems) os << "refused: " << m << "\n";
            continue;
          }
          commit(dirty ? ReviewState::edited : ReviewState::approved, dirty ? "edit" : "approve", "");
          counts[dirty ? "edited" : "approved"] = counts[dirty ? "edited" : "approved"].get<int>() + 1;
          done = true;
        } else if (cmd == "r" || cmd == "reject") {
          if (!rest.empty()) pair.note = rest;
          commit(ReviewState::rejected, "reject", rest);
          counts["rejected"] = counts["rejected"].get<int>() + 1;
          done = true;
        } else if (cmd == "e" || cmd == "edit") {
          std::map<NodeId, Answer> overrides;
          std::istringstream as(rest);
          std::string tok;
          bool bad = false;
          while (as >> tok) {
            const auto eq = tok.find('=');
            std::optional<Answer> a;
            if (eq != std::string::npos) a = parse_answer(tok.substr(eq + 1));
            if (!a) {
              os << "cannot read '" << tok << "'; expected node=answer\n";
              bad = true;
              break;
            }
            overrides[tok.substr(0, eq)] = *a;
          }
          if (bad || overrides.empty()) continue;
          std::string why;
          auto rebuilt = rebuild_trace(tree, pair.answer, overrides, why);
          if (!rebuilt) {
            os << "refused: " << why << "\n";
            continue;
          }
          auto candidate = pair;
          candidate.answer = *rebuilt;
          const auto problems = answer_problems(tree, candidate);
          if (!problems.empty()) {
            for (const auto& m : problems) os << "refused: " << m << "\n";
            show_pair(os, candidate, tree);
            continue;
          }
          pair.answer = *rebuilt;
          commit(ReviewState::edited, "edit", rest);
          counts["edited"] = counts["edited"].get<int>() + 1;
          done = true;
        } else if (cmd == "v" || cmd == "evidence") {
          std::istringstream vs(rest);
          std::string node;
          vs >> node;
          std::string text;
          std::getline(vs, text);
          text = util::trim(text);
          auto it = std::find_if(pair.answer.steps.begin(), pair.answer.steps.end(),
                                 [&](const CoTStep& s) { return s.node_id == node; });
          if (it == pair.answer.steps.end()) {
            os << "no step for node '" << node << "'\n";
            continue;
          }
          it->evidence = text.empty() ? std::nullopt : std::optional<std::string>(text);
          dirty = true;
          os << "evidence updated; approve to commit\n";
        } else if (cmd == "n" || cmd == "note") {
          pair.note = rest;
          const int base = pair.version;
          pair = store_->put(pair, base);
          store_->audit({pair.id, pair.version, "note", "reviewer", rest});
        } else if (cmd == "s" || cmd == "skip") {
          counts["skipped"] = counts["skipped"].get<int>() + 1;
          done = true;
        } else if (cmd == "q" || cmd == "quit") {
          quit = true;
          break;
        } else if (cmd == "?" || cmd == "h" || cmd == "help" || cmd.empty()) {
          os << kReviewHelp;
        } else {
          os << "unknown command '" << cmd << "'\n" << kReviewHelp;
        }
      }
      if (!done) counts["pending"] = counts["pending"].get<int>() + 1;
    }
  }
  return {{"stage", "review"}, {"counts", counts}};
}

// ---- export ----------------------------------------------------------------

json Pipeline::export_sft(const json& opts) {
  const auto name = opts.value("name", std::string("sft"));
  if (name.empty() || name.find('/') != std::string::npos) throw InvalidArgument("invalid export name '" + name + "'");
  const bool dry = opts.value("dry_run", false);

  struct Item {
    std::string task;
    const QAPair* pair;
  };
  std::map<std::string, std::vector<QAPair>> loaded;
  std::vector<std::string> failures;
  json per_task = json::object();
  for (const auto& task_id : selected_tasks(opts)) {
    auto ctx = task_context(task_id);
    auto& pairs = loaded[task_id];
    for (auto& p : store_->load_task(task_id))
      if (is_accepted(p.review_state)) pairs.push_back(std::move(p));
    if (pairs.empty()) throw PrerequisiteError("task " + task_id + " has no approved Q&A pairs; run review first");
    const std::set<std::string> train(ctx.split.train.begin(), ctx.split.train.end());
    json grades = json::object();
    for (const auto& p : pairs) {
      const auto where = task_id + "/" + p.id + ": ";
      if (!train.count(p.record_id)) {
        failures.push_back(where + "record is not in the training subset");
        continue;
      }
      if (p.truth != ctx.records.at(p.record_id).record.grade)
        failures.push_back(where + "stored ground truth disagrees with the manifest");
      for (const auto& m : answer_problems(ctx.tree, p)) failures.push_back(where + m);
      if (!(p.prompt == ctx.dg_prompt(p.record_id, 4, Placement::corresponding)))
        failures.push_back(where + "stored prompt differs from the current grading prompt");
      grades[p.truth] = grades.value(p.truth, 0) + 1;
    }
    per_task[task_id] = {{"total", pairs.size()}, {"grades", grades}};
  }
  if (!failures.empty()) {
    std::string msg = "export refused; " + std::to_string(failures.size()) + " problem(s):";
    for (const auto& f : failures) msg += "\n  " + f;
    throw RuntimeFailure(msg);
  }

  std::vector<Item> items;
  for (const auto& [task, pairs] : loaded)
    for (const auto& p : pairs) items.push_back({task, &p});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    return std::tie(a.task, a.pair->id) < std::tie(b.task, b.pair->id);
  });
  const auto seed = cfg_.seed ^ util::stable_hash64("export:" + name);
  util::Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);

  std::string body;
  for (const auto& it : items) {
    const auto& p = *it.pair;
    json rec{{"id", it.task + "/" + p.id},
             {"task", it.task},
             {"messages",
              json::array({{{"role", "system"}, {"content", p.prompt.system}},
                           {{"role", "user"}, {"content", segments_to_content(p.prompt)}},
                           {{"role", "assistant"}, {"content", serialize_cot(p.answer)}}})}};
    body += rec.dump() + "\n";
  }
  const auto dir = cfg_.resolve(cfg_.paths.exports);
  json manifest{{"name", name},
                {"records", items.size()},
                {"seed", seed},
                {"tasks", per_task},
                {"sha256", util::sha256_hex(body)}};
  json out{{"stage", "export"}, {"dry_run", dry}, {"manifest", manifest}};
  if (dry) return out;
  util::write_file_atomic(dir / (name + ".jsonl"), body);
  util::write_file_atomic(dir / (name + ".manifest.json"), manifest.dump(2) + "\n");
  out["path"] = util::portable_relative(dir / (name + ".jsonl"), cfg_.root);
  return out;
}

}  // namespace defgrade::pipeline
