#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "defgrade/defgrade.h"
#include "json.hpp"

using nlohmann::json;

namespace {

struct Common {
  std::string config = "defgrade.json";
  bool json_out = false;
  bool dry_run = false;
  int jobs = 0;
  long long seed = -1;
  bool replay = false, record = false, live = false;
};

int fail(dg_status st) {
  std::fprintf(stderr, "defgrade: error: %s\n", dg_last_error());
  return static_cast<int>(st);
}

void print_result(const Common& c, const std::string& stage, const char* text) {
  if (!text) return;
  if (c.json_out) {
    std::cout << json::parse(text).dump() << "\n";
    return;
  }
  std::cout << stage << ": done\n" << text << "\n";
}

long read_stdin_line(void*, char* buf, std::size_t cap) {
  std::string line;
  if (!std::getline(std::cin, line)) return -1;
  const auto n = std::min(line.size(), cap);
  std::memcpy(buf, line.data(), n);
  return static_cast<long>(n);
}

void write_stdout(void*, const char* text, std::size_t len) {
  std::cout.write(text, static_cast<std::streamsize>(len));
  std::cout.flush();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decision-tree guided defect grading pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("-c,--config", c.config, "Project configuration file")->capture_default_str();
  app.add_flag("--json", c.json_out, "Print the stage summary as one line of JSON");
  app.add_flag("-n,--dry-run", c.dry_run, "Report what would be done without writing outputs");
  app.add_option("-j,--jobs", c.jobs, "Concurrent requests or workers")->check(CLI::PositiveNumber);
  app.add_option("--seed", c.seed, "Override the project seed")->check(CLI::NonNegativeNumber);
  auto* replay = app.add_flag("--replay", c.replay, "Serve model calls from fixtures only");
  auto* record = app.add_flag("--record", c.record, "Replay fixtures, call the model and record when missing");
  auto* live = app.add_flag("--live", c.live, "Always call the model, never store fixtures");
  replay->excludes(record)->excludes(live);
  record->excludes(live);

  std::vector<std::string> tasks, models, placements, modules;
  std::vector<int> cases;
  std::vector<double> eps;
  int select_case = 0;
  bool regenerate = false, auto_approve = false, no_large = false;
  std::string script, name = "sft", layout, report_model, out_dir, assets;
  int epochs = 0;
  double lr = -1;
  std::size_t small = 0;

  auto add_tasks = [&](CLI::App* s) { s->add_option("-t,--task", tasks, "Restrict to these task ids"); };
  auto* prep = app.add_subcommand("prep", "Resize images, draw boxes and split each task");
  add_tasks(prep);
  auto* eval = app.add_subcommand("eval", "Grade the test subset with each model");
  add_tasks(eval);
  eval->add_option("-m,--model", models, "Endpoint ids (default: all)");
  eval->add_option("--case", cases, "Prompt cases 1-4")->check(CLI::Range(1, 4));
  eval->add_option("--placement", placements, "front, corresponding or end");
  auto* select = app.add_subcommand("select", "Pick the most accurate model per task");
  add_tasks(select);
  select->add_option("--case", select_case, "Prompt case used for the comparison")->check(CLI::Range(1, 4));
  auto* genqa = app.add_subcommand("genqa", "Generate step-by-step answers for the training subset");
  add_tasks(genqa);
  genqa->add_flag("--regenerate", regenerate, "Also regenerate pairs that were already reviewed");
  auto* review = app.add_subcommand("review", "Approve, edit or reject generated pairs");
  add_tasks(review);
  review->add_flag("--auto-approve-verified", auto_approve, "Approve every pair whose trace checks out");
  review->add_option("--script", script, "Read review commands from a file")->check(CLI::ExistingFile);
  auto* exp = app.add_subcommand("export", "Write approved pairs as a fine-tuning dataset");
  add_tasks(exp);
  exp->add_option("--name", name, "Export name")->capture_default_str();
  auto* toy = app.add_subcommand("train-toy", "Fine-tune the toy multimodal model with adapters");
  toy->add_option("--modules", modules, "Adapter groups to train, e.g. LLM or VE,MMA,LLM or all");
  toy->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  toy->add_option("--lr", lr)->check(CLI::NonNegativeNumber);
  auto* grad = app.add_subcommand("gradcheck", "Compare adapter gradients with finite differences");
  grad->add_option("--eps", eps, "Step sizes")->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "Render result tables");
  add_tasks(report);
  report->add_option("--layout", layout, "models, placements or modules")
      ->check(CLI::IsMember({"models", "placements", "modules"}));
  report->add_option("--model", report_model, "Model for the placements table");
  auto* synth = app.add_subcommand("synth", "Write a synthetic demo project");
  synth->add_option("-o,--out", out_dir, "Output directory")->required();
  synth->add_option("--per-grade", small, "Records per grade for every task")->check(CLI::PositiveNumber);
  synth->add_option("--assets", assets, "Directory with trees, templates and the simulator profile");
  synth->add_flag("--no-large", no_large, "Skip the large PNG per task");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(DG_ERR_USAGE);
  }

  auto* sub = app.get_subcommands().front();
  const std::string stage = sub->get_name();
  char* out = nullptr;

  if (sub == synth) {
    json o{{"out_dir", out_dir}, {"large_images", !no_large}};
    if (c.seed >= 0) o["seed"] = c.seed;
    if (!assets.empty()) o["assets_dir"] = assets;
    if (small > 0) o["per_grade_total"] = {{"task1", small}, {"task2", small}, {"task3", small}};
    const auto st = dg_synth_project(o.dump().c_str(), &out);
    if (st != DG_OK) return fail(st);
    print_result(c, stage, out);
    dg_string_free(out);
    return 0;
  }

  json overrides = json::object();
  if (c.seed >= 0) overrides["seed"] = c.seed;
  dg_project* project = nullptr;
  if (auto st = dg_project_open(c.config.c_str(), overrides.dump().c_str(), &project); st != DG_OK) return fail(st);

  json opts{{"dry_run", c.dry_run}};
  if (!tasks.empty()) opts["tasks"] = tasks;
  if (c.jobs > 0) opts["jobs"] = c.jobs;
  if (c.replay) opts["mode"] = "replay";
  if (c.record) opts["mode"] = "record";
  if (c.live) opts["mode"] = "live";
  if (!models.empty()) opts["models"] = models;
  if (!cases.empty()) opts["cases"] = cases;
  if (!placements.empty()) opts["placements"] = placements;
  if (select_case > 0) opts["case"] = select_case;
  if (regenerate) opts["regenerate"] = true;
  if (auto_approve) opts["auto_approve_verified"] = true;
  if (!script.empty()) opts["script"] = script;
  if (sub == exp) opts["name"] = name;
  if (!modules.empty()) opts["modules"] = modules;
  if (epochs > 0) opts["epochs"] = epochs;
  if (lr >= 0) opts["lr"] = lr;
  if (!eps.empty()) opts["eps"] = eps;
  if (!layout.empty()) opts["layout"] = layout;
  if (!report_model.empty()) opts["model"] = report_model;

  dg_status st;
  if (sub == review) st = dg_review(project, opts.dump().c_str(), read_stdin_line, write_stdout, nullptr, &out);
  else st = dg_run_stage(project, stage.c_str(), opts.dump().c_str(), &out);
  dg_project_close(project);
  if (st != DG_OK) return fail(st);
  print_result(c, stage, out);
  dg_string_free(out);
  return 0;
}
