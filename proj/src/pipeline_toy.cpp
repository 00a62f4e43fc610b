#include <algorithm>
#include <fstream>

#include "defgrade/evalharness.hpp"
#include "defgrade/lora.hpp"
#include "defgrade/pipeline.hpp"
#include "defgrade/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defgrade::pipeline {

namespace {

Grade toy_grade_label(int token) {
  if (token >= lora::Vocabulary::grade0 && token < lora::Vocabulary::grade0 + 4)
    return "G" + std::to_string(token - lora::Vocabulary::grade0);
  return std::string(kParseFailureGrade);
}

// Grade token is the one right before EOS.
Grade toy_predicted_grade(const std::vector<int>& tokens) {
  if (tokens.size() < 2 || tokens.back() != lora::kEos) return std::string(kParseFailureGrade);
  return toy_grade_label(tokens[tokens.size() - 2]);
}

std::vector<std::string> module_specs(const json& opts, const std::string& fallback) {
  if (!opts.contains("modules")) return {fallback};
  const auto& m = opts["modules"];
  if (m.is_string()) return {m.get<std::string>()};
  auto v = m.get<std::vector<std::string>>();
  if (v.empty()) return {fallback};
  return v;
}

}  // namespace

json Pipeline::train_toy(const json& opts) {
  const auto& lp = cfg_.lora;
  const int epochs = opts.value("epochs", lp.epochs);
  const double lr = opts.value("lr", lp.lr);
  const bool dry = opts.value("dry_run", false);
  if (epochs < 1) throw InvalidArgument("epochs must be positive");
  if (!(lr >= 0)) throw InvalidArgument("learning rate must be non-negative");

  json out{{"stage", "train-toy"}, {"dry_run", dry}, {"runs", json::array()}};
  for (const auto& spec : module_specs(opts, lp.modules)) {
    const auto modules = lora::module_set_from(spec);
    const auto label = lora::to_string(modules);
    const auto dir = cfg_.resolve(cfg_.paths.work) / "toy" / label;
    if (dry) {
      out["runs"].push_back({{"modules", label}, {"epochs", epochs}, {"lr", lr},
                             {"output", util::portable_relative(dir, cfg_.root)}});
      continue;
    }
    const lora::ToyMllm model(lp.model);
    auto adapters = lora::make_adapters(model, {lp.rank, lp.alpha, lp.init_std, {}}, lp.model.seed);
    const auto corpus = lora::make_grading_corpus(lp.corpus_size, lp.corpus_seed);
    lora::SftConfig sc{modules, lr, epochs, lp.batch_size, lp.model.seed};

    fs::create_directories(dir);
    std::ofstream log(dir / "log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log) throw RuntimeFailure("cannot write " + (dir / "log.jsonl").string());
    const auto result = lora::train(model, adapters, sc, corpus, &log);
    log.close();

    std::size_t exact = 0;
    std::vector<evalharness::LabeledPair> pairs;
    for (const auto& s : corpus) {
      const auto gen = lora::greedy_generate(model, adapters, s.prompt);
      if (gen.tokens == s.target) ++exact;
      pairs.push_back({toy_predicted_grade(gen.tokens), toy_predicted_grade(s.target)});
    }
    const std::vector<Grade> classes{"G0", "G1", "G2", "G3"};
    const auto threshold = opts.value("threshold", 0.05);
    const auto reached = result.epochs_to(threshold);
    json summary{{"modules", label},
                 {"epochs", epochs},
                 {"lr", lr},
                 {"samples", corpus.size()},
                 {"final_loss", result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()},
                 {"threshold", threshold},
                 {"epochs_to_threshold", reached ? json(*reached) : json(nullptr)},
                 {"exact_match", exact},
                 {"acc", evalharness::accuracy(pairs)},
                 {"mf1", evalharness::macro_f1(pairs, classes)}};
    util::write_file_atomic(dir / "checkpoint.json", lora::checkpoint_to_json(model, adapters).dump() + "\n");
    util::write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    summary["output"] = util::portable_relative(dir, cfg_.root);
    out["runs"].push_back(std::move(summary));
  }
  return out;
}

json Pipeline::gradcheck(const json& opts) {
  std::vector<double> eps{1e-2, 1e-3, 1e-4, 1e-5};
  if (opts.contains("eps") && !opts["eps"].empty()) {
    eps = opts["eps"].is_array() ? opts["eps"].get<std::vector<double>>() : std::vector<double>{opts["eps"].get<double>()};
  }
  const auto seed = opts.value("seed", std::uint64_t{7});
  const lora::ToyMllm model(lora::ToyConfig{});
  auto adapters = lora::make_adapters(model, {2, 4.0, 0.1, {}}, seed);
  // B starts at zero; give it values so the D path carries gradient too.
  util::Rng rng(seed + 1);
  for (auto& a : adapters)
    for (Eigen::Index i = 0; i < a.B.size(); ++i) a.B.data()[i] = 0.3 * rng.normal();
  const auto sample = lora::make_grading_corpus(1, seed).front();

  json rows = json::array();
  double at_finest = 0;
  for (double e : eps) {
    if (!(e > 0)) throw InvalidArgument("eps must be positive");
    const auto r = lora::grad_check(model, adapters, sample, e, 32, seed);
    rows.push_back({{"eps", e}, {"max_rel_error", r.max_rel_error}, {"coordinates", r.coordinates}});
    if (e == eps.back()) at_finest = r.max_rel_error;
  }
  return {{"stage", "gradcheck"},
          {"config", {{"d_llm", model.config().d_llm}, {"vocab", model.config().vocab}, {"rank", 2}}},
          {"sweep", rows},
          {"max_rel_error", at_finest}};
}

json Pipeline::report(const json& opts) {
  std::vector<std::string> layouts{"models", "placements", "modules"};
  if (opts.contains("layout") && opts["layout"].is_string()) layouts = {opts["layout"].get<std::string>()};
  const bool dry = opts.value("dry_run", false);
  const auto dir = cfg_.resolve(cfg_.paths.reports);
  json out{{"stage", "report"}, {"dry_run", dry}, {"reports", json::array()}};

  for (const auto& name : layouts) {
    const auto layout = evalharness::layout_from(name);
    std::vector<evalharness::ReportRow> rows;
    if (layout == evalharness::Layout::modules) {
      const auto toy = cfg_.resolve(cfg_.paths.work) / "toy";
      if (fs::is_directory(toy)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(toy))
          if (fs::exists(e.path() / "summary.json")) files.push_back(e.path() / "summary.json");
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          const auto j = json::parse(util::read_file(f));
          rows.push_back({"toy", "toy-mllm", 4, "corresponding", j.at("modules").get<std::string>(),
                          j.at("acc").get<double>(), j.at("mf1").get<double>(), j.at("samples").get<std::size_t>()});
        }
      }
    } else {
      for (const auto& task_id : selected_tasks(opts))
        for (const auto& r : load_runs(task_id)) {
          if (!r.complete || r.rows.empty()) continue;
          const bool keep = layout == evalharness::Layout::models_by_cases
                                ? r.placement == cfg_.pipeline.placement
                                : r.case_id == cfg_.pipeline.select_case;
          if (!keep) continue;
          rows.push_back({task_id, r.model, r.case_id, std::string(promptkit::to_string(r.placement)), "-", r.acc(),
                          r.mf1(), r.rows.size()});
        }
      if (layout == evalharness::Layout::placements) {
        // One model per table; the selected one when there is a choice.
        std::string model = opts.value("model", std::string());
        if (model.empty()) {
          for (const auto& task_id : selected_tasks(opts)) {
            const auto sota = cfg_.resolve(cfg_.paths.work) / task_id / "sota.json";
            if (fs::exists(sota)) {
              model = json::parse(util::read_file(sota)).at("model").get<std::string>();
              break;
            }
          }
        }
        if (!model.empty())
          rows.erase(std::remove_if(rows.begin(), rows.end(), [&](const auto& r) { return r.model != model; }),
                     rows.end());
      }
    }
    json entry{{"layout", name}, {"rows", rows.size()}};
    if (rows.empty()) {
      entry["skipped"] = "no results";
      out["reports"].push_back(std::move(entry));
      continue;
    }
    const auto csv = evalharness::to_csv(rows);
    // The table is rendered from the CSV so both always agree.
    const auto md = evalharness::render_markdown(evalharness::from_csv(csv), layout);
    if (!dry) {
      util::write_file_atomic(dir / (name + ".csv"), csv);
      util::write_file_atomic(dir / (name + ".md"), md);
      entry["csv"] = util::portable_relative(dir / (name + ".csv"), cfg_.root);
      entry["markdown"] = util::portable_relative(dir / (name + ".md"), cfg_.root);
    }
    out["reports"].push_back(std::move(entry));
  }
  return out;
}

}  // namespace defgrade::pipeline
