#include "defgrade/defgrade.h"

#include <cstring>
#include <istream>
#include <ostream>
#include <streambuf>

#include "defgrade/dataprep.hpp"
#include "defgrade/evalharness.hpp"
#include "defgrade/gateway.hpp"
#include "defgrade/pipeline.hpp"
#include "defgrade/project.hpp"
#include "defgrade/synth.hpp"

using nlohmann::json;
using namespace defgrade;

struct dg_project {
  std::unique_ptr<pipeline::Pipeline> pipeline;
};

struct dg_tree {
  dtree::DecisionTree tree;
};

namespace {

thread_local std::string g_last_error;

dg_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return DG_ERR_USAGE;
    case ErrorKind::config: return DG_ERR_CONFIG;
    case ErrorKind::prerequisite: return DG_ERR_PREREQUISITE;
    case ErrorKind::runtime: return DG_ERR_RUNTIME;
  }
  return DG_ERR_RUNTIME;
}

template <typename F>
dg_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return DG_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("JSON: ") + e.what();
    return DG_ERR_USAGE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DG_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown failure";
    return DG_ERR_RUNTIME;
  }
}

char* dup_string(const std::string& s) {
  auto* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

json parse_options(const char* text) {
  if (!text || !*text) return json::object();
  try {
    auto j = json::parse(text);
    if (!j.is_object()) throw InvalidArgument("options must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("options are not valid JSON: ") + e.what());
  }
}

class CallbackInBuf : public std::streambuf {
 public:
  CallbackInBuf(dg_read_line_fn fn, void* user) : fn_(fn), user_(user) {}

 protected:
  int_type underflow() override {
    if (gptr() < egptr()) return traits_type::to_int_type(*gptr());
    if (!fn_ || eof_) return traits_type::eof();
    buf_.assign(4096, '\0');
    const long n = fn_(user_, buf_.data(), buf_.size());
    if (n < 0) {
      eof_ = true;
      return traits_type::eof();
    }
    buf_.resize(std::min<std::size_t>(static_cast<std::size_t>(n), buf_.size()));
    buf_.push_back('\n');
    setg(buf_.data(), buf_.data(), buf_.data() + buf_.size());
    return traits_type::to_int_type(*gptr());
  }

 private:
  dg_read_line_fn fn_;
  void* user_;
  std::string buf_;
  bool eof_ = false;
};

class CallbackOutBuf : public std::streambuf {
 public:
  CallbackOutBuf(dg_write_fn fn, void* user) : fn_(fn), user_(user) {}

 protected:
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    if (fn_ && n > 0) fn_(user_, s, static_cast<std::size_t>(n));
    return n;
  }
  int_type overflow(int_type c) override {
    if (c != traits_type::eof()) {
      const char ch = traits_type::to_char_type(c);
      if (fn_) fn_(user_, &ch, 1);
    }
    return traits_type::not_eof(c);
  }

 private:
  dg_write_fn fn_;
  void* user_;
};

}  // namespace

extern "C" {

const char* dg_version(void) { return "0.1.0"; }

const char* dg_last_error(void) { return g_last_error.c_str(); }

void dg_string_free(char* s) { std::free(s); }

dg_status dg_project_open(const char* config_path, const char* overrides_json, dg_project** out) {
  return guarded([&] {
    require(config_path && out, "dg_project_open: null argument");
    *out = nullptr;
    auto cfg = project::load_config(config_path, parse_options(overrides_json));
    *out = new dg_project{std::make_unique<pipeline::Pipeline>(std::move(cfg))};
  });
}

void dg_project_close(dg_project* project) { delete project; }

dg_status dg_project_config(const dg_project* project, char** out_json) {
  return guarded([&] {
    require(project && out_json, "dg_project_config: null argument");
    auto j = project::config_to_json(project->pipeline->config());
    j["root"] = project->pipeline->config().root.string();
    *out_json = dup_string(j.dump(2));
  });
}

dg_status dg_run_stage(dg_project* project, const char* stage, const char* options_json, char** out_json) {
  return guarded([&] {
    require(project && stage, "dg_run_stage: null argument");
    const auto opts = parse_options(options_json);
    auto& p = *project->pipeline;
    const std::string s = stage;
    json result;
    if (s == "prep") result = p.prep(opts);
    else if (s == "eval") result = p.eval(opts);
    else if (s == "select") result = p.select(opts);
    else if (s == "genqa") result = p.genqa(opts);
    else if (s == "export") result = p.export_sft(opts);
    else if (s == "train-toy") result = p.train_toy(opts);
    else if (s == "gradcheck") result = p.gradcheck(opts);
    else if (s == "report") result = p.report(opts);
    else throw InvalidArgument("unknown stage '" + s + "'");
    if (out_json) *out_json = dup_string(result.dump(2));
  });
}

dg_status dg_review(dg_project* project, const char* options_json, dg_read_line_fn read_line, dg_write_fn write,
                    void* user, char** out_json) {
  return guarded([&] {
    require(project, "dg_review: null project");
    CallbackInBuf ib(read_line, user);
    CallbackOutBuf ob(write, user);
    std::istream in(&ib);
    std::ostream os(&ob);
    auto result = project->pipeline->review(parse_options(options_json), in, os);
    os.flush();
    if (out_json) *out_json = dup_string(result.dump(2));
  });
}

dg_status dg_tree_parse(const char* source, dg_tree** out) {
  return guarded([&] {
    require(source && out, "dg_tree_parse: null argument");
    *out = nullptr;
    *out = new dg_tree{dtree::parse_tree(source)};
  });
}

dg_status dg_tree_load(const char* path, dg_tree** out) {
  return guarded([&] {
    require(path && out, "dg_tree_load: null argument");
    *out = nullptr;
    *out = new dg_tree{dtree::load_tree(path)};
  });
}

void dg_tree_free(dg_tree* tree) { delete tree; }

dg_status dg_tree_render(const dg_tree* tree, char** out_text) {
  return guarded([&] {
    require(tree && out_text, "dg_tree_render: null argument");
    *out_text = dup_string(dtree::render_prompt_text(tree->tree));
  });
}

dg_status dg_tree_evaluate(const dg_tree* tree, const char* answers_json, char** out_grade) {
  return guarded([&] {
    require(tree && answers_json && out_grade, "dg_tree_evaluate: null argument");
    const auto list = json::parse(answers_json);
    if (!list.is_array()) throw InvalidArgument("answers must be a JSON array of strings");
    std::vector<Answer> answers;
    for (const auto& a : list) {
      auto parsed = parse_answer(a.get<std::string>());
      if (!parsed) throw InvalidArgument("unrecognised answer '" + a.get<std::string>() + "'");
      answers.push_back(*parsed);
    }
    *out_grade = dup_string(dtree::evaluate(tree->tree, answers));
  });
}

dg_status dg_tree_validate(const dg_tree* tree, const char* cot_json, char** out_json) {
  return guarded([&] {
    require(tree && cot_json && out_json, "dg_tree_validate: null argument");
    const auto rep = dtree::validate_cot(tree->tree, cot_from_json(json::parse(cot_json)));
    json j{{"verified", rep.verified()},
           {"path_consistent", rep.path_consistent},
           {"grade_consistent", rep.grade_consistent},
           {"complete", rep.complete},
           {"derived_grade", rep.derived_grade ? json(*rep.derived_grade) : json(nullptr)},
           {"messages", rep.messages}};
    *out_json = dup_string(j.dump(2));
  });
}

dg_status dg_parse_answer(const dg_tree* tree, const char* raw, char** out_json) {
  return guarded([&] {
    require(tree && raw && out_json, "dg_parse_answer: null argument");
    const auto cot = gateway::parse_cot(raw, tree->tree);
    auto j = cot_to_json(cot);
    j["parse_status"] = std::string(to_string(cot.parse_status));
    *out_json = dup_string(j.dump(2));
  });
}

dg_status dg_resize_dims(uint32_t width, uint32_t height, uint32_t* out_width, uint32_t* out_height) {
  return guarded([&] {
    require(out_width && out_height, "dg_resize_dims: null argument");
    const auto d = dataprep::resize_dims({width, height});
    *out_width = d.width;
    *out_height = d.height;
  });
}

dg_status dg_metrics(const char* pairs_json, char** out_json) {
  return guarded([&] {
    require(pairs_json && out_json, "dg_metrics: null argument");
    const auto j = parse_options(pairs_json);
    const auto pred = j.at("predicted").get<std::vector<std::string>>();
    const auto truth = j.at("truth").get<std::vector<std::string>>();
    if (pred.size() != truth.size()) throw InvalidArgument("predicted and truth differ in length");
    std::vector<evalharness::LabeledPair> pairs;
    for (std::size_t i = 0; i < pred.size(); ++i) pairs.push_back({pred[i], truth[i]});
    const auto classes = j.contains("classes") ? j["classes"].get<std::vector<std::string>>()
                                               : evalharness::infer_classes(pairs);
    const auto acc = evalharness::accuracy_exact(pairs);
    const auto mf1 = evalharness::macro_f1_exact(pairs, classes);
    json out{{"acc", acc.value()},
             {"mf1", mf1.value()},
             {"acc_exact", std::to_string(acc.num) + "/" + std::to_string(acc.den)},
             {"mf1_exact", std::to_string(mf1.num) + "/" + std::to_string(mf1.den)},
             {"n", pairs.size()},
             {"classes", classes}};
    *out_json = dup_string(out.dump(2));
  });
}

dg_status dg_synth_project(const char* options_json, char** out_json) {
  return guarded([&] {
    const auto j = parse_options(options_json);
    synth::SynthOptions o;
    o.out_dir = j.at("out_dir").get<std::string>();
    o.assets_dir = j.value("assets_dir", std::string());
    o.seed = j.value("seed", o.seed);
    o.large_images = j.value("large_images", o.large_images);
    if (j.contains("per_grade_total")) o.per_grade_total = j["per_grade_total"].get<std::map<std::string, std::size_t>>();
    auto result = synth::synth_project(o);
    if (out_json) *out_json = dup_string(result.dump(2));
  });
}

}  // extern "C"
