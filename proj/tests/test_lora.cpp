#include <cmath>
#include <sstream>

#include "defgrade/error.hpp"
#include "defgrade/lora.hpp"
#include "defgrade/util.hpp"
#include "doctest.h"

using namespace defgrade;
using namespace defgrade::lora;

namespace {

AdapterSet randomized(const ToyMllm& model, int rank, double alpha, std::uint64_t seed) {
  auto a = make_adapters(model, {rank, alpha, 0.2, {}}, seed);
  util::Rng rng(seed + 100);
  for (auto& ad : a)
    for (Eigen::Index i = 0; i < ad.B.size(); ++i) ad.B.data()[i] = 0.3 * rng.normal();
  return a;
}

std::vector<std::set<ModuleTag>> all_module_sets() {
  std::vector<std::set<ModuleTag>> out;
  const ModuleTag tags[] = {ModuleTag::VE, ModuleTag::MMA, ModuleTag::LLM};
  for (int mask = 1; mask < 8; ++mask) {
    std::set<ModuleTag> s;
    for (int b = 0; b < 3; ++b)
      if (mask & (1 << b)) s.insert(tags[b]);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("module sets parse and print") {
  CHECK(module_set_from("llm") == std::set<ModuleTag>{ModuleTag::LLM});
  CHECK(module_set_from("VE,MMA") == std::set<ModuleTag>{ModuleTag::VE, ModuleTag::MMA});
  CHECK(module_set_from("all").size() == 3);
  CHECK(to_string(module_set_from("LLM,VE")) == "VE+LLM");
  CHECK(module_set_from("VE+LLM") == module_set_from("LLM,VE"));
  CHECK_THROWS_AS(module_set_from("XX"), InvalidArgument);
  CHECK_THROWS_AS(module_set_from(""), InvalidArgument);
}

TEST_CASE("adapter shapes and zero init") {
  const ToyMllm model(ToyConfig{});
  const auto adapters = make_adapters(model, {2, 4.0, 0.1, {}}, 3);
  CHECK(adapters.size() == default_targets(model).size());
  const auto corpus = make_grading_corpus(3, 5);
  for (const auto& a : adapters) {
    const auto& w = model.weight(a.target).value;
    CHECK(a.B.rows() == w.rows());
    CHECK(a.B.cols() == a.rank);
    CHECK(a.D.rows() == a.rank);
    CHECK(a.D.cols() == w.cols());
    CHECK(a.B.isZero());
  }
  // B = 0 means the adapted model is the base model.
  for (const auto& s : corpus)
    CHECK((forward_logits(model, adapters, s.prompt) - forward_logits(model, {}, s.prompt)).cwiseAbs().maxCoeff() ==
          0.0);
}

TEST_CASE("adapter validation") {
  const ToyMllm model(ToyConfig{});
  CHECK_THROWS_AS(make_adapters(model, {2, 4.0, 0.1, {"nope"}}, 1), InvalidArgument);
  CHECK_THROWS_AS(make_adapters(model, {64, 4.0, 0.1, {}}, 1), InvalidArgument);
  auto a = make_adapters(model, {2, 4.0, 0.1, {}}, 1);
  a.push_back(a.front());
  CHECK_THROWS_AS(validate_adapters(model, a), InvalidArgument);
  a.pop_back();
  a.front().D = Matrix::Zero(2, 1);
  CHECK_THROWS_AS(validate_adapters(model, a), InvalidArgument);
}

TEST_CASE("merged weights reproduce the adapted forward pass") {
  const ToyMllm model(ToyConfig{});
  const auto adapters = randomized(model, 2, 4.0, 9);
  const auto merged = lora_merge(model, adapters);
  for (const auto& s : make_grading_corpus(5, 2)) {
    const auto diff = forward_logits(model, adapters, s.prompt) - forward_logits(merged, {}, s.prompt);
    CHECK(diff.cwiseAbs().maxCoeff() < 1e-10);
  }
  for (const auto& a : adapters) {
    const Matrix delta = merged.weight(a.target).value - model.weight(a.target).value;
    Eigen::FullPivLU<Matrix> lu(delta);
    lu.setThreshold(1e-9);
    CHECK(lu.rank() <= a.rank);
  }
}

TEST_CASE("uniform logits give T log V") {
  ToyMllm model(ToyConfig{});
  model.weight("llm.head").value.setZero();
  for (const auto& s : make_grading_corpus(4, 8)) {
    const double expected = static_cast<double>(s.target.size()) * std::log(16.0);
    CHECK(sft_loss(model, {}, s) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match finite differences") {
  const ToyMllm model(ToyConfig{});
  const auto adapters = randomized(model, 2, 4.0, 7);
  const auto sample = make_grading_corpus(1, 7).front();
  const auto r = grad_check(model, adapters, sample, 1e-5, 32, 7);
  CHECK(r.coordinates > 0);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("a step only moves the selected modules") {
  const ToyMllm model(ToyConfig{});
  const auto base = randomized(model, 2, 4.0, 4);
  const auto batch = make_grading_corpus(2, 4);
  for (const auto& modules : all_module_sets()) {
    auto adapters = base;
    const auto before = model.to_json();
    sft_step(model, adapters, {modules, 0.05, 1, 2, 1}, batch);
    CHECK(model.to_json() == before);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const bool moved = !(adapters[i].B == base[i].B && adapters[i].D == base[i].D);
      CHECK(moved == (modules.count(adapters[i].tag) > 0));
    }
  }
}

TEST_CASE("training lowers the loss and is deterministic") {
  const ToyMllm model(ToyConfig{});
  const auto corpus = make_grading_corpus(6, 3);
  auto a1 = make_adapters(model, {2, 4.0, 0.1, {}}, 5);
  auto a2 = a1;
  const double start = mean_loss(model, a1, corpus);
  std::ostringstream log;
  const SftConfig cfg{{ModuleTag::LLM}, 0.05, 20, 2, 3};
  const auto r1 = train(model, a1, cfg, corpus, &log);
  const auto r2 = train(model, a2, cfg, corpus);
  CHECK(r1.epoch_loss.size() == 20);
  CHECK(r1.epoch_loss == r2.epoch_loss);
  CHECK(r1.epoch_loss.back() < start);
  CHECK(!log.str().empty());
  CHECK(greedy_generate(model, a1, corpus[0].prompt).tokens == greedy_generate(model, a2, corpus[0].prompt).tokens);
  TrainResult t{{1.0, 0.5, 0.04, 0.01}};
  CHECK(t.epochs_to(0.05) == 3);
  CHECK_FALSE(t.epochs_to(0.001).has_value());
}

TEST_CASE("generation stops at EOS or the length cap") {
  const ToyMllm model(ToyConfig{});
  const auto g = greedy_generate(model, {}, make_grading_corpus(1, 1).front().prompt, 5);
  CHECK(g.tokens.size() <= 5);
  if (!g.hit_length_cap) CHECK(g.tokens.back() == kEos);
}

TEST_CASE("checkpoint round trip") {
  const ToyMllm model(ToyConfig{});
  const auto adapters = randomized(model, 2, 4.0, 12);
  const auto j = checkpoint_to_json(model, adapters);
  CHECK(j.at("format") == "defgrade-toy-mllm");
  const auto [m2, a2] = checkpoint_from_json(nlohmann::json::parse(j.dump()));
  const auto s = make_grading_corpus(1, 6).front();
  CHECK((forward_logits(model, adapters, s.prompt) - forward_logits(m2, a2, s.prompt)).cwiseAbs().maxCoeff() == 0.0);
  auto bad = j;
  bad["version"] = 99;
  CHECK_THROWS(checkpoint_from_json(bad));
}

TEST_CASE("grading corpus is well formed") {
  const auto c = make_grading_corpus(20, 11);
  CHECK(c.size() == 20);
  for (const auto& s : c) {
    REQUIRE(s.target.size() >= 2);
    CHECK(s.target.back() == kEos);
    const int g = s.target[s.target.size() - 2];
    CHECK(g >= Vocabulary::grade0);
    CHECK(g < Vocabulary::grade0 + 4);
  }
  CHECK(make_grading_corpus(5, 11).front().target == c.front().target);
}
