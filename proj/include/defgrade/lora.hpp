#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace defgrade::lora {

using Matrix = Eigen::MatrixXd;

enum class ModuleTag { VE, MMA, LLM };
std::string_view to_string(ModuleTag t);
ModuleTag module_tag_from(std::string_view s);
// Accepts "VE,MMA" / "llm" / "all".
std::set<ModuleTag> module_set_from(std::string_view s);
std::string to_string(const std::set<ModuleTag>& c);

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kGridSide = 8;
inline constexpr int kPatchSide = 4;
inline constexpr int kPatchesPerImage = (kGridSide / kPatchSide) * (kGridSide / kPatchSide);
inline constexpr int kPatchPixels = kPatchSide * kPatchSide;

// Synthetic 8x8 grayscale image, row-major, values nominally in [0, 1].
struct ImageGrid {
  std::array<double, kGridSide * kGridSide> pixels{};
  bool operator==(const ImageGrid&) const = default;
};

// One prompt element: a token id or an image (4 patch positions).
using Element = std::variant<int, ImageGrid>;

struct ToySample {
  std::vector<Element> prompt;
  std::vector<int> target;
};

struct ToyConfig {
  int d_llm = 8;
  int n_layers = 1;
  int n_heads = 2;
  int vocab = 16;
  int d_ff = 16;
  int d_v = 8;
  int max_len = 32;
  std::uint64_t seed = 7;
};

struct Weight {
  ModuleTag tag = ModuleTag::LLM;
  bool lookup = false;  // embedding table indexed by row
  Matrix value;
};

// Three-stage toy model. Row-vector convention: a linear layer maps x to xW.
//   VE:  patch (16) -> tanh(patch * ve.patch_proj)             (d_v)
//   MMA: visual feature -> feature * mma.proj                    (d_llm)
//   LLM: token embedding, positional table, pre-RMSNorm causal
//        transformer blocks with a SiLU MLP, and an output head.
class ToyMllm {
 public:
  explicit ToyMllm(const ToyConfig& cfg);

  [[nodiscard]] const ToyConfig& config() const { return cfg_; }
  [[nodiscard]] bool has_weight(const std::string& name) const { return weights_.count(name) > 0; }
  [[nodiscard]] const Weight& weight(const std::string& name) const;
  Weight& weight(const std::string& name);
  [[nodiscard]] const std::map<std::string, Weight>& weights() const { return weights_; }

  [[nodiscard]] nlohmann::json to_json() const;
  static ToyMllm from_json(const nlohmann::json& j);

 private:
  ToyConfig cfg_;
  std::map<std::string, Weight> weights_;
};

// Delta W = (alpha / r) * B * D, B is d x r, D is r x k.
struct LoraAdapter {
  std::string target;
  ModuleTag tag = ModuleTag::LLM;
  int rank = 2;
  double alpha = 8.0;
  Matrix B;
  Matrix D;

  [[nodiscard]] double scale() const { return alpha / rank; }
};
using AdapterSet = std::vector<LoraAdapter>;

struct LoraConfig {
  int rank = 2;
  double alpha = 8.0;
  double init_std = 0.1;  // for D; B starts at zero
  std::vector<std::string> targets;  // empty: default_targets(model)
};

// VE patch projection, MMA projection and every attention projection.
std::vector<std::string> default_targets(const ToyMllm& model);

AdapterSet make_adapters(const ToyMllm& model, const LoraConfig& cfg, std::uint64_t seed);
// Throws InvalidArgument for unknown or duplicate targets, shape mismatch
// and rank above min(d, k) / 2.
void validate_adapters(const ToyMllm& model, const AdapterSet& adapters);

// Rows of the input sequence (L x d_llm): text through the token table,
// images through VE then MMA, each row plus its positional vector.
Matrix encode(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& elements);
std::size_t encoded_length(const std::vector<Element>& elements);

// Logits (L x vocab) with adapters applied on the fly.
Matrix forward_logits(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& elements);

// W' = W + (alpha / r) B D for every adapter; the result carries no adapters.
ToyMllm lora_merge(const ToyMllm& model, const AdapterSet& adapters);

// Teacher-forced input: the prompt (or BOS alone when the prompt is empty)
// followed by every target token but the last.
std::vector<Element> teacher_forced_input(const ToySample& s);

// -log P(target_j | prompt, target_<j) for each j.
std::vector<double> sft_loss_terms(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s);
double sft_loss(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s);

struct AdapterGrad {
  Matrix dB;
  Matrix dD;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<AdapterGrad> grads;  // parallel to the adapter set
};

LossGrad loss_and_grad(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s);

struct SftConfig {
  std::set<ModuleTag> modules{ModuleTag::LLM};
  double lr = 0.05;
  int epochs = 500;
  int batch_size = 1;
  std::uint64_t seed = 7;
};

struct StepStats {
  double loss = 0.0;  // mean over the batch, before the update
  std::map<ModuleTag, double> grad_norm;
};

// Plain gradient descent on B and D of adapters whose tag is in C, using the
// batch-mean gradient. Everything else is left untouched.
StepStats sft_step(const ToyMllm& model, AdapterSet& adapters, const SftConfig& cfg,
                   const std::vector<ToySample>& batch);

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-sample loss after each epoch
  std::optional<int> epochs_to(double threshold) const;
};

// Seeded per-epoch shuffle, mini-batches of cfg.batch_size. Writes one JSON
// line per step to `log` when given.
TrainResult train(const ToyMllm& model, AdapterSet& adapters, const SftConfig& cfg,
                  const std::vector<ToySample>& corpus, std::ostream* log = nullptr);

double mean_loss(const ToyMllm& model, const AdapterSet& adapters, const std::vector<ToySample>& corpus);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Analytic adapter gradients against central differences on a random subset
// of at least `per_adapter` coordinates of each adapter (all of them when the
// adapter is smaller).
GradCheckResult grad_check(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s, double eps,
                           std::size_t per_adapter = 32, std::uint64_t seed = 1);

struct Generation {
  std::vector<int> tokens;  // includes the final EOS when produced
  bool hit_length_cap = false;
};

Generation greedy_generate(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& prompt,
                           std::size_t max_new_tokens = 16);

nlohmann::json adapters_to_json(const AdapterSet& adapters);
AdapterSet adapters_from_json(const nlohmann::json& j);

// Versioned checkpoint: {"format": "defgrade-toy-mllm", "version": 1,
// "model": {...}, "adapters": [...]}.
nlohmann::json checkpoint_to_json(const ToyMllm& model, const AdapterSet& adapters);
std::pair<ToyMllm, AdapterSet> checkpoint_from_json(const nlohmann::json& j);

// Synthetic grading corpus. Each image has four quadrants that are bright or
// dark; the target walks a three-node tree over quadrants 0..2 (Yes/No tokens)
// and ends with a grade token and EOS.
struct Vocabulary {
  static constexpr int yes = 2;
  static constexpr int no = 3;
  static constexpr int grade0 = 4;  // four grade tokens 4..7
  static constexpr int prompt0 = 8;
};
std::vector<ToySample> make_grading_corpus(std::size_t n, std::uint64_t seed);

}  // namespace defgrade::lora
