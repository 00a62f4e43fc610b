#include "defgrade/lora.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "defgrade/error.hpp"
#include "defgrade/util.hpp"

namespace defgrade::lora {

using Eigen::VectorXd;

std::string_view to_string(ModuleTag t) {
  switch (t) {
    case ModuleTag::VE: return "VE";
    case ModuleTag::MMA: return "MMA";
    case ModuleTag::LLM: return "LLM";
  }
  return "?";
}

ModuleTag module_tag_from(std::string_view s) {
  auto u = util::to_lower(util::trim(s));
  if (u == "ve") return ModuleTag::VE;
  if (u == "mma") return ModuleTag::MMA;
  if (u == "llm") return ModuleTag::LLM;
  throw InvalidArgument("unknown module '" + std::string(s) + "' (VE | MMA | LLM)");
}

std::set<ModuleTag> module_set_from(std::string_view s) {
  if (util::to_lower(util::trim(s)) == "all") return {ModuleTag::VE, ModuleTag::MMA, ModuleTag::LLM};
  std::string norm(s);
  std::replace(norm.begin(), norm.end(), '+', ',');
  std::set<ModuleTag> out;
  for (const auto& part : util::split(norm, ','))
    if (!util::trim(part).empty()) out.insert(module_tag_from(part));
  if (out.empty()) throw InvalidArgument("the trainable module set must not be empty");
  return out;
}

std::string to_string(const std::set<ModuleTag>& c) {
  std::string out;
  for (auto t : c) {
    if (!out.empty()) out += '+';
    out += to_string(t);
  }
  return out;
}

namespace {

constexpr double kRmsEps = 1e-6;

Matrix random_matrix(util::Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal() * stddev;
  return m;
}

std::string layer_prefix(int l) { return "llm.l" + std::to_string(l) + "."; }

nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || data.size() != static_cast<std::size_t>(rows * cols))
    throw InvalidArgument("matrix data does not match its shape");
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[k++].get<double>();
  return m;
}

}  // namespace

ToyMllm::ToyMllm(const ToyConfig& cfg) : cfg_(cfg) {
  if (cfg.d_llm < 1 || cfg.n_layers < 0 || cfg.n_heads < 1 || cfg.vocab < 2 || cfg.d_ff < 1 || cfg.d_v < 1 ||
      cfg.max_len < 1)
    throw InvalidArgument("toy model dimensions must be positive (vocab >= 2)");
  if (cfg.d_llm % cfg.n_heads != 0) throw InvalidArgument("d_llm must be divisible by n_heads");

  util::Rng rng(cfg.seed);
  const int d = cfg.d_llm;
  auto add = [&](const std::string& name, ModuleTag tag, bool lookup, int rows, int cols, double stddev) {
    weights_[name] = Weight{tag, lookup, random_matrix(rng, rows, cols, stddev)};
  };
  add("ve.patch_proj", ModuleTag::VE, false, kPatchPixels, cfg.d_v, 2.0 / std::sqrt(double(kPatchPixels)));
  add("mma.proj", ModuleTag::MMA, false, cfg.d_v, d, 1.0 / std::sqrt(double(cfg.d_v)));
  add("llm.tok_emb", ModuleTag::LLM, true, cfg.vocab, d, 1.0);
  add("llm.pos", ModuleTag::LLM, true, cfg.max_len, d, 0.1);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto p = layer_prefix(l);
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"})
      add(p + n, ModuleTag::LLM, false, d, d, 1.0 / std::sqrt(double(d)));
    add(p + "mlp.up", ModuleTag::LLM, false, d, cfg.d_ff, 1.0 / std::sqrt(double(d)));
    add(p + "mlp.down", ModuleTag::LLM, false, cfg.d_ff, d, 1.0 / std::sqrt(double(cfg.d_ff)));
  }
  add("llm.head", ModuleTag::LLM, false, d, cfg.vocab, 1.0);
}

const Weight& ToyMllm::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw InvalidArgument("unknown weight '" + name + "'");
  return it->second;
}

Weight& ToyMllm::weight(const std::string& name) {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw InvalidArgument("unknown weight '" + name + "'");
  return it->second;
}

nlohmann::json ToyMllm::to_json() const {
  nlohmann::json cfg{{"d_llm", cfg_.d_llm}, {"n_layers", cfg_.n_layers}, {"n_heads", cfg_.n_heads},
                     {"vocab", cfg_.vocab}, {"d_ff", cfg_.d_ff},         {"d_v", cfg_.d_v},
                     {"max_len", cfg_.max_len}, {"seed", cfg_.seed}};
  nlohmann::json w = nlohmann::json::object();
  for (const auto& [name, weight] : weights_) {
    auto m = matrix_to_json(weight.value);
    m["tag"] = std::string(to_string(weight.tag));
    m["lookup"] = weight.lookup;
    w[name] = std::move(m);
  }
  return {{"config", std::move(cfg)}, {"weights", std::move(w)}};
}

ToyMllm ToyMllm::from_json(const nlohmann::json& j) {
  try {
    const auto& c = j.at("config");
    ToyConfig cfg;
    cfg.d_llm = c.at("d_llm");
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    cfg.vocab = c.at("vocab");
    cfg.d_ff = c.at("d_ff");
    cfg.d_v = c.at("d_v");
    cfg.max_len = c.at("max_len");
    cfg.seed = c.at("seed");
    ToyMllm m(cfg);
    for (auto& [name, w] : m.weights_) {
      Matrix v = matrix_from_json(j.at("weights").at(name));
      if (v.rows() != w.value.rows() || v.cols() != w.value.cols())
        throw InvalidArgument("weight '" + name + "' has the wrong shape");
      w.value = std::move(v);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed model JSON: ") + e.what());
  }
}

std::vector<std::string> default_targets(const ToyMllm& model) {
  std::vector<std::string> t{"ve.patch_proj", "mma.proj"};
  for (int l = 0; l < model.config().n_layers; ++l)
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o"}) t.push_back(layer_prefix(l) + n);
  return t;
}

AdapterSet make_adapters(const ToyMllm& model, const LoraConfig& cfg, std::uint64_t seed) {
  auto targets = cfg.targets.empty() ? default_targets(model) : cfg.targets;
  util::Rng rng(seed);
  AdapterSet out;
  for (const auto& t : targets) {
    const auto& w = model.weight(t);
    LoraAdapter a;
    a.target = t;
    a.tag = w.tag;
    a.rank = cfg.rank;
    a.alpha = cfg.alpha;
    a.B = Matrix::Zero(w.value.rows(), cfg.rank);
    a.D = random_matrix(rng, cfg.rank, w.value.cols(), cfg.init_std);
    out.push_back(std::move(a));
  }
  validate_adapters(model, out);
  return out;
}

void validate_adapters(const ToyMllm& model, const AdapterSet& adapters) {
  std::set<std::string> seen;
  for (const auto& a : adapters) {
    if (!model.has_weight(a.target)) throw InvalidArgument("adapter targets unknown weight '" + a.target + "'");
    if (!seen.insert(a.target).second) throw InvalidArgument("two adapters target '" + a.target + "'");
    const auto& w = model.weight(a.target);
    if (a.tag != w.tag) throw InvalidArgument("adapter on '" + a.target + "' carries the wrong module tag");
    const auto d = w.value.rows();
    const auto k = w.value.cols();
    if (a.rank < 1) throw InvalidArgument("adapter rank must be at least 1");
    if (2 * static_cast<Eigen::Index>(a.rank) > std::min(d, k))
      throw InvalidArgument("rank " + std::to_string(a.rank) + " on '" + a.target + "' exceeds min(d, k) / 2 = " +
                            std::to_string(std::min(d, k) / 2));
    if (a.B.rows() != d || a.B.cols() != a.rank || a.D.rows() != a.rank || a.D.cols() != k)
      throw InvalidArgument("adapter on '" + a.target + "' has mismatched B/D shapes");
  }
}

std::size_t encoded_length(const std::vector<Element>& elements) {
  std::size_t n = 0;
  for (const auto& e : elements) n += std::holds_alternative<int>(e) ? 1 : kPatchesPerImage;
  return n;
}

namespace {

class Net {
 public:
  Net(const ToyMllm& model, const AdapterSet& adapters) : model_(model), adapters_(adapters) {
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      if (!model.has_weight(adapters[i].target))
        throw InvalidArgument("adapter targets unknown weight '" + adapters[i].target + "'");
      index_[adapters[i].target] = static_cast<int>(i);
    }
  }

  struct Lin {
    Matrix x;
    Matrix xb;
  };

  struct Layer {
    Matrix x;
    VectorXd r1;
    Matrix a;
    Lin q, k, v, o, up, down;
    Matrix Q, K, V;
    std::vector<Matrix> P;
    Matrix O;
    Matrix x2;
    VectorXd r2;
    Matrix b;
    Matrix U;
  };

  // Forward pass; caches everything the backward pass needs.
  Matrix forward(const std::vector<Element>& elements) {
    const auto& cfg = model_.config();
    const auto L = encoded_length(elements);
    if (L == 0) throw InvalidArgument("cannot run the model on an empty sequence");
    if (L > static_cast<std::size_t>(cfg.max_len))
      throw InvalidArgument("sequence of " + std::to_string(L) + " rows exceeds max_len " +
                            std::to_string(cfg.max_len));

    tokens_.assign(L, -1);
    image_rows_.clear();
    std::vector<const ImageGrid*> images;
    std::size_t row = 0;
    for (const auto& e : elements) {
      if (const int* t = std::get_if<int>(&e)) {
        if (*t < 0 || *t >= cfg.vocab) throw InvalidArgument("token id " + std::to_string(*t) + " outside vocabulary");
        tokens_[row++] = *t;
      } else {
        images.push_back(&std::get<ImageGrid>(e));
        for (int p = 0; p < kPatchesPerImage; ++p) image_rows_.push_back(row++);
      }
    }

    H_ = Matrix::Zero(static_cast<Eigen::Index>(L), cfg.d_llm);
    for (std::size_t i = 0; i < L; ++i)
      if (tokens_[i] >= 0) H_.row(static_cast<Eigen::Index>(i)) = lookup("llm.tok_emb", tokens_[i]);

    if (!images.empty()) {
      Matrix patches(static_cast<Eigen::Index>(image_rows_.size()), kPatchPixels);
      Eigen::Index r = 0;
      for (const auto* img : images)
        for (int pr = 0; pr < kGridSide / kPatchSide; ++pr)
          for (int pc = 0; pc < kGridSide / kPatchSide; ++pc, ++r)
            for (int i = 0; i < kPatchSide; ++i)
              for (int j = 0; j < kPatchSide; ++j)
                patches(r, i * kPatchSide + j) =
                    img->pixels[static_cast<std::size_t>((pr * kPatchSide + i) * kGridSide + pc * kPatchSide + j)];
      Z_ = lin("ve.patch_proj", patches, ve_).array().tanh().matrix();
      Matrix hv = lin("mma.proj", Z_, mma_);
      for (std::size_t k = 0; k < image_rows_.size(); ++k)
        H_.row(static_cast<Eigen::Index>(image_rows_[k])) = hv.row(static_cast<Eigen::Index>(k));
    }
    for (std::size_t i = 0; i < L; ++i)
      H_.row(static_cast<Eigen::Index>(i)) += lookup("llm.pos", static_cast<int>(i));
    encoded_ = H_;

    Matrix x = H_;
    layers_.assign(static_cast<std::size_t>(cfg.n_layers), Layer{});
    for (int l = 0; l < cfg.n_layers; ++l) x = layer_forward(l, x);
    xf_ = x;
    Matrix f = rms(xf_, rf_);
    return lin("llm.head", f, head_);
  }

  // Accumulates adapter gradients of sum(dlogits .* logits).
  void backward(const Matrix& dlogits, std::vector<AdapterGrad>& grads) {
    grads_ = &grads;
    Matrix dx = rms_back(xf_, rf_, lin_back("llm.head", head_, dlogits));
    for (int l = model_.config().n_layers - 1; l >= 0; --l) dx = layer_backward(l, dx);

    for (Eigen::Index i = 0; i < dx.rows(); ++i) {
      lookup_back("llm.pos", static_cast<int>(i), dx.row(i));
      if (tokens_[static_cast<std::size_t>(i)] >= 0) lookup_back("llm.tok_emb", tokens_[static_cast<std::size_t>(i)], dx.row(i));
    }
    if (!image_rows_.empty()) {
      Matrix dhv(static_cast<Eigen::Index>(image_rows_.size()), dx.cols());
      for (std::size_t k = 0; k < image_rows_.size(); ++k)
        dhv.row(static_cast<Eigen::Index>(k)) = dx.row(static_cast<Eigen::Index>(image_rows_[k]));
      Matrix dz = lin_back("mma.proj", mma_, dhv);
      Matrix dpre = (dz.array() * (1.0 - Z_.array().square())).matrix();
      lin_back("ve.patch_proj", ve_, dpre);
    }
    grads_ = nullptr;
  }

  [[nodiscard]] const Matrix& encoded() const { return encoded_; }

 private:
  const LoraAdapter* adapter(const std::string& name, int* idx = nullptr) const {
    auto it = index_.find(name);
    if (it == index_.end()) return nullptr;
    if (idx) *idx = it->second;
    return &adapters_[static_cast<std::size_t>(it->second)];
  }

  Eigen::RowVectorXd lookup(const std::string& name, int row) const {
    Eigen::RowVectorXd h = model_.weight(name).value.row(row);
    if (const auto* a = adapter(name)) h.noalias() += a->scale() * (a->B.row(row) * a->D);
    return h;
  }

  void lookup_back(const std::string& name, int row, const Eigen::RowVectorXd& dh) {
    int idx = -1;
    const auto* a = adapter(name, &idx);
    if (!a) return;
    auto& g = (*grads_)[static_cast<std::size_t>(idx)];
    g.dB.row(row).noalias() += a->scale() * (dh * a->D.transpose());
    g.dD.noalias() += a->scale() * (a->B.row(row).transpose() * dh);
  }

  Matrix lin(const std::string& name, const Matrix& x, Lin& cache) const {
    cache.x = x;
    Matrix y = x * model_.weight(name).value;
    if (const auto* a = adapter(name)) {
      cache.xb = x * a->B;
      y.noalias() += a->scale() * (cache.xb * a->D);
    }
    return y;
  }

  Matrix lin_back(const std::string& name, const Lin& cache, const Matrix& dy) {
    Matrix dx = dy * model_.weight(name).value.transpose();
    int idx = -1;
    if (const auto* a = adapter(name, &idx)) {
      Matrix dyd = dy * a->D.transpose();
      dx.noalias() += a->scale() * (dyd * a->B.transpose());
      auto& g = (*grads_)[static_cast<std::size_t>(idx)];
      g.dB.noalias() += a->scale() * (cache.x.transpose() * dyd);
      g.dD.noalias() += a->scale() * (cache.xb.transpose() * dy);
    }
    return dx;
  }

  static Matrix rms(const Matrix& x, VectorXd& r) {
    const double n = static_cast<double>(x.cols());
    r.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) r(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / n + kRmsEps);
    return r.asDiagonal() * x;
  }

  static Matrix rms_back(const Matrix& x, const VectorXd& r, const Matrix& dy) {
    const double n = static_cast<double>(x.cols());
    Matrix dx = r.asDiagonal() * dy;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      dx.row(i) -= (r(i) * r(i) * r(i) * x.row(i).dot(dy.row(i)) / n) * x.row(i);
    return dx;
  }

  Matrix layer_forward(int l, const Matrix& x) {
    const auto& cfg = model_.config();
    const auto p = layer_prefix(l);
    auto& c = layers_[static_cast<std::size_t>(l)];
    const int dh = cfg.d_llm / cfg.n_heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto L = x.rows();

    c.x = x;
    c.a = rms(x, c.r1);
    c.Q = lin(p + "attn.q", c.a, c.q);
    c.K = lin(p + "attn.k", c.a, c.k);
    c.V = lin(p + "attn.v", c.a, c.v);
    c.O = Matrix::Zero(L, cfg.d_llm);
    c.P.assign(static_cast<std::size_t>(cfg.n_heads), Matrix::Zero(L, L));
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto Qh = c.Q.middleCols(h * dh, dh);
      auto Kh = c.K.middleCols(h * dh, dh);
      auto& P = c.P[static_cast<std::size_t>(h)];
      for (Eigen::Index i = 0; i < L; ++i) {
        // Causal: only keys at positions <= i take part.
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = Qh.row(i).dot(Kh.row(j)) * inv;
          mx = std::max(mx, P(i, j));
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          z += P(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= z;
      }
      c.O.middleCols(h * dh, dh) = P * c.V.middleCols(h * dh, dh);
    }
    c.x2 = x + lin(p + "attn.o", c.O, c.o);
    c.b = rms(c.x2, c.r2);
    c.U = lin(p + "mlp.up", c.b, c.up);
    Matrix sig = (1.0 / (1.0 + (-c.U.array()).exp())).matrix();
    Matrix G = (c.U.array() * sig.array()).matrix();
    return c.x2 + lin(p + "mlp.down", G, c.down);
  }

  Matrix layer_backward(int l, const Matrix& dout) {
    const auto& cfg = model_.config();
    const auto p = layer_prefix(l);
    auto& c = layers_[static_cast<std::size_t>(l)];
    const int dh = cfg.d_llm / cfg.n_heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto L = c.x.rows();

    Matrix dG = lin_back(p + "mlp.down", c.down, dout);
    auto sig = (1.0 / (1.0 + (-c.U.array()).exp()));
    Matrix dU = (dG.array() * sig * (1.0 + c.U.array() * (1.0 - sig))).matrix();
    Matrix dx2 = dout + rms_back(c.x2, c.r2, lin_back(p + "mlp.up", c.up, dU));

    Matrix dO = lin_back(p + "attn.o", c.o, dx2);
    Matrix dQ = Matrix::Zero(L, cfg.d_llm), dK = Matrix::Zero(L, cfg.d_llm), dV = Matrix::Zero(L, cfg.d_llm);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto& P = c.P[static_cast<std::size_t>(h)];
      Matrix dOh = dO.middleCols(h * dh, dh);
      Matrix dP = dOh * c.V.middleCols(h * dh, dh).transpose();
      dV.middleCols(h * dh, dh) = P.transpose() * dOh;
      Matrix dS = Matrix::Zero(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        double s = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) s += P(i, j) * dP(i, j);
        for (Eigen::Index j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - s) * inv;
      }
      dQ.middleCols(h * dh, dh) = dS * c.K.middleCols(h * dh, dh);
      dK.middleCols(h * dh, dh) = dS.transpose() * c.Q.middleCols(h * dh, dh);
    }
    Matrix da = lin_back(p + "attn.q", c.q, dQ);
    da += lin_back(p + "attn.k", c.k, dK);
    da += lin_back(p + "attn.v", c.v, dV);
    return dx2 + rms_back(c.x, c.r1, da);
  }

  const ToyMllm& model_;
  const AdapterSet& adapters_;
  std::map<std::string, int> index_;
  std::vector<AdapterGrad>* grads_ = nullptr;

  std::vector<int> tokens_;
  std::vector<std::size_t> image_rows_;
  Matrix H_, encoded_, Z_, xf_;
  VectorXd rf_;
  Lin ve_, mma_, head_;
  std::vector<Layer> layers_;
};

std::vector<AdapterGrad> zero_grads(const AdapterSet& adapters) {
  std::vector<AdapterGrad> g;
  g.reserve(adapters.size());
  for (const auto& a : adapters) g.push_back({Matrix::Zero(a.B.rows(), a.B.cols()), Matrix::Zero(a.D.rows(), a.D.cols())});
  return g;
}

std::size_t prompt_rows(const ToySample& s) {
  return s.prompt.empty() ? 1 : encoded_length(s.prompt);
}

void check_sample(const ToySample& s) {
  if (s.target.empty()) throw InvalidArgument("a training sample needs at least one target token");
}

}  // namespace

Matrix encode(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& elements) {
  Net net(model, adapters);
  net.forward(elements);
  return net.encoded();
}

Matrix forward_logits(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& elements) {
  Net net(model, adapters);
  return net.forward(elements);
}

ToyMllm lora_merge(const ToyMllm& model, const AdapterSet& adapters) {
  validate_adapters(model, adapters);
  ToyMllm merged = model;
  for (const auto& a : adapters) merged.weight(a.target).value.noalias() += a.scale() * (a.B * a.D);
  return merged;
}

std::vector<Element> teacher_forced_input(const ToySample& s) {
  check_sample(s);
  std::vector<Element> in = s.prompt;
  if (in.empty()) in.emplace_back(kBos);
  for (std::size_t j = 0; j + 1 < s.target.size(); ++j) in.emplace_back(s.target[j]);
  return in;
}

namespace {

// Log-softmax terms and, optionally, d(sum of terms)/d(logits).
std::vector<double> ce_terms(const Matrix& logits, const ToySample& s, Matrix* dlogits, double weight) {
  const auto p0 = prompt_rows(s);
  std::vector<double> terms;
  if (dlogits) *dlogits = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < s.target.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(p0 - 1 + j);
    const auto t = s.target[j];
    if (t < 0 || t >= logits.cols()) throw InvalidArgument("target token outside vocabulary");
    const double mx = logits.row(row).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(row).array() - mx).exp().matrix();
    const double z = e.sum();
    terms.push_back(-(logits(row, t) - mx - std::log(z)));
    if (dlogits) {
      dlogits->row(row) = weight * e / z;
      (*dlogits)(row, t) -= weight;
    }
  }
  return terms;
}

}  // namespace

std::vector<double> sft_loss_terms(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s) {
  auto in = teacher_forced_input(s);
  Net net(model, adapters);
  return ce_terms(net.forward(in), s, nullptr, 1.0);
}

double sft_loss(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s) {
  auto terms = sft_loss_terms(model, adapters, s);
  return std::accumulate(terms.begin(), terms.end(), 0.0);
}

LossGrad loss_and_grad(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s) {
  auto in = teacher_forced_input(s);
  Net net(model, adapters);
  Matrix dlogits;
  auto terms = ce_terms(net.forward(in), s, &dlogits, 1.0);
  LossGrad out;
  out.loss = std::accumulate(terms.begin(), terms.end(), 0.0);
  out.grads = zero_grads(adapters);
  net.backward(dlogits, out.grads);
  return out;
}

StepStats sft_step(const ToyMllm& model, AdapterSet& adapters, const SftConfig& cfg,
                   const std::vector<ToySample>& batch) {
  if (cfg.modules.empty()) throw InvalidArgument("the trainable module set C must not be empty");
  if (batch.empty()) throw InvalidArgument("empty batch");
  for (auto tag : cfg.modules) {
    bool found = std::any_of(adapters.begin(), adapters.end(), [&](const LoraAdapter& a) { return a.tag == tag; });
    if (!found) throw InvalidArgument("no adapter attached to module " + std::string(to_string(tag)));
  }

  auto total = zero_grads(adapters);
  StepStats stats;
  for (const auto& s : batch) {
    auto lg = loss_and_grad(model, adapters, s);
    stats.loss += lg.loss;
    for (std::size_t i = 0; i < total.size(); ++i) {
      total[i].dB += lg.grads[i].dB;
      total[i].dD += lg.grads[i].dD;
    }
  }
  const double n = static_cast<double>(batch.size());
  stats.loss /= n;
  std::map<ModuleTag, double> sq;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    total[i].dB /= n;
    total[i].dD /= n;
    sq[adapters[i].tag] += total[i].dB.squaredNorm() + total[i].dD.squaredNorm();
  }
  for (const auto& [tag, v] : sq) stats.grad_norm[tag] = std::sqrt(v);

  if (cfg.lr != 0.0) {
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      if (!cfg.modules.count(adapters[i].tag)) continue;
      adapters[i].B -= cfg.lr * total[i].dB;
      adapters[i].D -= cfg.lr * total[i].dD;
    }
  }
  return stats;
}

std::optional<int> TrainResult::epochs_to(double threshold) const {
  for (std::size_t i = 0; i < epoch_loss.size(); ++i)
    if (epoch_loss[i] < threshold) return static_cast<int>(i + 1);
  return std::nullopt;
}

double mean_loss(const ToyMllm& model, const AdapterSet& adapters, const std::vector<ToySample>& corpus) {
  if (corpus.empty()) throw InvalidArgument("empty corpus");
  double sum = 0.0;
  for (const auto& s : corpus) sum += sft_loss(model, adapters, s);
  return sum / static_cast<double>(corpus.size());
}

TrainResult train(const ToyMllm& model, AdapterSet& adapters, const SftConfig& cfg,
                  const std::vector<ToySample>& corpus, std::ostream* log) {
  if (corpus.empty()) throw InvalidArgument("empty training corpus");
  if (cfg.batch_size < 1) throw InvalidArgument("batch size must be at least 1");
  if (cfg.epochs < 0) throw InvalidArgument("epochs must be non-negative");
  validate_adapters(model, adapters);

  util::Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<ToySample> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
        batch.push_back(corpus[order[i]]);
      auto stats = sft_step(model, adapters, cfg, batch);
      ++step;
      if (log) {
        nlohmann::json norms = nlohmann::json::object();
        for (const auto& [tag, v] : stats.grad_norm) norms[std::string(to_string(tag))] = v;
        *log << nlohmann::json{{"step", step}, {"epoch", epoch}, {"loss", stats.loss}, {"grad_norm", norms}}.dump()
             << '\n';
      }
    }
    result.epoch_loss.push_back(mean_loss(model, adapters, corpus));
  }
  return result;
}

GradCheckResult grad_check(const ToyMllm& model, const AdapterSet& adapters, const ToySample& s, double eps,
                           std::size_t per_adapter, std::uint64_t seed) {
  if (!(eps > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  const auto analytic = loss_and_grad(model, adapters, s);
  util::Rng rng(seed);
  GradCheckResult out;
  AdapterSet probe = adapters;
  for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
    const auto nb = static_cast<std::size_t>(adapters[ai].B.size());
    const auto total = nb + static_cast<std::size_t>(adapters[ai].D.size());
    std::vector<std::size_t> coords(total);
    std::iota(coords.begin(), coords.end(), 0);
    rng.shuffle(coords);
    coords.resize(std::min(total, per_adapter));
    for (auto c : coords) {
      const bool in_b = c < nb;
      auto& m = in_b ? probe[ai].B : probe[ai].D;
      const auto flat = static_cast<Eigen::Index>(in_b ? c : c - nb);
      const Eigen::Index r = flat / m.cols(), col = flat % m.cols();
      const double orig = m(r, col);
      m(r, col) = orig + eps;
      const double lp = sft_loss(model, probe, s);
      m(r, col) = orig - eps;
      const double lm = sft_loss(model, probe, s);
      m(r, col) = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = in_b ? analytic.grads[ai].dB(r, col) : analytic.grads[ai].dD(r, col);
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-8});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / scale);
      ++out.coordinates;
    }
  }
  return out;
}

Generation greedy_generate(const ToyMllm& model, const AdapterSet& adapters, const std::vector<Element>& prompt,
                           std::size_t max_new_tokens) {
  std::vector<Element> seq = prompt;
  if (seq.empty()) seq.emplace_back(kBos);
  Generation g;
  const auto cap = static_cast<std::size_t>(model.config().max_len);
  while (true) {
    if (g.tokens.size() >= max_new_tokens || encoded_length(seq) >= cap + 1) {
      g.hit_length_cap = true;
      break;
    }
    Net net(model, adapters);
    Matrix logits = net.forward(seq);
    const auto last = logits.rows() - 1;
    int best = 0;
    for (int v = 1; v < logits.cols(); ++v)
      if (logits(last, v) > logits(last, best)) best = v;
    g.tokens.push_back(best);
    if (best == kEos) break;
    if (encoded_length(seq) == cap) {
      g.hit_length_cap = true;
      break;
    }
    seq.emplace_back(best);
  }
  return g;
}

nlohmann::json adapters_to_json(const AdapterSet& adapters) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& a : adapters)
    arr.push_back({{"target", a.target},
                   {"tag", std::string(to_string(a.tag))},
                   {"rank", a.rank},
                   {"alpha", a.alpha},
                   {"B", matrix_to_json(a.B)},
                   {"D", matrix_to_json(a.D)}});
  return arr;
}

AdapterSet adapters_from_json(const nlohmann::json& j) {
  AdapterSet out;
  try {
    for (const auto& e : j) {
      LoraAdapter a;
      a.target = e.at("target").get<std::string>();
      a.tag = module_tag_from(e.at("tag").get<std::string>());
      a.rank = e.at("rank").get<int>();
      a.alpha = e.at("alpha").get<double>();
      a.B = matrix_from_json(e.at("B"));
      a.D = matrix_from_json(e.at("D"));
      out.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed adapter JSON: ") + e.what());
  }
  return out;
}

nlohmann::json checkpoint_to_json(const ToyMllm& model, const AdapterSet& adapters) {
  return {{"format", "defgrade-toy-mllm"}, {"version", 1}, {"model", model.to_json()},
          {"adapters", adapters_to_json(adapters)}};
}

std::pair<ToyMllm, AdapterSet> checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "defgrade-toy-mllm" || j.value("version", 0) != 1)
    throw InvalidArgument("not a version 1 toy-model checkpoint");
  auto model = ToyMllm::from_json(j.at("model"));
  auto adapters = adapters_from_json(j.at("adapters"));
  validate_adapters(model, adapters);
  return {std::move(model), std::move(adapters)};
}

std::vector<ToySample> make_grading_corpus(std::size_t n, std::uint64_t seed) {
  util::Rng rng(seed);
  std::vector<ToySample> out;
  for (std::size_t i = 0; i < n; ++i) {
    // Cycle through the four outcomes so every grade is represented.
    const int outcome = static_cast<int>(i % 4);
    std::array<bool, 4> bright{};
    for (int q = 0; q < 4; ++q) bright[static_cast<std::size_t>(q)] = rng.below(2) == 1;
    for (int q = 0; q < 3; ++q) bright[static_cast<std::size_t>(q)] = q < outcome;

    ImageGrid img;
    for (int r = 0; r < kGridSide; ++r)
      for (int c = 0; c < kGridSide; ++c) {
        const int quadrant = (r / kPatchSide) * 2 + c / kPatchSide;
        const double base = bright[static_cast<std::size_t>(quadrant)] ? 0.8 : 0.2;
        img.pixels[static_cast<std::size_t>(r * kGridSide + c)] = base + (rng.uniform() - 0.5) * 0.2;
      }

    ToySample s;
    s.prompt = {Vocabulary::prompt0, Vocabulary::prompt0 + 1, img, Vocabulary::prompt0 + 2};
    for (int q = 0; q < 3; ++q) {
      const bool yes = bright[static_cast<std::size_t>(q)];
      s.target.push_back(yes ? Vocabulary::yes : Vocabulary::no);
      if (!yes) break;
    }
    s.target.push_back(Vocabulary::grade0 + outcome);
    s.target.push_back(kEos);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace defgrade::lora
