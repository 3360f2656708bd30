#pragma once

// Casper imputation network: input project, L encoder layers of
// (skip project -> temporal transformer -> spatiotemporal causal attention -> add & norm),
// and a prompt based decoder.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "casper/autodiff.hpp"
#include "casper/error.hpp"
#include "casper/rng.hpp"
#include "casper/series.hpp"

namespace casper {

using ad::Graph;
using ad::PairIndex;
using ad::PairIndexPtr;
using ad::Tensor;

enum class Mode { kTrain, kInfer };

enum class DecoderKind {
  kPrompts,         // learnable prompt pool (full model)
  kMlp,             // PBD replaced by an MLP head
  kSampledPrompts,  // prompt pool replaced by pooled embeddings of sampled training windows
};

inline std::string to_string(DecoderKind k) {
  switch (k) {
    case DecoderKind::kPrompts: return "prompts";
    case DecoderKind::kMlp: return "mlp";
    case DecoderKind::kSampledPrompts: return "sampled_prompts";
  }
  return "?";
}

inline DecoderKind decoder_from_string(const std::string& s) {
  if (s == "prompts") return DecoderKind::kPrompts;
  if (s == "mlp") return DecoderKind::kMlp;
  if (s == "sampled_prompts") return DecoderKind::kSampledPrompts;
  throw ConfigError("decoder: unknown kind '" + s + "' (expected prompts, mlp or sampled_prompts)");
}

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t n_prompts = 256;
  std::size_t ffn_hidden = 64;
  double tau = 1.0;
  double lambda = 1e-3;
  // Wavelength scale of the sinusoidal step encoding; the usual 10000 spreads d = 16 channels over
  // periods far longer than a 24-step window.
  double position_base = 24.0;
  bool causal_gates = true;  // false reproduces the "w/o SCA" ablation (beta = 1)
  DecoderKind decoder = DecoderKind::kPrompts;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (d_model < 2) throw ConfigError("d_model must be >= 2");
    if (heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (n_prompts < 1) throw ConfigError("n_prompts must be >= 1");
    if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be >= 1");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(position_base > 1.0)) throw ConfigError("position_base must be > 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"format_version", 1},         {"n_layers", c.n_layers},     {"d_model", c.d_model},
                     {"heads", c.heads},            {"n_prompts", c.n_prompts}, {"ffn_hidden", c.ffn_hidden},
                     {"tau", c.tau},                {"lambda", c.lambda},       {"position_base", c.position_base},
                     {"causal_gates", c.causal_gates},
                     {"decoder", to_string(c.decoder)}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.n_prompts = j.value("n_prompts", d.n_prompts);
  c.ffn_hidden = j.value("ffn_hidden", 2 * c.d_model);
  c.tau = j.value("tau", d.tau);
  c.lambda = j.value("lambda", d.lambda);
  c.position_base = j.value("position_base", d.position_base);
  c.causal_gates = j.value("causal_gates", d.causal_gates);
  c.decoder = decoder_from_string(j.value("decoder", std::string("prompts")));
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------------------------
// Parameter blocks. Linear maps act on row vectors: y = x W + b with W stored [in x out].

struct Linear {
  Tensor weight;
  Tensor bias;  // undefined for bias-free projections
};

struct Mlp {  // linear -> GELU -> linear
  Linear first;
  Linear second;
};

struct Norm {
  Tensor gain;
  Tensor bias;
};

struct TransformerBlock {
  Norm attn_norm;
  Tensor wq, wk, wv;
  Linear out;
  Norm ffn_norm;
  Mlp ffn;
};

struct ScaBlock {
  Tensor wq, wk;            // correlation scores
  Tensor wq_gate, wk_gate;  // gate query/key projections
  Tensor w_gate;            // [2d x 1], applied to [W_Qc h_q ; W_Kc h_k]
  Mlp message;              // first.weight is [2d x d] over [h_q ; h_k]
};

struct EncoderLayer {
  Mlp skip;
  TransformerBlock transformer;
  ScaBlock sca;
  Norm out_norm;
};

struct PromptDecoder {
  Tensor prompts;  // [N_P x d]
  Linear query, key, value;
  Norm query_norm, key_norm, value_norm;
  Linear head;  // d -> 1
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class CasperModel {
 public:
  explicit CasperModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.seed);
    const std::size_t d = config_.d_model;
    missing_token = gaussian({d}, 0.02, rng);
    input_mlp = make_mlp(1, d, d, rng);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      EncoderLayer layer;
      layer.skip = make_mlp(1, d, d, rng);
      auto& tf = layer.transformer;
      tf.attn_norm = make_norm(d);
      tf.wq = uniform_matrix(d, d, rng);
      tf.wk = uniform_matrix(d, d, rng);
      tf.wv = uniform_matrix(d, d, rng);
      tf.out = make_linear(d, d, rng);
      tf.ffn_norm = make_norm(d);
      tf.ffn = make_mlp(d, config_.ffn_hidden, d, rng);
      auto& sca = layer.sca;
      sca.wq = uniform_matrix(d, d, rng);
      sca.wk = uniform_matrix(d, d, rng);
      sca.wq_gate = uniform_matrix(d, d, rng);
      sca.wk_gate = uniform_matrix(d, d, rng);
      sca.w_gate = uniform_matrix(2 * d, 1, rng);
      sca.message = make_mlp(2 * d, d, d, rng);
      layer.out_norm = make_norm(d);
      layers.push_back(std::move(layer));
    }
    if (config_.decoder == DecoderKind::kMlp) {
      mlp_decoder = make_mlp(d, d, 1, rng);
    } else {
      pbd.prompts = gaussian({config_.n_prompts, d}, 0.02, rng);
      if (config_.decoder == DecoderKind::kSampledPrompts) pbd.prompts.set_requires_grad(false);
      pbd.query = make_linear(d, d, rng);
      pbd.key = make_linear(d, d, rng);
      pbd.value = make_linear(d, d, rng);
      pbd.query_norm = make_norm(d);
      pbd.key_norm = make_norm(d);
      pbd.value_norm = make_norm(d);
      pbd.head = make_linear(d, 1, rng);
    }
  }

  CasperModel(const CasperModel&) = delete;
  CasperModel& operator=(const CasperModel&) = delete;
  CasperModel(CasperModel&&) = default;
  CasperModel& operator=(CasperModel&&) = default;

  const ModelConfig& config() const { return config_; }
  void set_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    config_.tau = tau;
  }
  void set_lambda(double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    config_.lambda = lambda;
  }

  /// Every array that defines the model, in a stable order. Non-trainable entries are buffers
  /// (the sampled prompt pool).
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    auto add = [&](const std::string& name, const Tensor& t) {
      if (t.defined()) out.push_back({name, t, t.requires_grad()});
    };
    auto add_linear = [&](const std::string& p, const Linear& l) {
      add(p + ".weight", l.weight);
      add(p + ".bias", l.bias);
    };
    auto add_mlp = [&](const std::string& p, const Mlp& m) {
      add_linear(p + ".first", m.first);
      add_linear(p + ".second", m.second);
    };
    auto add_norm = [&](const std::string& p, const Norm& n) {
      add(p + ".gain", n.gain);
      add(p + ".bias", n.bias);
    };
    add("missing_token", missing_token);
    add_mlp("input_mlp", input_mlp);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto p = "layers." + std::to_string(l);
      const auto& L = layers[l];
      add_mlp(p + ".skip", L.skip);
      add_norm(p + ".transformer.attn_norm", L.transformer.attn_norm);
      add(p + ".transformer.wq", L.transformer.wq);
      add(p + ".transformer.wk", L.transformer.wk);
      add(p + ".transformer.wv", L.transformer.wv);
      add_linear(p + ".transformer.out", L.transformer.out);
      add_norm(p + ".transformer.ffn_norm", L.transformer.ffn_norm);
      add_mlp(p + ".transformer.ffn", L.transformer.ffn);
      add(p + ".sca.wq", L.sca.wq);
      add(p + ".sca.wk", L.sca.wk);
      add(p + ".sca.wq_gate", L.sca.wq_gate);
      add(p + ".sca.wk_gate", L.sca.wk_gate);
      add(p + ".sca.w_gate", L.sca.w_gate);
      add_mlp(p + ".sca.message", L.sca.message);
      add_norm(p + ".out_norm", L.out_norm);
    }
    if (config_.decoder == DecoderKind::kMlp) {
      add_mlp("decoder.mlp", mlp_decoder);
    } else {
      out.push_back({"decoder.prompts", pbd.prompts, pbd.prompts.requires_grad()});
      add_linear("decoder.query", pbd.query);
      add_linear("decoder.key", pbd.key);
      add_linear("decoder.value", pbd.value);
      add_norm("decoder.query_norm", pbd.query_norm);
      add_norm("decoder.key_norm", pbd.key_norm);
      add_norm("decoder.value_norm", pbd.value_norm);
      add_linear("decoder.head", pbd.head);
    }
    return out;
  }

  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_tensors())
      if (nt.trainable) out.push_back(nt.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& t : trainable_parameters()) n += t.size();
    return n;
  }

  void zero_grad() const {
    for (auto& nt : named_tensors()) nt.tensor.ptr()->grad.clear();
  }

  /// Deep copy with identical values (gradients are not copied).
  CasperModel clone() const {
    CasperModel copy(config_);
    copy.copy_values_from(*this);
    return copy;
  }

  void copy_values_from(const CasperModel& other) {
    auto dst = named_tensors();
    auto src = other.named_tensors();
    if (dst.size() != src.size()) throw CompatibilityError("model layouts differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
        throw CompatibilityError("model layouts differ at " + dst[i].name);
      }
      auto v = src[i].tensor.value();
      std::copy(v.begin(), v.end(), dst[i].tensor.mutable_value().begin());
    }
  }

  Tensor missing_token;
  Mlp input_mlp;
  std::vector<EncoderLayer> layers;
  PromptDecoder pbd;
  Mlp mlp_decoder;

 private:
  static Tensor gaussian(ad::Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor::from(std::move(shape), std::move(v), true);
  }
  static Tensor uniform_matrix(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> v(in * out);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from({in, out}, std::move(v), true);
  }
  static Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
    return {uniform_matrix(in, out, rng), Tensor::zeros({out}, true)};
  }
  static Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    auto first = make_linear(in, hidden, rng);
    auto second = make_linear(hidden, out, rng);
    return {std::move(first), std::move(second)};
  }
  static Norm make_norm(std::size_t d) {
    return {Tensor::from({d}, std::vector<double>(d, 1.0), true), Tensor::zeros({d}, true)};
  }

  ModelConfig config_;
};

// ---------------------------------------------------------------------------------------------
// Structure helpers

/// Model-ready view of a series: values and mask as [NT x 1] columns, row index i*T + t.
struct SeriesTensors {
  std::size_t n_sensors = 0;
  std::size_t n_steps = 0;
  Tensor values;
  Tensor mask;
};

inline SeriesTensors to_tensors(const SpatioTemporalSeries& s) {
  s.validate();
  const std::size_t rows = s.n_sensors * s.n_steps;
  std::vector<double> x(rows), m(rows);
  for (std::size_t k = 0; k < rows; ++k) {
    m[k] = s.mask[k] ? 1.0 : 0.0;
    x[k] = s.mask[k] ? s.values[k] : 0.0;
  }
  return {s.n_sensors, s.n_steps, Tensor::from({rows, 1}, std::move(x)), Tensor::from({rows, 1}, std::move(m))};
}

/// Query (i, t) attends every (i', t') with A[i][i'] != 0 (the diagonal is always included).
inline PairIndexPtr spatial_pairs(std::span<const double> adjacency, std::size_t n, std::size_t t) {
  std::vector<std::vector<std::uint32_t>> keys(n * t);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint32_t> row;
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && adjacency[i * n + j] == 0.0) continue;
      for (std::size_t r = 0; r < t; ++r) row.push_back(static_cast<std::uint32_t>(j * t + r));
    }
    for (std::size_t s = 0; s < t; ++s) keys[i * t + s] = row;
  }
  return std::make_shared<const PairIndex>(PairIndex::from_lists(n * t, keys));
}

/// Query (i, t) attends every step (i, t') of its own sensor.
inline PairIndexPtr temporal_pairs(std::size_t n, std::size_t t) {
  std::vector<std::vector<std::uint32_t>> keys(n * t);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint32_t> row(t);
    for (std::size_t r = 0; r < t; ++r) row[r] = static_cast<std::uint32_t>(i * t + r);
    for (std::size_t s = 0; s < t; ++s) keys[i * t + s] = row;
  }
  return std::make_shared<const PairIndex>(PairIndex::from_lists(n * t, keys));
}

/// Sinusoidal encoding of the step index, [NT x d].
inline Tensor positional_encoding(std::size_t n, std::size_t t, std::size_t d, double base) {
  std::vector<double> pe(n * t * d);
  for (std::size_t s = 0; s < t; ++s) {
    for (std::size_t c = 0; c < d; ++c) {
      const double freq = std::pow(base, -static_cast<double>(2 * (c / 2)) / static_cast<double>(d));
      const double v = (c % 2 == 0) ? std::sin(static_cast<double>(s) * freq) : std::cos(static_cast<double>(s) * freq);
      for (std::size_t i = 0; i < n; ++i) pe[(i * t + s) * d + c] = v;
    }
  }
  return Tensor::from({n * t, d}, std::move(pe));
}

inline Tensor apply(Graph& g, const Linear& l, const Tensor& x) {
  auto y = ad::matmul(g, x, l.weight);
  return l.bias.defined() ? ad::add(g, y, l.bias) : y;
}

inline Tensor apply(Graph& g, const Mlp& m, const Tensor& x) {
  return apply(g, m.second, ad::gelu(g, apply(g, m.first, x)));
}

inline Tensor apply(Graph& g, const Norm& n, const Tensor& x) { return ad::layer_norm(g, x, n.gain, n.bias); }

// ---------------------------------------------------------------------------------------------
// Encoder

/// Observed-value embedding MLP(X) where M = 1, the missing token m where M = 0.
inline Tensor embed_observations(Graph& g, const Mlp& mlp, const SeriesTensors& s, const CasperModel& model) {
  const auto observed = ad::mul(g, apply(g, mlp, s.values), s.mask);
  const auto missing = ad::mul(g, model.missing_token, ad::affine(g, s.mask, -1.0, 1.0));
  return ad::add(g, observed, missing);
}

/// H0 = MLP(X) . M + m . (1 - M), shape [NT x d].
inline Tensor input_project(Graph& g, const SeriesTensors& s, const CasperModel& model) {
  return embed_observations(g, model.input_mlp, s, model);
}

/// H_prev + MLP_l(X) . M + m . (1 - M); `layer` is 1-based.
inline Tensor skip_project(Graph& g, const Tensor& h_prev, const SeriesTensors& s, const CasperModel& model,
                           std::size_t layer) {
  if (layer < 1 || layer > model.layers.size()) throw std::out_of_range("skip_project: layer out of range");
  return ad::add(g, h_prev, embed_observations(g, model.layers[layer - 1].skip, s, model));
}

/// Pre-norm self-attention and feed-forward over each sensor's own T steps; `layer` is 1-based.
inline Tensor temporal_transformer_layer(Graph& g, const Tensor& h, std::size_t n_sensors, std::size_t n_steps,
                                         const CasperModel& model, std::size_t layer,
                                         const PairIndexPtr& pairs = nullptr) {
  if (layer < 1 || layer > model.layers.size()) throw std::out_of_range("temporal_transformer_layer: layer out of range");
  const auto& tf = model.layers[layer - 1].transformer;
  const std::size_t d = model.config().d_model, heads = model.config().heads;
  const auto tp = pairs ? pairs : temporal_pairs(n_sensors, n_steps);
  const auto y = apply(g, tf.attn_norm, h);
  const auto qk_in = ad::add(g, y, positional_encoding(n_sensors, n_steps, d, model.config().position_base));
  const auto q = ad::matmul(g, qk_in, tf.wq);
  const auto k = ad::matmul(g, qk_in, tf.wk);
  const auto v = ad::matmul(g, y, tf.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const auto weights = ad::segment_softmax(g, ad::pair_dot(g, q, k, tp, heads, scale), tp);
  const auto attended = apply(g, tf.out, ad::attend_keys(g, weights, v, tp));
  const auto h1 = ad::add(g, h, attended);
  return ad::add(g, h1, apply(g, tf.ffn, apply(g, tf.ffn_norm, h1)));
}

/// Per-layer record of the causal attention: one entry per (query point, context point) pair.
struct ScaTrace {
  std::size_t layer = 0;  // 0-based
  std::size_t n_sensors = 0;
  std::size_t n_steps = 0;
  std::size_t heads = 0;
  PairIndexPtr pairs;          // query row i*T+t, key row i'*T+t'
  std::vector<double> alpha;   // [pairs x heads]
  std::vector<double> rho;     // [pairs]; empty when causal gates are disabled
  std::vector<double> beta;    // [pairs]
  std::vector<double> z;       // [queries x heads]

  /// Head-averaged alpha of pair p.
  double alpha_mean(std::size_t p) const {
    double a = 0.0;
    for (std::size_t h = 0; h < heads; ++h) a += alpha[p * heads + h];
    return a / static_cast<double>(heads);
  }
  /// Head-averaged beta * alpha of pair p.
  double gated_mean(std::size_t p) const { return beta[p] * alpha_mean(p); }
  std::size_t query_sensor(std::size_t p) const { return pairs->query[p] / n_steps; }
  std::size_t key_sensor(std::size_t p) const { return pairs->key[p] / n_steps; }
};

struct ScaOutput {
  Tensor out;   // [NT x d]
  Tensor rho;   // [P x 1]; undefined when gates are disabled
  ScaTrace trace;
};

/// Optional overrides for tests and analysis.
struct ScaOptions {
  const std::vector<double>* forced_beta = nullptr;  // replaces sampled/thresholded gates
};

/// Gate probability rho = sigmoid(W_c [W_Qc h_q ; W_Kc h_k]) for a single pair; `layer` is 1-based.
inline double gate_probability(std::span<const double> h_q, std::span<const double> h_k, const CasperModel& model,
                               std::size_t layer) {
  const auto& sca = model.layers.at(layer - 1).sca;
  const std::size_t d = model.config().d_model;
  if (h_q.size() != d || h_k.size() != d) throw DimensionError("gate_probability: embeddings must have size d");
  Graph g(Graph::Mode::kNoGrad);
  const auto q = ad::matmul(g, Tensor::from({1, d}, {h_q.begin(), h_q.end()}), sca.wq_gate);
  const auto k = ad::matmul(g, Tensor::from({1, d}, {h_k.begin(), h_k.end()}), sca.wk_gate);
  const auto logit = ad::add(g, ad::matmul(g, q, ad::slice_rows(g, sca.w_gate, 0, d)),
                             ad::matmul(g, k, ad::slice_rows(g, sca.w_gate, d, 2 * d)));
  return ad::sigmoid(g, logit).item();
}

/// Binary-concrete relaxation of beta ~ Bernoulli(rho) from a gate logit log(rho/(1-rho)).
/// Train mode draws two independent Gumbel variates; infer mode thresholds rho at 0.5.
inline double gumbel_gate_from_logit(double logit, double tau, Rng& rng, Mode mode) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_gate: tau must be > 0");
  if (mode == Mode::kInfer) return ad::detail::sigmoid(logit) > 0.5 ? 1.0 : 0.0;
  const double g1 = rng.gumbel();
  const double g2 = rng.gumbel();
  return ad::detail::sigmoid((logit + g1 - g2) / tau);
}

inline double gumbel_gate(double rho, double tau, Rng& rng, Mode mode) {
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("gumbel_gate: rho must lie in (0, 1)");
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_gate: tau must be > 0");
  if (mode == Mode::kInfer) return rho > 0.5 ? 1.0 : 0.0;
  return gumbel_gate_from_logit(std::log(rho) - std::log1p(-rho), tau, rng, mode);
}

namespace detail {

/// Raw per-pair correlation scores [P x heads] of an SCA layer.
/// The step-index encoding is added to both sides so that scores can align query and context
/// times (the embeddings themselves carry no position).
inline Tensor sca_raw_scores(Graph& g, const Tensor& h_in, const ScaBlock& sca, const PairIndexPtr& pairs,
                             std::size_t n_sensors, std::size_t n_steps, std::size_t d, std::size_t heads, double position_base) {
  const auto x = ad::add(g, h_in, positional_encoding(n_sensors, n_steps, d, position_base));
  const auto q = ad::matmul(g, x, sca.wq);
  const auto k = ad::matmul(g, x, sca.wk);
  return ad::pair_dot(g, q, k, pairs, heads, 1.0 / std::sqrt(static_cast<double>(d / heads)));
}

}  // namespace detail

/// Correlation weights alpha of one query point (i, t) over its neighbourhood N(i) x [0, T),
/// in pair order, [contexts x heads]. `layer` is 1-based.
struct QueryScores {
  std::vector<std::size_t> context_rows;  // i'*T + t'
  std::vector<double> alpha;              // [contexts x heads]
};

inline QueryScores sca_scores(const Tensor& h_in, std::span<const double> adjacency, std::size_t n_sensors,
                              std::size_t n_steps, const CasperModel& model, std::size_t layer, std::size_t sensor,
                              std::size_t step) {
  const auto& sca = model.layers.at(layer - 1).sca;
  const std::size_t d = model.config().d_model, heads = model.config().heads;
  const auto pairs = spatial_pairs(adjacency, n_sensors, n_steps);
  Graph g(Graph::Mode::kNoGrad);
  const auto alpha = ad::segment_softmax(g, detail::sca_raw_scores(g, h_in, sca, pairs, n_sensors, n_steps, d, heads, model.config().position_base), pairs);
  QueryScores res;
  const std::size_t q = sensor * n_steps + step;
  for (std::size_t p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) {
    res.context_rows.push_back(pairs->key[p]);
    for (std::size_t h = 0; h < heads; ++h) res.alpha.push_back(alpha.value()[p * heads + h]);
  }
  return res;
}

/// Spatiotemporal causal attention:
///   h_out(i,t) = (1/Z) sum_{i' in N(i)} sum_{t'} beta * alpha * v,  v = MLP([h(i,t) ; h(i',t')]).
/// `layer` is 1-based; `rng` is required in train mode when gates are enabled.
inline ScaOutput sca_forward(Graph& g, const Tensor& h_in, const PairIndexPtr& pairs, std::size_t n_sensors,
                             std::size_t n_steps, const CasperModel& model, std::size_t layer, Mode mode, Rng* rng,
                             const ScaOptions& options = {}) {
  const auto& sca = model.layers.at(layer - 1).sca;
  const auto& cfg = model.config();
  const std::size_t d = cfg.d_model, heads = cfg.heads, n_pairs = pairs->size();

  const auto scores = detail::sca_raw_scores(g, h_in, sca, pairs, n_sensors, n_steps, d, heads, cfg.position_base);

  // Messages: the first linear map of the MLP over [h_q ; h_k] splits into query and key halves.
  const auto& msg = sca.message;
  const auto msg_q = ad::matmul(g, h_in, ad::slice_rows(g, msg.first.weight, 0, d));
  const auto msg_k = ad::add(g, ad::matmul(g, h_in, ad::slice_rows(g, msg.first.weight, d, 2 * d)), msg.first.bias);
  const auto hidden = ad::gelu(g, ad::add(g, ad::gather_rows(g, msg_q, pairs, ad::PairSide::kQuery),
                                          ad::gather_rows(g, msg_k, pairs, ad::PairSide::kKey)));
  // The second linear map is applied after pooling: sum_p w_p (g_p W2 + b2) = (sum_p w_p [g_p, 1]) [W2; b2].
  const auto hidden_aug = ad::concat_cols(g, hidden, Tensor::from({n_pairs, 1}, std::vector<double>(n_pairs, 1.0)));
  const auto w2_aug = ad::concat_rows(g, msg.second.weight, ad::reshape(g, msg.second.bias, {1, d}));

  ScaOutput res;
  Tensor beta;
  if (cfg.causal_gates) {
    const auto gate_q = ad::matmul(g, ad::matmul(g, h_in, sca.wq_gate), ad::slice_rows(g, sca.w_gate, 0, d));
    const auto gate_k = ad::matmul(g, ad::matmul(g, h_in, sca.wk_gate), ad::slice_rows(g, sca.w_gate, d, 2 * d));
    const auto logit = ad::add(g, ad::gather_rows(g, gate_q, pairs, ad::PairSide::kQuery),
                               ad::gather_rows(g, gate_k, pairs, ad::PairSide::kKey));
    res.rho = ad::sigmoid(g, logit);
    if (options.forced_beta) {
      beta = Tensor::from({n_pairs, 1}, *options.forced_beta);
    } else if (mode == Mode::kInfer) {
      std::vector<double> hard(n_pairs);
      auto rv = res.rho.value();
      for (std::size_t p = 0; p < n_pairs; ++p) hard[p] = rv[p] > 0.5 ? 1.0 : 0.0;
      beta = Tensor::from({n_pairs, 1}, std::move(hard));
    } else {
      if (!rng) throw std::invalid_argument("sca_forward: train mode needs an rng");
      std::vector<double> noise(n_pairs);
      for (auto& e : noise) {
        const double g1 = rng->gumbel();
        const double g2 = rng->gumbel();
        e = g1 - g2;
      }
      const auto perturbed = ad::add(g, logit, Tensor::from({n_pairs, 1}, std::move(noise)));
      beta = ad::sigmoid(g, ad::affine(g, perturbed, 1.0 / cfg.tau));
    }
  } else {
    beta = options.forced_beta ? Tensor::from({n_pairs, 1}, *options.forced_beta)
                               : Tensor::from({n_pairs, 1}, std::vector<double>(n_pairs, 1.0));
  }
  if (beta.size() != n_pairs) throw DimensionError("sca_forward: forced gates must have one entry per pair");

  auto attn = ad::gated_attention_pooled(g, scores, beta, hidden_aug, pairs);
  res.out = ad::select_head_blocks(g, ad::matmul(g, attn.out, w2_aug), heads);
  auto& tr = res.trace;
  tr.layer = layer - 1;
  tr.n_sensors = n_sensors;
  tr.n_steps = n_steps;
  tr.heads = heads;
  tr.pairs = pairs;
  tr.alpha = std::move(attn.alpha);
  tr.z = std::move(attn.z);
  tr.beta.assign(beta.value().begin(), beta.value().end());
  if (res.rho.defined()) tr.rho.assign(res.rho.value().begin(), res.rho.value().end());
  return res;
}

struct EncoderOutput {
  Tensor h;  // [NT x d]
  std::vector<ScaTrace> traces;
  std::vector<Tensor> rho;  // one [P x 1] tensor per layer when gates are enabled
};

/// Input project followed by L layers of skip project, transformer, SCA and add & norm.
inline EncoderOutput encoder_forward(Graph& g, const SpatioTemporalSeries& series, const CasperModel& model, Mode mode,
                                     Rng* rng, const ScaOptions& options = {}) {
  const auto s = to_tensors(series);
  const auto sp = spatial_pairs(series.adjacency, series.n_sensors, series.n_steps);
  const auto tp = temporal_pairs(series.n_sensors, series.n_steps);
  EncoderOutput res;
  auto h = input_project(g, s, model);
  for (std::size_t l = 1; l <= model.layers.size(); ++l) {
    const auto skip = skip_project(g, h, s, model, l);
    const auto h_in = temporal_transformer_layer(g, skip, series.n_sensors, series.n_steps, model, l, tp);
    auto sca = sca_forward(g, h_in, sp, series.n_sensors, series.n_steps, model, l, mode, rng, options);
    h = apply(g, model.layers[l - 1].out_norm, ad::add(g, h_in, sca.out));
    if (sca.rho.defined()) res.rho.push_back(sca.rho);
    res.traces.push_back(std::move(sca.trace));
  }
  res.h = h;
  return res;
}

struct DecoderOutput {
  Tensor yhat;                     // [NT x 1]
  std::vector<double> attention;   // [NT*N_P x heads] prompt attention; empty for the MLP decoder
  PairIndexPtr pairs;
};

/// Prompt based decoder: each point's projected embedding attends over projected prompts; the
/// attended vector is added to the embedding (residual) and mapped to a scalar by a linear head.
inline DecoderOutput pbd_forward(Graph& g, const Tensor& h, const CasperModel& model) {
  const auto& cfg = model.config();
  DecoderOutput res;
  if (cfg.decoder == DecoderKind::kMlp) {
    res.yhat = apply(g, model.mlp_decoder, h);
    return res;
  }
  const auto& pbd = model.pbd;
  const std::size_t rows = h.dim(0), n_prompts = pbd.prompts.dim(0), heads = cfg.heads;
  if (n_prompts < 1) throw ConfigError("pbd_forward: prompt pool is empty");
  res.pairs = std::make_shared<const PairIndex>(PairIndex::dense(rows, n_prompts));
  const auto q = apply(g, pbd.query_norm, apply(g, pbd.query, h));
  const auto k = apply(g, pbd.key_norm, apply(g, pbd.key, pbd.prompts));
  const auto v = apply(g, pbd.value_norm, apply(g, pbd.value, pbd.prompts));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / heads));
  const auto weights = ad::segment_softmax(g, ad::pair_dot(g, q, k, res.pairs, heads, scale), res.pairs);
  res.attention.assign(weights.value().begin(), weights.value().end());
  res.yhat = apply(g, pbd.head, ad::add(g, h, ad::attend_keys(g, weights, v, res.pairs)));
  return res;
}

struct ForwardResult {
  Tensor yhat;  // [N x T]
  std::vector<ScaTrace> traces;
  std::vector<Tensor> rho;
  DecoderOutput decoder;
};

inline ForwardResult model_forward(Graph& g, const SpatioTemporalSeries& series, const CasperModel& model, Mode mode,
                                   Rng* rng, const ScaOptions& options = {}) {
  auto enc = encoder_forward(g, series, model, mode, rng, options);
  ForwardResult res;
  res.decoder = pbd_forward(g, enc.h, model);
  res.yhat = ad::reshape(g, res.decoder.yhat, {series.n_sensors, series.n_steps});
  res.traces = std::move(enc.traces);
  res.rho = std::move(enc.rho);
  return res;
}

/// Inference-mode predictions without building a gradient tape, [N x T] row-major.
inline std::vector<double> predict(const SpatioTemporalSeries& series, const CasperModel& model) {
  Graph g(Graph::Mode::kNoGrad);
  auto res = model_forward(g, series, model, Mode::kInfer, nullptr);
  return {res.yhat.value().begin(), res.yhat.value().end()};
}

/// Replaces the prompt pool with mean-pooled encoder embeddings of randomly chosen windows
/// (the "prompts -> sampling" approximation). Only valid for DecoderKind::kSampledPrompts.
inline void resample_prompts(CasperModel& model, std::span<const SpatioTemporalSeries> windows, Rng& rng) {
  if (model.config().decoder != DecoderKind::kSampledPrompts) return;
  if (windows.empty()) throw std::invalid_argument("resample_prompts: no windows");
  const std::size_t d = model.config().d_model;
  auto pool = model.pbd.prompts.mutable_value();
  for (std::size_t n = 0; n < model.pbd.prompts.dim(0); ++n) {
    const auto& w = windows[rng.below(windows.size())];
    Graph g(Graph::Mode::kNoGrad);
    const auto enc = encoder_forward(g, w, model, Mode::kInfer, nullptr);
    const auto hv = enc.h.value();
    const std::size_t rows = enc.h.dim(0);
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += hv[r * d + c];
      pool[n * d + c] = acc / static_cast<double>(rows);
    }
  }
}

}  // namespace casper
