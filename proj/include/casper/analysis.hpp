#pragma once

// Metrics, causal-edge extraction, gate diagnostics, simple baselines, attention-map export and
// the per-component timing benchmark.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casper/data.hpp"
#include "casper/error.hpp"
#include "casper/model.hpp"
#include "casper/training.hpp"

namespace casper {

struct Metrics {
  double mae = 0.0;
  double mse = 0.0;
  std::size_t count = 0;
};

/// MAE and MSE over positions with eval_mask = 1.
inline Metrics evaluate(std::span<const double> truth, std::span<const double> predicted,
                        std::span<const std::uint8_t> eval_mask) {
  if (truth.size() != predicted.size() || truth.size() != eval_mask.size())
    throw DimensionError("evaluate: truth, predictions and mask differ in size");
  Metrics m;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (!eval_mask[k]) continue;
    const double e = truth[k] - predicted[k];
    m.mae += std::abs(e);
    m.mse += e * e;
    ++m.count;
  }
  if (m.count == 0) throw EvaluationError("evaluate: evaluation mask is empty");
  m.mae /= static_cast<double>(m.count);
  m.mse /= static_cast<double>(m.count);
  return m;
}

// ---------------------------------------------------------------------------------------------
// Baselines

enum class Baseline { kMean, kLinear, kKnn };

inline std::string to_string(Baseline b) {
  switch (b) {
    case Baseline::kMean: return "mean";
    case Baseline::kLinear: return "linear";
    case Baseline::kKnn: return "knn";
  }
  return "?";
}

inline Baseline baseline_from_string(const std::string& s) {
  if (s == "mean") return Baseline::kMean;
  if (s == "linear") return Baseline::kLinear;
  if (s == "knn") return Baseline::kKnn;
  throw ConfigError("baseline: unknown method '" + s + "' (expected mean, linear or knn)");
}

/// Imputes every position of `series` from points that are observed and not in `eval_mask`
/// (pass an empty span to use the series mask alone). Observed inputs are returned unchanged.
inline std::vector<double> baseline_impute(const SpatioTemporalSeries& series, std::span<const std::uint8_t> eval_mask,
                                           Baseline method, std::size_t k = 5) {
  const std::size_t n = series.n_sensors, t_len = series.n_steps;
  if (!eval_mask.empty() && eval_mask.size() != n * t_len) throw DimensionError("baseline_impute: eval mask shape");
  std::vector<std::uint8_t> seen(n * t_len);
  for (std::size_t q = 0; q < seen.size(); ++q) seen[q] = series.mask[q] && (eval_mask.empty() || !eval_mask[q]);

  double global_sum = 0.0;
  std::size_t global_count = 0;
  std::vector<double> sensor_mean(n, 0.0);
  std::vector<std::size_t> sensor_count(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!seen[i * t_len + t]) continue;
      sensor_mean[i] += series.values[i * t_len + t];
      ++sensor_count[i];
    }
    global_sum += sensor_mean[i];
    global_count += sensor_count[i];
  }
  const double global_mean = global_count ? global_sum / static_cast<double>(global_count) : 0.0;
  for (std::size_t i = 0; i < n; ++i)
    sensor_mean[i] = sensor_count[i] ? sensor_mean[i] / static_cast<double>(sensor_count[i]) : global_mean;

  std::vector<double> out(n * t_len);
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = seen[q] ? series.values[q] : sensor_mean[q / t_len];
  if (method == Baseline::kMean) return out;

  if (method == Baseline::kLinear) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!sensor_count[i]) continue;
      const std::size_t row = i * t_len;
      std::optional<std::size_t> prev;
      for (std::size_t t = 0; t < t_len; ++t) {
        if (!seen[row + t]) continue;
        const double v = series.values[row + t];
        if (!prev) {
          for (std::size_t s = 0; s < t; ++s) out[row + s] = v;
        } else {
          const double a = series.values[row + *prev];
          const double span = static_cast<double>(t - *prev);
          for (std::size_t s = *prev + 1; s < t; ++s) out[row + s] = a + (v - a) * static_cast<double>(s - *prev) / span;
        }
        prev = t;
      }
      for (std::size_t s = *prev + 1; s < t_len; ++s) out[row + s] = series.values[row + *prev];
    }
    return out;
  }

  // k nearest sensors by adjacency weight, averaged where observed at the same step.
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> nb;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && series.adjacency[i * n + j] > 0.0) nb.push_back(j);
    std::stable_sort(nb.begin(), nb.end(), [&](std::size_t a, std::size_t b) {
      return series.adjacency[i * n + a] > series.adjacency[i * n + b];
    });
    if (nb.size() > k) nb.resize(k);
    for (std::size_t t = 0; t < t_len; ++t) {
      if (seen[i * t_len + t]) continue;
      double s = 0.0;
      std::size_t c = 0;
      for (auto j : nb) {
        if (!seen[j * t_len + t]) continue;
        s += series.values[j * t_len + t];
        ++c;
      }
      if (c) out[i * t_len + t] = s / static_cast<double>(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Gate diagnostics and causal edges

struct GateStats {
  std::vector<std::size_t> histogram;  // 20 equal bins over [0, 1]
  double frac_rho_extreme = 0.0;
  std::size_t count = 0;
};

inline GateStats gate_stats_of(std::span<const double> rho, double delta, std::size_t bins = 20) {
  GateStats s;
  s.histogram.assign(bins, 0);
  for (double r : rho) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(r * static_cast<double>(bins)));
    ++s.histogram[b];
  }
  s.count = rho.size();
  s.frac_rho_extreme = fraction_extreme(rho, delta);
  return s;
}

/// Infer-mode rho over every window and layer. Models without gates report no values.
inline GateStats gate_convergence_stats(const CasperModel& model, std::span<const SpatioTemporalSeries> windows,
                                        double delta = 0.05) {
  std::vector<double> all;
  for (auto& w : windows) {
    Graph g(Graph::Mode::kNoGrad);
    auto res = encoder_forward(g, w, model, Mode::kInfer, nullptr);
    for (auto& tr : res.traces) all.insert(all.end(), tr.rho.begin(), tr.rho.end());
  }
  return gate_stats_of(all, delta);
}

enum class EdgeAggregation { kMean, kMax };

struct EdgeScore {
  std::size_t source = 0;  // context sensor
  std::size_t target = 0;  // query sensor
  double score = 0.0;      // aggregated beta * alpha per (t, t') pair
  double threshold = 0.0;
  double mean_rho = 0.0;   // NaN when gates are disabled
  double open_fraction = 0.0;
  bool extracted = false;
};

struct CausalReport {
  std::vector<EdgeScore> edges;  // every directed pair of A, including self pairs
  std::vector<std::pair<std::size_t, std::size_t>> extracted_edges;  // off-diagonal only
  GateStats gates;
  EdgeAggregation aggregation = EdgeAggregation::kMean;
  std::optional<double> precision, recall, f1;
};

struct EdgeOptions {
  EdgeAggregation aggregation = EdgeAggregation::kMean;
  std::optional<double> threshold;  // default: 1 / (|N(i)| T), the uniform-attention level
  double delta = 0.05;
};

/// Aggregates infer-mode beta * alpha (head-averaged) from context sensor j to query sensor i over
/// all (t, t') pairs, layers and windows, thresholds it, and scores the off-diagonal edges against
/// `truth` restricted to pairs present in A.
inline CausalReport extract_causal_edges(const CasperModel& model, std::span<const SpatioTemporalSeries> windows,
                                         const EdgeOptions& options = {}, const PlantedWorld* truth = nullptr) {
  if (windows.empty()) throw EvaluationError("extract_causal_edges: no windows");
  const std::size_t n = windows.front().n_sensors;
  std::vector<double> sum(n * n, 0.0), peak(n * n, 0.0), rho_sum(n * n, 0.0), open(n * n, 0.0);
  std::vector<std::size_t> count(n * n, 0);
  std::vector<double> all_rho;
  std::size_t traces = 0, steps = 0;
  for (auto& w : windows) {
    if (w.n_sensors != n) throw DimensionError("extract_causal_edges: windows differ in sensor count");
    Graph g(Graph::Mode::kNoGrad);
    auto res = encoder_forward(g, w, model, Mode::kInfer, nullptr);
    steps = w.n_steps;
    for (auto& tr : res.traces) {
      ++traces;
      for (std::size_t p = 0; p < tr.pairs->size(); ++p) {
        const std::size_t e = tr.key_sensor(p) * n + tr.query_sensor(p);
        const double ba = tr.gated_mean(p);
        sum[e] += ba;
        peak[e] = std::max(peak[e], ba);
        open[e] += tr.beta[p];
        if (!tr.rho.empty()) rho_sum[e] += tr.rho[p];
        ++count[e];
      }
      all_rho.insert(all_rho.end(), tr.rho.begin(), tr.rho.end());
    }
  }
  if (traces == 0) throw EvaluationError("extract_causal_edges: the model produced no attention traces");

  CausalReport rep;
  rep.aggregation = options.aggregation;
  rep.gates = gate_stats_of(all_rho, options.delta);
  const auto& adj = windows.front().adjacency;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t neighbours = 0;
    for (std::size_t j = 0; j < n; ++j) neighbours += j == i || adj[i * n + j] != 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && adj[i * n + j] == 0.0) continue;
      const std::size_t e = j * n + i;
      EdgeScore s;
      s.source = j;
      s.target = i;
      const double c = count[e] ? static_cast<double>(count[e]) : 1.0;
      s.score = options.aggregation == EdgeAggregation::kMean ? sum[e] / c : peak[e];
      s.threshold = options.threshold.value_or(1.0 / static_cast<double>(neighbours * steps));
      s.mean_rho = all_rho.empty() ? std::nan("") : rho_sum[e] / c;
      s.open_fraction = open[e] / c;
      s.extracted = j != i && s.score > s.threshold;
      if (s.extracted) rep.extracted_edges.emplace_back(j, i);
      if (truth && j != i) {
        const bool real = truth->causal(j, i);
        tp += s.extracted && real;
        fp += s.extracted && !real;
        fn += !s.extracted && real;
      }
      rep.edges.push_back(s);
    }
  }
  if (truth) {
    if (truth->n_sensors != n) throw CompatibilityError("extract_causal_edges: truth has a different sensor count");
    rep.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    rep.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    rep.f1 = *rep.precision + *rep.recall > 0.0 ? 2.0 * *rep.precision * *rep.recall / (*rep.precision + *rep.recall)
                                                : 0.0;
  }
  return rep;
}

inline nlohmann::json report_json(const CausalReport& r) {
  nlohmann::json edges = nlohmann::json::array();
  for (auto& e : r.edges) {
    nlohmann::json j{{"source", e.source},       {"target", e.target},       {"score", e.score},
                     {"threshold", e.threshold}, {"open_fraction", e.open_fraction}, {"extracted", e.extracted}};
    if (!std::isnan(e.mean_rho)) j["mean_rho"] = e.mean_rho;
    edges.push_back(j);
  }
  nlohmann::json extracted = nlohmann::json::array();
  for (auto [s, t] : r.extracted_edges) extracted.push_back({s, t});
  nlohmann::json j{{"format_version", 1},
                   {"aggregation", r.aggregation == EdgeAggregation::kMean ? "mean" : "max"},
                   {"edges", edges},
                   {"extracted_edges", extracted},
                   {"rho_histogram", r.gates.histogram},
                   {"rho_count", r.gates.count},
                   {"frac_rho_extreme", r.gates.frac_rho_extreme}};
  if (r.f1) {
    j["precision"] = *r.precision;
    j["recall"] = *r.recall;
    j["f1"] = *r.f1;
  }
  return j;
}

/// Gini coefficient of a nonnegative vector: 0 for uniform mass, (n-1)/n when one entry holds all.
inline double gini(std::vector<double> x) {
  if (x.empty()) return 0.0;
  std::sort(x.begin(), x.end());
  double total = 0.0, weighted = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    total += x[k];
    weighted += (2.0 * static_cast<double>(k + 1) - n - 1.0) * x[k];
  }
  return total > 0.0 ? weighted / (n * total) : 0.0;
}

/// Mean Gini sparsity of per-query attention maps, beta * alpha when `gated` and alpha otherwise.
inline double attention_sparsity(std::span<const ScaTrace> traces, bool gated) {
  double s = 0.0;
  std::size_t maps = 0;
  for (auto& tr : traces) {
    const auto& pi = *tr.pairs;
    for (std::size_t q = 0; q < pi.n_queries; ++q) {
      std::vector<double> m;
      for (std::size_t p = pi.offsets[q]; p < pi.offsets[q + 1]; ++p) m.push_back(gated ? tr.gated_mean(p) : tr.alpha_mean(p));
      s += gini(std::move(m));
      ++maps;
    }
  }
  return maps ? s / static_cast<double>(maps) : 0.0;
}

// ---------------------------------------------------------------------------------------------
// Attention maps

struct QueryPoint {
  std::size_t sensor = 0;
  std::size_t step = 0;
};

/// Writes one CSV per (layer, query) with rows (neighbor, step, alpha, beta, beta_alpha), alpha
/// averaged over heads, plus index.json. Queries outside the traced window are listed under "errors".
inline nlohmann::json export_attention_maps(std::span<const ScaTrace> traces, std::span<const QueryPoint> queries,
                                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index{{"format_version", 1}, {"maps", nlohmann::json::array()}, {"errors", nlohmann::json::array()}};
  for (auto& qp : queries) {
    if (traces.empty() || qp.sensor >= traces.front().n_sensors || qp.step >= traces.front().n_steps) {
      index["errors"].push_back({{"sensor", qp.sensor}, {"step", qp.step}, {"error", "query outside the traced window"}});
      continue;
    }
    for (auto& tr : traces) {
      const std::size_t q = qp.sensor * tr.n_steps + qp.step;
      const auto name = "attention_l" + std::to_string(tr.layer) + "_s" + std::to_string(qp.sensor) + "_t" +
                        std::to_string(qp.step) + ".csv";
      std::ofstream f(dir / name);
      if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
      f << "neighbor,step,alpha,beta,beta_alpha\n";
      for (std::size_t p = tr.pairs->offsets[q]; p < tr.pairs->offsets[q + 1]; ++p) {
        const std::size_t key = tr.pairs->key[p];
        f << key / tr.n_steps << ',' << key % tr.n_steps << ',' << detail::format_number(tr.alpha_mean(p)) << ','
          << detail::format_number(tr.beta[p]) << ',' << detail::format_number(tr.gated_mean(p)) << '\n';
      }
      index["maps"].push_back({{"layer", tr.layer}, {"sensor", qp.sensor}, {"step", qp.step}, {"file", name}});
    }
  }
  std::ofstream f(dir / "index.json");
  f << index.dump(2) << '\n';
  return index;
}

// ---------------------------------------------------------------------------------------------
// Timing benchmark

struct BenchmarkSize {
  std::size_t n_sensors = 8;
  std::size_t n_edges = 16;  // directed off-diagonal nonzeros of A
  std::size_t n_steps = 24;
  std::size_t n_prompts = 16;
};

struct BenchmarkSpec {
  std::size_t d_model = 16;
  std::size_t heads = 2;
  std::size_t reps = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  std::vector<BenchmarkSize> sca, transformer, pbd;
};

inline void from_json(const nlohmann::json& j, BenchmarkSize& s) {
  s.n_sensors = j.at("N").get<std::size_t>();
  s.n_edges = j.value("E", std::size_t{0});
  s.n_steps = j.at("T").get<std::size_t>();
  s.n_prompts = j.value("N_P", std::size_t{16});
}

inline void from_json(const nlohmann::json& j, BenchmarkSpec& s) {
  s.d_model = j.value("d_model", s.d_model);
  s.heads = j.value("heads", s.heads);
  s.reps = j.value("reps", s.reps);
  s.warmup = j.value("warmup", s.warmup);
  s.seed = j.value("seed", s.seed);
  s.sca = j.value("sca", std::vector<BenchmarkSize>{});
  s.transformer = j.value("transformer", std::vector<BenchmarkSize>{});
  s.pbd = j.value("pbd", std::vector<BenchmarkSize>{});
  if (s.reps < 5) throw ConfigError("benchmark: reps must be >= 5");
  for (auto* list : {&s.sca, &s.transformer, &s.pbd}) {
    for (auto& z : *list) {
      if (z.n_sensors < 1 || z.n_steps < 1 || z.n_prompts < 1) throw ConfigError("benchmark: sizes must be positive");
      if (z.n_edges > z.n_sensors * (z.n_sensors - 1)) throw ConfigError("benchmark: E exceeds N (N - 1)");
    }
  }
}

struct BenchmarkRow {
  std::string component;
  BenchmarkSize size;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::size_t reps = 0;
};

struct BenchmarkResult {
  std::vector<BenchmarkRow> rows;
  double sca_slope = std::nan("");          // log time vs log E
  double transformer_slope = std::nan("");  // log time vs log T
  double pbd_slope = std::nan("");          // log time vs log N_P
};

inline double loglog_slope(const std::vector<std::pair<double, double>>& xy) {
  if (xy.size() < 2) return std::nan("");
  double mx = 0.0, my = 0.0;
  for (auto [x, y] : xy) {
    mx += std::log(x);
    my += std::log(y);
  }
  mx /= static_cast<double>(xy.size());
  my /= static_cast<double>(xy.size());
  double sxy = 0.0, sxx = 0.0;
  for (auto [x, y] : xy) {
    sxy += (std::log(x) - mx) * (std::log(y) - my);
    sxx += (std::log(x) - mx) * (std::log(x) - mx);
  }
  return sxx > 0.0 ? sxy / sxx : std::nan("");
}

namespace detail {

inline std::vector<double> random_adjacency(std::size_t n, std::size_t edges, Rng& rng) {
  std::vector<double> a(n * n, 0.0);
  std::vector<std::size_t> cells;
  for (std::size_t i = 0; i < n; ++i) {
    a[i * n + i] = 1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) cells.push_back(i * n + j);
  }
  for (std::size_t k = 0; k < edges; ++k) {
    const auto pick = k + rng.below(cells.size() - k);
    std::swap(cells[k], cells[pick]);
    a[cells[k]] = 1.0;
  }
  return a;
}

inline Tensor random_embeddings(std::size_t rows, std::size_t d, Rng& rng) {
  std::vector<double> v(rows * d);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({rows, d}, std::move(v));
}

template <typename F>
std::pair<double, double> time_ms(F&& f, std::size_t warmup, std::size_t reps) {
  for (std::size_t r = 0; r < warmup; ++r) f();
  std::vector<double> ms;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  double var = 0.0;
  for (double m : ms) var += (m - mean) * (m - mean);
  return {mean, ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0};
}

}  // namespace detail

/// Times the infer-mode forward pass of SCA, the temporal transformer layer and the PBD separately
/// on random inputs. Warm-up repetitions are excluded.
inline BenchmarkResult scaling_benchmark(const BenchmarkSpec& spec) {
  if (spec.reps < 5) throw ConfigError("benchmark: reps must be >= 5");
  BenchmarkResult out;
  Rng rng(spec.seed);
  auto model_for = [&](std::size_t n_prompts) {
    ModelConfig mc;
    mc.n_layers = 1;
    mc.d_model = spec.d_model;
    mc.heads = spec.heads;
    mc.ffn_hidden = 2 * spec.d_model;
    mc.n_prompts = n_prompts;
    mc.seed = spec.seed;
    return CasperModel(mc);
  };
  std::vector<std::pair<double, double>> sca_xy, tf_xy, pbd_xy;
  for (auto& z : spec.sca) {
    const auto model = model_for(z.n_prompts);
    const auto adj = detail::random_adjacency(z.n_sensors, z.n_edges, rng);
    const auto pairs = spatial_pairs(adj, z.n_sensors, z.n_steps);
    const auto h = detail::random_embeddings(z.n_sensors * z.n_steps, spec.d_model, rng);
    auto [m, s] = detail::time_ms([&] {
      Graph g(Graph::Mode::kNoGrad);
      sca_forward(g, h, pairs, z.n_sensors, z.n_steps, model, 1, Mode::kInfer, nullptr);
    }, spec.warmup, spec.reps);
    out.rows.push_back({"sca", z, m, s, spec.reps});
    sca_xy.emplace_back(static_cast<double>(std::max<std::size_t>(z.n_edges, 1)), m);
  }
  for (auto& z : spec.transformer) {
    const auto model = model_for(z.n_prompts);
    const auto pairs = temporal_pairs(z.n_sensors, z.n_steps);
    const auto h = detail::random_embeddings(z.n_sensors * z.n_steps, spec.d_model, rng);
    auto [m, s] = detail::time_ms([&] {
      Graph g(Graph::Mode::kNoGrad);
      temporal_transformer_layer(g, h, z.n_sensors, z.n_steps, model, 1, pairs);
    }, spec.warmup, spec.reps);
    out.rows.push_back({"transformer", z, m, s, spec.reps});
    tf_xy.emplace_back(static_cast<double>(z.n_steps), m);
  }
  for (auto& z : spec.pbd) {
    const auto model = model_for(z.n_prompts);
    const auto h = detail::random_embeddings(z.n_sensors * z.n_steps, spec.d_model, rng);
    auto [m, s] = detail::time_ms([&] {
      Graph g(Graph::Mode::kNoGrad);
      pbd_forward(g, h, model);
    }, spec.warmup, spec.reps);
    out.rows.push_back({"pbd", z, m, s, spec.reps});
    pbd_xy.emplace_back(static_cast<double>(z.n_prompts), m);
  }
  out.sca_slope = loglog_slope(sca_xy);
  out.transformer_slope = loglog_slope(tf_xy);
  out.pbd_slope = loglog_slope(pbd_xy);
  return out;
}

inline std::string benchmark_csv(const BenchmarkResult& r) {
  std::string s = "component,N,E,T,N_P,mean_ms,std_ms,reps\n";
  for (auto& row : r.rows) {
    s += row.component + ',' + std::to_string(row.size.n_sensors) + ',' + std::to_string(row.size.n_edges) + ',' +
         std::to_string(row.size.n_steps) + ',' + std::to_string(row.size.n_prompts) + ',' +
         detail::format_number(row.mean_ms) + ',' + detail::format_number(row.std_ms) + ',' + std::to_string(row.reps) +
         '\n';
  }
  return s;
}

}  // namespace casper
