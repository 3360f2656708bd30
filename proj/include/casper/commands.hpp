#pragma once

// Command implementations behind the casper CLI. Each command writes its artifacts and a
// manifest.json into the output directory and returns the manifest. Errors propagate as the typed
// exceptions of error.hpp; exit_code_for() maps them onto process exit codes.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casper/analysis.hpp"
#include "casper/checkpoint.hpp"
#include "casper/data.hpp"
#include "casper/error.hpp"
#include "casper/model.hpp"
#include "casper/training.hpp"

namespace casper::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kCompatibility = 4 };

/// Runs `body` and converts exceptions into an exit code, printing the message to `err`.
template <class F>
int exit_code_for(F&& body, std::ostream& err = std::cerr) {
  try {
    body();
    return kOk;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDivergence;
  } catch (const CompatibilityError& e) {
    err << "error: " << e.what() << '\n';
    return kCompatibility;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kCompatibility;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

// ---------------------------------------------------------------------------------------------
// Helpers

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Parses a config object, turning JSON type errors into field-level config errors.
template <class T>
T config_from(const json& j, const std::string& what) {
  try {
    auto c = j.get<T>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

struct Manifest {
  json doc;
  fs::path dir;

  Manifest(std::string command, fs::path out) : dir(std::move(out)) {
    fs::create_directories(dir);
    doc = {{"format_version", 1},          {"command", std::move(command)},
           {"tool_version", kToolVersion}, {"config_paths", json::object()},
           {"config", json::object()},     {"artifacts", json::object()},
           {"started_at", utc_now()}};
  }
  void artifact(const std::string& key, const std::string& file) { doc["artifacts"][key] = file; }
  json finish() {
    doc["finished_at"] = utc_now();
    write_json(dir / "manifest.json", doc);
    return doc;
  }
};

/// values.csv + adjacency.csv (+ mask.csv when present).
inline SpatioTemporalSeries load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "values.csv")) throw ConfigError("dataset " + dir.string() + " has no values.csv");
  const auto mask = dir / "mask.csv";
  return load_csv(dir / "values.csv", dir / "adjacency.csv", fs::exists(mask) ? mask : fs::path{});
}

/// Z-scores a series with existing statistics; unobserved positions stay 0.
inline SpatioTemporalSeries normalize_with(const SpatioTemporalSeries& s, const NormalizationStats& stats) {
  if (stats.mean.size() != s.n_sensors)
    throw CompatibilityError("checkpoint was trained on " + std::to_string(stats.mean.size()) + " sensors, data has " +
                             std::to_string(s.n_sensors));
  SpatioTemporalSeries out = s;
  out.values = normalize_values(s.values, s.n_steps, stats);
  for (std::size_t k = 0; k < out.values.size(); ++k)
    if (!s.mask[k]) out.values[k] = 0.0;
  return out;
}

inline SpatioTemporalSeries slice_series(const SpatioTemporalSeries& s, std::size_t start, std::size_t len) {
  SpatioTemporalSeries w = s;
  w.n_steps = len;
  w.values = slice_steps(s.values, s.n_steps, start, len);
  w.mask = slice_steps(s.mask, s.n_steps, start, len);
  return w;
}

/// Window starts covering [0, T): consecutive windows of `len`, the last aligned to the end.
inline std::vector<std::size_t> covering_starts(std::size_t n_steps, std::size_t len) {
  if (len >= n_steps) return {0};
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + len <= n_steps; s += len) starts.push_back(s);
  if (starts.back() + len < n_steps) starts.push_back(n_steps - len);
  return starts;
}

inline std::vector<SpatioTemporalSeries> covering_windows(const SpatioTemporalSeries& s, std::size_t len) {
  std::vector<SpatioTemporalSeries> out;
  const std::size_t l = std::min(len, s.n_steps);
  for (auto start : covering_starts(s.n_steps, l)) out.push_back(slice_series(s, start, l));
  return out;
}

/// Imputed series on the original scale; observed values pass through unchanged.
inline std::vector<double> impute_series(const CasperModel& model, const NormalizationStats& stats,
                                         const SpatioTemporalSeries& series, std::size_t window_len) {
  const auto norm = normalize_with(series, stats);
  const std::size_t t_len = series.n_steps, l = std::min(window_len, t_len);
  std::vector<double> yhat(series.values.size());
  for (auto start : covering_starts(t_len, l)) {
    const auto pred = predict(slice_series(norm, start, l), model);
    for (std::size_t i = 0; i < series.n_sensors; ++i)
      for (std::size_t t = 0; t < l; ++t) yhat[i * t_len + start + t] = pred[i * l + t];
  }
  auto out = denormalize(yhat, t_len, stats);
  for (std::size_t k = 0; k < out.size(); ++k)
    if (series.mask[k]) out[k] = series.values[k];
  return out;
}

inline std::size_t checkpoint_window_len(const LoadedCheckpoint& ck) {
  return ck.metadata.value("window_len", std::size_t{24});
}

// ---------------------------------------------------------------------------------------------
// Commands

struct GenerateOptions {
  fs::path world;
  std::size_t steps = 2000;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

inline json cmd_generate(const GenerateOptions& o) {
  Manifest m("generate", o.out);
  auto world = load_world(o.world);
  if (o.seed) world.seed = *o.seed;
  if (o.steps < 1) throw ConfigError("steps must be >= 1");
  const auto data = generate_synthetic(world, o.steps);
  write_values_csv(o.out / "values.csv", data.series.sensor_ids, o.steps, data.series.values);
  write_matrix_csv(o.out / "adjacency.csv", world.n_sensors, world.n_sensors, data.series.adjacency);
  write_values_csv(o.out / "truth.csv", data.series.sensor_ids, o.steps, data.truth);
  write_json(o.out / "world.json", json(world));
  m.doc["config_paths"]["world"] = o.world.string();
  m.doc["config"] = {{"world", json(world)}, {"steps", o.steps}};
  m.doc["seed"] = world.seed;
  for (auto f : {"values", "adjacency", "truth"}) m.artifact(f, std::string(f) + ".csv");
  m.artifact("world", "world.json");
  return m.finish();
}

struct TrainOptions {
  fs::path data;
  fs::path model;  // empty: defaults
  fs::path train;  // empty: defaults
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::string ablate;  // "", no-sca, no-pbd, prompts-sampling
  std::ostream* progress = nullptr;
};

inline void apply_ablation(ModelConfig& mc, const std::string& ablate) {
  if (ablate.empty()) return;
  if (ablate == "no-sca") mc.causal_gates = false;
  else if (ablate == "no-pbd") mc.decoder = DecoderKind::kMlp;
  else if (ablate == "prompts-sampling") mc.decoder = DecoderKind::kSampledPrompts;
  else throw ConfigError("ablate: unknown value '" + ablate + "' (expected no-sca, no-pbd or prompts-sampling)");
}

inline json cmd_train(const TrainOptions& o) {
  Manifest m("train", o.out);
  auto mc = o.model.empty() ? ModelConfig{} : config_from<ModelConfig>(read_json(o.model), o.model.string());
  auto tc = o.train.empty() ? TrainingConfig{} : config_from<TrainingConfig>(read_json(o.train), o.train.string());
  if (o.seed) mc.seed = tc.seed = *o.seed;
  apply_ablation(mc, o.ablate);
  mc.tau = tc.tau;
  mc.lambda = tc.lambda;
  mc.validate();

  const auto series = load_dataset(o.data);
  auto [norm, stats] = normalize(series);
  if (tc.window_len > norm.n_steps)
    throw ConfigError("window_len " + std::to_string(tc.window_len) + " exceeds the series length " +
                      std::to_string(norm.n_steps));
  const auto windows = window(norm, tc.window_len, tc.window_stride);
  CasperModel model(mc);
  const auto state = fit(windows, model, tc, [&](const EpochRecord& r) {
    if (o.progress)
      *o.progress << "epoch " << r.epoch << " loss " << r.train_loss << " val_mae " << r.val_mae << " frac_rho_extreme "
                  << r.frac_rho_extreme << '\n';
  });

  save_checkpoint(o.out / "checkpoint.bin", model, stats,
                  {{"window_len", tc.window_len}, {"ablate", o.ablate}, {"best_epoch", state.best_epoch}});
  write_text(o.out / "history.csv", history_csv(state.history));
  m.doc["config_paths"] = {{"data", o.data.string()}, {"model", o.model.string()}, {"train", o.train.string()}};
  m.doc["config"] = {{"model", json(mc)}, {"train", json(tc)}, {"ablate", o.ablate}};
  m.doc["seed"] = tc.seed;
  m.doc["ablate"] = o.ablate;
  m.doc["result"] = {{"epochs", state.epoch},
                     {"best_epoch", state.best_epoch},
                     {"best_validation_mae", state.best_validation_mae},
                     {"stopped_early", state.stopped_early},
                     {"events", state.events}};
  m.artifact("checkpoint", "checkpoint.bin");
  m.artifact("history", "history.csv");
  return m.finish();
}

struct ImputeOptions {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
};

inline json cmd_impute(const ImputeOptions& o) {
  Manifest m("impute", o.out);
  const auto ck = load_checkpoint(o.checkpoint);
  const auto series = load_dataset(o.data);
  const auto yhat = impute_series(ck.model, ck.stats, series, checkpoint_window_len(ck));
  write_values_csv(o.out / "imputed.csv", series.sensor_ids, series.n_steps, yhat);
  m.doc["config_paths"] = {{"checkpoint", o.checkpoint.string()}, {"data", o.data.string()}};
  m.doc["config"] = {{"model", json(ck.model.config())}, {"window_len", checkpoint_window_len(ck)}};
  m.doc["seed"] = ck.model.config().seed;
  m.artifact("imputed", "imputed.csv");
  return m.finish();
}

struct EvaluateOptions {
  fs::path checkpoint;
  fs::path data;
  fs::path mask;  // empty: 25% point missing
  fs::path out;
  std::optional<std::uint64_t> seed;
};

inline json metrics_json(const Metrics& m) { return {{"mae", m.mae}, {"mse", m.mse}, {"count", m.count}}; }

inline json cmd_evaluate(const EvaluateOptions& o) {
  Manifest m("evaluate", o.out);
  const auto ck = load_checkpoint(o.checkpoint);
  auto spec = o.mask.empty() ? MaskSpec{} : config_from<MaskSpec>(read_json(o.mask), o.mask.string());
  if (o.seed) spec.seed = *o.seed;
  const auto series = load_dataset(o.data);
  std::vector<double> truth = series.values;
  if (fs::exists(o.data / "truth.csv")) {
    const auto t = read_values_csv(o.data / "truth.csv");
    if (t.values.size() != truth.size()) throw DimensionError("truth.csv shape differs from values.csv");
    truth = t.values;
  }
  const auto masked = apply_mask(series, spec);
  const auto yhat = impute_series(ck.model, ck.stats, masked.masked, checkpoint_window_len(ck));
  json metrics{{"format_version", 1}, {"seed", spec.seed}, {"mask", json(spec)}, {"warnings", masked.warnings}};
  metrics["model"] = metrics_json(evaluate(truth, yhat, masked.eval_mask));
  for (auto b : {Baseline::kMean, Baseline::kLinear, Baseline::kKnn})
    metrics["baselines"][to_string(b)] = metrics_json(evaluate(truth, baseline_impute(masked.masked, {}, b), masked.eval_mask));
  write_json(o.out / "metrics.json", metrics);
  m.doc["config_paths"] = {{"checkpoint", o.checkpoint.string()}, {"data", o.data.string()}, {"mask", o.mask.string()}};
  m.doc["config"] = {{"mask", json(spec)}, {"model", json(ck.model.config())}};
  m.doc["seed"] = spec.seed;
  m.artifact("metrics", "metrics.json");
  return m.finish();
}

struct InspectOptions {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  std::vector<QueryPoint> queries;  // empty: every sensor at the middle step of the first window
  EdgeAggregation aggregation = EdgeAggregation::kMean;
  std::optional<double> threshold;
};

/// Parses "sensor:step,sensor:step".
inline std::vector<QueryPoint> parse_queries(const std::string& text) {
  std::vector<QueryPoint> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      out.push_back({std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("queries: expected sensor:step, got '" + item + "'");
    }
  }
  return out;
}

inline json cmd_inspect(const InspectOptions& o) {
  Manifest m("inspect", o.out);
  const auto ck = load_checkpoint(o.checkpoint);
  const auto series = load_dataset(o.data);
  const auto windows = covering_windows(normalize_with(series, ck.stats), checkpoint_window_len(ck));
  std::optional<PlantedWorld> truth;
  if (fs::exists(o.data / "world.json")) {
    truth = load_world(o.data / "world.json");
    if (truth->n_sensors != series.n_sensors) throw CompatibilityError("world.json sensor count differs from the data");
  }
  EdgeOptions eo;
  eo.aggregation = o.aggregation;
  eo.threshold = o.threshold;
  const auto report = extract_causal_edges(ck.model, windows, eo, truth ? &*truth : nullptr);
  auto doc = report_json(report);

  Graph g(Graph::Mode::kNoGrad);
  const auto enc = encoder_forward(g, windows.front(), ck.model, Mode::kInfer, nullptr);
  doc["sparsity"] = {{"beta_alpha", attention_sparsity(enc.traces, true)},
                     {"alpha", attention_sparsity(enc.traces, false)}};
  auto queries = o.queries;
  if (queries.empty())
    for (std::size_t i = 0; i < series.n_sensors; ++i) queries.push_back({i, windows.front().n_steps / 2});
  const auto index = export_attention_maps(enc.traces, queries, o.out / "attention");
  write_json(o.out / "report.json", doc);
  m.doc["config_paths"] = {{"checkpoint", o.checkpoint.string()}, {"data", o.data.string()}};
  m.doc["config"] = {{"aggregation", report_json(report)["aggregation"]},
                     {"threshold", o.threshold ? json(*o.threshold) : json("uniform")}};
  m.doc["seed"] = ck.model.config().seed;
  m.artifact("report", "report.json");
  m.artifact("attention_index", "attention/index.json");
  m.doc["attention_errors"] = index["errors"];
  return m.finish();
}

struct BenchmarkOptions {
  fs::path sizes;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

inline json cmd_benchmark(const BenchmarkOptions& o) {
  Manifest m("benchmark", o.out);
  auto spec = read_json(o.sizes).get<BenchmarkSpec>();  // validated in from_json
  if (o.seed) spec.seed = *o.seed;
  const auto result = scaling_benchmark(spec);
  write_text(o.out / "benchmark.csv", benchmark_csv(result));
  m.doc["config_paths"]["sizes"] = o.sizes.string();
  m.doc["config"] = read_json(o.sizes);
  m.doc["seed"] = spec.seed;
  auto slope = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  m.doc["slopes"] = {{"sca_vs_E", slope(result.sca_slope)},
                     {"transformer_vs_T", slope(result.transformer_slope)},
                     {"pbd_vs_N_P", slope(result.pbd_slope)}};
  m.artifact("table", "benchmark.csv");
  return m.finish();
}

}  // namespace casper::cli
