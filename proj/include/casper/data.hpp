#pragma once

// Synthetic planted-causality worlds, masking regimes, CSV ingestion, normalization, windowing.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "casper/error.hpp"
#include "casper/rng.hpp"
#include "casper/series.hpp"

namespace casper {

// ---------------------------------------------------------------------------------------------
// Planted world

struct VarCoefficient {
  std::size_t source = 0;
  std::size_t target = 0;
  std::vector<double> lags;  // lags[l] multiplies y_source(t - l - 1)
};

/// Ground truth of a synthetic world. true_causal_adjacency[src * N + dst] = 1 means src -> dst.
/// Self entries in var_coefficients are autoregressive terms and are not causal edges.
struct PlantedWorld {
  std::size_t n_sensors = 0;
  std::vector<std::uint8_t> true_causal_adjacency;
  std::vector<std::pair<std::size_t, std::size_t>> shortcut_edges;
  std::vector<VarCoefficient> var_coefficients;
  std::map<std::size_t, std::size_t> confounder_assignment;  // sensor -> confounder id
  double confounder_std = 1.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
  std::size_t burn_in = 200;

  bool causal(std::size_t src, std::size_t dst) const { return true_causal_adjacency[src * n_sensors + dst] != 0; }

  std::size_t max_lag() const {
    std::size_t p = 1;
    for (auto& c : var_coefficients) p = std::max(p, c.lags.size());
    return p;
  }

  std::size_t causal_edge_count() const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n_sensors; ++i)
      for (std::size_t j = 0; j < n_sensors; ++j) c += i != j && causal(i, j);
    return c;
  }

  /// Structural checks; stability is checked separately by spectral_radius().
  void validate() const {
    if (n_sensors == 0) throw ConfigError("n_sensors must be >= 1");
    if (true_causal_adjacency.size() != n_sensors * n_sensors)
      throw ConfigError("true_causal_adjacency must be n_sensors x n_sensors");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (!(confounder_std >= 0.0)) throw ConfigError("confounder_std must be >= 0");
    auto check_index = [&](std::size_t k, const std::string& field) {
      if (k >= n_sensors) throw ConfigError(field + ": sensor index " + std::to_string(k) + " out of range");
    };
    std::set<std::pair<std::size_t, std::size_t>> with_coefficients;
    for (auto& c : var_coefficients) {
      check_index(c.source, "var_coefficients.source");
      check_index(c.target, "var_coefficients.target");
      if (c.lags.empty()) throw ConfigError("var_coefficients.lags must be nonempty");
      for (double v : c.lags)
        if (!std::isfinite(v)) throw ConfigError("var_coefficients.lags must be finite");
      if (c.source != c.target && !causal(c.source, c.target)) {
        throw ConfigError("var_coefficients: " + std::to_string(c.source) + " -> " + std::to_string(c.target) +
                          " is not in true_causal_adjacency");
      }
      with_coefficients.insert({c.source, c.target});
    }
    for (std::size_t i = 0; i < n_sensors; ++i) {
      for (std::size_t j = 0; j < n_sensors; ++j) {
        if (i != j && causal(i, j) && !with_coefficients.count({i, j})) {
          throw ConfigError("true_causal_adjacency: edge " + std::to_string(i) + " -> " + std::to_string(j) +
                            " has no var_coefficients entry");
        }
      }
    }
    for (auto [a, b] : shortcut_edges) {
      check_index(a, "shortcut_edges");
      check_index(b, "shortcut_edges");
      if (a == b) throw ConfigError("shortcut_edges: self loop at " + std::to_string(a));
      if (causal(a, b) || causal(b, a)) {
        throw ConfigError("shortcut_edges: " + std::to_string(a) + " - " + std::to_string(b) + " is a causal edge");
      }
    }
    for (auto [s, c] : confounder_assignment) check_index(s, "confounder_assignment");
  }

  /// Spectral radius of the VAR companion matrix.
  double spectral_radius() const {
    const std::size_t n = n_sensors, p = max_lag();
    Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n * p), static_cast<Eigen::Index>(n * p));
    for (auto& c : var_coefficients)
      for (std::size_t l = 0; l < c.lags.size(); ++l)
        companion(static_cast<Eigen::Index>(c.target), static_cast<Eigen::Index>(l * n + c.source)) += c.lags[l];
    for (std::size_t k = n; k < n * p; ++k)
      companion(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - n)) = 1.0;
    Eigen::EigenSolver<Eigen::MatrixXd> solver(companion, false);
    return solver.eigenvalues().cwiseAbs().maxCoeff();
  }

  /// Symmetrized (causal union shortcut) adjacency with unit diagonal, row-major N x N.
  std::vector<double> model_adjacency() const {
    std::vector<double> a(n_sensors * n_sensors, 0.0);
    for (std::size_t i = 0; i < n_sensors; ++i) {
      a[i * n_sensors + i] = 1.0;
      for (std::size_t j = 0; j < n_sensors; ++j) {
        if (causal(i, j)) a[i * n_sensors + j] = a[j * n_sensors + i] = 1.0;
      }
    }
    for (auto [x, y] : shortcut_edges) a[x * n_sensors + y] = a[y * n_sensors + x] = 1.0;
    return a;
  }
};

inline void to_json(nlohmann::json& j, const PlantedWorld& w) {
  std::vector<std::vector<int>> adj(w.n_sensors, std::vector<int>(w.n_sensors));
  for (std::size_t i = 0; i < w.n_sensors; ++i)
    for (std::size_t k = 0; k < w.n_sensors; ++k) adj[i][k] = w.causal(i, k) ? 1 : 0;
  auto coeffs = nlohmann::json::array();
  for (auto& c : w.var_coefficients) coeffs.push_back({{"source", c.source}, {"target", c.target}, {"lags", c.lags}});
  auto shortcuts = nlohmann::json::array();
  for (auto [a, b] : w.shortcut_edges) shortcuts.push_back({a, b});
  nlohmann::json conf = nlohmann::json::object();
  for (auto [s, c] : w.confounder_assignment) conf[std::to_string(s)] = c;
  j = nlohmann::json{{"format_version", 1},
                     {"n_sensors", w.n_sensors},
                     {"true_causal_adjacency", adj},
                     {"shortcut_edges", shortcuts},
                     {"var_coefficients", coeffs},
                     {"confounder_assignment", conf},
                     {"confounder_std", w.confounder_std},
                     {"noise_std", w.noise_std},
                     {"seed", w.seed},
                     {"burn_in", w.burn_in}};
}

namespace detail {

template <class T>
T field(const nlohmann::json& j, const std::string& name, const std::string& doc) {
  if (!j.contains(name)) throw ConfigError(doc + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(doc + ": field '" + name + "' has the wrong type (" + e.what() + ")");
  }
}

template <class T>
T field_or(const nlohmann::json& j, const std::string& name, T fallback, const std::string& doc) {
  return j.contains(name) ? field<T>(j, name, doc) : fallback;
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, PlantedWorld& w) {
  const std::string doc = "PlantedWorld";
  if (!j.is_object()) throw ConfigError(doc + ": expected a JSON object");
  w.n_sensors = detail::field<std::size_t>(j, "n_sensors", doc);
  auto adj = detail::field<std::vector<std::vector<int>>>(j, "true_causal_adjacency", doc);
  if (adj.size() != w.n_sensors) throw ConfigError(doc + ": true_causal_adjacency must have n_sensors rows");
  w.true_causal_adjacency.assign(w.n_sensors * w.n_sensors, 0);
  for (std::size_t i = 0; i < w.n_sensors; ++i) {
    if (adj[i].size() != w.n_sensors) throw ConfigError(doc + ": true_causal_adjacency row " + std::to_string(i) + " has wrong length");
    for (std::size_t k = 0; k < w.n_sensors; ++k) {
      if (adj[i][k] != 0 && adj[i][k] != 1) throw ConfigError(doc + ": true_causal_adjacency entries must be 0 or 1");
      w.true_causal_adjacency[i * w.n_sensors + k] = static_cast<std::uint8_t>(adj[i][k]);
    }
  }
  w.shortcut_edges.clear();
  const auto shortcuts = detail::field_or<nlohmann::json>(j, "shortcut_edges", nlohmann::json::array(), doc);
  for (auto& e : shortcuts) {
    if (!e.is_array() || e.size() != 2) throw ConfigError(doc + ": shortcut_edges entries must be [a, b]");
    w.shortcut_edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  w.var_coefficients.clear();
  const auto coefficients = detail::field<nlohmann::json>(j, "var_coefficients", doc);
  for (auto& c : coefficients) {
    VarCoefficient v;
    v.source = detail::field<std::size_t>(c, "source", doc + ".var_coefficients");
    v.target = detail::field<std::size_t>(c, "target", doc + ".var_coefficients");
    v.lags = detail::field<std::vector<double>>(c, "lags", doc + ".var_coefficients");
    w.var_coefficients.push_back(std::move(v));
  }
  w.confounder_assignment.clear();
  const auto confounders = detail::field_or<nlohmann::json>(j, "confounder_assignment", nlohmann::json::object(), doc);
  for (auto& [k, v] : confounders.items()) {
    std::size_t sensor = 0;
    auto r = std::from_chars(k.data(), k.data() + k.size(), sensor);
    if (r.ec != std::errc() || r.ptr != k.data() + k.size()) {
      throw ConfigError(doc + ": confounder_assignment key '" + k + "' is not a sensor index");
    }
    w.confounder_assignment[sensor] = v.get<std::size_t>();
  }
  w.confounder_std = detail::field_or<double>(j, "confounder_std", 1.0, doc);
  w.noise_std = detail::field<double>(j, "noise_std", doc);
  w.seed = detail::field_or<std::uint64_t>(j, "seed", 0, doc);
  w.burn_in = detail::field_or<std::size_t>(j, "burn_in", 200, doc);
  w.validate();
}

inline PlantedWorld load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return j.get<PlantedWorld>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

struct SyntheticData {
  SpatioTemporalSeries series;  // X = Y, M = all ones
  std::vector<double> truth;    // Y, N x T
};

/// Simulates y_t = sum_l B_l y_{t-l} + noise_std * e_t + confounder_std * c_{k(i), t} after a
/// burn-in, where c_k are shared latent sources (one per confounder id).
inline SyntheticData generate_synthetic(const PlantedWorld& world, std::size_t n_steps) {
  world.validate();
  const std::size_t n = world.n_sensors, p = world.max_lag();
  if (n_steps < 2 * p) throw ConfigError("T must be at least twice the maximum lag");
  const double radius = world.spectral_radius();
  if (!(radius < 1.0)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", radius);
    throw GenerationError(std::string("VAR system is unstable: companion spectral radius ") + buf + " >= 1", radius);
  }
  std::size_t n_conf = 0;
  for (auto [s, c] : world.confounder_assignment) n_conf = std::max(n_conf, c + 1);

  Rng rng(world.seed);
  const std::size_t total = world.burn_in + n_steps;
  std::vector<double> y(total * n, 0.0);  // step-major while simulating
  std::vector<double> conf(n_conf);
  for (std::size_t t = 0; t < total; ++t) {
    for (auto& c : conf) c = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      double v = world.noise_std * rng.normal();
      auto it = world.confounder_assignment.find(i);
      if (it != world.confounder_assignment.end()) v += world.confounder_std * conf[it->second];
      y[t * n + i] = v;
    }
    for (auto& c : world.var_coefficients) {
      for (std::size_t l = 0; l < c.lags.size(); ++l) {
        if (t >= l + 1) y[t * n + c.target] += c.lags[l] * y[(t - l - 1) * n + c.source];
      }
    }
  }
  SyntheticData out;
  out.truth.resize(n * n_steps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < n_steps; ++t) out.truth[i * n_steps + t] = y[(world.burn_in + t) * n + i];
  out.series = SpatioTemporalSeries::make(n, n_steps, out.truth, world.model_adjacency(),
                                          std::vector<std::uint8_t>(n * n_steps, 1));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Masking

enum class MaskRegime { kPoint, kBlock, kGeneral };

/// Missingness specification.
///   point:   each observed point hidden independently with probability point_fraction.
///   block:   per sensor, a block starts at each step with probability
///            block_spatial_fraction / mean duration and hides that sensor; per step, a block
///            starts with probability block_temporal_fraction and hides every sensor. Durations
///            are uniform on block_duration_range (inclusive, in steps).
///   general: replays a binary pattern (1 = observed) cyclically from a random row offset;
///            pattern columns are assigned to sensors cyclically.
struct MaskSpec {
  MaskRegime regime = MaskRegime::kPoint;
  double point_fraction = 0.25;
  double block_spatial_fraction = 0.05;
  double block_temporal_fraction = 0.0015;
  std::size_t block_duration_min = 1;
  std::size_t block_duration_max = 4;
  std::uint64_t seed = 0;
  std::string pattern_path;  // general regime; empty selects the built-in pattern

  void validate() const {
    auto frac = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
    };
    frac(point_fraction, "point_fraction");
    frac(block_spatial_fraction, "block_spatial_fraction");
    frac(block_temporal_fraction, "block_temporal_fraction");
    if (block_duration_min < 1 || block_duration_max < block_duration_min) {
      throw ConfigError("block_duration_range must be nonempty with min >= 1");
    }
  }
};

inline std::string to_string(MaskRegime r) {
  switch (r) {
    case MaskRegime::kPoint: return "point";
    case MaskRegime::kBlock: return "block";
    case MaskRegime::kGeneral: return "general";
  }
  return "?";
}

inline void to_json(nlohmann::json& j, const MaskSpec& m) {
  j = nlohmann::json{{"format_version", 1},
                     {"regime", to_string(m.regime)},
                     {"point_fraction", m.point_fraction},
                     {"block_spatial_fraction", m.block_spatial_fraction},
                     {"block_temporal_fraction", m.block_temporal_fraction},
                     {"block_duration_range", {m.block_duration_min, m.block_duration_max}},
                     {"seed", m.seed}};
  if (!m.pattern_path.empty()) j["pattern_path"] = m.pattern_path;
}

inline void from_json(const nlohmann::json& j, MaskSpec& m) {
  const std::string doc = "MaskSpec";
  if (!j.is_object()) throw ConfigError(doc + ": expected a JSON object");
  const auto regime = detail::field<std::string>(j, "regime", doc);
  if (regime == "point") m.regime = MaskRegime::kPoint;
  else if (regime == "block") m.regime = MaskRegime::kBlock;
  else if (regime == "general") m.regime = MaskRegime::kGeneral;
  else throw ConfigError(doc + ": field 'regime' must be point, block or general, got '" + regime + "'");
  MaskSpec d;
  m.point_fraction = detail::field_or<double>(j, "point_fraction", d.point_fraction, doc);
  m.block_spatial_fraction = detail::field_or<double>(j, "block_spatial_fraction", d.block_spatial_fraction, doc);
  m.block_temporal_fraction = detail::field_or<double>(j, "block_temporal_fraction", d.block_temporal_fraction, doc);
  if (j.contains("block_duration_range")) {
    auto r = detail::field<std::vector<std::size_t>>(j, "block_duration_range", doc);
    if (r.size() != 2) throw ConfigError(doc + ": block_duration_range must be [min, max]");
    m.block_duration_min = r[0];
    m.block_duration_max = r[1];
  }
  m.seed = detail::field_or<std::uint64_t>(j, "seed", 0, doc);
  m.pattern_path = detail::field_or<std::string>(j, "pattern_path", "", doc);
  m.validate();
}

struct MaskedSeries {
  SpatioTemporalSeries masked;
  std::vector<std::uint8_t> eval_mask;  // N x T, 1 = held out for evaluation
  std::vector<std::string> warnings;
};

/// Binary pattern [rows x cols] row-major, 1 = observed.
struct MissingPattern {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> observed;
};

/// Built-in synthetic pattern (also shipped as configs/general_pattern.csv): 16 columns x 720
/// rows with about 3% isolated dropouts and 8% of each column lost in outages of 2 to 24 steps.
inline MissingPattern default_general_pattern() {
  MissingPattern p{720, 16, std::vector<std::uint8_t>(720 * 16, 1)};
  Rng rng(20240101);
  for (std::size_t c = 0; c < p.cols; ++c) {
    for (std::size_t r = 0; r < p.rows; ++r) {
      if (rng.bernoulli(0.03)) p.observed[r * p.cols + c] = 0;
      if (rng.bernoulli(0.08 / 13.0)) {
        const std::size_t len = 2 + rng.below(23);
        for (std::size_t k = r; k < std::min(p.rows, r + len); ++k) p.observed[k * p.cols + c] = 0;
      }
    }
  }
  return p;
}

inline MissingPattern load_pattern_csv(const std::filesystem::path& path);

inline MaskedSeries apply_mask(const SpatioTemporalSeries& series, const MaskSpec& spec) {
  spec.validate();
  series.validate();
  const std::size_t n = series.n_sensors, t = series.n_steps;
  std::vector<std::uint8_t> hide(n * t, 0);
  Rng rng(spec.seed);
  switch (spec.regime) {
    case MaskRegime::kPoint:
      for (auto& h : hide) h = rng.bernoulli(spec.point_fraction);
      break;
    case MaskRegime::kBlock: {
      const double mean_len = 0.5 * static_cast<double>(spec.block_duration_min + spec.block_duration_max);
      const double spatial_start = std::min(1.0, spec.block_spatial_fraction / mean_len);
      const std::size_t span = spec.block_duration_max - spec.block_duration_min + 1;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < t; ++s) {
          if (!rng.bernoulli(spatial_start)) continue;
          const std::size_t len = spec.block_duration_min + rng.below(span);
          for (std::size_t k = s; k < std::min(t, s + len); ++k) hide[i * t + k] = 1;
        }
      }
      for (std::size_t s = 0; s < t; ++s) {
        if (!rng.bernoulli(spec.block_temporal_fraction)) continue;
        const std::size_t len = spec.block_duration_min + rng.below(span);
        for (std::size_t k = s; k < std::min(t, s + len); ++k)
          for (std::size_t i = 0; i < n; ++i) hide[i * t + k] = 1;
      }
      break;
    }
    case MaskRegime::kGeneral: {
      const auto pattern = spec.pattern_path.empty() ? default_general_pattern() : load_pattern_csv(spec.pattern_path);
      if (pattern.rows == 0 || pattern.cols == 0) throw ConfigError("missingness pattern is empty");
      const std::size_t offset = rng.below(pattern.rows);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < t; ++s)
          hide[i * t + s] = pattern.observed[((offset + s) % pattern.rows) * pattern.cols + i % pattern.cols] == 0;
      break;
    }
  }
  MaskedSeries out;
  out.masked = series;
  out.eval_mask.assign(n * t, 0);
  for (std::size_t k = 0; k < n * t; ++k) {
    if (hide[k] && series.mask[k]) {
      out.eval_mask[k] = 1;
      out.masked.mask[k] = 0;
      out.masked.values[k] = 0.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t before = 0, after = 0;
    for (std::size_t s = 0; s < t; ++s) {
      before += series.mask[i * t + s];
      after += out.masked.mask[i * t + s];
    }
    if (before > 0 && after == 0) {
      out.warnings.push_back("sensor " + series.sensor_ids[i] + ": every observed point is hidden");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

/// Non-blank lines with their 1-based line numbers.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, 0, "cannot open file");
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    for (auto& c : cells) c = trim(c);
    rows.emplace_back(number, std::move(cells));
  }
  return rows;
}

inline double parse_number(const std::string& cell, const std::string& file, std::size_t row, std::size_t col) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  if (!cell.empty() && *b == '+') ++b;
  auto r = std::from_chars(b, e, v);
  if (cell.empty() || r.ec != std::errc() || r.ptr != e) throw ParseError(file, row, col, "non-numeric cell '" + cell + "'");
  return v;
}

inline std::string format_number(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

inline MissingPattern load_pattern_csv(const std::filesystem::path& path) {
  const auto rows = detail::read_csv(path);
  const std::string file = path.string();
  if (rows.size() < 2) throw ParseError(file, rows.empty() ? 1 : rows[0].first, 0, "pattern needs a header and a row");
  MissingPattern p;
  p.cols = rows[0].second.size();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto& [line, cells] = rows[r];
    if (cells.size() != p.cols) throw ParseError(file, line, 0, "row has " + std::to_string(cells.size()) + " cells, expected " + std::to_string(p.cols));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c] != "0" && cells[c] != "1") throw ParseError(file, line, c + 1, "pattern cells must be 0 or 1");
      p.observed.push_back(cells[c] == "1");
    }
  }
  p.rows = rows.size() - 1;
  return p;
}

inline void save_pattern_csv(const MissingPattern& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  for (std::size_t c = 0; c < p.cols; ++c) out << (c ? "," : "") << "c" << c;
  out << '\n';
  for (std::size_t r = 0; r < p.rows; ++r) {
    for (std::size_t c = 0; c < p.cols; ++c) out << (c ? "," : "") << int(p.observed[r * p.cols + c]);
    out << '\n';
  }
}

/// Values file: header of sensor ids, one row per step, empty cell = missing. Returned arrays are
/// sensor-major (N x T).
struct ValuesTable {
  std::vector<std::string> ids;
  std::size_t n_steps = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> present;
};

inline ValuesTable read_values_csv(const std::filesystem::path& path) {
  const auto rows = detail::read_csv(path);
  const std::string file = path.string();
  if (rows.empty()) throw ParseError(file, 1, 0, "missing header row");
  ValuesTable tab;
  tab.ids = rows[0].second;
  const std::size_t n = tab.ids.size();
  for (std::size_t c = 0; c < n; ++c)
    if (tab.ids[c].empty()) throw ParseError(file, rows[0].first, c + 1, "empty sensor id");
  tab.n_steps = rows.size() - 1;
  tab.values.assign(n * tab.n_steps, 0.0);
  tab.present.assign(n * tab.n_steps, 0);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto& [line, cells] = rows[r];
    if (cells.size() != n) {
      throw ParseError(file, line, 0, "ragged row: " + std::to_string(cells.size()) + " cells, expected " + std::to_string(n));
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (cells[c].empty()) continue;
      tab.values[c * tab.n_steps + (r - 1)] = detail::parse_number(cells[c], file, line, c + 1);
      tab.present[c * tab.n_steps + (r - 1)] = 1;
    }
  }
  return tab;
}

/// Writes an N x T sensor-major array as a values CSV; cells with keep[k] == 0 are left empty.
inline void write_values_csv(const std::filesystem::path& path, const std::vector<std::string>& ids, std::size_t n_steps,
                             const std::vector<double>& values, const std::vector<std::uint8_t>* keep = nullptr) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t c = 0; c < ids.size(); ++c) out << (c ? "," : "") << ids[c];
  out << '\n';
  for (std::size_t t = 0; t < n_steps; ++t) {
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (c) out << ',';
      const std::size_t k = c * n_steps + t;
      if (!keep || (*keep)[k]) out << detail::format_number(values[k]);
    }
    out << '\n';
  }
}

/// Adjacency file: an N x N numeric matrix, or an edge list whose header is src,dst,weight
/// (endpoints given as sensor ids or 0-based indices).
inline std::vector<double> read_adjacency_csv(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  const auto rows = detail::read_csv(path);
  const std::string file = path.string();
  const std::size_t n = ids.size();
  if (rows.empty()) throw ParseError(file, 1, 0, "empty adjacency file");
  std::vector<double> a(n * n, 0.0);
  const auto& head = rows[0].second;
  if (head.size() == 3 && head[0] == "src" && head[1] == "dst" && head[2] == "weight") {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[ids[i]] = i;
    auto resolve = [&](const std::string& cell, std::size_t line, std::size_t col) {
      if (auto it = index.find(cell); it != index.end()) return it->second;
      std::size_t k = 0;
      auto r = std::from_chars(cell.data(), cell.data() + cell.size(), k);
      if (r.ec != std::errc() || r.ptr != cell.data() + cell.size() || k >= n) {
        throw ParseError(file, line, col, "unknown sensor '" + cell + "'");
      }
      return k;
    };
    for (std::size_t r = 1; r < rows.size(); ++r) {
      auto& [line, cells] = rows[r];
      if (cells.size() != 3) throw ParseError(file, line, 0, "edge rows need 3 cells");
      const auto s = resolve(cells[0], line, 1);
      const auto d = resolve(cells[1], line, 2);
      a[s * n + d] = detail::parse_number(cells[2], file, line, 3);
    }
  } else {
    if (rows.size() != n) {
      throw ParseError(file, rows.back().first, 0,
                       "adjacency has " + std::to_string(rows.size()) + " rows, expected " + std::to_string(n));
    }
    for (std::size_t r = 0; r < n; ++r) {
      auto& [line, cells] = rows[r];
      if (cells.size() != n) throw ParseError(file, line, 0, "adjacency row has " + std::to_string(cells.size()) + " cells, expected " + std::to_string(n));
      for (std::size_t c = 0; c < n; ++c) a[r * n + c] = detail::parse_number(cells[c], file, line, c + 1);
    }
  }
  for (std::size_t k = 0; k < n * n; ++k) {
    if (!(a[k] >= 0.0) || !std::isfinite(a[k])) {
      throw ParseError(file, 0, 0, "adjacency entries must be finite and non-negative");
    }
  }
  return a;
}

inline void write_matrix_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                             const std::vector<double>& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << detail::format_number(m[r * cols + c]);
    out << '\n';
  }
}

/// Mask file: same layout as the values file, cells 0 or 1.
inline std::vector<std::uint8_t> read_mask_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                                               std::size_t n_steps) {
  const auto rows = detail::read_csv(path);
  const std::string file = path.string();
  if (rows.empty()) throw ParseError(file, 1, 0, "missing header row");
  if (rows[0].second != ids) throw ParseError(file, rows[0].first, 0, "mask header differs from the values header");
  if (rows.size() - 1 != n_steps) {
    throw ParseError(file, rows.back().first, 0, "mask has " + std::to_string(rows.size() - 1) + " rows, expected " + std::to_string(n_steps));
  }
  const std::size_t n = ids.size();
  std::vector<std::uint8_t> m(n * n_steps);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto& [line, cells] = rows[r];
    if (cells.size() != n) throw ParseError(file, line, 0, "ragged row");
    for (std::size_t c = 0; c < n; ++c) {
      if (cells[c] != "0" && cells[c] != "1") throw ParseError(file, line, c + 1, "mask cells must be 0 or 1");
      m[c * n_steps + (r - 1)] = cells[c] == "1";
    }
  }
  return m;
}

inline void write_mask_csv(const std::filesystem::path& path, const std::vector<std::string>& ids, std::size_t n_steps,
                           const std::vector<std::uint8_t>& mask) {
  std::ofstream out(path);
  for (std::size_t c = 0; c < ids.size(); ++c) out << (c ? "," : "") << ids[c];
  out << '\n';
  for (std::size_t t = 0; t < n_steps; ++t) {
    for (std::size_t c = 0; c < ids.size(); ++c) out << (c ? "," : "") << int(mask[c * n_steps + t]);
    out << '\n';
  }
}

/// Loads a series. Without a mask file, empty cells are missing; with one, the mask file wins
/// and an empty cell at an observed position is a parse error.
inline SpatioTemporalSeries load_csv(const std::filesystem::path& values_path, const std::filesystem::path& adjacency_path,
                                     const std::filesystem::path& mask_path = {}) {
  auto tab = read_values_csv(values_path);
  auto adjacency = read_adjacency_csv(adjacency_path, tab.ids);
  std::vector<std::uint8_t> mask = tab.present;
  if (!mask_path.empty()) {
    mask = read_mask_csv(mask_path, tab.ids, tab.n_steps);
    for (std::size_t k = 0; k < mask.size(); ++k) {
      if (mask[k] && !tab.present[k]) {
        throw ParseError(values_path.string(), k % tab.n_steps + 2, k / tab.n_steps + 1, "observed cell is empty");
      }
    }
  }
  try {
    return SpatioTemporalSeries::make(tab.ids.size(), tab.n_steps, std::move(tab.values), std::move(adjacency),
                                      std::move(mask), tab.ids);
  } catch (const DataError& e) {
    throw ParseError(values_path.string(), 0, 0, e.what());
  }
}

/// Writes values.csv (missing cells empty) and adjacency.csv into `dir`.
inline void save_csv(const SpatioTemporalSeries& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_values_csv(dir / "values.csv", s.sensor_ids, s.n_steps, s.values, &s.mask);
  write_matrix_csv(dir / "adjacency.csv", s.n_sensors, s.n_sensors, s.adjacency);
}

// ---------------------------------------------------------------------------------------------
// Normalization and windows

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<std::uint8_t> global_fallback;  // sensor had fewer than 2 observations
};

inline constexpr double kStdFloor = 1e-8;

/// Per-sensor z-scoring over observed points.
inline std::pair<SpatioTemporalSeries, NormalizationStats> normalize(const SpatioTemporalSeries& series) {
  series.validate();
  const std::size_t n = series.n_sensors, t = series.n_steps;
  auto moments = [&](auto&& include) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < n * t; ++k)
      if (series.mask[k] && include(k)) sum += series.values[k], ++count;
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    double ss = 0.0;
    for (std::size_t k = 0; k < n * t; ++k)
      if (series.mask[k] && include(k)) ss += (series.values[k] - mean) * (series.values[k] - mean);
    const double sd = count ? std::sqrt(ss / static_cast<double>(count)) : 1.0;
    return std::tuple{mean, std::max(sd, kStdFloor), count};
  };
  const auto [gmean, gstd, gcount] = moments([](std::size_t) { return true; });
  NormalizationStats stats;
  for (std::size_t i = 0; i < n; ++i) {
    auto [m, s, c] = moments([&](std::size_t k) { return k / t == i; });
    const bool fallback = c < 2;
    stats.mean.push_back(fallback ? gmean : m);
    stats.std.push_back(fallback ? (gcount >= 2 ? gstd : 1.0) : s);
    stats.global_fallback.push_back(fallback);
  }
  SpatioTemporalSeries out = series;
  for (std::size_t k = 0; k < n * t; ++k)
    out.values[k] = series.mask[k] ? (series.values[k] - stats.mean[k / t]) / stats.std[k / t] : 0.0;
  return {std::move(out), std::move(stats)};
}

/// Maps an N x T array of normalized values back to the original scale.
inline std::vector<double> denormalize(const std::vector<double>& values, std::size_t n_steps,
                                       const NormalizationStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) out[k] = values[k] * stats.std[k / n_steps] + stats.mean[k / n_steps];
  return out;
}

inline std::vector<double> normalize_values(const std::vector<double>& values, std::size_t n_steps,
                                            const NormalizationStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) out[k] = (values[k] - stats.mean[k / n_steps]) / stats.std[k / n_steps];
  return out;
}

/// Start steps of the full windows of length `len` taken every `stride` steps.
inline std::vector<std::size_t> window_starts(std::size_t n_steps, std::size_t len, std::size_t stride) {
  if (len == 0 || stride == 0) throw std::invalid_argument("window: length and stride must be >= 1");
  if (len > n_steps) throw std::invalid_argument("window: length exceeds the series");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + len <= n_steps; s += stride) starts.push_back(s);
  return starts;
}

/// Columns [start, start + len) of an N x T array.
template <class T>
std::vector<T> slice_steps(const std::vector<T>& a, std::size_t n_steps, std::size_t start, std::size_t len) {
  const std::size_t n = a.size() / n_steps;
  std::vector<T> out(n * len);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(a.begin() + i * n_steps + start, a.begin() + i * n_steps + start + len, out.begin() + i * len);
  return out;
}

inline std::vector<SpatioTemporalSeries> window(const SpatioTemporalSeries& s, std::size_t len, std::size_t stride) {
  std::vector<SpatioTemporalSeries> out;
  for (auto start : window_starts(s.n_steps, len, stride)) {
    SpatioTemporalSeries w;
    w.n_sensors = s.n_sensors;
    w.n_steps = len;
    w.values = slice_steps(s.values, s.n_steps, start, len);
    w.mask = slice_steps(s.mask, s.n_steps, start, len);
    w.adjacency = s.adjacency;
    w.sensor_ids = s.sensor_ids;
    w.step_duration = s.step_duration;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace casper
