#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "casper/error.hpp"

namespace casper {

/// Incomplete spatiotemporal series: values X (N x T), sensor adjacency A (N x N) and
/// observation mask M (N x T, 1 = observed). All arrays are row-major.
struct SpatioTemporalSeries {
  std::size_t n_sensors = 0;
  std::size_t n_steps = 0;
  std::vector<double> values;
  std::vector<double> adjacency;
  std::vector<std::uint8_t> mask;
  std::vector<std::string> sensor_ids;
  double step_duration = 3600.0;  // seconds

  double value(std::size_t i, std::size_t t) const { return values[i * n_steps + t]; }
  bool observed(std::size_t i, std::size_t t) const { return mask[i * n_steps + t] != 0; }
  double weight(std::size_t i, std::size_t j) const { return adjacency[i * n_sensors + j]; }

  /// Builds a series, forcing unit self-loops and zeroing values at unobserved positions.
  static SpatioTemporalSeries make(std::size_t n, std::size_t t, std::vector<double> values,
                                   std::vector<double> adjacency, std::vector<std::uint8_t> mask,
                                   std::vector<std::string> ids = {}) {
    SpatioTemporalSeries s;
    s.n_sensors = n;
    s.n_steps = t;
    s.values = std::move(values);
    s.adjacency = std::move(adjacency);
    s.mask = std::move(mask);
    s.sensor_ids = std::move(ids);
    if (s.sensor_ids.empty())
      for (std::size_t i = 0; i < n; ++i) s.sensor_ids.push_back("s" + std::to_string(i));
    s.validate();
    s.normalize_conventions();
    return s;
  }

  /// Diagonal of A set to 1; X set to 0 wherever M = 0.
  void normalize_conventions() {
    for (std::size_t i = 0; i < n_sensors; ++i) adjacency[i * n_sensors + i] = 1.0;
    for (std::size_t k = 0; k < values.size(); ++k)
      if (!mask[k]) values[k] = 0.0;
  }

  void validate() const {
    if (values.size() != n_sensors * n_steps || mask.size() != n_sensors * n_steps) {
      throw DataError("series arrays do not match " + std::to_string(n_sensors) + " x " + std::to_string(n_steps));
    }
    if (adjacency.size() != n_sensors * n_sensors) throw DataError("adjacency is not N x N");
    if (sensor_ids.size() != n_sensors) throw DataError("sensor id count differs from N");
    for (std::size_t k = 0; k < mask.size(); ++k) {
      if (mask[k] > 1) throw DataError("mask entries must be 0 or 1");
      if (mask[k] && !std::isfinite(values[k])) {
        throw DataError("non-finite observed value at sensor " + std::to_string(k / n_steps) + ", step " +
                        std::to_string(k % n_steps));
      }
    }
    for (double a : adjacency)
      if (!(a >= 0.0) || !std::isfinite(a)) throw DataError("adjacency entries must be finite and non-negative");
  }

  /// Number of nonzero adjacency entries, self-loops included.
  std::size_t num_edges() const {
    std::size_t e = 0;
    for (double a : adjacency) e += a != 0.0;
    return e;
  }

  std::size_t observed_count() const {
    std::size_t c = 0;
    for (auto m : mask) c += m;
    return c;
  }
};

}  // namespace casper
