#pragma once

// Masked-MAE training with l1 pressure on gate probabilities: Adam, cosine schedule, per-batch
// random masking and early stopping on a held-out validation split.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casper/autodiff.hpp"
#include "casper/data.hpp"
#include "casper/error.hpp"
#include "casper/model.hpp"
#include "casper/rng.hpp"
#include "casper/series.hpp"

namespace casper {

struct TrainingConfig {
  double learning_rate = 8e-4;
  std::size_t max_epochs = 300;
  std::size_t patience = 40;
  std::size_t batch_size = 8;
  std::vector<double> mask_probs{0.2, 0.5, 0.8};
  double lambda = 1e-3;
  double tau = 1.0;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  double validation_mask_fraction = 0.25;
  std::size_t window_len = 24;
  std::size_t window_stride = 24;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (mask_probs.empty()) throw ConfigError("mask_probs must be nonempty");
    for (double p : mask_probs)
      if (!(p > 0.0 && p < 1.0)) throw ConfigError("mask_probs entries must lie in (0, 1)");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("validation_fraction must lie in (0, 1)");
    if (!(validation_mask_fraction > 0.0 && validation_mask_fraction < 1.0))
      throw ConfigError("validation_mask_fraction must lie in (0, 1)");
    if (window_len < 1 || window_stride < 1) throw ConfigError("window_len and window_stride must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = nlohmann::json{{"format_version", 1},
                     {"learning_rate", c.learning_rate},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"batch_size", c.batch_size},
                     {"mask_probs", c.mask_probs},
                     {"lambda", c.lambda},
                     {"tau", c.tau},
                     {"seed", c.seed},
                     {"validation_fraction", c.validation_fraction},
                     {"validation_mask_fraction", c.validation_mask_fraction},
                     {"window_len", c.window_len},
                     {"window_stride", c.window_stride}};
}

inline void from_json(const nlohmann::json& j, TrainingConfig& c) {
  const TrainingConfig d;
  const std::string doc = "TrainingConfig";
  if (!j.is_object()) throw ConfigError(doc + ": expected a JSON object");
  c.learning_rate = detail::field_or(j, "learning_rate", d.learning_rate, doc);
  c.max_epochs = detail::field_or(j, "max_epochs", d.max_epochs, doc);
  c.patience = detail::field_or(j, "patience", d.patience, doc);
  c.batch_size = detail::field_or(j, "batch_size", d.batch_size, doc);
  c.mask_probs = detail::field_or(j, "mask_probs", d.mask_probs, doc);
  c.lambda = detail::field_or(j, "lambda", d.lambda, doc);
  c.tau = detail::field_or(j, "tau", d.tau, doc);
  c.seed = detail::field_or(j, "seed", d.seed, doc);
  c.validation_fraction = detail::field_or(j, "validation_fraction", d.validation_fraction, doc);
  c.validation_mask_fraction = detail::field_or(j, "validation_mask_fraction", d.validation_mask_fraction, doc);
  c.window_len = detail::field_or(j, "window_len", d.window_len, doc);
  c.window_stride = detail::field_or(j, "window_stride", d.window_stride, doc);
  c.validate();
}

// ---------------------------------------------------------------------------------------------
// Loss

struct LossTerms {
  Tensor total;
  double mae = 0.0;
  double l1 = 0.0;            // mean |rho| (before lambda)
  std::size_t masked = 0;
  bool empty_mask = false;    // no supervised points: loss is the l1 term alone
};

/// sum_m |y - yhat| / count(m) + lambda * mean |rho| over every gate probability of the pass.
inline LossTerms masked_loss(Graph& g, const Tensor& yhat, std::span<const double> y,
                             std::span<const std::uint8_t> train_mask, std::span<const Tensor> rho, double lambda) {
  if (yhat.size() != y.size() || y.size() != train_mask.size()) {
    throw DimensionError("masked_loss: predictions, targets and mask differ in size");
  }
  LossTerms out;
  std::vector<double> m(train_mask.size()), target(y.size());
  for (std::size_t k = 0; k < m.size(); ++k) {
    m[k] = train_mask[k] ? 1.0 : 0.0;
    target[k] = train_mask[k] ? y[k] : 0.0;
    out.masked += train_mask[k] != 0;
  }
  Tensor loss;
  if (out.masked > 0) {
    const auto diff = ad::sub(g, yhat, Tensor::from(yhat.shape(), std::move(target)));
    const auto err = ad::mul(g, ad::abs(g, diff), Tensor::from(yhat.shape(), std::move(m)));
    loss = ad::affine(g, ad::sum(g, err), 1.0 / static_cast<double>(out.masked));
    out.mae = loss.item();
  } else {
    out.empty_mask = true;
    loss = Tensor::scalar(0.0);
  }
  std::size_t gates = 0;
  for (auto& r : rho) gates += r.size();
  if (gates > 0) {
    Tensor l1_sum;
    for (auto& r : rho) {
      const auto s = ad::sum(g, ad::abs(g, r));
      l1_sum = l1_sum.defined() ? ad::add(g, l1_sum, s) : s;
    }
    const auto l1_mean = ad::affine(g, l1_sum, 1.0 / static_cast<double>(gates));
    out.l1 = l1_mean.item();
    loss = ad::add(g, loss, ad::affine(g, l1_mean, lambda));
  }
  out.total = loss;
  return out;
}

/// Hides each observed point with probability p. Returns the model-visible series and the
/// mask of hidden points (loss targets).
inline std::pair<SpatioTemporalSeries, std::vector<std::uint8_t>> training_mask(const SpatioTemporalSeries& batch,
                                                                                double p, Rng& rng) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("training_mask: p must lie in (0, 1)");
  SpatioTemporalSeries visible = batch;
  std::vector<std::uint8_t> hidden(batch.mask.size(), 0);
  for (std::size_t k = 0; k < hidden.size(); ++k) {
    if (batch.mask[k] && rng.bernoulli(p)) {
      hidden[k] = 1;
      visible.mask[k] = 0;
      visible.values[k] = 0.0;
    }
  }
  return {std::move(visible), std::move(hidden)};
}

// ---------------------------------------------------------------------------------------------
// Optimizer

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t skipped = 0;  // steps refused because of non-finite gradients
};

/// One bias-corrected Adam update from the gradients stored on `params`. Parameters without a
/// gradient are treated as having zero gradient. Returns false (and changes nothing) if any
/// gradient entry is non-finite.
inline bool adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.m.empty()) {
    for (auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size()) throw DimensionError("adam_step: moment shape mismatch");
    for (double gv : params[i].grad())
      if (!std::isfinite(gv)) {
        ++state.skipped;
        return false;
      }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_value();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = grad.empty() ? 0.0 : grad[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
  }
  return true;
}

inline double cosine_lr(double base_lr, std::size_t epoch, std::size_t max_epochs) {
  if (max_epochs == 0 || epoch > max_epochs) throw std::invalid_argument("cosine_lr: epoch outside [0, max_epochs]");
  return base_lr * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(max_epochs))) / 2.0;
}

// ---------------------------------------------------------------------------------------------
// Fit

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;
  double mean_rho = 0.0;
  double frac_rho_extreme = 0.0;
};

struct TrainState {
  std::size_t epoch = 0;
  AdamState adam;
  double best_validation_mae = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improvement = 0;
  std::vector<EpochRecord> history;
  std::vector<std::string> events;
  bool stopped_early = false;
};

/// Writes the history as CSV text with header epoch,train_loss,val_mae,lr,mean_rho,frac_rho_extreme.
inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_mae,lr,mean_rho,frac_rho_extreme\n";
  auto num = [](double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  for (auto& h : history) {
    out += std::to_string(h.epoch) + "," + num(h.train_loss) + "," + num(h.val_mae) + "," + num(h.lr) + "," +
           num(h.mean_rho) + "," + num(h.frac_rho_extreme) + "\n";
  }
  return out;
}

/// Fraction of values within delta of 0 or 1.
inline double fraction_extreme(std::span<const double> rho, double delta) {
  if (rho.empty()) return 0.0;
  std::size_t c = 0;
  for (double r : rho) c += (r <= delta || r >= 1.0 - delta);
  return static_cast<double>(c) / static_cast<double>(rho.size());
}

struct ValidationResult {
  double mae = 0.0;
  double mean_rho = 0.0;
  double frac_rho_extreme = 0.0;
};

/// Infer-mode masked MAE on validation windows with a fixed point mask.
inline ValidationResult validate_windows(const CasperModel& model, std::span<const SpatioTemporalSeries> windows,
                                         double hide_fraction, std::uint64_t seed) {
  Rng rng(seed);
  double abs_sum = 0.0, rho_sum = 0.0;
  std::size_t count = 0, extreme = 0, gates = 0;
  for (auto& w : windows) {
    auto [visible, hidden] = training_mask(w, hide_fraction, rng);
    Graph g(Graph::Mode::kNoGrad);
    auto res = model_forward(g, visible, model, Mode::kInfer, nullptr);
    auto yv = res.yhat.value();
    for (std::size_t k = 0; k < hidden.size(); ++k) {
      if (hidden[k]) {
        abs_sum += std::abs(yv[k] - w.values[k]);
        ++count;
      }
    }
    for (auto& r : res.rho) {
      for (double v : r.value()) {
        rho_sum += v;
        extreme += (v <= 0.05 || v >= 0.95);
        ++gates;
      }
    }
  }
  ValidationResult out;
  out.mae = count ? abs_sum / static_cast<double>(count) : 0.0;
  out.mean_rho = gates ? rho_sum / static_cast<double>(gates) : 0.0;
  out.frac_rho_extreme = gates ? static_cast<double>(extreme) / static_cast<double>(gates) : 0.0;
  return out;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Splits windows into training and validation (the last validation_fraction, at least one).
inline std::pair<std::vector<SpatioTemporalSeries>, std::vector<SpatioTemporalSeries>> split_windows(
    const std::vector<SpatioTemporalSeries>& windows, double validation_fraction) {
  if (windows.size() < 2) throw ConfigError("need at least 2 windows for a training/validation split");
  std::size_t n_val = static_cast<std::size_t>(std::round(validation_fraction * static_cast<double>(windows.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, windows.size() - 1);
  std::vector<SpatioTemporalSeries> train(windows.begin(), windows.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<SpatioTemporalSeries> val(windows.end() - static_cast<std::ptrdiff_t>(n_val), windows.end());
  return {std::move(train), std::move(val)};
}

/// Trains `model` in place and leaves it at the best validation checkpoint. Deterministic for a
/// given seed.
inline TrainState fit(const std::vector<SpatioTemporalSeries>& windows, CasperModel& model, const TrainingConfig& config,
                      const EpochCallback& on_epoch = {}) {
  config.validate();
  model.set_lambda(config.lambda);
  model.set_tau(config.tau);
  auto [train, val] = split_windows(windows, config.validation_fraction);
  auto params = model.trainable_parameters();
  TrainState state;
  Rng rng(config.seed);
  const std::uint64_t val_seed = config.seed ^ 0x5eed5eedULL;
  CasperModel best = model.clone();
  std::size_t consecutive_bad = 0;
  std::vector<std::size_t> order(train.size());

  for (std::size_t e = 0; e < config.max_epochs; ++e) {
    const double lr = cosine_lr(config.learning_rate, e, config.max_epochs);
    if (model.config().decoder == DecoderKind::kSampledPrompts) resample_prompts(model, train, rng);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      const double scale = 1.0 / static_cast<double>(end - b);
      model.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = b; k < end; ++k) {
        const auto& w = train[order[k]];
        const double p = config.mask_probs[rng.below(config.mask_probs.size())];
        auto [visible, hidden] = training_mask(w, p, rng);
        Graph g;
        auto res = model_forward(g, visible, model, Mode::kTrain, &rng);
        auto terms = masked_loss(g, res.yhat, w.values, hidden, res.rho, config.lambda);
        if (terms.empty_mask) state.events.push_back("epoch " + std::to_string(e + 1) + ": batch window with no masked points");
        g.backward(ad::affine(g, terms.total, scale));
        batch_loss += terms.total.item() * scale;
      }
      if (!std::isfinite(batch_loss)) {
        if (++consecutive_bad >= 2) {
          throw DivergenceError("training diverged at epoch " + std::to_string(e + 1) +
                                ": non-finite loss on two consecutive batches");
        }
        state.events.push_back("epoch " + std::to_string(e + 1) + ": non-finite loss, step skipped");
        continue;
      }
      consecutive_bad = 0;
      if (!adam_step(params, state.adam, lr)) {
        state.events.push_back("epoch " + std::to_string(e + 1) + ": non-finite gradient, step skipped");
      }
      loss_sum += batch_loss * static_cast<double>(end - b);
      loss_count += end - b;
    }
    model.zero_grad();

    const auto v = validate_windows(model, val, config.validation_mask_fraction, val_seed);
    EpochRecord rec{e + 1, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, v.mae, lr, v.mean_rho,
                    v.frac_rho_extreme};
    state.history.push_back(rec);
    state.epoch = e + 1;
    if (on_epoch) on_epoch(rec);
    if (v.mae < state.best_validation_mae) {
      state.best_validation_mae = v.mae;
      state.best_epoch = e + 1;
      state.epochs_since_improvement = 0;
      best.copy_values_from(model);
    } else if (++state.epochs_since_improvement >= config.patience) {
      state.stopped_early = true;
      break;
    }
  }
  model.copy_values_from(best);
  return state;
}

}  // namespace casper
