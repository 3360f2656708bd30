#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "casper/model.hpp"
#include "casper/training.hpp"

using namespace casper;
using ad::Shape;

namespace {

std::vector<double> values(const Tensor& t) { return {t.value().begin(), t.value().end()}; }

ModelConfig toy_config(std::size_t layers = 1, std::size_t d = 8, std::size_t heads = 2, std::size_t prompts = 4) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.heads = heads;
  c.n_prompts = prompts;
  c.ffn_hidden = 8;
  c.seed = 3;
  return c;
}

SpatioTemporalSeries random_series(std::size_t n, std::size_t t, Rng& rng, double observed = 0.7) {
  std::vector<double> x(n * t), a(n * n, 0.0);
  std::vector<std::uint8_t> m(n * t);
  for (std::size_t k = 0; k < x.size(); ++k) {
    x[k] = rng.normal();
    m[k] = rng.bernoulli(observed);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = (i == j || rng.bernoulli(0.6)) ? 1.0 : 0.0;
  return SpatioTemporalSeries::make(n, t, x, a, m);
}

Tensor random_embeddings(std::size_t rows, std::size_t d, Rng& rng) {
  std::vector<double> v(rows * d);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({rows, d}, v);
}

void set_all(Tensor t, double v) {
  for (auto& x : t.mutable_value()) x = v;
}

double gelu(double x) { return ad::detail::gelu(x); }

// y = x W + b for a row vector x.
std::vector<double> linear(std::span<const double> x, const Linear& l) {
  const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < in; ++i) s += x[i] * l.weight.value()[i * out + o];
    y[o] = s + (l.bias.defined() ? l.bias.value()[o] : 0.0);
  }
  return y;
}

std::vector<double> mlp(std::span<const double> x, const Mlp& m) {
  auto h = linear(x, m.first);
  for (auto& v : h) v = gelu(v);
  return linear(h, m.second);
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t d = t.dim(1);
  return {t.value().begin() + r * d, t.value().begin() + (r + 1) * d};
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Input and skip projection

TEST(InputProject, AllObservedHasNoMissingToken) {
  CasperModel model(toy_config());
  set_all(model.missing_token, 123.0);  // distinguishable from any MLP output here
  Rng rng(1);
  auto s = random_series(2, 3, rng, 1.0);
  Graph g;
  auto h = input_project(g, to_tensors(s), model);
  for (std::size_t r = 0; r < 6; ++r) {
    const double x = s.values[r];
    EXPECT_EQ(row(h, r), mlp(std::span<const double>(&x, 1), model.input_mlp));
  }
}

TEST(InputProject, AllMissingEqualsTokenExactly) {
  CasperModel model(toy_config());
  Rng rng(2);
  auto s = random_series(3, 2, rng, 0.0);
  Graph g;
  auto h = input_project(g, to_tensors(s), model);
  for (std::size_t r = 0; r < 6; ++r) EXPECT_EQ(row(h, r), values(model.missing_token));
}

TEST(InputProject, MixedMask) {
  CasperModel model(toy_config());
  auto s = SpatioTemporalSeries::make(2, 2, {0.5, 9.0, 9.0, -1.5}, {1, 0, 0, 1}, {1, 0, 0, 1});
  Graph g;
  auto h = input_project(g, to_tensors(s), model);
  const double a = 0.5, b = -1.5;
  EXPECT_EQ(row(h, 0), mlp(std::span<const double>(&a, 1), model.input_mlp));
  EXPECT_EQ(row(h, 1), values(model.missing_token));
  EXPECT_EQ(row(h, 2), values(model.missing_token));
  EXPECT_EQ(row(h, 3), mlp(std::span<const double>(&b, 1), model.input_mlp));
}

TEST(InputProject, NonFiniteObservedValueIsDataError) {
  EXPECT_THROW(SpatioTemporalSeries::make(1, 2, {1.0, NAN}, {1}, {1, 1}), DataError);
}

TEST(SkipProject, TrivialCases) {
  CasperModel model(toy_config());
  Rng rng(3);
  {
    auto s = random_series(2, 2, rng, 0.0);
    Graph g;
    auto h = skip_project(g, Tensor::zeros({4, 8}), to_tensors(s), model, 1);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(row(h, r), values(model.missing_token));
  }
  {
    auto s = random_series(2, 2, rng, 1.0);
    const auto prev = random_embeddings(4, 8, rng);
    Graph g;
    auto h = skip_project(g, prev, to_tensors(s), model, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      const double x = s.values[r];
      auto m = mlp(std::span<const double>(&x, 1), model.layers[0].skip);
      auto p = row(prev, r);
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(h.value()[r * 8 + c], p[c] + m[c]);
    }
  }
  Graph g;
  EXPECT_THROW(skip_project(g, Tensor::zeros({4, 8}), to_tensors(random_series(2, 2, rng)), model, 2), std::out_of_range);
}

// ---------------------------------------------------------------------------------------------
// Temporal transformer

TEST(TemporalTransformer, SingleStepIsValuePath) {
  CasperModel model(toy_config());
  Rng rng(4);
  const auto h = random_embeddings(3, 8, rng);  // N = 3, T = 1
  Graph g;
  auto out = temporal_transformer_layer(g, h, 3, 1, model, 1);
  const auto& tf = model.layers[0].transformer;
  for (std::size_t i = 0; i < 3; ++i) {
    // Softmax over one step is 1, so the attended vector is out(LN(h) Wv).
    auto y = row(ad::layer_norm(g, Tensor::from({1, 8}, row(h, i)), tf.attn_norm.gain, tf.attn_norm.bias), 0);
    auto v = row(ad::matmul(g, Tensor::from({1, 8}, y), tf.wv), 0);
    auto att = linear(v, tf.out);
    std::vector<double> h1(8);
    for (std::size_t c = 0; c < 8; ++c) h1[c] = h.value()[i * 8 + c] + att[c];
    auto n1 = row(ad::layer_norm(g, Tensor::from({1, 8}, h1), tf.ffn_norm.gain, tf.ffn_norm.bias), 0);
    auto f = mlp(n1, tf.ffn);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.value()[i * 8 + c], h1[c] + f[c], 1e-13);
  }
}

TEST(TemporalTransformer, SensorsAreIndependentAndEquivariant) {
  CasperModel model(toy_config());
  Rng rng(5);
  const std::size_t n = 3, t = 4, d = 8;
  const auto h = random_embeddings(n * t, d, rng);
  // Swap sensors 0 and 2.
  std::vector<double> swapped(n * t * d);
  const std::size_t perm[3] = {2, 1, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < t * d; ++k) swapped[perm[i] * t * d + k] = h.value()[i * t * d + k];
  Graph g;
  auto a = temporal_transformer_layer(g, h, n, t, model, 1);
  auto b = temporal_transformer_layer(g, Tensor::from({n * t, d}, swapped), n, t, model, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < t * d; ++k) EXPECT_EQ(a.value()[i * t * d + k], b.value()[perm[i] * t * d + k]);
}

// ---------------------------------------------------------------------------------------------
// SCA scores and gates

TEST(ScaScores, ZeroProjectionsGiveUniformWeights) {
  CasperModel model(toy_config());
  set_all(model.layers[0].sca.wq, 0.0);
  set_all(model.layers[0].sca.wk, 0.0);
  Rng rng(6);
  auto s = random_series(4, 5, rng);
  const auto h = random_embeddings(20, 8, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t neighbours = 0;
    for (std::size_t j = 0; j < 4; ++j) neighbours += s.weight(i, j) != 0.0;
    auto q = sca_scores(h, s.adjacency, 4, 5, model, 1, i, 2);
    ASSERT_EQ(q.context_rows.size(), neighbours * 5);
    for (double a : q.alpha) EXPECT_NEAR(a, 1.0 / static_cast<double>(neighbours * 5), 1e-15);
  }
}

TEST(ScaScores, SingleNeighbourSingleStep) {
  CasperModel model(toy_config());
  Rng rng(7);
  const auto h = random_embeddings(2, 8, rng);
  auto q = sca_scores(h, std::vector<double>{1, 0, 0, 1}, 2, 1, model, 1, 1, 0);
  ASSERT_EQ(q.context_rows, std::vector<std::size_t>{1});
  for (double a : q.alpha) EXPECT_EQ(a, 1.0);
}

TEST(GateProbability, ZeroGateWeightsGiveOneHalf) {
  CasperModel model(toy_config());
  set_all(model.layers[0].sca.w_gate, 0.0);
  Rng rng(8);
  const auto h = random_embeddings(2, 8, rng);
  EXPECT_EQ(gate_probability(row(h, 0), row(h, 1), model, 1), 0.5);
}

TEST(GateProbability, MatchesLiteralFormula) {
  CasperModel model(toy_config());
  Rng rng(9);
  const auto h = random_embeddings(2, 8, rng);
  const auto& sca = model.layers[0].sca;
  Graph g;
  auto q = row(ad::matmul(g, Tensor::from({1, 8}, row(h, 0)), sca.wq_gate), 0);
  auto k = row(ad::matmul(g, Tensor::from({1, 8}, row(h, 1)), sca.wk_gate), 0);
  double logit = 0.0;
  for (std::size_t c = 0; c < 8; ++c) logit += q[c] * sca.w_gate.value()[c] + k[c] * sca.w_gate.value()[8 + c];
  EXPECT_NEAR(gate_probability(row(h, 0), row(h, 1), model, 1), 1.0 / (1.0 + std::exp(-logit)), 1e-15);
}

TEST(GumbelGate, MonteCarloExceedanceMatchesRho) {
  Rng rng(10);
  std::size_t above = 0;
  for (int k = 0; k < 10000; ++k) above += gumbel_gate(0.3, 0.5, rng, Mode::kTrain) > 0.5;
  const double frac = static_cast<double>(above) / 10000.0;
  EXPECT_GE(frac, 0.28);
  EXPECT_LE(frac, 0.32);
}

TEST(GumbelGate, InferThresholdAndSymmetry) {
  Rng rng(11);
  EXPECT_EQ(gumbel_gate(0.9, 0.5, rng, Mode::kInfer), 1.0);
  EXPECT_EQ(gumbel_gate(0.1, 0.5, rng, Mode::kInfer), 0.0);
  // rho = 0.5 means logit 0; with g1 = g2 the relaxed gate is sigmoid(0).
  const double g = rng.gumbel();
  EXPECT_EQ(ad::detail::sigmoid((0.0 + g - g) / 0.5), 0.5);
  EXPECT_EQ(std::log(0.5) - std::log1p(-0.5), 0.0);
}

TEST(GumbelGate, InvalidArguments) {
  Rng rng(12);
  EXPECT_THROW(gumbel_gate(0.0, 1.0, rng, Mode::kTrain), std::invalid_argument);
  EXPECT_THROW(gumbel_gate(1.0, 1.0, rng, Mode::kTrain), std::invalid_argument);
  EXPECT_THROW(gumbel_gate(0.5, 0.0, rng, Mode::kTrain), std::invalid_argument);
}

TEST(GumbelGate, SampleMeanMatchesAnalyticRelaxedMean) {
  // At tau = 1 the relaxed gate sigmoid(logit + L) with L logistic has mean
  // E[sigmoid(a + L)], computed here by quadrature over the logistic density.
  const double rho = 0.7, logit = std::log(rho / (1 - rho));
  double quad = 0.0;
  const int n = 200000;
  for (int k = 0; k < n; ++k) {
    const double u = (k + 0.5) / n;
    quad += 1.0 / (1.0 + std::exp(-(logit + std::log(u / (1 - u)))));
  }
  quad /= n;
  Rng rng(13);
  double mc = 0.0;
  for (int k = 0; k < 40000; ++k) mc += gumbel_gate(rho, 1.0, rng, Mode::kTrain);
  mc /= 40000;
  EXPECT_NEAR(mc, quad, 4.0 * 0.3 / std::sqrt(40000.0));
}

// ---------------------------------------------------------------------------------------------
// SCA forward

namespace {

struct BruteSca {
  std::vector<double> out;  // [NT x d]
  std::vector<double> z;    // [NT x heads]
};

// Literal evaluation of h_out(i,t) = (1/Z) sum beta * alpha * MLP([h_q ; h_k]) per head.
BruteSca brute_force_sca(const Tensor& h_in, const SpatioTemporalSeries& s, const CasperModel& model,
                         const std::vector<double>& beta_of_pair) {
  const auto& sca = model.layers[0].sca;
  const std::size_t n = s.n_sensors, t = s.n_steps, d = model.config().d_model, heads = model.config().heads;
  const std::size_t dh = d / heads;
  Graph g(Graph::Mode::kNoGrad);
  const auto x = ad::add(g, h_in, positional_encoding(n, t, d, model.config().position_base));
  const auto q = ad::matmul(g, x, sca.wq);
  const auto k = ad::matmul(g, x, sca.wk);
  BruteSca res{std::vector<double>(n * t * d, 0.0), std::vector<double>(n * t * heads, 0.0)};
  std::size_t p = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t tt = 0; tt < t; ++tt) {
      const std::size_t qr = i * t + tt;
      std::vector<std::size_t> ctx;
      for (std::size_t j = 0; j < n; ++j)
        if (j == i || s.weight(i, j) != 0.0)
          for (std::size_t r = 0; r < t; ++r) ctx.push_back(j * t + r);
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> score(ctx.size());
        double mx = -1e300, denom = 0.0;
        for (std::size_t c = 0; c < ctx.size(); ++c) {
          double dot = 0.0;
          for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) dot += q.value()[qr * d + e] * k.value()[ctx[c] * d + e];
          score[c] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[c]);
        }
        for (double sc : score) denom += std::exp(sc - mx);
        double z = 0.0;
        std::vector<double> acc(dh, 0.0);
        for (std::size_t c = 0; c < ctx.size(); ++c) {
          const double alpha = std::exp(score[c] - mx) / denom;
          const double b = beta_of_pair[p + c];
          std::vector<double> in(row(h_in, qr));
          auto hk = row(h_in, ctx[c]);
          in.insert(in.end(), hk.begin(), hk.end());
          const auto v = mlp(in, sca.message);
          z += b * alpha;
          for (std::size_t e = 0; e < dh; ++e) acc[e] += b * alpha * v[h * dh + e];
        }
        res.z[qr * heads + h] = std::max(z, ad::kGateNormFloor);
        for (std::size_t e = 0; e < dh; ++e) res.out[qr * d + h * dh + e] = acc[e] / res.z[qr * heads + h];
      }
      p += ctx.size();
    }
  return res;
}

}  // namespace

TEST(ScaForward, MatchesBruteForceOnToyInstance) {
  CasperModel model(toy_config());
  Rng rng(14);
  auto s = SpatioTemporalSeries::make(2, 2, {0, 0, 0, 0}, {1, 1, 1, 1}, {1, 1, 1, 1});
  const auto h = random_embeddings(4, 8, rng);
  const auto pairs = spatial_pairs(s.adjacency, 2, 2);
  std::vector<double> beta(pairs->size());
  for (auto& b : beta) b = rng.uniform(0.0, 1.0);
  Graph g(Graph::Mode::kNoGrad);
  ScaOptions opt;
  opt.forced_beta = &beta;
  auto res = sca_forward(g, h, pairs, 2, 2, model, 1, Mode::kInfer, nullptr, opt);
  const auto ref = brute_force_sca(h, s, model, beta);
  // The second message layer is applied after pooling, which reorders the sums; agreement is
  // to rounding, not bitwise.
  for (std::size_t k = 0; k < ref.out.size(); ++k) EXPECT_NEAR(res.out.value()[k], ref.out[k], 1e-12) << k;
  for (std::size_t k = 0; k < ref.z.size(); ++k) EXPECT_NEAR(res.trace.z[k], ref.z[k], 1e-15);
}

TEST(ScaForward, ForcedOpenGatesGivePlainAttention) {
  CasperModel model(toy_config());
  Rng rng(15);
  auto s = random_series(3, 3, rng);
  const auto h = random_embeddings(9, 8, rng);
  const auto pairs = spatial_pairs(s.adjacency, 3, 3);
  std::vector<double> ones(pairs->size(), 1.0);
  ScaOptions opt;
  opt.forced_beta = &ones;
  Graph g(Graph::Mode::kNoGrad);
  auto res = sca_forward(g, h, pairs, 3, 3, model, 1, Mode::kInfer, nullptr, opt);
  for (double z : res.trace.z) EXPECT_NEAR(z, 1.0, 1e-14);
  const auto ref = brute_force_sca(h, s, model, ones);
  for (std::size_t k = 0; k < ref.out.size(); ++k) EXPECT_NEAR(res.out.value()[k], ref.out[k], 1e-12);
}

TEST(ScaForward, ForcedClosedGatesGiveZero) {
  CasperModel model(toy_config());
  Rng rng(16);
  auto s = random_series(3, 3, rng);
  const auto h = random_embeddings(9, 8, rng);
  const auto pairs = spatial_pairs(s.adjacency, 3, 3);
  std::vector<double> zeros(pairs->size(), 0.0);
  ScaOptions opt;
  opt.forced_beta = &zeros;
  Graph g(Graph::Mode::kNoGrad);
  auto res = sca_forward(g, h, pairs, 3, 3, model, 1, Mode::kInfer, nullptr, opt);
  for (double v : res.out.value()) EXPECT_EQ(v, 0.0);
  for (double z : res.trace.z) EXPECT_EQ(z, ad::kGateNormFloor);
}

TEST(ScaForward, AlphaSumsToOnePerQuery) {
  CasperModel model(toy_config(1, 8, 4));
  Rng rng(17);
  auto s = random_series(5, 4, rng);
  Graph g(Graph::Mode::kNoGrad);
  auto enc = encoder_forward(g, s, model, Mode::kTrain, &rng);
  const auto& tr = enc.traces[0];
  for (std::size_t q = 0; q < tr.pairs->n_queries; ++q)
    for (std::size_t h = 0; h < tr.heads; ++h) {
      double sum = 0.0;
      for (auto p = tr.pairs->offsets[q]; p < tr.pairs->offsets[q + 1]; ++p) sum += tr.alpha[p * tr.heads + h];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(ScaForward, GrangerPerturbationOfClosedContextIsBitIdentical) {
  CasperModel model(toy_config());
  Rng rng(18);
  auto s = random_series(3, 4, rng);
  auto h = random_embeddings(12, 8, rng);
  const auto pairs = spatial_pairs(s.adjacency, 3, 4);
  // Close every context of sensor 1 for query row 0; keep the rest open.
  std::vector<double> beta(pairs->size(), 1.0);
  for (auto p = pairs->offsets[0]; p < pairs->offsets[1]; ++p)
    if (pairs->key[p] / 4 == 1 || pairs->key[p] == 2) beta[p] = 0.0;
  ScaOptions opt;
  opt.forced_beta = &beta;
  auto run = [&](const Tensor& x) {
    Graph g(Graph::Mode::kNoGrad);
    return row(sca_forward(g, x, pairs, 3, 4, model, 1, Mode::kInfer, nullptr, opt).out, 0);
  };
  const auto base = run(h);
  // Context row 2 (sensor 0, step 2) is closed for query 0 and is not the query itself.
  auto perturbed = Tensor::from({12, 8}, values(h));
  for (std::size_t c = 0; c < 8; ++c) perturbed.mutable_value()[2 * 8 + c] += 5.0;
  EXPECT_EQ(run(perturbed), base);
  // Context row 1 is open: the output changes.
  auto open = Tensor::from({12, 8}, values(h));
  for (std::size_t c = 0; c < 8; ++c) open.mutable_value()[1 * 8 + c] += 5.0;
  EXPECT_NE(run(open), base);
}

TEST(ScaForward, TrainModeNeedsRng) {
  CasperModel model(toy_config());
  Rng rng(19);
  auto s = random_series(2, 2, rng);
  Graph g;
  EXPECT_THROW(encoder_forward(g, s, model, Mode::kTrain, nullptr), std::invalid_argument);
}

TEST(ScaForward, GateWeightsReceiveGradientInTrainMode) {
  CasperModel model(toy_config());
  Rng rng(20);
  auto s = random_series(3, 4, rng);
  Graph g;
  auto res = model_forward(g, s, model, Mode::kTrain, &rng);
  auto loss = masked_loss(g, res.yhat, s.values, s.mask, res.rho, 0.0);
  g.backward(loss.total);
  for (auto* t : {&model.layers[0].sca.w_gate, &model.layers[0].sca.wq_gate, &model.layers[0].sca.wk_gate}) {
    ASSERT_TRUE(t->has_grad());
    double norm = 0.0;
    for (double v : t->grad()) norm += v * v;
    EXPECT_GT(norm, 0.0);
  }
}

// ---------------------------------------------------------------------------------------------
// Encoder and decoder

TEST(Encoder, SingleLayerEqualsManualComposition) {
  CasperModel model(toy_config());
  Rng rng(21);
  auto s = random_series(3, 4, rng);
  Graph g(Graph::Mode::kNoGrad);
  auto enc = encoder_forward(g, s, model, Mode::kInfer, nullptr);
  const auto st = to_tensors(s);
  auto h0 = input_project(g, st, model);
  auto skip = skip_project(g, h0, st, model, 1);
  auto hin = temporal_transformer_layer(g, skip, 3, 4, model, 1);
  auto sca = sca_forward(g, hin, spatial_pairs(s.adjacency, 3, 4), 3, 4, model, 1, Mode::kInfer, nullptr);
  auto h1 = apply(g, model.layers[0].out_norm, ad::add(g, hin, sca.out));
  EXPECT_EQ(values(enc.h), values(h1));
}

TEST(Encoder, DeterministicInBothModes) {
  CasperModel model(toy_config(2));
  Rng data_rng(22);
  auto s = random_series(3, 4, data_rng);
  auto run = [&](Mode mode) {
    Rng rng(99);
    Graph g(Graph::Mode::kNoGrad);
    return values(encoder_forward(g, s, model, mode, &rng).h);
  };
  EXPECT_EQ(run(Mode::kTrain), run(Mode::kTrain));
  EXPECT_EQ(run(Mode::kInfer), run(Mode::kInfer));
  EXPECT_NE(run(Mode::kTrain), run(Mode::kInfer));
}

TEST(Decoder, SinglePromptIgnoresScores) {
  CasperModel model(toy_config(1, 8, 2, 1));
  Rng rng(23);
  const auto h = random_embeddings(5, 8, rng);
  Graph g(Graph::Mode::kNoGrad);
  auto out = pbd_forward(g, h, model);
  for (double a : out.attention) EXPECT_EQ(a, 1.0);
  const auto& pbd = model.pbd;
  const auto v = apply(g, pbd.value_norm, apply(g, pbd.value, pbd.prompts));
  for (std::size_t r = 0; r < 5; ++r) {
    auto x = row(h, r);
    for (std::size_t c = 0; c < 8; ++c) x[c] += v.value()[c];
    EXPECT_NEAR(out.yhat.value()[r], linear(x, pbd.head)[0], 1e-14);
  }
}

TEST(Decoder, DuplicatedPromptEqualsSinglePrompt) {
  CasperModel model(toy_config(1, 8, 2, 2));
  auto prompts = model.pbd.prompts.mutable_value();
  for (std::size_t c = 0; c < 8; ++c) prompts[8 + c] = prompts[c];
  Rng rng(32);
  const auto h = random_embeddings(5, 8, rng);
  Graph g(Graph::Mode::kNoGrad);
  auto out = pbd_forward(g, h, model);
  const auto& pbd = model.pbd;
  const auto v = apply(g, pbd.value_norm, apply(g, pbd.value, pbd.prompts));
  for (std::size_t r = 0; r < 5; ++r) {
    auto x = row(h, r);
    for (std::size_t c = 0; c < 8; ++c) x[c] += v.value()[c];
    EXPECT_NEAR(out.yhat.value()[r], linear(x, pbd.head)[0], 1e-14);
  }
}

TEST(Decoder, AttentionRowsSumToOne) {
  CasperModel model(toy_config(1, 8, 4, 6));
  Rng rng(24);
  const auto h = random_embeddings(7, 8, rng);
  Graph g(Graph::Mode::kNoGrad);
  auto out = pbd_forward(g, h, model);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t hd = 0; hd < 4; ++hd) {
      double sum = 0.0;
      for (std::size_t p = 0; p < 6; ++p) sum += out.attention[(r * 6 + p) * 4 + hd];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Decoder, MlpAblationChangesOnlyDecoder) {
  auto c = toy_config();
  CasperModel full(c);
  c.decoder = DecoderKind::kMlp;
  CasperModel ablated(c);
  Rng rng(25);
  auto s = random_series(3, 4, rng);
  Graph g(Graph::Mode::kNoGrad);
  EXPECT_EQ(values(encoder_forward(g, s, full, Mode::kInfer, nullptr).h),
            values(encoder_forward(g, s, ablated, Mode::kInfer, nullptr).h));
  EXPECT_NE(predict(s, full), predict(s, ablated));
}

// ---------------------------------------------------------------------------------------------
// Whole-model properties

TEST(Model, MaskedValuesNeverReachPredictions) {
  CasperModel model(toy_config(2));
  Rng rng(26);
  auto s = random_series(4, 6, rng, 0.6);
  const auto base = predict(s, model);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = s;
    for (std::size_t k = 0; k < t.values.size(); ++k)
      if (!t.mask[k]) t.values[k] = rng.normal() * 100.0;
    EXPECT_EQ(predict(t, model), base);
  }
}

TEST(Model, FullLossGradientMatchesFiniteDifferences) {
  auto c = toy_config(1, 8, 2, 4);
  c.tau = 0.7;
  CasperModel model(c);
  Rng rng(27);
  auto s = random_series(3, 5, rng, 0.8);
  Rng mask_rng(28);
  auto [visible, hidden] = training_mask(s, 0.5, mask_rng);
  auto params = model.trainable_parameters();
  auto f = [&](Graph& g) {
    Rng noise(29);
    auto res = model_forward(g, visible, model, Mode::kTrain, &noise);
    return masked_loss(g, res.yhat, s.values, hidden, res.rho, 0.5).total;
  };
  EXPECT_LT(ad::grad_check(f, params, 1e-5), 1e-3);
}

TEST(Model, ConfigValidationAndJsonRoundTrip) {
  auto c = toy_config();
  c.heads = 3;
  EXPECT_THROW(CasperModel{c}, ConfigError);
  c = toy_config();
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.decoder = DecoderKind::kSampledPrompts;
  const nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW(decoder_from_string("lstm"), ConfigError);
}

TEST(Model, DefaultsMatchPublishedSettings) {
  ModelConfig c;
  EXPECT_EQ(c.d_model, 32u);
  EXPECT_EQ(c.n_prompts, 256u);
  TrainingConfig t;
  EXPECT_EQ(t.learning_rate, 8e-4);
  EXPECT_EQ(t.max_epochs, 300u);
  EXPECT_EQ(t.patience, 40u);
  EXPECT_EQ(t.batch_size, 8u);
}

TEST(Model, CloneIsIndependentDeepCopy) {
  CasperModel model(toy_config());
  auto copy = model.clone();
  const auto a = model.named_tensors(), b = copy.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(values(a[i].tensor), values(b[i].tensor));
  }
  model.missing_token.mutable_value()[0] += 1.0;
  EXPECT_NE(model.missing_token.value()[0], copy.missing_token.value()[0]);
}

TEST(Model, SampledPromptsAreMeanPooledEmbeddings) {
  auto c = toy_config(1, 8, 2, 3);
  c.decoder = DecoderKind::kSampledPrompts;
  CasperModel model(c);
  EXPECT_EQ(model.trainable_parameters().size() + 1, model.named_tensors().size());
  Rng rng(30);
  std::vector<SpatioTemporalSeries> windows{random_series(3, 4, rng)};
  Rng pick(31);
  resample_prompts(model, windows, pick);
  Graph g(Graph::Mode::kNoGrad);
  auto h = encoder_forward(g, windows[0], model, Mode::kInfer, nullptr).h;
  for (std::size_t cidx = 0; cidx < 8; ++cidx) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 12; ++r) mean += h.value()[r * 8 + cidx];
    mean /= 12.0;
    for (std::size_t p = 0; p < 3; ++p) EXPECT_NEAR(model.pbd.prompts.value()[p * 8 + cidx], mean, 1e-12);
  }
}
