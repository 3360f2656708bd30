#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "casper/autodiff.hpp"
#include "casper/rng.hpp"

using namespace casper;
using namespace casper::ad;

namespace {

std::vector<double> values(const Tensor& t) { return {t.value().begin(), t.value().end()}; }

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Matmul, IdentityAndScalar) {
  Graph g;
  auto r = matmul(g, Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(values(r), (std::vector<double>{3, 4}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(matmul(g, Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item(), 6.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g, Tensor::zeros({2, 3}), Tensor::zeros({2, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, TrivialCases) {
  Graph g;
  EXPECT_EQ(sigmoid(g, Tensor::scalar(0.0)).item(), 0.5);
  auto h = mul(g, Tensor::from({3}, {1, 2, 3}), Tensor::from({3}, {0, 1, 0}));
  EXPECT_EQ(values(h), (std::vector<double>{0, 2, 0}));
}

TEST(Elementwise, AbsGradientSign) {
  for (double x0 : {2.0, -2.0}) {
    Graph g;
    auto x = Tensor::scalar(x0, true);
    g.backward(abs(g, x));
    EXPECT_EQ(x.grad()[0], x0 > 0 ? 1.0 : -1.0);
  }
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  Graph g;
  EXPECT_THROW(log(g, Tensor::from({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(log(g, Tensor::from({1}, {-1.0})), DomainError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  const auto a0 = random_tensor({3, 4}, rng);
  const auto b0 = Tensor::from({3, 4}, [&] {
    std::vector<double> v(12);
    for (auto& x : v) x = rng.uniform(0.5, 2.0);
    return v;
  }());
  auto f = [&](Graph& g, const Tensor& a) {
    auto y = add(g, mul(g, a, b0), div(g, a, b0));
    y = add(g, y, sub(g, tanh(g, a), sigmoid(g, a)));
    y = add(g, y, gelu(g, a));
    y = add(g, y, exp(g, affine(g, a, 0.3, -0.2)));
    y = add(g, y, log(g, b0));
    y = add(g, y, neg(g, mul(g, a, a)));
    return sum(g, y);
  };
  EXPECT_LT(grad_check(f, a0, 1e-5), 1e-6);
}

TEST(Elementwise, BroadcastRowVectorGradient) {
  Rng rng(2);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({3}, rng);
  std::vector<Tensor> params{a, b};
  auto f = [&](Graph& g) { return sum(g, mul(g, add(g, a, b), a)); };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(Softmax, TrivialCases) {
  Graph g;
  for (double c : {-3.0, 0.0, 7.5}) {
    auto s = softmax(g, Tensor::from({4}, {c, c, c, c}), 0);
    for (double v : s.value()) EXPECT_NEAR(v, 0.25, 1e-15);
  }
  auto s = softmax(g, Tensor::from({2}, {std::log(1.0), std::log(3.0)}), 0);
  EXPECT_NEAR(s.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(s.value()[1], 0.75, 1e-15);
  auto big = softmax(g, Tensor::from({2}, {1000.0, 0.0}), 0);
  EXPECT_TRUE(std::isfinite(big.value()[0]));
  EXPECT_NEAR(big.value()[0], 1.0, 1e-15);
  EXPECT_NEAR(big.value()[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyAxisIsInvalid) {
  Graph g;
  EXPECT_THROW(softmax(g, Tensor::zeros({3, 0}), 1), std::invalid_argument);
}

TEST(Softmax, DotWithFixedVectorGradient) {
  Rng rng(3);
  const auto w = random_tensor({5}, rng, false);
  auto f = [&](Graph& g, const Tensor& x) { return sum(g, mul(g, softmax(g, x, 0), w)); };
  EXPECT_LT(grad_check(f, random_tensor({5}, rng), 1e-5), 1e-5);
}

TEST(Softmax, AlongEitherAxisSumsToOne) {
  Rng rng(4);
  Graph g;
  const auto x = random_tensor({3, 5}, rng, false, 4.0);
  auto rows = softmax(g, x, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += rows.value()[r * 5 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto cols = softmax(g, x, 0);
  for (std::size_t c = 0; c < 5; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 3; ++r) s += cols.value()[r * 5 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, TrivialCases) {
  Graph g;
  const auto gain = Tensor::from({2}, {1, 1});
  const auto bias = Tensor::from({2}, {0, 0});
  auto c = layer_norm(g, Tensor::from({2}, {4.2, 4.2}), gain, bias);
  EXPECT_EQ(values(c), (std::vector<double>{0, 0}));
  auto u = layer_norm(g, Tensor::from({2}, {1, -1}), gain, bias);
  const double k = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(u.value()[0], k, 1e-15);
  EXPECT_NEAR(u.value()[1], -k, 1e-15);
  EXPECT_NEAR(u.value()[0], 1.0, 1e-5);
}

TEST(LayerNorm, GradientAllInputs) {
  Rng rng(5);
  auto x = random_tensor({3, 4}, rng);
  auto gain = random_tensor({4}, rng);
  auto bias = random_tensor({4}, rng);
  const auto w = random_tensor({3, 4}, rng, false);
  std::vector<Tensor> params{x, gain, bias};
  auto f = [&](Graph& g) { return sum(g, mul(g, layer_norm(g, x, gain, bias), w)); };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(Backward, AnalyticCases) {
  {
    Graph g;
    auto x = Tensor::scalar(3.0, true);
    g.backward(mul(g, x, x));
    EXPECT_EQ(x.grad()[0], 6.0);
  }
  {
    Graph g;
    auto x = Tensor::from({2}, {1, -2}, true);
    g.backward(sum(g, abs(g, x)));
    EXPECT_EQ(values(Tensor::from({2}, {x.grad()[0], x.grad()[1]})), (std::vector<double>{1, -1}));
  }
  {
    Graph g;
    auto x = Tensor::scalar(0.0, true);
    g.backward(abs(g, x));
    EXPECT_EQ(x.grad()[0], 0.0);
  }
}

TEST(Backward, NonScalarLossIsInvalid) {
  Graph g;
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(g.backward(mul(g, x, x)), std::invalid_argument);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Graph g;
  auto x = Tensor::scalar(2.0, true);
  auto y = mul(g, x, x);
  g.backward(add(g, y, y));  // d(2x^2)/dx = 4x
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Backward, NoGradModeRecordsNothing) {
  Graph g(Graph::Mode::kNoGrad);
  auto x = Tensor::scalar(2.0, true);
  auto y = mul(g, x, x);
  EXPECT_EQ(g.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, SquareAtOne) {
  auto f = [](Graph& g, const Tensor& x) { return mul(g, x, x); };
  EXPECT_LT(grad_check(f, Tensor::scalar(1.0), 1e-5), 1e-6);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately wrong backward (factor 2) must show up as a large error.
  auto f = [](Graph& g, const Tensor& x) {
    Tensor out = Tensor::scalar(x.value()[0] * x.value()[0]);
    return g.record("bad_square", {x}, out, [x = x.ptr()](const Node& o) {
      x->grad_data()[0] += 4.0 * x->value[0] * o.grad[0];
    });
  };
  EXPECT_GT(grad_check(f, Tensor::scalar(1.5), 1e-5), 0.4);
}

TEST(GradCheck, NonFiniteEvaluationPropagates) {
  auto f = [](Graph& g, const Tensor& x) { return div(g, Tensor::scalar(1.0), x); };
  EXPECT_THROW(grad_check(f, Tensor::scalar(0.0), 1e-5), DomainError);
}

TEST(ShapeOps, SliceConcatReshapeGradients) {
  Rng rng(6);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({2, 3}, rng);
  auto c = random_tensor({6, 2}, rng);
  const auto w = random_tensor({6, 5}, rng, false);
  std::vector<Tensor> params{a, b, c};
  auto f = [&](Graph& g) {
    auto rows = concat_rows(g, slice_rows(g, a, 1, 3), concat_rows(g, b, slice_rows(g, a, 0, 2)));
    auto wide = concat_cols(g, rows, c);
    auto flat = reshape(g, wide, {30});
    return sum(g, mul(g, mul(g, flat, flat), reshape(g, w, {30})));
  };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(ShapeOps, ClampMinAndMean) {
  Graph g;
  auto x = Tensor::from({3}, {-1.0, 0.5, 2.0}, true);
  auto y = clamp_min(g, x, 0.0);
  EXPECT_EQ(values(y), (std::vector<double>{0.0, 0.5, 2.0}));
  g.backward(mean(g, y));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 1.0 / 3.0);
}

// ---------------------------------------------------------------------------------------------
// Sparse attention primitives against dense reference implementations.

namespace {

PairIndexPtr ragged_pairs() {
  // 3 queries over 4 keys with uneven neighbourhoods.
  return std::make_shared<const PairIndex>(PairIndex::from_lists(4, {{0, 2}, {1}, {0, 1, 2, 3}}));
}

}  // namespace

TEST(PairOps, SegmentSoftmaxMatchesDenseSoftmax) {
  Rng rng(7);
  const auto pairs = ragged_pairs();
  const auto s = random_tensor({pairs->size(), 2}, rng, false, 3.0);
  Graph g;
  auto seg = segment_softmax(g, s, pairs);
  for (std::size_t q = 0; q < pairs->n_queries; ++q) {
    for (std::size_t h = 0; h < 2; ++h) {
      std::vector<double> row;
      for (auto p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) row.push_back(s.value()[p * 2 + h]);
      auto ref = softmax(g, Tensor::from({row.size()}, row), 0);
      for (std::size_t k = 0; k < row.size(); ++k)
        EXPECT_NEAR(seg.value()[(pairs->offsets[q] + k) * 2 + h], ref.value()[k], 1e-15);
    }
  }
}

TEST(PairOps, PairDotAttendGatherGradients) {
  Rng rng(8);
  const auto pairs = ragged_pairs();
  auto q = random_tensor({3, 4}, rng);
  auto k = random_tensor({4, 4}, rng);
  auto v = random_tensor({4, 4}, rng);
  const auto w = random_tensor({3, 4}, rng, false);
  const auto u = random_tensor({pairs->size(), 4}, rng, false);
  std::vector<Tensor> params{q, k, v};
  auto f = [&](Graph& g) {
    auto a = segment_softmax(g, pair_dot(g, q, k, pairs, 2, 0.7), pairs);
    auto o = attend_keys(g, a, v, pairs);
    auto gathered = add(g, gather_rows(g, q, pairs, PairSide::kQuery), gather_rows(g, v, pairs, PairSide::kKey));
    return add(g, sum(g, mul(g, o, w)), sum(g, mul(g, tanh(g, gathered), u)));
  };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(PairOps, PairDotMatchesPerHeadDotProduct) {
  Rng rng(9);
  const auto pairs = ragged_pairs();
  const auto q = random_tensor({3, 4}, rng, false);
  const auto k = random_tensor({4, 4}, rng, false);
  Graph g;
  auto s = pair_dot(g, q, k, pairs, 2, 0.5);
  for (std::size_t p = 0; p < pairs->size(); ++p)
    for (std::size_t h = 0; h < 2; ++h) {
      double ref = 0.0;
      for (std::size_t c = 2 * h; c < 2 * h + 2; ++c) ref += q.value()[pairs->query[p] * 4 + c] * k.value()[pairs->key[p] * 4 + c];
      EXPECT_NEAR(s.value()[p * 2 + h], 0.5 * ref, 1e-15);
    }
}

TEST(GatedAttention, GradientsWrtScoresGatesAndMessages) {
  Rng rng(10);
  const auto pairs = ragged_pairs();
  auto scores = random_tensor({pairs->size(), 2}, rng);
  std::vector<double> b(pairs->size());
  for (auto& x : b) x = rng.uniform(0.1, 0.9);
  auto beta = Tensor::from({pairs->size(), 1}, b, true);
  auto msg = random_tensor({pairs->size(), 4}, rng);
  const auto w = random_tensor({3, 4}, rng, false);
  std::vector<Tensor> params{scores, beta, msg};
  auto f = [&](Graph& g) { return sum(g, mul(g, gated_attention(g, scores, beta, msg, pairs).out, w)); };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(GatedAttention, PooledVariantGradients) {
  Rng rng(11);
  const auto pairs = ragged_pairs();
  auto scores = random_tensor({pairs->size(), 2}, rng);
  std::vector<double> b(pairs->size());
  for (auto& x : b) x = rng.uniform(0.1, 0.9);
  auto beta = Tensor::from({pairs->size(), 1}, b, true);
  auto msg = random_tensor({pairs->size(), 3}, rng);
  auto w2 = random_tensor({3, 4}, rng);
  const auto w = random_tensor({3, 4}, rng, false);
  std::vector<Tensor> params{scores, beta, msg, w2};
  auto f = [&](Graph& g) {
    auto pooled = gated_attention_pooled(g, scores, beta, msg, pairs).out;
    return sum(g, mul(g, select_head_blocks(g, matmul(g, pooled, w2), 2), w));
  };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-6);
}

TEST(GatedAttention, ForcedGatesReduceToPlainOrZero) {
  Rng rng(12);
  const auto pairs = ragged_pairs();
  const auto scores = random_tensor({pairs->size(), 2}, rng, false);
  const auto msg = random_tensor({pairs->size(), 4}, rng, false);
  Graph g;
  auto open = gated_attention(g, scores, Tensor::from({pairs->size(), 1}, std::vector<double>(pairs->size(), 1.0)), msg, pairs);
  auto alpha = segment_softmax(g, scores, pairs);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t c = 0; c < 4; ++c) {
      double ref = 0.0;
      for (auto p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) ref += alpha.value()[p * 2 + c / 2] * msg.value()[p * 4 + c];
      EXPECT_NEAR(open.out.value()[q * 4 + c], ref, 1e-14);
    }
  for (double z : open.z) EXPECT_NEAR(z, 1.0, 1e-15);

  auto shut = gated_attention(g, scores, Tensor::zeros({pairs->size(), 1}), msg, pairs);
  for (double v : shut.out.value()) EXPECT_EQ(v, 0.0);
  for (double z : shut.z) EXPECT_EQ(z, kGateNormFloor);
}

TEST(GatedAttention, ClosedContextsDoNotEnterArithmetic) {
  // Changing a message (even to a huge value) whose gate is closed leaves the output bit-identical.
  Rng rng(13);
  const auto pairs = ragged_pairs();
  const auto scores = random_tensor({pairs->size(), 2}, rng, false);
  std::vector<double> b(pairs->size(), 1.0);
  b[3] = 0.0;  // query 2, first key
  const auto beta = Tensor::from({pairs->size(), 1}, b);
  auto msg = random_tensor({pairs->size(), 4}, rng, false);
  Graph g;
  const auto before = values(gated_attention(g, scores, beta, msg, pairs).out);
  for (std::size_t c = 0; c < 4; ++c) msg.mutable_value()[3 * 4 + c] = 1e12;
  const auto after = values(gated_attention(g, scores, beta, msg, pairs).out);
  EXPECT_EQ(before, after);
}

TEST(GatedAttention, MatchesDenseBruteForce) {
  Rng rng(14);
  const auto pairs = ragged_pairs();
  const auto scores = random_tensor({pairs->size(), 2}, rng, false);
  std::vector<double> b(pairs->size());
  for (auto& x : b) x = rng.uniform(0.0, 1.0);
  const auto msg = random_tensor({pairs->size(), 4}, rng, false);
  Graph g;
  auto res = gated_attention(g, scores, Tensor::from({pairs->size(), 1}, b), msg, pairs);
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t h = 0; h < 2; ++h) {
      double denom = 0.0;
      for (auto p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) denom += std::exp(scores.value()[p * 2 + h]);
      double z = 0.0;
      std::vector<double> num(2, 0.0);
      for (auto p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) {
        const double a = std::exp(scores.value()[p * 2 + h]) / denom;
        z += b[p] * a;
        for (std::size_t c = 0; c < 2; ++c) num[c] += b[p] * a * msg.value()[p * 4 + 2 * h + c];
      }
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(res.out.value()[q * 4 + 2 * h + c], num[c] / std::max(z, kGateNormFloor), 1e-13);
    }
}

TEST(PairIndex, RejectsOutOfRangeKeys) {
  EXPECT_THROW(PairIndex::from_lists(2, {{0, 2}}), std::out_of_range);
  auto dense = PairIndex::dense(2, 3);
  EXPECT_EQ(dense.size(), 6u);
  EXPECT_EQ(dense.offsets.back(), 6u);
}

TEST(GradCheck, EpsilonOutsideRangeIsInvalid) {
  auto f = [](Graph& g, const Tensor& x) { return mul(g, x, x); };
  EXPECT_THROW(grad_check(f, Tensor::scalar(1.0), 1e-2), std::invalid_argument);
}
