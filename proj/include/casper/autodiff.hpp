#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major arrays of doubles.
//
// A Graph is a tape: every differentiable op appends one record holding a backward closure.
// Graph::backward walks the tape once in reverse. Leaves (parameters) live outside any graph
// and accumulate gradients across graphs until zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "casper/error.hpp"

namespace casper::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  std::size_t size() const { return value.size(); }

  double* grad_data() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + to_string(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Graph {
 public:
  enum class Mode { kRecord, kNoGrad };

  struct Record {
    std::string kind;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void(const Node&)> backward;
  };

  explicit Graph(Mode mode = Mode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }

  /// Appends `output` to the tape when any input needs a gradient. `backward` receives the
  /// output node after its gradient is complete and must accumulate into the inputs.
  Tensor record(std::string_view kind, std::initializer_list<Tensor> inputs, Tensor output,
                std::function<void(const Node&)> backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    needs = needs && recording();
    output.set_requires_grad(needs);
    if (!needs) return output;
    Record rec;
    rec.kind = std::string(kind);
    for (const auto& in : inputs) rec.inputs.push_back(in.ptr());
    rec.output = output.ptr();
    rec.backward = std::move(backward);
    position_[output.node()] = records_.size();
    records_.push_back(std::move(rec));
    return output;
  }

  /// Accumulates d(loss)/d(leaf) into every leaf reachable from `loss`.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    for (auto& rec : records_) rec.output->grad.clear();
    loss.node()->grad_data()[0] += 1.0;
    auto it = position_.find(loss.node());
    if (it == position_.end()) return;  // loss is itself a leaf
    for (std::size_t i = it->second + 1; i-- > 0;) {
      auto& rec = records_[i];
      if (rec.output->grad.empty()) continue;
      rec.backward(*rec.output);
    }
  }

  std::size_t size() const { return records_.size(); }
  std::span<const Record> records() const { return records_; }

 private:
  struct NodeHash {
    std::size_t operator()(const Node* n) const { return std::hash<const void*>()(n); }
  };

  Mode mode_;
  std::vector<Record> records_;
  std::unordered_map<const Node*, std::size_t, NodeHash> position_;
};

// ---------------------------------------------------------------------------------------------
// Sparse pair structure shared by all attention variants. Pairs are grouped by query (CSR).

struct PairIndex {
  std::size_t n_queries = 0;
  std::size_t n_keys = 0;
  std::vector<std::uint32_t> offsets;  // n_queries + 1
  std::vector<std::uint32_t> query;    // per pair
  std::vector<std::uint32_t> key;      // per pair

  std::size_t size() const { return key.size(); }

  /// `keys_of_query[q]` lists the key rows attended by query row q, in order.
  static PairIndex from_lists(std::size_t n_keys, const std::vector<std::vector<std::uint32_t>>& keys_of_query) {
    PairIndex idx;
    idx.n_queries = keys_of_query.size();
    idx.n_keys = n_keys;
    idx.offsets.reserve(idx.n_queries + 1);
    idx.offsets.push_back(0);
    for (std::size_t q = 0; q < keys_of_query.size(); ++q) {
      for (auto k : keys_of_query[q]) {
        if (k >= n_keys) throw std::out_of_range("pair key row out of range");
        idx.query.push_back(static_cast<std::uint32_t>(q));
        idx.key.push_back(k);
      }
      idx.offsets.push_back(static_cast<std::uint32_t>(idx.key.size()));
    }
    return idx;
  }

  /// Every query attends every key.
  static PairIndex dense(std::size_t n_queries, std::size_t n_keys) {
    PairIndex idx;
    idx.n_queries = n_queries;
    idx.n_keys = n_keys;
    idx.offsets.resize(n_queries + 1);
    idx.query.resize(n_queries * n_keys);
    idx.key.resize(n_queries * n_keys);
    for (std::size_t q = 0; q < n_queries; ++q) {
      idx.offsets[q] = static_cast<std::uint32_t>(q * n_keys);
      for (std::size_t k = 0; k < n_keys; ++k) {
        idx.query[q * n_keys + k] = static_cast<std::uint32_t>(q);
        idx.key[q * n_keys + k] = static_cast<std::uint32_t>(k);
      }
    }
    idx.offsets[n_queries] = static_cast<std::uint32_t>(n_queries * n_keys);
    return idx;
  }
};

using PairIndexPtr = std::shared_ptr<const PairIndex>;
enum class PairSide { kQuery, kKey };

// ---------------------------------------------------------------------------------------------
namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

// Per-element input offsets for numpy-style broadcasting. Empty vectors mean identity mapping.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcast-compatible");
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto sa = strides(pa);
  const auto sb = strides(pb);
  const std::size_t n = numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < plan.out[d]) break;
      ia -= sa[d] * counter[d];
      ib -= sb[d] * counter[d];
      counter[d] = 0;
    }
  }
  return plan;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Dense linear algebra

/// a[m x k] * b[k x n]
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  auto out = Tensor::zeros({m, n});
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.mutable_value().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = ov + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return g.record("matmul", {a, b}, out, [a = a.ptr(), b = b.ptr(), m, k, n](const Node& o) {
    const double* go = o.grad.data();
    if (a->requires_grad) {
      double* ga = a->grad_data();
      const double* bv = b->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b->requires_grad) {
      double* gb = b->grad_data();
      const double* av = a->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Elementwise

enum class OpKind { kAdd, kSub, kMul, kDiv, kSigmoid, kExp, kLog, kAbs, kGelu, kTanh, kNeg };

inline bool is_binary(OpKind op) {
  return op == OpKind::kAdd || op == OpKind::kSub || op == OpKind::kMul || op == OpKind::kDiv;
}

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kAbs: return "abs";
    case OpKind::kGelu: return "gelu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kNeg: return "neg";
  }
  return "?";
}

namespace detail {

inline Tensor binary(Graph& g, OpKind op, const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), op_name(op)));
  const bool direct = plan->a_index.empty();
  auto out = Tensor::zeros(plan->out);
  const std::size_t n = out.size();
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.mutable_value().data();
  auto ia = [&](std::size_t i) { return direct ? i : plan->a_index[i]; };
  auto ib = [&](std::size_t i) { return direct ? i : plan->b_index[i]; };
  switch (op) {
    case OpKind::kAdd: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ia(i)] + bv[ib(i)]; break;
    case OpKind::kSub: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ia(i)] - bv[ib(i)]; break;
    case OpKind::kMul: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ia(i)] * bv[ib(i)]; break;
    case OpKind::kDiv: for (std::size_t i = 0; i < n; ++i) ov[i] = av[ia(i)] / bv[ib(i)]; break;
    default: throw std::invalid_argument("binary: not a binary op");
  }
  return g.record(op_name(op), {a, b}, out, [op, plan, a = a.ptr(), b = b.ptr()](const Node& o) {
    const bool direct = plan->a_index.empty();
    const std::size_t n = o.size();
    const double* go = o.grad.data();
    const double* av = a->value.data();
    const double* bv = b->value.data();
    double* ga = a->requires_grad ? a->grad_data() : nullptr;
    double* gb = b->requires_grad ? b->grad_data() : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ja = direct ? i : plan->a_index[i];
      const std::size_t jb = direct ? i : plan->b_index[i];
      switch (op) {
        case OpKind::kAdd:
          if (ga) ga[ja] += go[i];
          if (gb) gb[jb] += go[i];
          break;
        case OpKind::kSub:
          if (ga) ga[ja] += go[i];
          if (gb) gb[jb] -= go[i];
          break;
        case OpKind::kMul:
          if (ga) ga[ja] += go[i] * bv[jb];
          if (gb) gb[jb] += go[i] * av[ja];
          break;
        case OpKind::kDiv:
          if (ga) ga[ja] += go[i] / bv[jb];
          if (gb) gb[jb] -= go[i] * av[ja] / (bv[jb] * bv[jb]);
          break;
        default: break;
      }
    }
  });
}

inline Tensor unary(Graph& g, OpKind op, const Tensor& a) {
  auto out = Tensor::zeros(a.shape());
  const std::size_t n = a.size();
  const double* av = a.value().data();
  double* ov = out.mutable_value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i];
    switch (op) {
      case OpKind::kSigmoid: ov[i] = sigmoid(x); break;
      case OpKind::kExp: ov[i] = std::exp(x); break;
      case OpKind::kLog:
        if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
        ov[i] = std::log(x);
        break;
      case OpKind::kAbs: ov[i] = std::abs(x); break;
      case OpKind::kGelu: ov[i] = gelu(x); break;
      case OpKind::kTanh: ov[i] = std::tanh(x); break;
      case OpKind::kNeg: ov[i] = -x; break;
      default: throw std::invalid_argument("unary: not a unary op");
    }
  }
  return g.record(op_name(op), {a}, out, [op, a = a.ptr()](const Node& o) {
    const std::size_t n = o.size();
    const double* go = o.grad.data();
    const double* ov = o.value.data();
    const double* av = a->value.data();
    double* ga = a->grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      switch (op) {
        case OpKind::kSigmoid: ga[i] += go[i] * ov[i] * (1.0 - ov[i]); break;
        case OpKind::kExp: ga[i] += go[i] * ov[i]; break;
        case OpKind::kLog: ga[i] += go[i] / av[i]; break;
        case OpKind::kAbs: ga[i] += go[i] * sign(av[i]); break;
        case OpKind::kGelu: {
          // Phi(x) recovered from the saved output y = x * Phi(x), avoiding a second erf.
          const double x = av[i];
          const double cdf = x != 0.0 ? ov[i] / x : 0.5;
          ga[i] += go[i] * (cdf + x * std::exp(-0.5 * x * x) * 0.3989422804014327);
          break;
        }
        case OpKind::kTanh: ga[i] += go[i] * (1.0 - ov[i] * ov[i]); break;
        case OpKind::kNeg: ga[i] -= go[i]; break;
        default: break;
      }
    }
  });
}

}  // namespace detail

/// Applies `op` elementwise; binary kinds broadcast numpy-style and require `b`.
inline Tensor elementwise(Graph& g, OpKind op, const Tensor& a, const Tensor& b = Tensor()) {
  if (is_binary(op)) {
    if (!b.defined()) throw std::invalid_argument(std::string(op_name(op)) + " needs two operands");
    return detail::binary(g, op, a, b);
  }
  return detail::unary(g, op, a);
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return detail::binary(g, OpKind::kAdd, a, b); }
inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return detail::binary(g, OpKind::kSub, a, b); }
inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return detail::binary(g, OpKind::kMul, a, b); }
inline Tensor div(Graph& g, const Tensor& a, const Tensor& b) { return detail::binary(g, OpKind::kDiv, a, b); }
inline Tensor sigmoid(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kSigmoid, a); }
inline Tensor exp(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kExp, a); }
inline Tensor log(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kLog, a); }
inline Tensor abs(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kAbs, a); }
inline Tensor gelu(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kGelu, a); }
inline Tensor tanh(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kTanh, a); }
inline Tensor neg(Graph& g, const Tensor& a) { return detail::unary(g, OpKind::kNeg, a); }

/// x * c + shift
inline Tensor affine(Graph& g, const Tensor& x, double c, double shift = 0.0) {
  auto out = Tensor::zeros(x.shape());
  auto ov = out.mutable_value();
  auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c + shift;
  return g.record("affine", {x}, out, [c, x = x.ptr()](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t i = 0; i < o.size(); ++i) gx[i] += c * o.grad[i];
  });
}

/// max(x, lo) with gradient passed only where x > lo.
inline Tensor clamp_min(Graph& g, const Tensor& x, double lo) {
  auto out = Tensor::zeros(x.shape());
  auto ov = out.mutable_value();
  auto xv = x.value();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(xv[i], lo);
  return g.record("clamp_min", {x}, out, [lo, x = x.ptr()](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t i = 0; i < o.size(); ++i)
      if (x->value[i] > lo) gx[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------------------------
// Reductions and shape manipulation

inline Tensor sum(Graph& g, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.value()) acc += v;
  return g.record("sum", {x}, Tensor::scalar(acc), [x = x.ptr()](const Node& o) {
    double* gx = x->grad_data();
    const double go = o.grad[0];
    for (std::size_t i = 0; i < x->size(); ++i) gx[i] += go;
  });
}

inline Tensor mean(Graph& g, const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return affine(g, sum(g, x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto out = Tensor::from(std::move(shape), std::vector<double>(x.value().begin(), x.value().end()));
  return g.record("reshape", {x}, out, [x = x.ptr()](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t i = 0; i < o.size(); ++i) gx[i] += o.grad[i];
  });
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(Graph& g, const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin > end || end > x.dim(0)) throw DimensionError("slice_rows: range out of bounds for " + to_string(x.shape()));
  const std::size_t cols = x.dim(1);
  auto xv = x.value();
  auto out = Tensor::from({end - begin, cols},
                          std::vector<double>(xv.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                              xv.begin() + static_cast<std::ptrdiff_t>(end * cols)));
  return g.record("slice_rows", {x}, out, [x = x.ptr(), offset = begin * cols](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t i = 0; i < o.size(); ++i) gx[offset + i] += o.grad[i];
  });
}

/// Concatenates rank-2 tensors along rows.
inline Tensor concat_rows(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) throw DimensionError("concat_rows: column mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> v(a.value().begin(), a.value().end());
  v.insert(v.end(), b.value().begin(), b.value().end());
  auto out = Tensor::from({a.dim(0) + b.dim(0), a.dim(1)}, std::move(v));
  return g.record("concat_rows", {a, b}, out, [a = a.ptr(), b = b.ptr()](const Node& o) {
    if (a->requires_grad) {
      double* ga = a->grad_data();
      for (std::size_t i = 0; i < a->size(); ++i) ga[i] += o.grad[i];
    }
    if (b->requires_grad) {
      double* gb = b->grad_data();
      for (std::size_t i = 0; i < b->size(); ++i) gb[i] += o.grad[a->size() + i];
    }
  });
}

/// Numerically stabilized softmax along `axis`.
inline Tensor softmax(Graph& g, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw std::invalid_argument("softmax: axis out of range for " + to_string(x.shape()));
  const std::size_t len = x.dim(axis);
  if (len == 0) throw std::invalid_argument("softmax over an empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto out = Tensor::zeros(x.shape());
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        ov[base + j * inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] /= denom;
    }
  }
  return g.record("softmax", {x}, out, [x = x.ptr(), outer, inner, len](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t ou = 0; ou < outer; ++ou) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ou * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += o.value[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each trailing-axis vector of `x` to zero mean and unit variance, then applies
/// gain and bias.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a rank-0 tensor");
  const std::size_t d = x.shape().back();
  if (d < 2) throw DimensionError("layer_norm needs at least 2 features, got " + to_string(x.shape()));
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match feature size " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  auto out = Tensor::zeros(x.shape());
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto xv = x.value();
  auto ov = out.mutable_value();
  auto gv = gain.value();
  auto bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * is;
      (*normalized)[r * d + j] = xh;
      ov[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  return g.record("layer_norm", {x, gain, bias}, out,
                  [x = x.ptr(), gain = gain.ptr(), bias = bias.ptr(), normalized, inv_std, rows, d](const Node& o) {
                    const double* go = o.grad.data();
                    const double* xh = normalized->data();
                    if (gain->requires_grad) {
                      double* gg = gain->grad_data();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gg[j] += go[r * d + j] * xh[r * d + j];
                    }
                    if (bias->requires_grad) {
                      double* gb = bias->grad_data();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
                    }
                    if (x->requires_grad) {
                      double* gx = x->grad_data();
                      const double* gv = gain->value.data();
                      const double inv_d = 1.0 / static_cast<double>(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                          const double dxh = go[r * d + j] * gv[j];
                          m1 += dxh;
                          m2 += dxh * xh[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        const double is = (*inv_std)[r];
                        for (std::size_t j = 0; j < d; ++j) {
                          const double dxh = go[r * d + j] * gv[j];
                          gx[r * d + j] += is * (dxh - m1 - xh[r * d + j] * m2);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------------------------
// Sparse attention primitives over a PairIndex

/// Row `pairs.query[p]` (or `.key[p]`) of `x` for every pair p.
inline Tensor gather_rows(Graph& g, const Tensor& x, const PairIndexPtr& pairs, PairSide side) {
  detail::require_rank(x, 2, "gather_rows");
  const auto& rows = side == PairSide::kQuery ? pairs->query : pairs->key;
  const std::size_t expected = side == PairSide::kQuery ? pairs->n_queries : pairs->n_keys;
  if (x.dim(0) != expected) {
    throw DimensionError("gather_rows: source " + to_string(x.shape()) + " does not have " +
                         std::to_string(expected) + " rows");
  }
  const std::size_t c = x.dim(1);
  auto out = Tensor::zeros({rows.size(), c});
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t p = 0; p < rows.size(); ++p)
    std::copy_n(xv.data() + rows[p] * c, c, ov.data() + p * c);
  return g.record("gather_rows", {x}, out, [x = x.ptr(), pairs, side, c](const Node& o) {
    const auto& rows = side == PairSide::kQuery ? pairs->query : pairs->key;
    double* gx = x->grad_data();
    for (std::size_t p = 0; p < rows.size(); ++p)
      for (std::size_t j = 0; j < c; ++j) gx[rows[p] * c + j] += o.grad[p * c + j];
  });
}

/// Per-head scaled dot products: out[p, h] = scale * <q[query(p), head h], k[key(p), head h]>.
inline Tensor pair_dot(Graph& g, const Tensor& q, const Tensor& k, const PairIndexPtr& pairs, std::size_t heads,
                       double scale) {
  detail::require_rank(q, 2, "pair_dot");
  detail::require_rank(k, 2, "pair_dot");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || heads == 0 || d % heads != 0 || q.dim(0) != pairs->n_queries || k.dim(0) != pairs->n_keys) {
    throw DimensionError("pair_dot: incompatible shapes " + to_string(q.shape()) + ", " + to_string(k.shape()) +
                         " for " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const std::size_t n = pairs->size();
  auto out = Tensor::zeros({n, heads});
  const double* qv = q.value().data();
  const double* kv = k.value().data();
  double* ov = out.mutable_value().data();
  for (std::size_t p = 0; p < n; ++p) {
    const double* qr = qv + pairs->query[p] * d;
    const double* kr = kv + pairs->key[p] * d;
    for (std::size_t h = 0; h < heads; ++h) {
      double acc = 0.0;
      for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) acc += qr[j] * kr[j];
      ov[p * heads + h] = acc * scale;
    }
  }
  return g.record("pair_dot", {q, k}, out, [q = q.ptr(), k = k.ptr(), pairs, heads, d, dh, scale](const Node& o) {
    double* gq = q->requires_grad ? q->grad_data() : nullptr;
    double* gk = k->requires_grad ? k->grad_data() : nullptr;
    const double* qv = q->value.data();
    const double* kv = k->value.data();
    for (std::size_t p = 0; p < pairs->size(); ++p) {
      const std::size_t qo = pairs->query[p] * d, ko = pairs->key[p] * d;
      for (std::size_t h = 0; h < heads; ++h) {
        const double gs = o.grad[p * heads + h] * scale;
        if (gs == 0.0) continue;
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) {
          if (gq) gq[qo + j] += gs * kv[ko + j];
          if (gk) gk[ko + j] += gs * qv[qo + j];
        }
      }
    }
  });
}

/// Softmax of s[P x H] over each query's pairs, independently per column.
inline Tensor segment_softmax(Graph& g, const Tensor& s, const PairIndexPtr& pairs) {
  detail::require_rank(s, 2, "segment_softmax");
  if (s.dim(0) != pairs->size()) throw DimensionError("segment_softmax: rows do not match pair count");
  const std::size_t heads = s.dim(1);
  auto out = Tensor::zeros(s.shape());
  auto sv = s.value();
  auto ov = out.mutable_value();
  for (std::size_t q = 0; q < pairs->n_queries; ++q) {
    const std::size_t b = pairs->offsets[q], e = pairs->offsets[q + 1];
    if (b == e) throw std::invalid_argument("segment_softmax: query " + std::to_string(q) + " has no pairs");
    for (std::size_t h = 0; h < heads; ++h) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t p = b; p < e; ++p) mx = std::max(mx, sv[p * heads + h]);
      double denom = 0.0;
      for (std::size_t p = b; p < e; ++p) {
        const double ex = std::exp(sv[p * heads + h] - mx);
        ov[p * heads + h] = ex;
        denom += ex;
      }
      for (std::size_t p = b; p < e; ++p) ov[p * heads + h] /= denom;
    }
  }
  return g.record("segment_softmax", {s}, out, [s = s.ptr(), pairs, heads](const Node& o) {
    double* gs = s->grad_data();
    for (std::size_t q = 0; q < pairs->n_queries; ++q) {
      const std::size_t b = pairs->offsets[q], e = pairs->offsets[q + 1];
      for (std::size_t h = 0; h < heads; ++h) {
        double dot = 0.0;
        for (std::size_t p = b; p < e; ++p) dot += o.grad[p * heads + h] * o.value[p * heads + h];
        for (std::size_t p = b; p < e; ++p) gs[p * heads + h] += o.value[p * heads + h] * (o.grad[p * heads + h] - dot);
      }
    }
  });
}

/// out[q, c] = sum over pairs p of q of w[p, head(c)] * v[key(p), c].
inline Tensor attend_keys(Graph& g, const Tensor& w, const Tensor& v, const PairIndexPtr& pairs) {
  detail::require_rank(w, 2, "attend_keys");
  detail::require_rank(v, 2, "attend_keys");
  const std::size_t heads = w.dim(1), d = v.dim(1);
  if (w.dim(0) != pairs->size() || v.dim(0) != pairs->n_keys || heads == 0 || d % heads != 0) {
    throw DimensionError("attend_keys: incompatible shapes " + to_string(w.shape()) + ", " + to_string(v.shape()));
  }
  const std::size_t dh = d / heads;
  auto out = Tensor::zeros({pairs->n_queries, d});
  const double* wv = w.value().data();
  const double* vv = v.value().data();
  double* ov = out.mutable_value().data();
  for (std::size_t q = 0; q < pairs->n_queries; ++q) {
    double* orow = ov + q * d;
    for (std::size_t p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) {
      const double* vr = vv + pairs->key[p] * d;
      for (std::size_t h = 0; h < heads; ++h) {
        const double wp = wv[p * heads + h];
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) orow[j] += wp * vr[j];
      }
    }
  }
  return g.record("attend_keys", {w, v}, out, [w = w.ptr(), v = v.ptr(), pairs, heads, d, dh](const Node& o) {
    double* gw = w->requires_grad ? w->grad_data() : nullptr;
    double* gv = v->requires_grad ? v->grad_data() : nullptr;
    const double* wv = w->value.data();
    const double* vv = v->value.data();
    for (std::size_t q = 0; q < pairs->n_queries; ++q) {
      const double* grow = o.grad.data() + q * d;
      for (std::size_t p = pairs->offsets[q]; p < pairs->offsets[q + 1]; ++p) {
        const std::size_t ko = pairs->key[p] * d;
        for (std::size_t h = 0; h < heads; ++h) {
          const double wp = wv[p * heads + h];
          double acc = 0.0;
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) {
            acc += grow[j] * vv[ko + j];
            if (gv) gv[ko + j] += wp * grow[j];
          }
          if (gw) gw[p * heads + h] += acc;
        }
      }
    }
  });
}

inline constexpr double kGateNormFloor = 1e-6;

/// Result of gated_attention: the aggregated output plus the per-pair correlation weights and
/// per-query normalizers it was computed from.
struct GatedAttention {
  Tensor out;                  // [queries x d]
  std::vector<double> alpha;   // [pairs x heads], softmax of scores within each query
  std::vector<double> z;       // [queries x heads], max(sum beta*alpha, floor)
};

/// Causally gated attention over per-pair messages:
///   out[q, head h] = (1/Z) * sum_p beta[p] * alpha[p, h] * messages[p, head h],
///   alpha = segment softmax of scores, Z = max(sum_p beta*alpha, floor).
/// When Z is above the floor the weights are evaluated as beta*exp(s) / sum(beta*exp(s)) over
/// pairs with beta > 0, so contexts whose gate is closed never enter the arithmetic.
namespace detail {

inline GatedAttention gated_attention_impl(Graph& g, const Tensor& scores, const Tensor& beta, const Tensor& messages,
                                           const PairIndexPtr& pairs, double floor, bool pooled) {
  detail::require_rank(scores, 2, "gated_attention");
  detail::require_rank(messages, 2, "gated_attention");
  const std::size_t n = pairs->size(), heads = scores.dim(1), d = messages.dim(1);
  if (scores.dim(0) != n || beta.size() != n || messages.dim(0) != n || heads == 0 || (!pooled && d % heads != 0)) {
    throw DimensionError("gated_attention: incompatible shapes " + to_string(scores.shape()) + ", " +
                         to_string(beta.shape()) + ", " + to_string(messages.shape()));
  }
  // Standard layout: head h aggregates columns [h*dh, (h+1)*dh) into output row q.
  // Pooled layout: head h aggregates all d columns into output row q*heads + h.
  const std::size_t dh = pooled ? d : d / heads;
  auto out_offset = [=](std::size_t q, std::size_t h) { return pooled ? (q * heads + h) * d : q * d + h * dh; };
  auto col_begin = [=](std::size_t h) { return pooled ? std::size_t{0} : h * dh; };
  const double* sv = scores.value().data();
  const double* bv = beta.value().data();
  const double* mv = messages.value().data();

  GatedAttention res;
  res.alpha.assign(n * heads, 0.0);
  res.z.assign(pairs->n_queries * heads, 0.0);
  // Saved for backward: final weights, the open-set ratio exp(s - m)/S, and which branch ran.
  auto weights = std::make_shared<std::vector<double>>(n * heads, 0.0);
  auto ratio = std::make_shared<std::vector<double>>(n * heads, 0.0);
  auto clamped = std::make_shared<std::vector<char>>(pairs->n_queries * heads, 0);

  res.out = pooled ? Tensor::zeros({pairs->n_queries * heads, d}) : Tensor::zeros({pairs->n_queries, d});
  double* ov = res.out.mutable_value().data();
  for (std::size_t q = 0; q < pairs->n_queries; ++q) {
    const std::size_t b = pairs->offsets[q], e = pairs->offsets[q + 1];
    if (b == e) throw std::invalid_argument("gated_attention: query " + std::to_string(q) + " has no pairs");
    for (std::size_t h = 0; h < heads; ++h) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t p = b; p < e; ++p) mx = std::max(mx, sv[p * heads + h]);
      double denom = 0.0;
      for (std::size_t p = b; p < e; ++p) {
        const double ex = std::exp(sv[p * heads + h] - mx);
        res.alpha[p * heads + h] = ex;
        denom += ex;
      }
      double zsum = 0.0;
      for (std::size_t p = b; p < e; ++p) {
        res.alpha[p * heads + h] /= denom;
        zsum += bv[p] * res.alpha[p * heads + h];
      }
      res.z[q * heads + h] = std::max(zsum, floor);
      if (zsum >= floor) {
        double open_max = -std::numeric_limits<double>::infinity();
        for (std::size_t p = b; p < e; ++p)
          if (bv[p] > 0.0) open_max = std::max(open_max, sv[p * heads + h]);
        double total = 0.0;
        for (std::size_t p = b; p < e; ++p) {
          if (bv[p] > 0.0) {
            const double ex = bv[p] * std::exp(sv[p * heads + h] - open_max);
            (*weights)[p * heads + h] = ex;
            total += ex;
          }
        }
        for (std::size_t p = b; p < e; ++p) {
          (*weights)[p * heads + h] /= total;
          (*ratio)[p * heads + h] = std::exp(std::min(sv[p * heads + h] - open_max, 700.0)) / total;
        }
      } else {
        (*clamped)[q * heads + h] = 1;
        for (std::size_t p = b; p < e; ++p) (*weights)[p * heads + h] = bv[p] * res.alpha[p * heads + h] / floor;
      }
      double* orow = ov + out_offset(q, h);
      const std::size_t c0 = col_begin(h);
      for (std::size_t p = b; p < e; ++p) {
        const double wp = (*weights)[p * heads + h];
        if (wp == 0.0) continue;
        const double* mr = mv + p * d + c0;
        for (std::size_t j = 0; j < dh; ++j) orow[j] += wp * mr[j];
      }
    }
  }

  auto alpha = std::make_shared<std::vector<double>>(res.alpha);
  res.out = g.record(
      "gated_attention", {scores, beta, messages}, res.out,
      [s = scores.ptr(), be = beta.ptr(), m = messages.ptr(), pairs, heads, d, dh, floor, weights, ratio, clamped,
       alpha, out_offset, col_begin](const Node& o) {
        double* gs = s->requires_grad ? s->grad_data() : nullptr;
        double* gb = be->requires_grad ? be->grad_data() : nullptr;
        double* gm = m->requires_grad ? m->grad_data() : nullptr;
        const double* mv = m->value.data();
        const double* bv = be->value.data();
        std::vector<double> G;
        for (std::size_t q = 0; q < pairs->n_queries; ++q) {
          const std::size_t b = pairs->offsets[q], e = pairs->offsets[q + 1];
          G.assign(e - b, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* grow = o.grad.data() + out_offset(q, h);
            const std::size_t c0 = col_begin(h);
            for (std::size_t p = b; p < e; ++p) {
              const double wp = (*weights)[p * heads + h];
              const double* mr = mv + p * d + c0;
              double acc = 0.0;
              for (std::size_t j = 0; j < dh; ++j) acc += grow[j] * mr[j];
              if (gm && wp != 0.0) {
                double* gr = gm + p * d + c0;
                for (std::size_t j = 0; j < dh; ++j) gr[j] += wp * grow[j];
              }
              G[p - b] = acc;
            }
            if (!(*clamped)[q * heads + h]) {
              double gbar = 0.0;
              for (std::size_t p = b; p < e; ++p) gbar += (*weights)[p * heads + h] * G[p - b];
              for (std::size_t p = b; p < e; ++p) {
                const double centered = G[p - b] - gbar;
                if (gs) gs[p * heads + h] += (*weights)[p * heads + h] * centered;
                if (gb) gb[p] += (*ratio)[p * heads + h] * centered;
              }
            } else {
              double dot = 0.0;
              for (std::size_t p = b; p < e; ++p) dot += (*alpha)[p * heads + h] * bv[p] * G[p - b] / floor;
              for (std::size_t p = b; p < e; ++p) {
                const double a = (*alpha)[p * heads + h];
                if (gb) gb[p] += a * G[p - b] / floor;
                if (gs) gs[p * heads + h] += a * (bv[p] * G[p - b] / floor - dot);
              }
            }
          }
        }
      });
  return res;
}

}  // namespace detail

inline GatedAttention gated_attention(Graph& g, const Tensor& scores, const Tensor& beta, const Tensor& messages,
                                      const PairIndexPtr& pairs, double floor = kGateNormFloor) {
  return detail::gated_attention_impl(g, scores, beta, messages, pairs, floor, false);
}

/// Same weights as gated_attention, but every head pools the full message vector:
/// out[q * heads + h] = (1/Z) * sum_p beta[p] * alpha[p, h] * messages[p]. Pooling before a
/// linear map is cheaper than mapping every pair.
inline GatedAttention gated_attention_pooled(Graph& g, const Tensor& scores, const Tensor& beta,
                                             const Tensor& messages, const PairIndexPtr& pairs,
                                             double floor = kGateNormFloor) {
  return detail::gated_attention_impl(g, scores, beta, messages, pairs, floor, true);
}

/// Row q*heads + h of x [Q*heads x d] contributes its columns of head h to row q of the
/// result [Q x d].
inline Tensor select_head_blocks(Graph& g, const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 2, "select_head_blocks");
  const std::size_t d = x.dim(1);
  if (heads == 0 || d % heads != 0 || x.dim(0) % heads != 0) {
    throw DimensionError("select_head_blocks: shape " + to_string(x.shape()) + " incompatible with " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t q = x.dim(0) / heads, dh = d / heads;
  auto out = Tensor::zeros({q, d});
  auto xv = x.value();
  auto ov = out.mutable_value();
  for (std::size_t r = 0; r < q; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) ov[r * d + j] = xv[(r * heads + h) * d + j];
  return g.record("select_head_blocks", {x}, out, [x = x.ptr(), q, heads, d, dh](const Node& o) {
    double* gx = x->grad_data();
    for (std::size_t r = 0; r < q; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) gx[(r * heads + h) * d + j] += o.grad[r * d + j];
  });
}

/// [a | b] for a [m x p], b [m x q].
inline Tensor concat_cols(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_cols");
  detail::require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row counts differ, " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  auto out = Tensor::zeros({m, p + q});
  auto av = a.value();
  auto bv = b.value();
  auto ov = out.mutable_value();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(av.begin() + i * p, av.begin() + (i + 1) * p, ov.begin() + i * (p + q));
    std::copy(bv.begin() + i * q, bv.begin() + (i + 1) * q, ov.begin() + i * (p + q) + p);
  }
  return g.record("concat_cols", {a, b}, out, [a = a.ptr(), b = b.ptr(), m, p, q](const Node& o) {
    if (a->requires_grad) {
      double* ga = a->grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += o.grad[i * (p + q) + j];
    }
    if (b->requires_grad) {
      double* gb = b->grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += o.grad[i * (p + q) + p + j];
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Finite-difference gradient check

/// Relative error convention used by grad_check.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares the analytic gradient of the scalar `f` with respect to every leaf in `params`
/// against central finite differences. `f` builds its graph on the Graph it is handed and must
/// be deterministic. Returns the maximum relative error over all coordinates.
inline double grad_check(const std::function<Tensor(Graph&)>& f, std::span<Tensor> params, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw std::invalid_argument("grad_check: epsilon must lie in [1e-7, 1e-3]");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Graph g;
    auto loss = f(g);
    if (!std::isfinite(loss.item())) throw DomainError("grad_check: non-finite loss at the base point");
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g(Graph::Mode::kNoGrad);
    const double v = f(g).item();
    if (!std::isfinite(v)) throw DomainError("grad_check: non-finite loss at a perturbed point");
    return v;
  };
  double worst = 0.0;
  for (auto& p : params) {
    auto values = p.mutable_value();
    const auto analytic = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double up = eval();
      values[i] = saved - epsilon;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, relative_error(a, numeric));
    }
  }
  return worst;
}

/// Single-input convenience form: f maps a leaf tensor initialized at `point` to a scalar.
inline double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& point, double epsilon) {
  Tensor x = Tensor::from(point.shape(), std::vector<double>(point.value().begin(), point.value().end()), true);
  std::vector<Tensor> params{x};
  return grad_check([&](Graph& g) { return f(g, x); }, std::span<Tensor>(params), epsilon);
}

}  // namespace casper::ad
