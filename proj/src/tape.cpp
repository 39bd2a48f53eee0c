// SPDX-License-Identifier: Apache-2.0
#include "hmn/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

namespace hmn {

namespace {

constexpr std::size_t kBlockDoubles = std::size_t{1} << 16;
constexpr double kCosineEps = 1e-8;

std::atomic<std::uint64_t> g_tape_serial{1};

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw DimensionError("operands belong to different tapes");
  return *a.tape();
}

void require_same_size(Var a, Var b, const char* what) {
  if (a.size() != b.size())
    throw DimensionError(std::string(what) + ": length mismatch " +
                         std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
}

// y += A x  (A is m×n row-major)
inline void gemv_acc(const double* a, const double* x, double* y,
                     std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a + i * n;
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      s0 += row[j] * x[j];
      s1 += row[j + 1] * x[j + 1];
      s2 += row[j + 2] * x[j + 2];
      s3 += row[j + 3] * x[j + 3];
    }
    for (; j < n; ++j) s0 += row[j] * x[j];
    y[i] += (s0 + s1) + (s2 + s3);
  }
}

// y += Aᵀ g
inline void gemv_t_acc(const double* a, const double* g, double* y,
                       std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    const double* row = a + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += row[j] * gi;
  }
}

// A += g xᵀ
inline void ger_acc(double* a, const double* g, const double* x,
                    std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    double* row = a + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += gi * x[j];
  }
}

}  // namespace

// ---- Var ---------------------------------------------------------------------

std::size_t Var::size() const { return tape_->node(*this).size(); }
std::size_t Var::rows() const { return tape_->node(*this).rows; }
std::size_t Var::cols() const { return tape_->node(*this).cols; }
std::span<const double> Var::value() const { return tape_->value(*this); }

Tensor Var::to_tensor() const {
  const auto v = value();
  std::vector<double> data(v.begin(), v.end());
  if (cols() > 1) return Tensor({rows(), cols()}, std::move(data));
  return Tensor::vector(std::move(data));
}

// ---- Tape --------------------------------------------------------------------

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) { nodes_.reserve(1024); }
Tape::~Tape() = default;

double* Tape::alloc(std::size_t n) {
  if (n == 0) return nullptr;
  if (blocks_.empty() || block_used_ + n > block_cap_) {
    const std::size_t cap = std::max(n, kBlockDoubles);
    blocks_.push_back(std::make_unique_for_overwrite<double[]>(cap));
    block_used_ = 0;
    block_cap_ = cap;
  }
  double* p = blocks_.back().get() + block_used_;
  block_used_ += n;
  return p;
}

void Tape::check_finite(const Node& n) const {
  for (std::size_t i = 0; i < n.size(); ++i)
    if (!std::isfinite(n.value[i]))
      throw NumericError("non-finite value produced by tape op #" +
                         std::to_string(static_cast<int>(n.op)));
}

std::int32_t Tape::push(Node n) {
  if (backward_done_)
    throw DomainError("cannot record onto a tape after backward()");
#ifndef NDEBUG
  check_finite(n);
#endif
  nodes_.push_back(n);
  return static_cast<std::int32_t>(nodes_.size() - 1);
}

std::int32_t Tape::leaf(std::span<const double> values, std::size_t rows,
                        std::size_t cols) {
  if (rows * cols != values.size())
    throw DimensionError("leaf shape does not match value count");
  Node n;
  n.rows = static_cast<std::uint32_t>(rows);
  n.cols = static_cast<std::uint32_t>(cols);
  n.value = alloc(values.size());
  if (!values.empty())
    std::memcpy(n.value, values.data(), values.size() * sizeof(double));
  return push(n);
}

Var Tape::constant(std::span<const double> values) {
  return {this, leaf(values, values.size(), 1)};
}

Var Tape::constant(std::span<const double> values, std::size_t rows,
                   std::size_t cols) {
  return {this, leaf(values, rows, cols)};
}

Var Tape::constant(const Tensor& t) {
  return {this, leaf(t.data(), t.rows(), t.cols())};
}

Var Tape::zeros(std::size_t n) {
  Node node;
  node.rows = static_cast<std::uint32_t>(n);
  node.value = alloc(n);
  std::fill_n(node.value, n, 0.0);
  return {this, push(node)};
}

Var Tape::param(const Tensor& t) {
  if (auto it = params_.find(&t); it != params_.end()) return {this, it->second};
  Node n;
  n.rows = static_cast<std::uint32_t>(t.rows());
  n.cols = static_cast<std::uint32_t>(t.cols());
  n.value = const_cast<double*>(t.data().data());
  n.needs_grad = true;
  const auto id = push(n);
  params_.emplace(&t, id);
  return {this, id};
}

void Tape::check_owned(Var v) const {
  if (v.tape() != this || v.id() < 0 ||
      static_cast<std::size_t>(v.id()) >= nodes_.size())
    throw DimensionError("variable does not belong to this tape");
}

const Tape::Node& Tape::node(Var v) const {
  check_owned(v);
  return nodes_[static_cast<std::size_t>(v.id())];
}

std::span<const double> Tape::value(Var v) const {
  const Node& n = node(v);
  return {n.value, n.size()};
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad == nullptr) return {};
  return {n.grad, n.size()};
}

Tensor Tape::param_grad(const Tensor& t) const {
  Tensor g(t.shape());
  auto it = params_.find(&t);
  if (it == params_.end()) return g;
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  if (n.grad != nullptr) std::copy_n(n.grad, n.size(), g.data().begin());
  return g;
}

double* Tape::grad_buf(std::int32_t id) {
  Node& n = node_of(id);
  if (n.grad == nullptr) {
    n.grad = alloc(n.size());
    std::fill_n(n.grad, n.size(), 0.0);
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  const Node& ln = node(loss);
  if (ln.size() != 1) throw DimensionError("backward() needs a scalar loss");
  if (backward_done_) throw DomainError("backward() already ran on this tape");
  backward_done_ = true;
  if (!ln.needs_grad) return;
  grad_buf(loss.id())[0] = 1.0;
  for (std::int32_t id = loss.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad == nullptr || n.op == Op::kLeaf || !n.needs_grad) continue;
    backprop_node(id);
  }
}

// ---- Carried -----------------------------------------------------------------

void Carried::set(Var v) {
  value_ = v.to_tensor();
  serial_ = v.tape()->serial();
  id_ = v.id();
}

void Carried::set_value(Tensor value) {
  value_ = std::move(value);
  detach();
}

Var Carried::bind(Tape& tape) const {
  if (live_on(tape)) return {&tape, id_};
  return tape.constant(value_.data());
}

// ---- kernels -------------------------------------------------------------------

Var unary(Op op, Var a) {
  Tape& t = *a.tape();
  const auto& in = t.node(a);
  Tape::Node n;
  n.op = op;
  n.in0 = a.id();
  n.rows = in.rows;
  n.cols = in.cols;
  n.needs_grad = in.needs_grad;
  n.value = t.alloc(in.size());
  const double* x = in.value;
  const std::size_t sz = in.size();
  switch (op) {
    case Op::kTanh:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = std::tanh(x[i]);
      break;
    case Op::kSigmoid:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = sigmoid_scalar(x[i]);
      break;
    case Op::kRelu:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Op::kSoftplus:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = softplus_scalar(x[i]);
      break;
    default:
      throw DomainError("not a unary op");
  }
  return {&t, t.push(n)};
}

Var binary(Op op, Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_size(a, b, "elementwise op");
  const auto& na = t.node(a);
  const auto& nb = t.node(b);
  Tape::Node n;
  n.op = op;
  n.in0 = a.id();
  n.in1 = b.id();
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.value = t.alloc(na.size());
  const double* x = na.value;
  const double* y = nb.value;
  const std::size_t sz = na.size();
  switch (op) {
    case Op::kAdd:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = x[i] + y[i];
      break;
    case Op::kSub:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = x[i] - y[i];
      break;
    case Op::kHadamard:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = x[i] * y[i];
      break;
    case Op::kAbsDiff:
      for (std::size_t i = 0; i < sz; ++i) n.value[i] = std::abs(x[i] - y[i]);
      break;
    default:
      throw DomainError("not a binary op");
  }
  return {&t, t.push(n)};
}

Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var hadamard(Var a, Var b) { return binary(Op::kHadamard, a, b); }
Var abs_diff(Var a, Var b) { return binary(Op::kAbsDiff, a, b); }
Var tanh(Var a) { return unary(Op::kTanh, a); }
Var sigmoid(Var a) { return unary(Op::kSigmoid, a); }
Var relu(Var a) { return unary(Op::kRelu, a); }
Var softplus(Var a) { return unary(Op::kSoftplus, a); }

Var matvec(Var w, Var x) {
  Tape& t = same_tape(w, x);
  const auto& nw = t.node(w);
  const auto& nx = t.node(x);
  if (nw.cols != nx.size() && !(nw.size() == 0 && nx.size() == 0))
    throw DimensionError("matvec: W is " + std::to_string(nw.rows) + "x" +
                         std::to_string(nw.cols) + ", x has " +
                         std::to_string(nx.size()));
  Tape::Node n;
  n.op = Op::kMatvec;
  n.in0 = w.id();
  n.in1 = x.id();
  n.rows = nw.rows;
  n.needs_grad = nw.needs_grad || nx.needs_grad;
  n.value = t.alloc(nw.rows);
  std::fill_n(n.value, nw.rows, 0.0);
  gemv_acc(nw.value, nx.value, n.value, nw.rows, nx.size());
  return {&t, t.push(n)};
}

Var affine(Var w, Var x, Var b) {
  Tape& t = same_tape(w, x);
  same_tape(w, b);
  const auto& nw = t.node(w);
  const auto& nx = t.node(x);
  const auto& nb = t.node(b);
  if (nw.cols != nx.size() || nb.size() != nw.rows)
    throw DimensionError("affine: W " + std::to_string(nw.rows) + "x" +
                         std::to_string(nw.cols) + ", x " +
                         std::to_string(nx.size()) + ", b " +
                         std::to_string(nb.size()));
  Tape::Node n;
  n.op = Op::kAffine;
  n.in0 = w.id();
  n.in1 = x.id();
  n.in2 = b.id();
  n.rows = nw.rows;
  n.needs_grad = nw.needs_grad || nx.needs_grad || nb.needs_grad;
  n.value = t.alloc(nw.rows);
  std::copy_n(nb.value, nw.rows, n.value);
  gemv_acc(nw.value, nx.value, n.value, nw.rows, nx.size());
  return {&t, t.push(n)};
}

Var scale(Var a, double c) {
  Tape& t = *a.tape();
  const auto& na = t.node(a);
  Tape::Node n;
  n.op = Op::kScale;
  n.in0 = a.id();
  n.rows = na.rows;
  n.cols = na.cols;
  n.scalar = c;
  n.needs_grad = na.needs_grad;
  n.value = t.alloc(na.size());
  for (std::size_t i = 0; i < na.size(); ++i) n.value[i] = c * na.value[i];
  return {&t, t.push(n)};
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DomainError("concat: no operands");
  Tape& t = *parts.front().tape();
  std::size_t total = 0;
  bool needs = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    total += p.size();
    needs = needs || t.node(p).needs_grad;
  }
  Tape::Node n;
  n.op = Op::kConcat;
  n.rows = static_cast<std::uint32_t>(total);
  n.needs_grad = needs;
  n.list_off = static_cast<std::uint32_t>(t.links_.size());
  n.list_len = static_cast<std::uint32_t>(parts.size());
  n.value = t.alloc(total);
  std::size_t off = 0;
  for (const Var& p : parts) {
    t.links_.push_back(p.id());
    const auto& np = t.node(p);
    std::copy_n(np.value, np.size(), n.value + off);
    off += np.size();
  }
  return {&t, t.push(n)};
}

Var slice(Var a, std::size_t offset, std::size_t length) {
  Tape& t = *a.tape();
  const auto& na = t.node(a);
  if (offset + length > na.size())
    throw DimensionError("slice out of range");
  Tape::Node n;
  n.op = Op::kSlice;
  n.in0 = a.id();
  n.rows = static_cast<std::uint32_t>(length);
  n.list_off = static_cast<std::uint32_t>(offset);
  n.needs_grad = na.needs_grad;
  n.value = t.alloc(length);
  std::copy_n(na.value + offset, length, n.value);
  return {&t, t.push(n)};
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const auto& na = t.node(a);
  Tape::Node n;
  n.op = Op::kSum;
  n.in0 = a.id();
  n.rows = 1;
  n.needs_grad = na.needs_grad;
  n.value = t.alloc(1);
  double s = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) s += na.value[i];
  n.value[0] = s;
  return {&t, t.push(n)};
}

Var dot(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_size(a, b, "dot");
  const auto& na = t.node(a);
  const auto& nb = t.node(b);
  Tape::Node n;
  n.op = Op::kDot;
  n.in0 = a.id();
  n.in1 = b.id();
  n.rows = 1;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.value = t.alloc(1);
  double s = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) s += na.value[i] * nb.value[i];
  n.value[0] = s;
  return {&t, t.push(n)};
}

Var softmax(Var a) {
  Tape& t = *a.tape();
  const auto& na = t.node(a);
  const std::size_t sz = na.size();
  if (sz == 0) throw DomainError("softmax of an empty vector");
  for (std::size_t i = 0; i < sz; ++i)
    if (!std::isfinite(na.value[i]))
      throw NumericError("softmax input is not finite");
  Tape::Node n;
  n.op = Op::kSoftmax;
  n.in0 = a.id();
  n.rows = static_cast<std::uint32_t>(sz);
  n.needs_grad = na.needs_grad;
  n.value = t.alloc(sz);
  const double mx = *std::max_element(na.value, na.value + sz);
  double z = 0.0;
  for (std::size_t i = 0; i < sz; ++i) {
    n.value[i] = std::exp(na.value[i] - mx);
    z += n.value[i];
  }
  for (std::size_t i = 0; i < sz; ++i) n.value[i] /= z;
  return {&t, t.push(n)};
}

Var weighted_sum(Var weights, std::span<const Var> items) {
  Tape& t = *weights.tape();
  const auto& nw = t.node(weights);
  if (items.empty()) throw DomainError("weighted_sum: no items");
  if (nw.size() != items.size())
    throw DimensionError("weighted_sum: " + std::to_string(nw.size()) +
                         " weights for " + std::to_string(items.size()) +
                         " items");
  const std::size_t d = items.front().size();
  bool needs = nw.needs_grad;
  for (const Var& it : items) {
    same_tape(weights, it);
    if (it.size() != d) throw DimensionError("weighted_sum: ragged items");
    needs = needs || t.node(it).needs_grad;
  }
  Tape::Node n;
  n.op = Op::kWeightedSum;
  n.in0 = weights.id();
  n.rows = static_cast<std::uint32_t>(d);
  n.needs_grad = needs;
  n.list_off = static_cast<std::uint32_t>(t.links_.size());
  n.list_len = static_cast<std::uint32_t>(items.size());
  n.value = t.alloc(d);
  std::fill_n(n.value, d, 0.0);
  for (std::size_t k = 0; k < items.size(); ++k) {
    t.links_.push_back(items[k].id());
    const double wk = nw.value[k];
    const double* x = t.node(items[k]).value;
    for (std::size_t j = 0; j < d; ++j) n.value[j] += wk * x[j];
  }
  return {&t, t.push(n)};
}

Var mean(std::span<const Var> items) {
  if (items.empty()) throw DomainError("mean: no items");
  Tape& t = *items.front().tape();
  const std::size_t d = items.front().size();
  bool needs = false;
  for (const Var& it : items) {
    same_tape(items.front(), it);
    if (it.size() != d) throw DimensionError("mean: ragged items");
    needs = needs || t.node(it).needs_grad;
  }
  Tape::Node n;
  n.op = Op::kMean;
  n.rows = static_cast<std::uint32_t>(d);
  n.needs_grad = needs;
  n.list_off = static_cast<std::uint32_t>(t.links_.size());
  n.list_len = static_cast<std::uint32_t>(items.size());
  n.value = t.alloc(d);
  std::fill_n(n.value, d, 0.0);
  const double inv = 1.0 / static_cast<double>(items.size());
  for (const Var& it : items) {
    t.links_.push_back(it.id());
    const double* x = t.node(it).value;
    for (std::size_t j = 0; j < d; ++j) n.value[j] += inv * x[j];
  }
  return {&t, t.push(n)};
}

Var squared_error(Op op, Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_size(a, b, "squared error");
  const auto& na = t.node(a);
  const auto& nb = t.node(b);
  Tape::Node n;
  n.op = op;
  n.in0 = a.id();
  n.in1 = b.id();
  n.rows = 1;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.value = t.alloc(1);
  double s = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) {
    const double e = na.value[i] - nb.value[i];
    s += e * e;
  }
  if (op == Op::kMeanSquaredError) {
    if (na.size() == 0) throw DomainError("mean squared error of empty input");
    s /= static_cast<double>(na.size());
  }
  n.value[0] = s;
  return {&t, t.push(n)};
}


Var sum_squared_error(Var a, Var b) {
  return squared_error(Op::kSumSquaredError, a, b);
}
Var mean_squared_error(Var a, Var b) {
  return squared_error(Op::kMeanSquaredError, a, b);
}

Var bce_with_logits(Var logit, double target) {
  Tape& t = *logit.tape();
  const auto& nl = t.node(logit);
  if (nl.size() != 1) throw DimensionError("bce_with_logits needs a scalar");
  if (!std::isfinite(nl.value[0]))
    throw NumericError("non-finite discriminator logit");
  Tape::Node n;
  n.op = Op::kBceLogits;
  n.in0 = logit.id();
  n.rows = 1;
  n.scalar = target;
  n.needs_grad = nl.needs_grad;
  n.value = t.alloc(1);
  const double l = nl.value[0];
  n.value[0] = softplus_scalar(l) - target * l;
  return {&t, t.push(n)};
}

Var nll(Var probs, std::size_t cls) {
  Tape& t = *probs.tape();
  const auto& np = t.node(probs);
  if (cls >= np.size()) throw DimensionError("nll: class index out of range");
  const double p = np.value[cls];
  if (!(p > 0.0)) throw NumericError("nll: probability of true class is 0");
  Tape::Node n;
  n.op = Op::kNll;
  n.in0 = probs.id();
  n.rows = 1;
  n.list_off = static_cast<std::uint32_t>(cls);
  n.needs_grad = np.needs_grad;
  n.value = t.alloc(1);
  n.value[0] = -std::log(p);
  return {&t, t.push(n)};
}

Var cosine(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_size(a, b, "cosine");
  const auto& na = t.node(a);
  const auto& nb = t.node(b);
  Tape::Node n;
  n.op = Op::kCosine;
  n.in0 = a.id();
  n.in1 = b.id();
  n.rows = 1;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  n.value = t.alloc(1);
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) {
    ab += na.value[i] * nb.value[i];
    aa += na.value[i] * na.value[i];
    bb += nb.value[i] * nb.value[i];
  }
  n.value[0] = ab / (std::sqrt(aa) * std::sqrt(bb) + kCosineEps);
  return {&t, t.push(n)};
}

Var gru_cell(Var x, Var h, std::span<const Var> weights) {
  if (weights.size() != 9)
    throw DimensionError("gru_cell expects 9 weight tensors");
  Tape& t = same_tape(x, h);
  const std::size_t nh = h.size();
  const std::size_t nx = x.size();
  bool needs = t.node(x).needs_grad || t.node(h).needs_grad;
  for (std::size_t g = 0; g < 3; ++g) {
    const Var w = weights[3 * g];
    const Var u = weights[3 * g + 1];
    const Var b = weights[3 * g + 2];
    same_tape(x, w);
    same_tape(x, u);
    same_tape(x, b);
    if (w.rows() != nh || (nx > 0 && w.cols() != nx) || w.size() != nh * nx)
      throw DimensionError("gru_cell: input weight shape mismatch");
    if (u.rows() != nh || u.cols() != nh)
      throw DimensionError("gru_cell: recurrent weight must be HxH");
    if (b.size() != nh) throw DimensionError("gru_cell: bias length mismatch");
    needs = needs || t.node(w).needs_grad || t.node(u).needs_grad ||
            t.node(b).needs_grad;
  }
  Tape::Node n;
  n.op = Op::kGruCell;
  n.in0 = x.id();
  n.in1 = h.id();
  n.rows = static_cast<std::uint32_t>(nh);
  n.needs_grad = needs;
  n.list_off = static_cast<std::uint32_t>(t.links_.size());
  n.list_len = 9;
  for (const Var& w : weights) t.links_.push_back(w.id());
  n.value = t.alloc(nh);
  n.aux = t.alloc(3 * nh);  // z | r | candidate
  double* z = n.aux;
  double* r = n.aux + nh;
  double* c = n.aux + 2 * nh;
  const double* xv = t.node(x).value;
  const double* hv = t.node(h).value;
  auto wv = [&](std::size_t i) { return t.node(weights[i]).value; };

  std::copy_n(wv(2), nh, z);
  gemv_acc(wv(0), xv, z, nh, nx);
  gemv_acc(wv(1), hv, z, nh, nh);
  std::copy_n(wv(5), nh, r);
  gemv_acc(wv(3), xv, r, nh, nx);
  gemv_acc(wv(4), hv, r, nh, nh);
  for (std::size_t i = 0; i < nh; ++i) {
    z[i] = sigmoid_scalar(z[i]);
    r[i] = sigmoid_scalar(r[i]);
  }
  auto& rh = t.scratch_;
  rh.assign(nh, 0.0);
  for (std::size_t i = 0; i < nh; ++i) rh[i] = r[i] * hv[i];
  std::copy_n(wv(8), nh, c);
  gemv_acc(wv(6), xv, c, nh, nx);
  gemv_acc(wv(7), rh.data(), c, nh, nh);
  for (std::size_t i = 0; i < nh; ++i) {
    c[i] = std::tanh(c[i]);
    n.value[i] = (1.0 - z[i]) * hv[i] + z[i] * c[i];
  }
  return {&t, t.push(n)};
}

Var attention_score(Var w, Var b, Var context, Var x) {
  Tape& t = same_tape(w, x);
  same_tape(w, b);
  same_tape(w, context);
  const auto& nw = t.node(w);
  const auto& nx = t.node(x);
  if (nw.cols != nx.size() || b.size() != nw.rows ||
      context.size() != nw.rows)
    throw DimensionError("attention_score: projection " +
                         std::to_string(nw.rows) + "x" +
                         std::to_string(nw.cols) + " vs item " +
                         std::to_string(nx.size()));
  Tape::Node n;
  n.op = Op::kAttentionScore;
  n.in0 = w.id();
  n.in1 = b.id();
  n.in2 = context.id();
  n.list_off = static_cast<std::uint32_t>(x.id());
  n.rows = 1;
  n.needs_grad = nw.needs_grad || nx.needs_grad || t.node(b).needs_grad ||
                 t.node(context).needs_grad;
  const std::size_t m = nw.rows;
  n.aux = t.alloc(m);
  std::copy_n(t.node(b).value, m, n.aux);
  gemv_acc(nw.value, nx.value, n.aux, m, nx.size());
  const double* c = t.node(context).value;
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    n.aux[i] = std::tanh(n.aux[i]);
    s += n.aux[i] * c[i];
  }
  n.value = t.alloc(1);
  n.value[0] = s;
  return {&t, t.push(n)};
}

// ---- backward ------------------------------------------------------------------

void Tape::backprop_node(std::int32_t id) {
  // Copy: grad_buf() on inputs never reallocates nodes_, but keep it simple.
  const Node n = nodes_[static_cast<std::size_t>(id)];
  const double* g = n.grad;
  const std::size_t sz = n.size();
  auto wants = [&](std::int32_t in) {
    return in >= 0 && nodes_[static_cast<std::size_t>(in)].needs_grad;
  };
  auto in_node = [&](std::int32_t in) -> const Node& {
    return nodes_[static_cast<std::size_t>(in)];
  };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatvec:
    case Op::kAffine: {
      const Node& w = in_node(n.in0);
      const Node& x = in_node(n.in1);
      const std::size_t m = w.rows;
      const std::size_t k = x.size();
      if (wants(n.in0)) ger_acc(grad_buf(n.in0), g, x.value, m, k);
      if (wants(n.in1)) gemv_t_acc(w.value, g, grad_buf(n.in1), m, k);
      if (n.op == Op::kAffine && wants(n.in2)) {
        double* gb = grad_buf(n.in2);
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
      }
      break;
    }
    case Op::kAdd:
    case Op::kSub: {
      const double sign = n.op == Op::kAdd ? 1.0 : -1.0;
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i];
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < sz; ++i) gb[i] += sign * g[i];
      }
      break;
    }
    case Op::kHadamard: {
      const double* a = in_node(n.in0).value;
      const double* b = in_node(n.in1).value;
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i] * b[i];
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < sz; ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::kAbsDiff: {
      const double* a = in_node(n.in0).value;
      const double* b = in_node(n.in1).value;
      auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i] * sgn(a[i] - b[i]);
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < sz; ++i) gb[i] -= g[i] * sgn(a[i] - b[i]);
      }
      break;
    }
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kRelu:
    case Op::kSoftplus: {
      if (!wants(n.in0)) break;
      const double* x = in_node(n.in0).value;
      const double* y = n.value;
      double* ga = grad_buf(n.in0);
      for (std::size_t i = 0; i < sz; ++i) {
        double d = 0.0;
        switch (n.op) {
          case Op::kTanh: d = 1.0 - y[i] * y[i]; break;
          case Op::kSigmoid: d = y[i] * (1.0 - y[i]); break;
          case Op::kRelu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          default: d = sigmoid_scalar(x[i]); break;
        }
        ga[i] += g[i] * d;
      }
      break;
    }
    case Op::kScale: {
      if (!wants(n.in0)) break;
      double* ga = grad_buf(n.in0);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += n.scalar * g[i];
      break;
    }
    case Op::kConcat: {
      std::size_t off = 0;
      for (std::uint32_t k = 0; k < n.list_len; ++k) {
        const std::int32_t in = links_[n.list_off + k];
        const std::size_t len = in_node(in).size();
        if (wants(in)) {
          double* ga = grad_buf(in);
          for (std::size_t i = 0; i < len; ++i) ga[i] += g[off + i];
        }
        off += len;
      }
      break;
    }
    case Op::kSlice: {
      if (!wants(n.in0)) break;
      double* ga = grad_buf(n.in0) + n.list_off;
      for (std::size_t i = 0; i < sz; ++i) ga[i] += g[i];
      break;
    }
    case Op::kSum: {
      if (!wants(n.in0)) break;
      const std::size_t len = in_node(n.in0).size();
      double* ga = grad_buf(n.in0);
      for (std::size_t i = 0; i < len; ++i) ga[i] += g[0];
      break;
    }
    case Op::kDot: {
      const Node& a = in_node(n.in0);
      const Node& b = in_node(n.in1);
      const std::size_t len = a.size();
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < len; ++i) ga[i] += g[0] * b.value[i];
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < len; ++i) gb[i] += g[0] * a.value[i];
      }
      break;
    }
    case Op::kSoftmax: {
      if (!wants(n.in0)) break;
      double s = 0.0;
      for (std::size_t i = 0; i < sz; ++i) s += g[i] * n.value[i];
      double* ga = grad_buf(n.in0);
      for (std::size_t i = 0; i < sz; ++i) ga[i] += n.value[i] * (g[i] - s);
      break;
    }
    case Op::kWeightedSum: {
      const Node& w = in_node(n.in0);
      const bool want_w = wants(n.in0);
      double* gw = want_w ? grad_buf(n.in0) : nullptr;
      for (std::uint32_t k = 0; k < n.list_len; ++k) {
        const std::int32_t in = links_[n.list_off + k];
        const Node& item = in_node(in);
        if (want_w) {
          double s = 0.0;
          for (std::size_t j = 0; j < sz; ++j) s += g[j] * item.value[j];
          gw[k] += s;
        }
        if (wants(in)) {
          double* gi = grad_buf(in);
          const double wk = w.value[k];
          for (std::size_t j = 0; j < sz; ++j) gi[j] += wk * g[j];
        }
      }
      break;
    }
    case Op::kMean: {
      const double inv = 1.0 / static_cast<double>(n.list_len);
      for (std::uint32_t k = 0; k < n.list_len; ++k) {
        const std::int32_t in = links_[n.list_off + k];
        if (!wants(in)) continue;
        double* gi = grad_buf(in);
        for (std::size_t j = 0; j < sz; ++j) gi[j] += inv * g[j];
      }
      break;
    }
    case Op::kSumSquaredError:
    case Op::kMeanSquaredError: {
      const Node& a = in_node(n.in0);
      const Node& b = in_node(n.in1);
      const std::size_t len = a.size();
      double c = 2.0 * g[0];
      if (n.op == Op::kMeanSquaredError) c /= static_cast<double>(len);
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < len; ++i)
          ga[i] += c * (a.value[i] - b.value[i]);
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < len; ++i)
          gb[i] -= c * (a.value[i] - b.value[i]);
      }
      break;
    }
    case Op::kBceLogits: {
      if (!wants(n.in0)) break;
      const double l = in_node(n.in0).value[0];
      grad_buf(n.in0)[0] += g[0] * (sigmoid_scalar(l) - n.scalar);
      break;
    }
    case Op::kNll: {
      if (!wants(n.in0)) break;
      const double p = in_node(n.in0).value[n.list_off];
      grad_buf(n.in0)[n.list_off] += -g[0] / p;
      break;
    }
    case Op::kCosine: {
      const Node& a = in_node(n.in0);
      const Node& b = in_node(n.in1);
      const std::size_t len = a.size();
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        ab += a.value[i] * b.value[i];
        aa += a.value[i] * a.value[i];
        bb += b.value[i] * b.value[i];
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      const double den = na * nb + kCosineEps;
      // d/da [ab/den] = b/den − ab·nb·(a/na)/den²
      if (wants(n.in0)) {
        double* ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < len; ++i) {
          double d = b.value[i] / den;
          if (na > 0.0) d -= ab * nb * (a.value[i] / na) / (den * den);
          ga[i] += g[0] * d;
        }
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < len; ++i) {
          double d = a.value[i] / den;
          if (nb > 0.0) d -= ab * na * (b.value[i] / nb) / (den * den);
          gb[i] += g[0] * d;
        }
      }
      break;
    }
    case Op::kGruCell: {
      const std::size_t nh = sz;
      const Node& xn = in_node(n.in0);
      const Node& hn = in_node(n.in1);
      const std::size_t nx = xn.size();
      const double* x = xn.value;
      const double* h = hn.value;
      const double* z = n.aux;
      const double* r = n.aux + nh;
      const double* c = n.aux + 2 * nh;
      std::int32_t w[9];
      for (int i = 0; i < 9; ++i) w[i] = links_[n.list_off + i];
      auto& buf = scratch_;
      buf.assign(5 * nh, 0.0);
      double* dz = buf.data();          // pre-activation grads
      double* dc = buf.data() + nh;
      double* dr = buf.data() + 2 * nh;
      double* drh = buf.data() + 3 * nh;
      double* rh = buf.data() + 4 * nh;
      for (std::size_t i = 0; i < nh; ++i) {
        dz[i] = g[i] * (c[i] - h[i]) * z[i] * (1.0 - z[i]);
        dc[i] = g[i] * z[i] * (1.0 - c[i] * c[i]);
        rh[i] = r[i] * h[i];
      }
      gemv_t_acc(in_node(w[7]).value, dc, drh, nh, nh);
      for (std::size_t j = 0; j < nh; ++j)
        dr[j] = drh[j] * h[j] * r[j] * (1.0 - r[j]);

      const double* pre[3] = {dz, dr, dc};
      for (int gate = 0; gate < 3; ++gate) {
        const std::int32_t wi = w[3 * gate], ui = w[3 * gate + 1],
                           bi = w[3 * gate + 2];
        const double* gp = pre[gate];
        const double* hin = gate == 2 ? rh : h;
        if (wants(wi)) ger_acc(grad_buf(wi), gp, x, nh, nx);
        if (wants(ui)) ger_acc(grad_buf(ui), gp, hin, nh, nh);
        if (wants(bi)) {
          double* gb = grad_buf(bi);
          for (std::size_t i = 0; i < nh; ++i) gb[i] += gp[i];
        }
        if (wants(n.in0) && nx > 0)
          gemv_t_acc(in_node(wi).value, gp, grad_buf(n.in0), nh, nx);
      }
      if (wants(n.in1)) {
        double* gh = grad_buf(n.in1);
        for (std::size_t i = 0; i < nh; ++i)
          gh[i] += g[i] * (1.0 - z[i]) + drh[i] * r[i];
        gemv_t_acc(in_node(w[1]).value, dz, gh, nh, nh);
        gemv_t_acc(in_node(w[4]).value, dr, gh, nh, nh);
      }
      break;
    }
    case Op::kAttentionScore: {
      const Node& wn = in_node(n.in0);
      const std::int32_t xid = static_cast<std::int32_t>(n.list_off);
      const Node& xn = in_node(xid);
      const double* c = in_node(n.in2).value;
      const std::size_t m = wn.rows;
      const std::size_t k = xn.size();
      auto& pre = scratch_;
      pre.assign(m, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        pre[i] = g[0] * c[i] * (1.0 - n.aux[i] * n.aux[i]);
      if (wants(n.in2)) {
        double* gc = grad_buf(n.in2);
        for (std::size_t i = 0; i < m; ++i) gc[i] += g[0] * n.aux[i];
      }
      if (wants(n.in1)) {
        double* gb = grad_buf(n.in1);
        for (std::size_t i = 0; i < m; ++i) gb[i] += pre[i];
      }
      if (wants(n.in0)) ger_acc(grad_buf(n.in0), pre.data(), xn.value, m, k);
      if (wants(xid)) gemv_t_acc(wn.value, pre.data(), grad_buf(xid), m, k);
      break;
    }
  }
}

}  // namespace hmn
