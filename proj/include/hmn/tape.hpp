// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over rank-1/rank-2 float64
// values. A Tape owns every intermediate produced while it is alive; a Var is
// a (tape, node) handle. Parameters enter as leaves that alias the caller's
// Tensor storage, so several tapes can read one parameter bundle at once.
//
// Kernels record an opcode plus operand ids; the backward sweep dispatches on
// the opcode in reverse creation order, which is a topological order because
// operands always exist before the node that consumes them.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "hmn/tensor.hpp"

namespace hmn {

class Tape;

/// Handle to one recorded value.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const double> value() const;
  double operator[](std::size_t i) const { return value()[i]; }
  Tensor to_tensor() const;

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatvec,
  kAffine,
  kAdd,
  kSub,
  kHadamard,
  kAbsDiff,
  kTanh,
  kSigmoid,
  kRelu,
  kSoftplus,
  kScale,
  kConcat,
  kSlice,
  kSum,
  kDot,
  kSoftmax,
  kWeightedSum,
  kMean,
  kSumSquaredError,
  kMeanSquaredError,
  kBceLogits,
  kNll,
  kCosine,
  kGruCell,
  kAttentionScore,
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// Unique per tape instance; used to tell live handles from stale ones.
  std::uint64_t serial() const { return serial_; }

  /// Copies `values` onto the tape as a non-differentiable leaf.
  Var constant(std::span<const double> values);
  Var constant(std::span<const double> values, std::size_t rows,
               std::size_t cols);
  Var constant(const Tensor& t);
  Var zeros(std::size_t n);

  /// Differentiable leaf aliasing `t` (no copy). Repeated calls with the same
  /// tensor return the same node, so gradients from every use accumulate.
  Var param(const Tensor& t);

  /// Seeds d(loss)/d(loss)=1 and propagates to every reachable node.
  void backward(Var loss);

  std::span<const double> value(Var v) const;
  /// Gradient of the last backward() w.r.t. `v`; empty if unreached.
  std::span<const double> grad(Var v) const;
  /// Gradient w.r.t. a parameter tensor; zeros if it never entered the tape.
  Tensor param_grad(const Tensor& t) const;
  bool uses_param(const Tensor& t) const {
    return params_.find(&t) != params_.end();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    bool needs_grad = false;
    std::int32_t in0 = -1, in1 = -1, in2 = -1;
    std::uint32_t list_off = 0, list_len = 0;
    std::uint32_t rows = 0, cols = 1;
    double scalar = 0.0;
    double* value = nullptr;
    double* grad = nullptr;
    double* aux = nullptr;
    std::size_t size() const { return std::size_t{rows} * cols; }
  };

  double* alloc(std::size_t n);
  std::int32_t push(Node node);
  std::int32_t leaf(std::span<const double> values, std::size_t rows,
                    std::size_t cols);
  const Node& node(Var v) const;
  Node& node_of(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }
  void check_owned(Var v) const;
  void check_finite(const Node& n) const;
  double* grad_buf(std::int32_t id);
  void backprop_node(std::int32_t id);

  // Kernels need direct node access.
  friend Var matvec(Var, Var);
  friend Var affine(Var, Var, Var);
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var hadamard(Var, Var);
  friend Var abs_diff(Var, Var);
  friend Var tanh(Var);
  friend Var sigmoid(Var);
  friend Var relu(Var);
  friend Var softplus(Var);
  friend Var scale(Var, double);
  friend Var concat(std::span<const Var>);
  friend Var slice(Var, std::size_t, std::size_t);
  friend Var sum(Var);
  friend Var dot(Var, Var);
  friend Var softmax(Var);
  friend Var weighted_sum(Var, std::span<const Var>);
  friend Var mean(std::span<const Var>);
  friend Var sum_squared_error(Var, Var);
  friend Var mean_squared_error(Var, Var);
  friend Var bce_with_logits(Var, double);
  friend Var nll(Var, std::size_t);
  friend Var cosine(Var, Var);
  friend Var gru_cell(Var, Var, std::span<const Var>);
  friend Var attention_score(Var, Var, Var, Var);
  friend Var unary(Op, Var);
  friend Var binary(Op, Var, Var);
  friend Var squared_error(Op, Var, Var);
  friend class Var;

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<std::int32_t> links_;
  std::vector<std::unique_ptr<double[]>> blocks_;
  std::size_t block_used_ = 0;
  std::size_t block_cap_ = 0;
  std::unordered_map<const Tensor*, std::int32_t> params_;
  std::vector<double> scratch_;
  bool backward_done_ = false;
};

/// A vector that outlives one step. It always holds a value; while the tape
/// that produced it is still recording it also holds a live handle, so later
/// steps on the same tape backpropagate through it. On any other tape it
/// re-enters as a constant.
class Carried {
 public:
  Carried() = default;
  explicit Carried(Tensor value) : value_(std::move(value)) {}

  void set(Var v);
  void set_value(Tensor value);
  void detach() { serial_ = 0; id_ = -1; }
  Var bind(Tape& tape) const;
  bool live_on(const Tape& tape) const {
    return id_ >= 0 && serial_ == tape.serial();
  }
  const Tensor& value() const { return value_; }

 private:
  Tensor value_;
  std::uint64_t serial_ = 0;
  std::int32_t id_ = -1;
};

// ---- kernels ---------------------------------------------------------------
// All operands must live on the same tape. Shapes follow the usual algebra;
// violations throw DimensionError.

/// W·x for W [m×n], x [n].
Var matvec(Var w, Var x);
/// W·x + b.
Var affine(Var w, Var x, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product of equal-length operands.
Var hadamard(Var a, Var b);
/// Elementwise |a − b|.
Var abs_diff(Var a, Var b);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var softplus(Var a);
Var scale(Var a, double c);
Var concat(std::span<const Var> parts);
Var slice(Var a, std::size_t offset, std::size_t length);
/// Sum of all entries, shape [1].
Var sum(Var a);
Var dot(Var a, Var b);
/// Max-shifted softmax. Empty input throws DomainError.
Var softmax(Var a);
/// Σₖ w[k]·items[k].
Var weighted_sum(Var weights, std::span<const Var> items);
/// Unweighted average of equal-length items.
Var mean(std::span<const Var> items);
/// Σ (a − b)², shape [1].
Var sum_squared_error(Var a, Var b);
/// mean (a − b)², shape [1].
Var mean_squared_error(Var a, Var b);
/// −[t·log σ(l) + (1−t)·log(1−σ(l))] for a scalar logit l, in softplus form.
Var bce_with_logits(Var logit, double target);
/// −log p[cls] for a probability vector p.
Var nll(Var probs, std::size_t cls);
/// a·b / (‖a‖‖b‖ + 1e-8), shape [1].
Var cosine(Var a, Var b);

/// Fused GRU cell. `weights` = {W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h}:
///   z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
///   c = tanh(W_h x + U_h (r⊙h) + b_h), h' = (1−z)⊙h + z⊙c.
/// An input of length 0 is allowed (no input term).
Var gru_cell(Var x, Var h, std::span<const Var> weights);

/// Fused attention score tanh(W·x + b)·c, shape [1].
Var attention_score(Var w, Var b, Var context, Var x);

}  // namespace hmn
