// SPDX-License-Identifier: Apache-2.0
//
// Context-vector attention used at all three tiers of the memory network:
//
//   u_k = tanh(W x_k + b),  a = softmax_k(u_k · c),  pooled = Σ_k a_k x_k
//
// The input tier pools encoded input patches into the query, the patch tier
// pools augmented (memory patch, input patch) pairs per slot, and the output
// tier pools augmented slot summaries into the read vector.
#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmn/tape.hpp"

namespace hmn {

struct AttentionParams {
  Tensor w;        // m × d projection
  Tensor b;        // m
  Tensor context;  // m, trained jointly

  static AttentionParams zeros(std::size_t item_dim, std::size_t attn_dim);
  static AttentionParams random(std::size_t item_dim, std::size_t attn_dim,
                                std::mt19937_64& rng);
  std::size_t item_dim() const { return w.cols(); }
  std::size_t attn_dim() const { return w.rows(); }

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "w", w);
    f(prefix + "b", b);
    f(prefix + "context", context);
  }
};

struct Attended {
  Var weights;  // [n], sums to 1
  Var pooled;   // [d]
};

/// Throws DomainError on an empty item list.
Attended attend(Tape& tape, const AttentionParams& p, std::span<const Var> items);

/// Unweighted mean with constant weights 1/n; the ablated form of attend().
Attended mean_pool(Tape& tape, std::span<const Var> items);

/// [m ⊙ f ; |m − f|] for a memory patch m and an input patch f.
Var patch_augment(Var memory_patch, Var input_patch);

/// [ρ ⊙ q ; ρ ⊙ r_prev ; |ρ − q|].
Var output_augment(Var rho, Var query, Var r_prev);

}  // namespace hmn
