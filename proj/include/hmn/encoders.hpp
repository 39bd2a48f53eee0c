// SPDX-License-Identifier: Apache-2.0
//
// GRU cell and bidirectional GRU. The cell follows the original gated
// recurrent unit:
//
//   z  = σ(W_z x + U_z h + b_z)          update gate
//   r  = σ(W_r x + U_r h + b_r)          reset gate
//   h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)  candidate
//   h' = (1 − z) ⊙ h + z ⊙ h̃
#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmn/tape.hpp"

namespace hmn {

struct GruParams {
  Tensor w_z, u_z, b_z;
  Tensor w_r, u_r, b_r;
  Tensor w_h, u_h, b_h;

  /// Zero-initialised cell. `input_dim` may be 0 (cell driven by state only).
  static GruParams zeros(std::size_t input_dim, std::size_t hidden);
  /// Uniform(−1/√H, 1/√H) initialisation.
  static GruParams random(std::size_t input_dim, std::size_t hidden,
                          std::mt19937_64& rng);

  std::size_t input_dim() const { return w_z.cols(); }
  std::size_t hidden_size() const { return b_z.size(); }
  /// Throws DimensionError unless all nine tensors agree.
  void validate() const;

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "w_z", w_z); f(prefix + "u_z", u_z); f(prefix + "b_z", b_z);
    f(prefix + "w_r", w_r); f(prefix + "u_r", u_r); f(prefix + "b_r", b_r);
    f(prefix + "w_h", w_h); f(prefix + "u_h", u_h); f(prefix + "b_h", b_h);
  }
};

struct BiGruParams {
  GruParams fwd;
  GruParams bwd;

  static BiGruParams zeros(std::size_t input_dim, std::size_t hidden);
  static BiGruParams random(std::size_t input_dim, std::size_t hidden,
                            std::mt19937_64& rng);

  std::size_t hidden_size() const { return fwd.hidden_size(); }
  std::size_t input_dim() const { return fwd.input_dim(); }
  void validate() const;

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    fwd.for_each(prefix + "fwd.", f);
    bwd.for_each(prefix + "bwd.", f);
  }
};

/// One GRU step on the tape.
Var gru_step(Tape& tape, const GruParams& p, Var x, Var h_prev);

/// Runs fwd over 1..K and bwd over K..1 from zero states; element k of the
/// result is [fwd_k ; bwd_k] (length 2H). Throws DomainError on empty input.
std::vector<Var> bigru_encode(Tape& tape, const BiGruParams& p,
                              std::span<const Var> seq);

/// Unrolls both directions for `steps` steps on zero-length inputs with the
/// hidden state seeded by `init` (length H) in each direction. Returns the
/// `steps` concatenated states, position-aligned like bigru_encode.
std::vector<Var> bigru_decode(Tape& tape, const BiGruParams& p, Var init,
                              int steps);

}  // namespace hmn
