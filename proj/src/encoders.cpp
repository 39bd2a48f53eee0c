// SPDX-License-Identifier: Apache-2.0
#include "hmn/encoders.hpp"

#include <array>
#include <cmath>

namespace hmn {

namespace {

std::array<Var, 9> bind(Tape& tape, const GruParams& p) {
  return {tape.param(p.w_z), tape.param(p.u_z), tape.param(p.b_z),
          tape.param(p.w_r), tape.param(p.u_r), tape.param(p.b_r),
          tape.param(p.w_h), tape.param(p.u_h), tape.param(p.b_h)};
}

}  // namespace

GruParams GruParams::zeros(std::size_t input_dim, std::size_t hidden) {
  GruParams p;
  for (Tensor* w : {&p.w_z, &p.w_r, &p.w_h}) *w = Tensor({hidden, input_dim});
  for (Tensor* u : {&p.u_z, &p.u_r, &p.u_h}) *u = Tensor({hidden, hidden});
  for (Tensor* b : {&p.b_z, &p.b_r, &p.b_h}) *b = Tensor({hidden});
  return p;
}

GruParams GruParams::random(std::size_t input_dim, std::size_t hidden,
                            std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  GruParams p;
  p.w_z = uniform_tensor({hidden, input_dim}, bound, rng);
  p.u_z = uniform_tensor({hidden, hidden}, bound, rng);
  p.b_z = uniform_tensor({hidden}, bound, rng);
  p.w_r = uniform_tensor({hidden, input_dim}, bound, rng);
  p.u_r = uniform_tensor({hidden, hidden}, bound, rng);
  p.b_r = uniform_tensor({hidden}, bound, rng);
  p.w_h = uniform_tensor({hidden, input_dim}, bound, rng);
  p.u_h = uniform_tensor({hidden, hidden}, bound, rng);
  p.b_h = uniform_tensor({hidden}, bound, rng);
  return p;
}

void GruParams::validate() const {
  const std::size_t h = hidden_size();
  const std::size_t n = input_dim();
  for (const Tensor* w : {&w_z, &w_r, &w_h})
    if (w->rank() != 2 || w->rows() != h || w->cols() != n)
      throw DimensionError("GRU input weights must all be HxD");
  for (const Tensor* u : {&u_z, &u_r, &u_h})
    if (u->rank() != 2 || u->rows() != h || u->cols() != h)
      throw DimensionError("GRU recurrent weights must all be HxH");
  for (const Tensor* b : {&b_z, &b_r, &b_h})
    if (b->size() != h) throw DimensionError("GRU biases must have length H");
}

BiGruParams BiGruParams::zeros(std::size_t input_dim, std::size_t hidden) {
  return {GruParams::zeros(input_dim, hidden),
          GruParams::zeros(input_dim, hidden)};
}

BiGruParams BiGruParams::random(std::size_t input_dim, std::size_t hidden,
                                std::mt19937_64& rng) {
  BiGruParams p;
  p.fwd = GruParams::random(input_dim, hidden, rng);
  p.bwd = GruParams::random(input_dim, hidden, rng);
  return p;
}

void BiGruParams::validate() const {
  fwd.validate();
  bwd.validate();
  if (fwd.hidden_size() != bwd.hidden_size() ||
      fwd.input_dim() != bwd.input_dim())
    throw DimensionError("bi-GRU directions disagree on dimensions");
}

Var gru_step(Tape& tape, const GruParams& p, Var x, Var h_prev) {
  if (x.size() != p.input_dim())
    throw DimensionError("gru_step: input length " + std::to_string(x.size()) +
                         " but cell expects " + std::to_string(p.input_dim()));
  if (h_prev.size() != p.hidden_size())
    throw DimensionError("gru_step: hidden length mismatch");
  const auto w = bind(tape, p);
  return gru_cell(x, h_prev, w);
}

std::vector<Var> bigru_encode(Tape& tape, const BiGruParams& p,
                              std::span<const Var> seq) {
  if (seq.empty()) throw DomainError("bigru_encode: empty sequence");
  const std::size_t k = seq.size();
  const std::size_t hidden = p.hidden_size();
  for (const Var& x : seq)
    if (x.size() != p.input_dim())
      throw DimensionError("bigru_encode: element length " +
                           std::to_string(x.size()) + ", expected " +
                           std::to_string(p.input_dim()));
  const auto wf = bind(tape, p.fwd);
  const auto wb = bind(tape, p.bwd);
  std::vector<Var> fwd(k), bwd(k);
  Var h = tape.zeros(hidden);
  for (std::size_t i = 0; i < k; ++i) fwd[i] = h = gru_cell(seq[i], h, wf);
  h = tape.zeros(hidden);
  for (std::size_t i = k; i-- > 0;) bwd[i] = h = gru_cell(seq[i], h, wb);
  std::vector<Var> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Var parts[2] = {fwd[i], bwd[i]};
    out[i] = concat(parts);
  }
  return out;
}

std::vector<Var> bigru_decode(Tape& tape, const BiGruParams& p, Var init,
                              int steps) {
  if (steps <= 0) throw DomainError("bigru_decode: steps must be positive");
  if (init.size() != p.hidden_size())
    throw DimensionError("bigru_decode: init length mismatch");
  const auto k = static_cast<std::size_t>(steps);
  const Var none = tape.zeros(p.input_dim());
  const auto wf = bind(tape, p.fwd);
  const auto wb = bind(tape, p.bwd);
  std::vector<Var> fwd(k), bwd(k);
  Var h = init;
  for (std::size_t i = 0; i < k; ++i) fwd[i] = h = gru_cell(none, h, wf);
  h = init;
  for (std::size_t i = k; i-- > 0;) bwd[i] = h = gru_cell(none, h, wb);
  std::vector<Var> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Var parts[2] = {fwd[i], bwd[i]};
    out[i] = concat(parts);
  }
  return out;
}

}  // namespace hmn
