// SPDX-License-Identifier: Apache-2.0
#include "hmn/baselines.hpp"

#include <cmath>
#include <numeric>

namespace hmn {

namespace {

void require_slots(std::span<const Var> slots) {
  if (slots.empty()) throw DomainError("flat memory has no slots");
  for (const Var& s : slots)
    if (s.size() != slots.front().size())
      throw DimensionError("flat memory slots differ in width");
}

}  // namespace

FlatMemoryState::FlatMemoryState(std::size_t length, std::size_t width)
    : slots(length, Carried(Tensor::zeros(width))),
      valid(length, true),
      r_prev(Tensor::zeros(width)) {}

std::vector<Var> FlatMemoryState::bind(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(slots.size());
  for (const Carried& s : slots) out.push_back(s.bind(tape));
  return out;
}

std::vector<Var> FlatMemoryState::bind(Tape& tape, const Tensor& init) const {
  if (!fresh) return bind(tape);
  if (init.rows() != slots.size() || init.cols() != width())
    throw DimensionError("flat memory: initial slots must be L x width");
  const Var m = tape.param(init);
  std::vector<Var> out;
  out.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i)
    out.push_back(slice(m, i * width(), width()));
  return out;
}

void FlatMemoryState::assign(std::span<const Var> new_slots) {
  if (new_slots.size() != slots.size())
    throw DimensionError("flat memory: slot count changed on update");
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i].set(new_slots[i]);
  fresh = false;
}

void FlatMemoryState::detach() {
  for (Carried& s : slots) s.detach();
  r_prev.detach();
}

NtmParams NtmParams::random(std::size_t length, std::size_t width,
                            std::mt19937_64& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(width));
  NtmParams p;
  p.init_memory = uniform_tensor({length, width}, 0.1, rng);
  p.key_w = uniform_tensor({width, width}, b, rng);
  p.key_b = Tensor({width});
  p.strength_w = uniform_tensor({1, width}, b, rng);
  p.strength_b = Tensor({1});
  p.erase_w = uniform_tensor({width, width}, b, rng);
  p.erase_b = Tensor({width});
  p.add_w = uniform_tensor({width, width}, b, rng);
  p.add_b = Tensor({width});
  return p;
}

DmnParams DmnParams::random(std::size_t length, std::size_t width,
                            std::size_t attn_dim, std::mt19937_64& rng) {
  DmnParams p;
  p.init_memory = uniform_tensor({length, width}, 0.1, rng);
  p.query_w = uniform_tensor({width, width}, 1.0 / std::sqrt(double(width)), rng);
  p.query_b = Tensor({width});
  p.attn = AttentionParams::random(4 * width, attn_dim, rng);
  p.out_proj = uniform_tensor({width, 4 * width}, 1.0 / std::sqrt(4.0 * width), rng);
  p.update_w = uniform_tensor({width, 3 * width}, 1.0 / std::sqrt(3.0 * width), rng);
  return p;
}

Var ntm_read(std::span<const Var> slots, Var gamma) {
  require_slots(slots);
  if (gamma.size() != slots.size())
    throw DimensionError("ntm_read: one weight per slot required");
  const auto g = gamma.value();
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9)
    throw DomainError("ntm_read: weights sum to " + std::to_string(total));
  return weighted_sum(gamma, slots);
}

std::vector<Var> ntm_update(Tape& tape, std::span<const Var> slots, Var gamma,
                            Var erase, Var add_vec) {
  require_slots(slots);
  const std::size_t width = slots.front().size();
  if (gamma.size() != slots.size())
    throw DimensionError("ntm_update: one weight per slot required");
  if (erase.size() != width || add_vec.size() != width)
    throw DimensionError("ntm_update: erase/add width mismatch");
  const std::vector<double> ones_v(width, 1.0);
  const Var ones = tape.constant(ones_v);
  const Var erase_items[1] = {erase};
  const Var add_items[1] = {add_vec};
  std::vector<Var> out;
  out.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Var gi = slice(gamma, i, 1);
    const Var keep = sub(ones, weighted_sum(gi, erase_items));
    out.push_back(add(hadamard(slots[i], keep), weighted_sum(gi, add_items)));
  }
  return out;
}

Var ntm_address(std::span<const Var> slots, Var key, Var strength) {
  require_slots(slots);
  if (strength.size() != 1) throw DimensionError("ntm_address: scalar strength");
  std::vector<Var> sims;
  sims.reserve(slots.size());
  for (const Var& s : slots) sims.push_back(cosine(key, s));
  const Var sim = concat(sims);
  const Var strength_items[1] = {sim};
  return softmax(weighted_sum(strength, strength_items));
}

Var dmn_read(Tape& tape, const DmnParams& p, std::span<const Var> slots,
             Var query, Var summary) {
  require_slots(slots);
  const std::size_t width = slots.front().size();
  if (query.size() != width || summary.size() != width)
    throw DimensionError("dmn_read: query/summary width mismatch");
  const Var fq = hadamard(summary, query);
  const Var fq_abs = abs_diff(summary, query);
  std::vector<Var> mu;
  mu.reserve(slots.size());
  for (const Var& m : slots) {
    const Var parts[4] = {fq, hadamard(m, summary), abs_diff(summary, m), fq_abs};
    mu.push_back(concat(parts));
  }
  const Attended a = attend(tape, p.attn, mu);
  return matvec(tape.param(p.out_proj), a.pooled);
}

std::vector<Var> dmn_update(Tape& tape, const DmnParams& p,
                            std::span<const Var> slots, Var r, Var query) {
  require_slots(slots);
  const std::size_t width = slots.front().size();
  if (r.size() != width || query.size() != width)
    throw DimensionError("dmn_update: read/query width mismatch");
  const Var w = tape.param(p.update_w);
  std::vector<Var> out;
  out.reserve(slots.size());
  for (const Var& m : slots) {
    const Var parts[3] = {m, r, query};
    out.push_back(relu(matvec(w, concat(parts))));
  }
  return out;
}

}  // namespace hmn
