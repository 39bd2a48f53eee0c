// SPDX-License-Identifier: Apache-2.0
#include "hmn/attention.hpp"

#include <cmath>

namespace hmn {

AttentionParams AttentionParams::zeros(std::size_t item_dim,
                                       std::size_t attn_dim) {
  return {Tensor({attn_dim, item_dim}), Tensor({attn_dim}), Tensor({attn_dim})};
}

AttentionParams AttentionParams::random(std::size_t item_dim,
                                        std::size_t attn_dim,
                                        std::mt19937_64& rng) {
  AttentionParams p = zeros(item_dim, attn_dim);
  const double wb = 1.0 / std::sqrt(static_cast<double>(item_dim));
  const double cb = 1.0 / std::sqrt(static_cast<double>(attn_dim));
  std::uniform_real_distribution<double> wd(-wb, wb), cd(-cb, cb);
  for (double& v : p.w.data()) v = wd(rng);
  for (double& v : p.context.data()) v = cd(rng);
  return p;
}

Attended attend(Tape& tape, const AttentionParams& p,
                std::span<const Var> items) {
  if (items.empty()) throw DomainError("attend: no items");
  const Var w = tape.param(p.w);
  const Var b = tape.param(p.b);
  const Var c = tape.param(p.context);
  std::vector<Var> scores;
  scores.reserve(items.size());
  for (const Var& x : items) scores.push_back(attention_score(w, b, c, x));
  const Var weights = softmax(concat(scores));
  return {weights, weighted_sum(weights, items)};
}

Attended mean_pool(Tape& tape, std::span<const Var> items) {
  if (items.empty()) throw DomainError("mean_pool: no items");
  const std::vector<double> uniform(items.size(),
                                    1.0 / static_cast<double>(items.size()));
  const Var weights = tape.constant(uniform);
  return {weights, weighted_sum(weights, items)};
}

Var patch_augment(Var memory_patch, Var input_patch) {
  if (memory_patch.size() != input_patch.size())
    throw DimensionError("patch_augment: operand lengths differ");
  const Var parts[2] = {hadamard(memory_patch, input_patch),
                        abs_diff(memory_patch, input_patch)};
  return concat(parts);
}

Var output_augment(Var rho, Var query, Var r_prev) {
  if (rho.size() != query.size() || rho.size() != r_prev.size())
    throw DimensionError("output_augment: operand lengths differ");
  const Var parts[3] = {hadamard(rho, query), hadamard(rho, r_prev),
                        abs_diff(rho, query)};
  return concat(parts);
}

}  // namespace hmn
