// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>

#include "hmn/tape.hpp"

namespace hmn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Builds a scalar loss on the given tape. Must be deterministic: the same
/// parameter values always give the same loss.
using LossFn = std::function<Var(Tape&)>;

/// Compares tape gradients against central differences for every entry of
/// every tensor in `params`:  max |analytic − numeric| / max(1, |numeric|).
/// Entries are perturbed in place and restored. Throws NumericError if any
/// evaluated loss is not finite.
GradCheckResult grad_check(const LossFn& loss, std::span<Tensor* const> params,
                           double eps = 1e-5);

/// Same check for a loss that is the sum of `terms`. A perturbed entry only
/// re-evaluates the terms whose tape reads its tensor; the others are constant
/// in it, so their central difference is exactly 0.
GradCheckResult grad_check(std::span<const LossFn> terms,
                           std::span<Tensor* const> params, double eps = 1e-5);

}  // namespace hmn
