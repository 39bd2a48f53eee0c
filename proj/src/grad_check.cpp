// SPDX-License-Identifier: Apache-2.0
#include "hmn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace hmn {

namespace {

double eval_loss(const LossFn& loss) {
  Tape tape;
  const Var l = loss(tape);
  if (l.size() != 1) throw DimensionError("grad_check: loss must be scalar");
  const double v = l.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossFn& loss, std::span<Tensor* const> params,
                           double eps) {
  return grad_check(std::span<const LossFn>(&loss, 1), params, eps);
}

GradCheckResult grad_check(std::span<const LossFn> terms,
                           std::span<Tensor* const> params, double eps) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  if (terms.empty()) throw DomainError("grad_check: no loss terms");

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.emplace_back(p->shape());
  // reads[pi][j]: term j reads tensor pi
  std::vector<std::vector<bool>> reads(params.size(),
                                       std::vector<bool>(terms.size()));
  for (std::size_t j = 0; j < terms.size(); ++j) {
    Tape tape;
    const Var l = terms[j](tape);
    if (l.size() != 1) throw DimensionError("grad_check: loss must be scalar");
    if (!std::isfinite(l.value()[0]))
      throw NumericError("grad_check: non-finite loss");
    tape.backward(l);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      if (!tape.uses_param(*params[pi])) continue;
      reads[pi][j] = true;
      const Tensor g = tape.param_grad(*params[pi]);
      auto dst = analytic[pi].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  }

  // A term that never registered a tensor must also not read it behind the
  // tape's back: shift the whole tensor and require a bit-identical value.
  for (std::size_t j = 0; j < terms.size(); ++j) {
    double base = 0.0;
    bool have_base = false;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      if (reads[pi][j] || params[pi]->size() == 0) continue;
      if (!have_base) {
        base = eval_loss(terms[j]);
        have_base = true;
      }
      auto data = params[pi]->data();
      const std::vector<double> saved(data.begin(), data.end());
      for (double& v : data) v += eps;
      const double shifted = eval_loss(terms[j]);
      std::copy(saved.begin(), saved.end(), data.begin());
      if (shifted != base) reads[pi][j] = true;
    }
  }

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi]->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double numeric = 0.0;
      for (std::size_t j = 0; j < terms.size(); ++j) {
        if (!reads[pi][j]) continue;
        const double saved = data[i];
        data[i] = saved + eps;
        const double up = eval_loss(terms[j]);
        data[i] = saved - eps;
        const double down = eval_loss(terms[j]);
        data[i] = saved;
        numeric += (up - down) / (2.0 * eps);
      }
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      ++res.entries_checked;
      if (err > res.max_rel_error || res.entries_checked == 1) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace hmn
