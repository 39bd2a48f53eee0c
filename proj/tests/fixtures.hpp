// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "hmn/model.hpp"

namespace fx {

inline hmn::ModelConfig tiny() {
  hmn::ModelConfig c;
  c.memory_len = 2;
  c.patches = 2;
  c.dim = 2;
  c.hidden = 2;
  c.noise_dim = 2;
  return c;
}

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng,
                                   double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline hmn::FeatureGrid grid(std::size_t k, std::size_t d, std::mt19937_64& rng) {
  return hmn::FeatureGrid(k, d, uniform(k * d, rng, 0.0, 1.0));
}

inline hmn::Tensor tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return hmn::Tensor(std::move(shape), uniform(n, rng));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sum(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

/// Randomises every tensor of a model in place (zero-sized ones stay empty).
inline void scramble(hmn::HmnParams& p, std::uint64_t seed, double scale = 0.8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  p.for_each([&](const std::string&, hmn::Tensor& t) {
    for (double& v : t.data()) v = u(rng);
  });
}

}  // namespace fx
