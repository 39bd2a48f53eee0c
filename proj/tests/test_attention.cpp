// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "fixtures.hpp"
#include "hmn/attention.hpp"
#include "hmn/grad_check.hpp"
#include "oracle.hpp"

using namespace hmn;

namespace {

std::vector<Var> bind_all(Tape& tape, const std::vector<std::vector<double>>& items) {
  std::vector<Var> out;
  for (const auto& v : items) out.push_back(tape.constant(v));
  return out;
}

std::vector<std::vector<double>> random_items(std::size_t n, std::size_t d,
                                              std::mt19937_64& rng) {
  std::vector<std::vector<double>> items;
  for (std::size_t i = 0; i < n; ++i) items.push_back(fx::uniform(d, rng));
  return items;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("attend: one item gets all the weight") {
  std::mt19937_64 rng(1);
  const AttentionParams p = AttentionParams::random(3, 4, rng);
  Tape tape;
  const auto items = bind_all(tape, random_items(1, 3, rng));
  const Attended a = attend(tape, p, items);
  CHECK(a.weights[0] == 1.0);
  CHECK(fx::max_abs_diff(a.pooled.value(), items[0].value()) == 0.0);
}

TEST_CASE("attend: identical items split evenly") {
  std::mt19937_64 rng(2);
  const AttentionParams p = AttentionParams::random(3, 4, rng);
  const auto v = fx::uniform(3, rng);
  Tape tape;
  const auto items = bind_all(tape, {v, v});
  const Attended a = attend(tape, p, items);
  CHECK(a.weights[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.weights[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(fx::max_abs_diff(a.pooled.value(), v) < 1e-15);
}

TEST_CASE("attend: n=3 against the oracle") {
  std::mt19937_64 rng(3);
  const AttentionParams p = AttentionParams::random(4, 3, rng);
  const auto items = random_items(3, 4, rng);
  Tape tape;
  const Attended a = attend(tape, p, bind_all(tape, items));
  const auto [w, pooled] = oracle::attend(oracle::attn(p), items);
  CHECK(fx::max_abs_diff(a.weights.value(), w) < 1e-12);
  CHECK(fx::max_abs_diff(a.pooled.value(), pooled) < 1e-12);
}

TEST_CASE("attend: fixed case with frozen weights") {
  AttentionParams p = AttentionParams::zeros(2, 1);
  p.w[0] = 1.0;
  p.w[1] = -1.0;
  p.context[0] = 2.0;
  const std::vector<std::vector<double>> items = {{1.0, 0.0}, {0.0, 1.0}, {0.5, 0.5}};
  Tape tape;
  const Attended a = attend(tape, p, bind_all(tape, items));
  // scores 2·tanh(1), 2·tanh(−1), 0
  const auto [w, pooled] = oracle::attend(oracle::attn(p), items);
  CHECK(fx::max_abs_diff(a.weights.value(), w) < 1e-15);
  CHECK(w[0] == doctest::Approx(0.7901724604085436).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(0.03755755671837499).epsilon(1e-12));
}

TEST_CASE("attend: weights are a distribution and pooled is in the hull") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const AttentionParams p = AttentionParams::random(3, 5, rng);
    const auto items = random_items(6, 3, rng);
    Tape tape;
    const Attended a = attend(tape, p, bind_all(tape, items));
    CHECK(std::abs(fx::sum(a.weights.value()) - 1.0) < 1e-12);
    for (double w : a.weights.value()) CHECK(w >= 0.0);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& it : items) {
        lo = std::min(lo, it[j]);
        hi = std::max(hi, it[j]);
      }
      CHECK(a.pooled[j] >= lo - 1e-12);
      CHECK(a.pooled[j] <= hi + 1e-12);
    }
  }
}

TEST_CASE("attend: permutation equivariance") {
  std::mt19937_64 rng(5);
  const AttentionParams p = AttentionParams::random(3, 4, rng);
  const auto items = random_items(4, 3, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::vector<double>> shuffled;
  for (auto i : perm) shuffled.push_back(items[i]);
  Tape tape;
  const Attended a = attend(tape, p, bind_all(tape, items));
  const Attended b = attend(tape, p, bind_all(tape, shuffled));
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(b.weights[i] == doctest::Approx(a.weights[perm[i]]).epsilon(1e-14));
  CHECK(fx::max_abs_diff(a.pooled.value(), b.pooled.value()) < 1e-14);
}

TEST_CASE("attend: gradients with respect to every parameter") {
  std::mt19937_64 rng(6);
  AttentionParams p = AttentionParams::random(3, 4, rng);
  const auto items = random_items(5, 3, rng);
  const auto proj = fx::uniform(3, rng);
  std::vector<Tensor*> params;
  p.for_each("", [&](const std::string&, Tensor& t) { params.push_back(&t); });
  const auto r = grad_check(
      [&](Tape& t) { return dot(attend(t, p, bind_all(t, items)).pooled, t.constant(proj)); },
      params);
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.entries_checked == 12 + 4 + 4);
}

TEST_CASE("attend: empty input throws") {
  std::mt19937_64 rng(7);
  const AttentionParams p = AttentionParams::random(3, 4, rng);
  Tape tape;
  CHECK_THROWS_AS(attend(tape, p, std::vector<Var>{}), DomainError);
  CHECK_THROWS_AS(mean_pool(tape, std::vector<Var>{}), DomainError);
}

TEST_CASE("mean_pool: constant 1/n weights") {
  std::mt19937_64 rng(8);
  const auto items = random_items(4, 2, rng);
  Tape tape;
  const Attended a = mean_pool(tape, bind_all(tape, items));
  for (double w : a.weights.value()) CHECK(w == 0.25);
  const auto [w, pooled] = oracle::attend({}, items, false);
  CHECK(fx::max_abs_diff(a.pooled.value(), pooled) < 1e-15);
}

TEST_CASE("patch_augment: definitional cases") {
  Tape tape;
  const Var v = tape.constant(std::vector<double>{2.0, -3.0});
  const auto same = patch_augment(v, v).value();
  CHECK(std::vector<double>(same.begin(), same.end()) == std::vector<double>{4, 9, 0, 0});
  const auto zero = patch_augment(tape.zeros(2), v).value();
  CHECK(std::vector<double>(zero.begin(), zero.end()) == std::vector<double>{0, 0, 2, 3});

  std::mt19937_64 rng(9);
  const auto m = fx::uniform(4, rng), f = fx::uniform(4, rng);
  const auto out = patch_augment(tape.constant(m), tape.constant(f)).value();
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(out[j] == m[j] * f[j]);
    CHECK(out[4 + j] == std::abs(m[j] - f[j]));
  }
  CHECK_THROWS_AS(patch_augment(tape.zeros(2), tape.zeros(3)), DimensionError);
}

TEST_CASE("output_augment: definitional cases") {
  Tape tape;
  const Var q = tape.constant(std::vector<double>{0.5, -2.0});
  const auto a = output_augment(q, q, tape.zeros(2)).value();
  CHECK(std::vector<double>(a.begin(), a.end()) == std::vector<double>{0.25, 4, 0, 0, 0, 0});
  for (double x : output_augment(tape.zeros(2), tape.zeros(2), tape.zeros(2)).value())
    CHECK(x == 0.0);

  std::mt19937_64 rng(10);
  const auto rho = fx::uniform(3, rng), qq = fx::uniform(3, rng), rp = fx::uniform(3, rng);
  const auto out =
      output_augment(tape.constant(rho), tape.constant(qq), tape.constant(rp)).value();
  REQUIRE(out.size() == 9);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(out[j] == rho[j] * qq[j]);
    CHECK(out[3 + j] == rho[j] * rp[j]);
    CHECK(out[6 + j] == std::abs(rho[j] - qq[j]));
  }
}

}  // TEST_SUITE
