// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "fixtures.hpp"
#include "hmn/data.hpp"
#include "hmn/eval.hpp"
#include "hmn/training.hpp"
#include "oracle.hpp"

using namespace hmn;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
  ModelConfig c = fx::tiny();
  c.hidden = 3;
  c.patches = 3;
  return c;
}

std::vector<std::vector<double>> random_grid(std::size_t k, std::size_t d, std::mt19937_64& rng) {
  std::vector<std::vector<double>> g;
  for (std::size_t i = 0; i < k; ++i) g.push_back(fx::uniform(d, rng, 0.0, 2.0));
  return g;
}

std::vector<Var> bind_all(Tape& tape, const std::vector<std::vector<double>>& items) {
  std::vector<Var> out;
  for (const auto& v : items) out.push_back(tape.constant(v));
  return out;
}

std::vector<Episode> tiny_episodes(std::size_t n, std::uint64_t seed) {
  SynthWorld w;
  w.patches = 3;
  w.dim = 2;
  return synth_dataset(w, n, 5, 2, seed);
}

// Discriminator whose logit is the constant `bias`.
DiscriminatorParams constant_disc(std::size_t d, std::size_t h, double bias) {
  std::mt19937_64 rng(0);
  DiscriminatorParams p = DiscriminatorParams::random(d, h, rng);
  p.out_w.fill(0.0);
  p.out_b.fill(bias);
  return p;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("hmn_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("d_loss: closed forms for a constant discriminator") {
  std::mt19937_64 rng(1);
  Tape tape;
  const auto real = bind_all(tape, random_grid(3, 2, rng));
  const auto fake = bind_all(tape, random_grid(3, 2, rng));
  const Var r = tape.constant(fx::uniform(6, rng));
  // distinct objects: the tape keys parameters by address
  const DiscriminatorParams d0 = constant_disc(2, 3, 0.0), d40 = constant_disc(2, 3, 40.0),
                            d800 = constant_disc(2, 3, 800.0);
  CHECK(d_loss(tape, d0, r, real, fake)[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
  // logit +40 on both: real term vanishes, fake term is ≈ 40
  CHECK(d_loss(tape, d40, r, real, fake)[0] == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(std::isfinite(d_loss(tape, d800, r, real, fake)[0]));
}

TEST_CASE("d_loss: a perfect discriminator drives the loss to zero") {
  // logit = out_w·tanh(fuse) with the fused state saturated by the mean
  // encoding; real futures push it one way, fakes the other.
  HmnParams p = make_model(small(), 2);
  std::mt19937_64 rng(2);
  Tape tape;
  const auto real = random_grid(3, 2, rng), fake = random_grid(3, 2, rng);
  const Var r = tape.constant(fx::uniform(6, rng));
  const double lr = discriminator_logit(tape, p.disc, r, bind_all(tape, real))[0];
  const double lf = discriminator_logit(tape, p.disc, r, bind_all(tape, fake))[0];
  REQUIRE(lr != lf);
  // scale the output layer so the two logits separate by a wide margin
  const double s = 200.0 / (lr - lf);
  for (double& v : p.disc.out_w.data()) v *= s;
  p.disc.out_b.fill(-s * (lr + lf) / 2.0);
  CHECK(d_loss(tape, p.disc, r, bind_all(tape, real), bind_all(tape, fake))[0] < 1e-40);
}

TEST_CASE("d_loss: random instance against the oracle") {
  HmnParams p = make_model(small(), 3);
  fx::scramble(p, 30);
  std::mt19937_64 rng(3);
  const auto real = random_grid(3, 2, rng), fake = random_grid(3, 2, rng);
  const auto r = fx::uniform(6, rng);
  Tape tape;
  const double l = d_loss(tape, p.disc, tape.constant(r), bind_all(tape, real), bind_all(tape, fake))[0];
  const double ref = oracle::d_loss(oracle::model(p), r, real, fake);
  CHECK(l == doctest::Approx(ref).epsilon(1e-13));
  CHECK(ref == doctest::Approx(1.6913096764181159).epsilon(1e-9));
}

TEST_CASE("g_loss: closed form with a chance classifier and an indifferent D") {
  HmnParams p = make_model(small(), 4);
  p.disc = constant_disc(2, 3, 0.0);
  std::mt19937_64 rng(4);
  const auto truth = random_grid(3, 2, rng);
  Tape tape;
  const Var y = tape.constant(std::vector<double>{0.5, 0.5});
  TrainConfig cfg;
  cfg.lambda_cls = 2.0;
  const auto t = bind_all(tape, truth);
  const GeneratorLoss g = g_loss(tape, p, tape.zeros(6), t, y, 1, t, cfg);
  CHECK(g.total[0] == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-15));
  CHECK(g.mse[0] == 0.0);
  CHECK(g.adv[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(g.cls[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("g_loss: zero weights leave the pure adversarial term") {
  HmnParams p = make_model(small(), 5);
  std::mt19937_64 rng(5);
  const auto fake = random_grid(3, 2, rng), truth = random_grid(3, 2, rng);
  const auto r = fx::uniform(6, rng);
  Tape tape;
  TrainConfig cfg;
  cfg.lambda_cls = 0.0;
  cfg.lambda_mse = 0.0;
  const GeneratorLoss g = g_loss(tape, p, tape.constant(r), bind_all(tape, fake),
                                 tape.constant(std::vector<double>{0.9, 0.1}), 1,
                                 bind_all(tape, truth), cfg);
  const double adv = oracle::softplus(-oracle::disc_logit(oracle::model(p), r, fake));
  CHECK(g.total[0] == doctest::Approx(adv).epsilon(1e-13));
}

TEST_CASE("g_loss: random instance against the oracle, every variant mix") {
  std::mt19937_64 rng(6);
  for (const char* v : {"full", "no-gan", "no-gan+eta"}) {
    CAPTURE(v);
    HmnParams p = make_model(apply_variant(small(), v), 6);
    fx::scramble(p, 60);
    const auto fake = random_grid(3, 2, rng), truth = random_grid(3, 2, rng);
    const auto r = fx::uniform(6, rng);
    const std::vector<double> y = {0.3, 0.7};
    TrainConfig cfg;
    cfg.lambda_cls = 1.5;
    cfg.lambda_mse = 0.25;
    Tape tape;
    const auto fv = p.config.use_eta ? bind_all(tape, fake) : std::vector<Var>{};
    const auto tv = p.config.use_eta ? bind_all(tape, truth) : std::vector<Var>{};
    const GeneratorLoss g = g_loss(tape, p, tape.constant(r), fv, tape.constant(y), 0, tv, cfg);
    const double ref = oracle::g_loss(oracle::model(p), r, fake, y, 0, truth, 1.5, 0.25);
    CHECK(g.total[0] == doctest::Approx(ref).epsilon(1e-13));
    CHECK(g.adv.valid() == p.config.use_gan);
    CHECK(g.mse.valid() == p.config.use_eta);
    if (std::string(v) == "full") CHECK(ref == doctest::Approx(3.3119781739226934).epsilon(1e-9));
  }
}

TEST_CASE("g_loss: rejects a non-probability y_hat and bad class indices") {
  HmnParams p = make_model(apply_variant(small(), "no-gan+eta"), 7);
  Tape tape;
  TrainConfig cfg;
  CHECK_THROWS_AS(g_loss(tape, p, tape.zeros(6), {}, tape.constant(std::vector<double>{0.7, 0.7}),
                         0, {}, cfg),
                  DomainError);
  CHECK_THROWS_AS(g_loss(tape, p, tape.zeros(6), {}, tape.constant(std::vector<double>{1.2, -0.2}),
                         0, {}, cfg),
                  DomainError);
  CHECK_THROWS_AS(g_loss(tape, p, tape.zeros(6), {}, tape.constant(std::vector<double>{0.5, 0.5}),
                         2, {}, cfg),
                  DomainError);
}

TEST_CASE("g_loss: gradient with respect to the predicted future") {
  HmnParams p = make_model(small(), 8);
  fx::scramble(p, 80);
  std::mt19937_64 rng(8);
  std::vector<Tensor> fake;
  for (int k = 0; k < 3; ++k) fake.push_back(fx::tensor({2}, rng));
  const auto truth = random_grid(3, 2, rng);
  const auto r = fx::uniform(6, rng);
  TrainConfig cfg;
  cfg.lambda_cls = 0.0;
  cfg.lambda_mse = 0.0;
  std::vector<Tensor*> ptrs;
  for (Tensor& t : fake) ptrs.push_back(&t);
  const auto res = grad_check(
      [&](Tape& tape) {
        std::vector<Var> fv;
        for (const Tensor& t : fake) fv.push_back(tape.param(t));
        return g_loss(tape, p, tape.constant(r), fv, tape.constant(std::vector<double>{0.5, 0.5}),
                      0, bind_all(tape, truth), cfg)
            .total;
      },
      ptrs);
  CHECK(res.max_rel_error < 1e-6);
  CHECK(res.entries_checked == 6);
}

TEST_CASE("Adam: zero gradients and zero learning rate leave parameters alone") {
  std::mt19937_64 rng(9);
  Tensor a = fx::tensor({3}, rng), b = fx::tensor({2, 2}, rng);
  const Tensor a0 = a, b0 = b;
  Adam opt({&a, &b}, 0.1);
  const std::vector<Tensor> zero = {Tensor({3}), Tensor({2, 2})};
  for (int i = 0; i < 5; ++i) opt.step(zero);
  CHECK(a == a0);
  CHECK(b == b0);
  CHECK(opt.steps_taken() == 5);

  Adam still({&a, &b}, 0.0);
  still.step(std::vector<Tensor>{fx::tensor({3}, rng), fx::tensor({2, 2}, rng)});
  CHECK(a == a0);
}

TEST_CASE("Adam: first step moves by the learning rate against the gradient sign") {
  Tensor x({2}, std::vector<double>{1.0, -1.0});
  Adam opt({&x}, 0.01);
  opt.step(std::vector<Tensor>{Tensor({2}, std::vector<double>{3.0, -0.5})});
  CHECK(x.data()[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(x.data()[1] == doctest::Approx(-0.99).epsilon(1e-9));
}

TEST_CASE("Adam: minimises a quadratic") {
  Tensor x({3}, std::vector<double>{2.0, -3.0, 0.5});
  const std::vector<double> target = {0.25, 1.0, -0.75};
  Adam opt({&x}, 0.05);
  for (int i = 0; i < 500; ++i) {
    Tensor g({3});
    for (std::size_t j = 0; j < 3; ++j) g.data()[j] = 2.0 * (x.data()[j] - target[j]);
    opt.step(std::vector<Tensor>{g});
  }
  CHECK(fx::max_abs_diff(x.data(), target) < 1e-3);
}

TEST_CASE("Adam: non-finite or mis-shaped gradients throw before any update") {
  Tensor x({2}, std::vector<double>{1.0, 2.0}), y({1}, std::vector<double>{3.0});
  const Tensor x0 = x, y0 = y;
  Adam opt({&x, &y}, 0.1);
  CHECK_THROWS_AS(opt.step(std::vector<Tensor>{Tensor({2}, std::vector<double>{1.0, 1.0}),
                                               Tensor({1}, std::vector<double>{NAN})}),
                  NumericError);
  CHECK(x == x0);
  CHECK(y == y0);
  CHECK_THROWS_AS(opt.step(std::vector<Tensor>{Tensor({2})}), DimensionError);
  CHECK_THROWS_AS(opt.step(std::vector<Tensor>{Tensor({3}), Tensor({1})}), DimensionError);
}

TEST_CASE("train: zero learning rate leaves every parameter unchanged") {
  HmnParams p = make_model(small(), 10);
  const HmnParams before = p;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.steps = 3;
  const auto rows = train(p, tiny_episodes(4, 10), cfg);
  CHECK(rows.size() == 3);
  HmnParams b = before;
  const auto ta = p.all_tensors(), tb = b.all_tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
  for (const LossRow& r : rows) {
    CHECK(r.d_loss > 0.0);
    CHECK(r.g_adv > 0.0);
    CHECK(r.g_cls > 0.0);
    CHECK(r.g_mse > 0.0);
  }
}

TEST_CASE("train: identical seeds give identical parameters and losses") {
  const auto eps = tiny_episodes(6, 11);
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.learning_rate = 1e-2;
  HmnParams a = make_model(small(), 11), b = make_model(small(), 11);
  const auto ra = train(a, eps, cfg), rb = train(b, eps, cfg);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].d_loss == rb[i].d_loss);
    CHECK(ra[i].g_cls == rb[i].g_cls);
  }
  const auto ta = a.all_tensors(), tb = b.all_tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
  HmnParams c = make_model(small(), 11);
  const auto tc = c.all_tensors();
  bool moved = false;
  for (std::size_t i = 0; i < ta.size(); ++i) moved = moved || !(*ta[i] == *tc[i]);
  CHECK(moved);
}

TEST_CASE("train: callbacks, variants without GAN, and input validation") {
  const auto eps = tiny_episodes(4, 12);
  TrainConfig cfg;
  cfg.steps = 2;
  HmnParams p = make_model(apply_variant(small(), "no-gan+eta"), 12);
  std::size_t calls = 0;
  const auto rows = train(p, eps, cfg, [&](const LossRow&) { ++calls; });
  CHECK(calls == 2);
  CHECK(rows[1].d_loss == 0.0);
  CHECK(rows[1].g_mse == 0.0);
  CHECK_THROWS_AS(train(p, std::span<const Episode>{}, cfg), DomainError);
  HmnParams wrong = make_model(fx::tiny(), 12);
  CHECK_THROWS_AS(train(wrong, eps, cfg), DimensionError);
  TrainConfig bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(p, eps, bad), DomainError);
  bad = cfg;
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = cfg;
  bad.lambda_mse = -0.1;
  CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("generator and discriminator parameter sets are disjoint") {
  HmnParams p = make_model(small(), 13);
  const auto gen = p.generator_tensors(), disc = p.discriminator_tensors();
  std::set<const Tensor*> g(gen.begin(), gen.end());
  for (const Tensor* t : disc) CHECK(g.count(t) == 0);
  CHECK(gen.size() + disc.size() == p.all_tensors().size());

  // d_loss on constant inputs touches only the discriminator
  std::mt19937_64 rng(13);
  Tape tape;
  const Var l = d_loss(tape, p.disc, tape.constant(fx::uniform(6, rng)),
                       bind_all(tape, random_grid(3, 2, rng)), bind_all(tape, random_grid(3, 2, rng)));
  for (const Tensor* t : gen) CHECK_FALSE(tape.uses_param(*t));
  tape.backward(l);
  for (const Tensor* t : disc) CHECK(tape.uses_param(*t));
}

TEST_CASE("model config text round trip") {
  for (const char* v : {"full", "no-alpha+gamma", "ntm+eta", "dmn+gan+eta", "no-gan+eta"}) {
    const ModelConfig c = apply_variant(small(), v);
    CHECK(parse_model_config_text(model_config_text(c)) == c);
  }
  CHECK_THROWS_AS(parse_model_config_text(model_config_text(small()) + "colour=blue\n"),
                  FormatError);
  CHECK_THROWS_AS(parse_model_config_text("memory_len=2\n"), FormatError);
  CHECK_THROWS_AS(parse_model_config_text("nonsense\n"), FormatError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  for (const char* v : {"full", "ntm+gan+eta", "no-gan+eta"}) {
    CAPTURE(v);
    HmnParams p = make_model(apply_variant(small(), v), 14);
    fx::scramble(p, 140);
    const fs::path path = temp_path("ckpt.hmn");
    save_checkpoint(path, p);
    HmnParams q = load_checkpoint(path);
    CHECK(q.config == p.config);
    const auto ta = p.all_tensors(), tb = q.all_tensors();
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
    fs::remove(path);
  }
}

TEST_CASE("checkpoint: missing, foreign and truncated files throw FormatError") {
  HmnParams p = make_model(small(), 15);
  const fs::path path = temp_path("bad.hmn");
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE and some bytes";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  save_checkpoint(path, p);
  const auto full = fs::file_size(path);
  for (auto cut : {std::uintmax_t{3}, std::uintmax_t{10}, full / 2, full - 1}) {
    CAPTURE(cut);
    fs::resize_file(path, cut);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    save_checkpoint(path, p);
  }
  fs::remove(path);
}

TEST_CASE("loss CSV has a header and one row per step") {
  const fs::path path = temp_path("loss.csv");
  const std::vector<LossRow> rows = {{0, 1.5, 0.5, 0.25, 2.0}, {1, 1.25, 0.75, 0.5, 1.0}};
  write_loss_csv(path, rows);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  CHECK(line == "step,d_loss,g_adv,g_cls,g_mse");
  std::getline(is, line);
  CHECK(line == "0,1.5,0.5,0.25,2");
  std::getline(is, line);
  CHECK(line == "1,1.25,0.75,0.5,1");
  CHECK_FALSE(std::getline(is, line));
  fs::remove(path);
}

}  // TEST_SUITE
