// SPDX-License-Identifier: Apache-2.0
//
// Adversarial multi-task training. The discriminator D(r, η) scores a future
// grid given the read vector; the generator (the whole memory network) is
// trained on
//
//   −log D(r, η̂) + λ_cls·(−log ŷ[y]) + λ_mse·Σₖ‖ηₖ − η̂ₖ‖²
//
// while D descends −log D(r, η) − log(1 − D(r, η̂)). Terms switched off by the
// model config (use_gan, use_eta) drop out.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hmn/data.hpp"
#include "hmn/grad_check.hpp"
#include "hmn/model.hpp"

namespace hmn {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 2;  // episode streams advanced side by side
  std::size_t window = 4;      // frames per stream per generator step
  std::size_t steps = 2000;    // generator updates
  std::uint64_t seed = 42;
  double lambda_cls = 1.0;
  double lambda_mse = 1.0;
  std::size_t d_steps = 1;     // discriminator updates per generator update
  double noise_width = 1.0;    // scale of the standard-normal z

  void validate() const;
};

/// −log D(r, η) − log(1 − D(r, η̂)) in log-sigmoid form. `eta_fake` should be
/// constants (detached from the generator).
Var d_loss(Tape& tape, const DiscriminatorParams& disc, Var r,
           std::span<const Var> eta_real, std::span<const Var> eta_fake);

struct GeneratorLoss {
  Var total;
  Var adv;  // invalid when the adversarial term is off
  Var cls;
  Var mse;  // invalid when the decoder is off
};

/// `condition` is the r that D is conditioned on; training passes the current
/// read vector as a constant so the adversarial term acts through η̂ alone.
/// Throws DomainError when y_hat is not a probability vector.
GeneratorLoss g_loss(Tape& tape, const HmnParams& params, Var condition,
                     std::span<const Var> eta_fake, Var y_hat,
                     std::size_t y_true, std::span<const Var> eta_true,
                     const TrainConfig& cfg);

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Adam() = default;
  Adam(std::vector<Tensor*> params, double learning_rate);

  /// In-place update. Throws NumericError on a non-finite gradient, before
  /// touching any parameter.
  void step(std::span<const Tensor> grads);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  double lr_ = 0.0;
  std::size_t t_ = 0;
};

/// Gradients of `tape`'s last backward pass for each tensor.
std::vector<Tensor> collect_grads(const Tape& tape,
                                  std::span<Tensor* const> params);

struct LossRow {
  std::size_t step = 0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_cls = 0.0;
  double g_mse = 0.0;
};

using StepCallback = std::function<void(const LossRow&)>;

/// Runs cfg.steps generator updates over `episodes`, cycling through them in
/// seeded order. Throws DomainError on an empty stream and NumericError on
/// divergence (loss > 1e6 or non-finite).
std::vector<LossRow> train(HmnParams& params,
                           std::span<const Episode> episodes,
                           const TrainConfig& cfg,
                           const StepCallback& on_step = {});

/// Central-difference check of the training objective on one episode. Frames
/// [0, warmup) are replayed and their state carried in detached, as between
/// training windows; the checked loss covers the next `frames` frames:
/// Σ_t g_loss_t plus d_loss at every frame when the GAN is on. Noise is drawn
/// once from `seed`; D's condition and the fake futures fed to d_loss are
/// fixed at their values under the current parameters, as in training. Every
/// tensor the variant trains is checked.
GradCheckResult objective_grad_check(HmnParams& params, const Episode& ep,
                                     std::size_t warmup, std::size_t frames,
                                     const TrainConfig& cfg,
                                     std::uint64_t seed, double eps = 1e-5);

void write_loss_csv(const std::filesystem::path& path,
                    std::span<const LossRow> rows);

/// key=value lines describing the architecture.
std::string model_config_text(const ModelConfig& c);
ModelConfig parse_model_config_text(const std::string& text);

/// "HMN1" + config block + named f64 tensors.
void save_checkpoint(const std::filesystem::path& path, HmnParams& params);
HmnParams load_checkpoint(const std::filesystem::path& path);

}  // namespace hmn
