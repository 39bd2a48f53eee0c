// SPDX-License-Identifier: Apache-2.0
//
// Full per-frame step: encode the incoming grid, pool it into a query, read
// the memory, classify and predict the future grid from the read vector, then
// append the grid to memory.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmn/attention.hpp"
#include "hmn/baselines.hpp"
#include "hmn/encoders.hpp"
#include "hmn/memory.hpp"
#include "hmn/tape.hpp"

namespace hmn {

enum class MemoryKind { kHierarchical, kNtm, kDmn };

std::string to_string(MemoryKind kind);
MemoryKind parse_memory_kind(const std::string& name);

struct ModelConfig {
  std::size_t memory_len = 200;  // L
  std::size_t patches = 196;     // K
  std::size_t dim = 256;         // d
  std::size_t hidden = 300;      // H
  std::size_t noise_dim = 16;
  MemoryKind memory = MemoryKind::kHierarchical;
  bool use_beta = true;
  bool use_alpha = true;
  bool use_gamma = true;
  bool use_gan = true;  // adversarial term and discriminator
  bool use_eta = true;  // future-grid decoder and its losses

  /// L=16, K=16, d=16, H=24.
  static ModelConfig desk();
  /// Throws DomainError on zero sizes or a GAN without a decoder.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct DiscriminatorParams {
  BiGruParams enc;       // over the K patches of a future grid, d → H
  Tensor fuse_w, fuse_b;  // H × (2H + 2H): [mean encoding ; r]
  Tensor out_w, out_b;    // 1 × H

  static DiscriminatorParams random(std::size_t dim, std::size_t hidden,
                                    std::mt19937_64& rng);

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    enc.for_each(prefix + "enc.", f);
    f(prefix + "fuse_w", fuse_w); f(prefix + "fuse_b", fuse_b);
    f(prefix + "out_w", out_w); f(prefix + "out_b", out_b);
  }
};

struct HmnParams {
  ModelConfig config;
  BiGruParams input_enc;             // raw patches → 2H
  AttentionParams input_attn;        // β, over 2H encodings
  HierarchicalMemoryParams memory;   // α, γ and the slot encoders
  NtmParams ntm;                     // used when config.memory == kNtm
  DmnParams dmn;                     // used when config.memory == kDmn
  Tensor cls_w, cls_b;               // 2 × 2H
  Tensor dec_init_w, dec_init_b;     // H × (2H + noise_dim)
  BiGruParams decoder;               // input dim 0, hidden H
  Tensor eta_w, eta_b;               // d × 2H
  DiscriminatorParams disc;

  /// Every parameter the generator side of this variant touches.
  template <class F>
  void for_each_generator(F&& f) {
    input_enc.for_each("input_enc.", f);
    switch (config.memory) {
      case MemoryKind::kHierarchical:
        if (config.use_beta) input_attn.for_each("input_attn.", f);
        memory.for_each("memory.", f, config.use_alpha, config.use_gamma);
        break;
      case MemoryKind::kNtm: ntm.for_each("ntm.", f); break;
      case MemoryKind::kDmn: dmn.for_each("dmn.", f); break;
    }
    f("cls_w", cls_w); f("cls_b", cls_b);
    if (config.use_eta) {
      f("dec_init_w", dec_init_w); f("dec_init_b", dec_init_b);
      decoder.for_each("decoder.", f);
      f("eta_w", eta_w); f("eta_b", eta_b);
    }
  }

  template <class F>
  void for_each_discriminator(F&& f) {
    if (config.use_gan) disc.for_each("disc.", f);
  }

  template <class F>
  void for_each(F&& f) {
    for_each_generator(f);
    for_each_discriminator(f);
  }

  std::vector<Tensor*> generator_tensors();
  std::vector<Tensor*> discriminator_tensors();
  std::vector<Tensor*> all_tensors();
  /// Trainable scalars in the active variant.
  std::size_t parameter_count();
};

/// Random initialisation; identical seeds give identical bundles.
HmnParams make_model(const ModelConfig& config, std::uint64_t seed);

/// Per-episode recurrent state of whichever memory the config selects.
struct EpisodeState {
  MemoryState hier;
  FlatMemoryState flat;
  std::size_t frame = 0;

  void detach();
};

EpisodeState episode_reset(const ModelConfig& config);

struct StepOutput {
  Var y_hat;                 // [2]: (real, fake)
  std::vector<Var> eta_hat;  // K × [d]; empty when the decoder is disabled
  Var r;                     // [2H]
  Var beta;                  // [K]; invalid for flat memories
  std::vector<Var> alpha;    // per valid slot [K], chronological
  Var gamma;                 // [valid slots] (HMN) or [L] (NTM, DMN)
  std::size_t first_valid = 0;
  std::size_t frame = 0;
};

/// One frame. `noise` has config.noise_dim entries or is empty (z = 0).
StepOutput hmn_step(Tape& tape, const HmnParams& params, EpisodeState& state,
                    const FeatureGrid& f, std::span<const double> noise = {});

/// softmax(W_y r + b_y).
Var classify(Tape& tape, const HmnParams& params, Var r);

/// Decodes K non-negative d-vectors from r (and optional noise).
std::vector<Var> predict_future(Tape& tape, const HmnParams& params, Var r,
                                std::span<const double> noise = {});

/// Scalar logit of D(r, η).
Var discriminator_logit(Tape& tape, const DiscriminatorParams& disc, Var r,
                        std::span<const Var> eta);

/// {"frame":t,"beta":[K],"alpha":[L][K],"gamma":[L]}; invalid slots are 0.
std::string trace_json(const StepOutput& out, const ModelConfig& config);

}  // namespace hmn
