// SPDX-License-Identifier: Apache-2.0
//
// Flat-memory baselines for comparison with the hierarchical memory.
//
// NTM:  r = Σᵢ γᵢ Mᵢ;  M̃ᵢ = Mᵢ ⊙ (1 − γᵢ e);  Mᵢ' = M̃ᵢ + γᵢ a
// DMN:  μᵢ = [f⊙q ; Mᵢ⊙f ; |f − Mᵢ| ; |f − q|],  r = P · Σᵢ γᵢ μᵢ
//       Mᵢ' = relu(W̃ [Mᵢ ; r ; q])
//
// Both consume a per-frame summary vector (mean of encoded patches) since a
// flat slot has no patch structure.
#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmn/attention.hpp"
#include "hmn/tape.hpp"

namespace hmn {

struct FlatMemoryState {
  std::vector<Carried> slots;
  std::vector<bool> valid;
  Carried r_prev;
  bool fresh = true;  // no update yet this episode

  FlatMemoryState() = default;
  /// L zero slots of width `width`, all addressable.
  FlatMemoryState(std::size_t length, std::size_t width);

  std::size_t length() const { return slots.size(); }
  std::size_t width() const { return r_prev.value().size(); }
  std::vector<Var> bind(Tape& tape) const;
  /// Like bind(), but a fresh memory starts from the rows of `init` (L × width,
  /// trainable) instead of its stored values.
  std::vector<Var> bind(Tape& tape, const Tensor& init) const;
  void assign(std::span<const Var> new_slots);
  void detach();
};

struct NtmParams {
  Tensor init_memory;             // L × width starting slots
  Tensor key_w, key_b;            // content key from the summary
  Tensor strength_w, strength_b;  // key strength, 1 + softplus(·)
  Tensor erase_w, erase_b;
  Tensor add_w, add_b;

  static NtmParams random(std::size_t length, std::size_t width,
                          std::mt19937_64& rng);

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "init_memory", init_memory);
    f(prefix + "key_w", key_w); f(prefix + "key_b", key_b);
    f(prefix + "strength_w", strength_w); f(prefix + "strength_b", strength_b);
    f(prefix + "erase_w", erase_w); f(prefix + "erase_b", erase_b);
    f(prefix + "add_w", add_w); f(prefix + "add_b", add_b);
  }
};

struct DmnParams {
  Tensor init_memory;       // L × width starting slots
  Tensor query_w, query_b;  // q = tanh(W s + b)
  AttentionParams attn;     // over 4·width augmented vectors
  Tensor out_proj;          // width × 4·width
  Tensor update_w;          // width × 3·width, shared by every slot

  static DmnParams random(std::size_t length, std::size_t width,
                          std::size_t attn_dim, std::mt19937_64& rng);

  template <class F>
  void for_each(const std::string& prefix, F&& f) {
    f(prefix + "init_memory", init_memory);
    f(prefix + "query_w", query_w); f(prefix + "query_b", query_b);
    attn.for_each(prefix + "attn.", f);
    f(prefix + "out_proj", out_proj);
    f(prefix + "update_w", update_w);
  }
};

/// Σᵢ γᵢ Mᵢ. Throws DomainError when |Σγ − 1| > 1e-9.
Var ntm_read(std::span<const Var> slots, Var gamma);

/// Erase-then-add update, slot by slot.
std::vector<Var> ntm_update(Tape& tape, std::span<const Var> slots, Var gamma,
                            Var erase, Var add_vec);

/// softmax(strength · cos(key, Mᵢ)) over all slots.
Var ntm_address(std::span<const Var> slots, Var key, Var strength);

/// Augmented single-level attention read, projected back to the slot width.
Var dmn_read(Tape& tape, const DmnParams& p, std::span<const Var> slots,
             Var query, Var summary);

/// relu(W̃ [Mᵢ ; r ; q]) for every slot.
std::vector<Var> dmn_update(Tape& tape, const DmnParams& p,
                            std::span<const Var> slots, Var r, Var query);

}  // namespace hmn
