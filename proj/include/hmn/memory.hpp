// SPDX-License-Identifier: Apache-2.0
//
// External memory of raw feature grids. Slots are never blended: an update
// appends the incoming grid and drops the oldest, so every valid slot is a
// bit-exact copy of one past input. Reading encodes each stored grid afresh
// and attends over it in two stages (patches within a slot, then slots).
#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "hmn/attention.hpp"
#include "hmn/encoders.hpp"
#include "hmn/tape.hpp"

namespace hmn {

/// One frame's K×d patch-embedding grid.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(std::size_t patches, std::size_t dim)
      : patches_(patches), dim_(dim), data_(patches * dim, 0.0) {}
  FeatureGrid(std::size_t patches, std::size_t dim, std::vector<double> data);

  std::size_t patches() const { return patches_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> patch(std::size_t k) const {
    return {data_.data() + k * dim_, dim_};
  }
  std::span<double> patch(std::size_t k) {
    return {data_.data() + k * dim_, dim_};
  }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  /// One constant leaf per patch.
  std::vector<Var> bind(Tape& tape) const;

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  std::size_t patches_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

/// Learned pieces of the hierarchical read path.
struct HierarchicalMemoryParams {
  BiGruParams patch_enc;        // stored patches → 2H
  AttentionParams patch_attn;   // over 4H augmented patch pairs
  BiGruParams slot_enc;         // pooled slot vectors (4H) → 2H
  AttentionParams output_attn;  // over 6H augmented slot summaries
  Tensor out_proj;              // 2H × 6H

  template <class F>
  void for_each(const std::string& prefix, F&& f, bool alpha, bool gamma) {
    patch_enc.for_each(prefix + "patch_enc.", f);
    if (alpha) patch_attn.for_each(prefix + "patch_attn.", f);
    slot_enc.for_each(prefix + "slot_enc.", f);
    if (gamma) output_attn.for_each(prefix + "output_attn.", f);
    f(prefix + "out_proj", out_proj);
  }
};

class MemoryState {
 public:
  MemoryState() = default;
  /// Empty memory: zero slots, none valid, zero previous read.
  MemoryState(std::size_t length, std::size_t patches, std::size_t dim,
              std::size_t hidden);

  std::size_t length() const { return slots_.size(); }
  std::size_t patches() const { return patches_; }
  std::size_t dim() const { return dim_; }
  std::size_t hidden() const { return hidden_; }

  std::size_t valid_count() const { return valid_; }
  /// Chronological index: slot length()-1 is the newest entry.
  bool is_valid(std::size_t i) const { return i >= length() - valid_; }
  const FeatureGrid& slot(std::size_t i) const;

  const Carried& r_prev() const { return r_prev_; }
  Carried& r_prev() { return r_prev_; }

  /// Appends `f`, dropping the oldest slot once full.
  void push(const FeatureGrid& f);
  /// Drops live tape handles; values are kept.
  void detach();

  friend std::vector<Var> encoded_slot(Tape&, MemoryState&,
                                       const BiGruParams&, std::size_t);

 private:
  std::size_t physical(std::size_t i) const {
    return (head_ + i) % slots_.size();
  }

  std::vector<FeatureGrid> slots_;
  std::vector<std::uint64_t> serials_;
  std::size_t head_ = 0;  // physical index of chronological slot 0
  std::size_t valid_ = 0;
  std::size_t patches_ = 0, dim_ = 0, hidden_ = 0;
  std::uint64_t next_serial_ = 1;
  Carried r_prev_;

  // Encodings of stored grids, reusable while one tape and one parameter
  // bundle are in play (stored grids never change, only their position).
  std::uint64_t cache_tape_ = 0;
  const BiGruParams* cache_params_ = nullptr;
  std::unordered_map<std::uint64_t, std::vector<Var>> cache_;
};

/// Which tiers keep their learned attention; disabled tiers pool by mean.
struct ReadOptions {
  bool use_alpha = true;
  bool use_gamma = true;
};

struct MemoryRead {
  Var r;                     // [2H]
  std::vector<Var> alpha;    // per valid slot, chronological, each [K]
  Var gamma;                 // [valid_count], invalid when memory is empty
  std::size_t first_valid = 0;
};

MemoryState memory_reset(std::size_t length, std::size_t patches,
                         std::size_t dim, std::size_t hidden);

/// Hierarchical read against the current slots. Sets state.r_prev to the
/// returned r. With no valid slot the read is the zero vector.
MemoryRead memory_read(Tape& tape, MemoryState& state,
                       const HierarchicalMemoryParams& params,
                       std::span<const Var> input_enc, Var query,
                       const ReadOptions& opts = {});

/// FIFO append of the raw grid; throws DimensionError on a shape mismatch.
void memory_update(MemoryState& state, const FeatureGrid& f);

}  // namespace hmn
