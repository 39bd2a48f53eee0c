// SPDX-License-Identifier: Apache-2.0
#include "hmn/memory.hpp"

#include <string>

namespace hmn {

FeatureGrid::FeatureGrid(std::size_t patches, std::size_t dim,
                         std::vector<double> data)
    : patches_(patches), dim_(dim), data_(std::move(data)) {
  if (data_.size() != patches_ * dim_)
    throw DimensionError("feature grid needs " +
                         std::to_string(patches_ * dim_) + " values, got " +
                         std::to_string(data_.size()));
}

std::vector<Var> FeatureGrid::bind(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(patches_);
  for (std::size_t k = 0; k < patches_; ++k) out.push_back(tape.constant(patch(k)));
  return out;
}

MemoryState::MemoryState(std::size_t length, std::size_t patches,
                         std::size_t dim, std::size_t hidden)
    : slots_(length, FeatureGrid(patches, dim)),
      serials_(length, 0),
      patches_(patches),
      dim_(dim),
      hidden_(hidden),
      r_prev_(Tensor::zeros(2 * hidden)) {}

const FeatureGrid& MemoryState::slot(std::size_t i) const {
  if (i >= length()) throw DomainError("memory slot index out of range");
  return slots_[physical(i)];
}

void MemoryState::push(const FeatureGrid& f) {
  // Chronological slot 0 is the oldest; overwrite it and rotate.
  const std::size_t p = head_;
  slots_[p] = f;
  serials_[p] = next_serial_++;
  head_ = (head_ + 1) % slots_.size();
  if (valid_ < slots_.size()) ++valid_;
}

void MemoryState::detach() {
  r_prev_.detach();
  cache_.clear();
  cache_tape_ = 0;
  cache_params_ = nullptr;
}

std::vector<Var> encoded_slot(Tape& tape, MemoryState& state,
                              const BiGruParams& enc, std::size_t i) {
  if (state.cache_tape_ != tape.serial() || state.cache_params_ != &enc) {
    state.cache_.clear();
    state.cache_tape_ = tape.serial();
    state.cache_params_ = &enc;
  }
  const std::uint64_t serial = state.serials_[state.physical(i)];
  if (auto it = state.cache_.find(serial); it != state.cache_.end())
    return it->second;
  const auto patches = state.slot(i).bind(tape);
  auto encoded = bigru_encode(tape, enc, patches);
  state.cache_.emplace(serial, encoded);
  return encoded;
}

MemoryState memory_reset(std::size_t length, std::size_t patches,
                         std::size_t dim, std::size_t hidden) {
  if (length == 0 || patches == 0 || dim == 0 || hidden == 0)
    throw DomainError("memory_reset: all dimensions must be positive");
  return MemoryState(length, patches, dim, hidden);
}

MemoryRead memory_read(Tape& tape, MemoryState& state,
                       const HierarchicalMemoryParams& params,
                       std::span<const Var> input_enc, Var query,
                       const ReadOptions& opts) {
  const std::size_t h2 = 2 * state.hidden();
  if (params.patch_enc.input_dim() != state.dim() ||
      params.patch_enc.hidden_size() != state.hidden())
    throw DimensionError("memory_read: encoder does not match memory (d, H)");
  if (input_enc.size() != state.patches())
    throw DimensionError("memory_read: expected " +
                         std::to_string(state.patches()) +
                         " encoded input patches, got " +
                         std::to_string(input_enc.size()));
  for (const Var& v : input_enc)
    if (v.size() != h2)
      throw DimensionError("memory_read: encoded patch length mismatch");
  if (query.size() != h2)
    throw DimensionError("memory_read: query length mismatch");

  MemoryRead out;
  const std::size_t n = state.valid_count();
  out.first_valid = state.length() - n;
  if (n == 0) {
    out.r = tape.zeros(h2);
    state.r_prev().set(out.r);
    return out;
  }

  std::vector<Var> pooled;
  pooled.reserve(n);
  std::vector<Var> augmented(state.patches());
  for (std::size_t i = out.first_valid; i < state.length(); ++i) {
    const auto enc = encoded_slot(tape, state, params.patch_enc, i);
    for (std::size_t k = 0; k < state.patches(); ++k)
      augmented[k] = patch_augment(enc[k], input_enc[k]);
    const Attended a = opts.use_alpha
                           ? attend(tape, params.patch_attn, augmented)
                           : mean_pool(tape, augmented);
    out.alpha.push_back(a.weights);
    pooled.push_back(a.pooled);
  }

  const auto slot_summary = bigru_encode(tape, params.slot_enc, pooled);
  const Var r_prev = state.r_prev().bind(tape);
  std::vector<Var> z;
  z.reserve(n);
  for (const Var& s : slot_summary) z.push_back(output_augment(s, query, r_prev));
  const Attended g = opts.use_gamma ? attend(tape, params.output_attn, z)
                                    : mean_pool(tape, z);
  out.gamma = g.weights;
  out.r = matvec(tape.param(params.out_proj), g.pooled);
  state.r_prev().set(out.r);
  return out;
}

void memory_update(MemoryState& state, const FeatureGrid& f) {
  if (f.patches() != state.patches() || f.dim() != state.dim())
    throw DimensionError("memory_update: grid is " +
                         std::to_string(f.patches()) + "x" +
                         std::to_string(f.dim()) + ", memory holds " +
                         std::to_string(state.patches()) + "x" +
                         std::to_string(state.dim()));
  state.push(f);
}

}  // namespace hmn
