// SPDX-License-Identifier: Apache-2.0
//
// Episodes of feature grids: a synthetic generator, the FGR1 record format and
// episode-level splits.
//
// FGR1 layout (little-endian):
//   "FGR1" | u32 version | u32 K | u32 d | u32 delta
//   then per episode: u32 id | u32 T | u8 label | T·K·d f32 frames
//                     | T·K·d f32 futures
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmn/memory.hpp"

namespace hmn {

/// Malformed or inconsistent record file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kReal = 0;
inline constexpr int kFake = 1;

struct Episode {
  std::uint32_t id = 0;
  int label = kReal;  // one label for the whole episode
  std::vector<FeatureGrid> frames;
  std::vector<FeatureGrid> futures;  // futures[t] is the grid delta ahead of frames[t]
  std::string source;  // provenance note, not stored in FGR1

  std::size_t length() const { return frames.size(); }
  int label_at(std::size_t) const { return label; }
  /// Compares id, label and grids; `source` is ignored.
  bool operator==(const Episode& o) const {
    return id == o.id && label == o.label && frames == o.frames &&
           futures == o.futures;
  }
};

enum class TamperMode { kPatchSplice, kTemporalBreak };

std::string to_string(TamperMode mode);
TamperMode parse_tamper_mode(const std::string& name);

/// Parameters of the synthetic face-feature process. Patch k, feature j at
/// time t (in raw frame units) is
///   softplus(A·id[k,j] + B[k,j]·sin(ω_k t + φ_k) + σ·ε)
/// rounded to f32. Fakes either splice two identities by patch region or
/// redraw every phase φ_k at every frame.
struct SynthWorld {
  std::size_t patches = 16;
  std::size_t dim = 16;
  double identity_scale = 1.0;  // A
  double motion_scale = 1.0;    // bound of |B[k,j]|
  double omega_min = 0.002;     // rad per raw frame
  double omega_max = 0.006;
  double noise_width = 0.05;    // σ
  std::size_t stride = 20;      // raw frames between sampled frames
  TamperMode tamper = TamperMode::kTemporalBreak;
};

/// One episode of T sampled frames. Throws DomainError unless T > delta ≥ 1.
Episode synth_episode(const SynthWorld& world, std::size_t T,
                      std::size_t delta, std::uint64_t seed, bool fake,
                      std::uint32_t id = 0);

/// n episodes alternating real/fake (even ids real), each seeded from
/// (seed, id) so the result does not depend on `jobs`.
std::vector<Episode> synth_dataset(const SynthWorld& world, std::size_t n,
                                   std::size_t T, std::size_t delta,
                                   std::uint64_t seed, unsigned jobs = 1);

struct RecordHeader {
  std::uint32_t version = 1;
  std::uint32_t patches = 0;
  std::uint32_t dim = 0;
  std::uint32_t delta = 0;
  bool operator==(const RecordHeader&) const = default;
};

/// Writes every episode; returns the count. Throws FormatError if a grid does
/// not match the header.
std::size_t write_records(const std::filesystem::path& path,
                          std::span<const Episode> episodes,
                          const RecordHeader& header);

/// Reads a file, or every regular file of a directory in name order (headers
/// must agree). Nothing is returned on error.
std::vector<Episode> read_records(const std::filesystem::path& path,
                                  RecordHeader* header = nullptr);

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct Split {
  std::vector<Episode> train, val, test;
};

/// Seeded shuffle, then val = ⌊n·val⌋, test = ⌊n·test⌋, rest to train.
/// Throws DomainError on bad ratios or a requested split left empty.
Split split(std::span<const Episode> episodes, const SplitRatios& ratios,
            std::uint64_t seed);

}  // namespace hmn
