// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration shared by every CLI subcommand.
//
// File format: one `key = value` per line, '#' starts a comment, blank lines
// are ignored. Unknown keys and malformed values are rejected.
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmn/data.hpp"
#include "hmn/model.hpp"
#include "hmn/training.hpp"

namespace hmn {

/// Bad key, value or combination in a run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string preset = "large";
  ModelConfig model;  // before the variant is applied
  std::string variant = "full";
  TrainConfig train;
  SynthWorld world;  // patches/dim follow `model`

  std::size_t episodes = 200;
  std::size_t frames = 24;
  std::size_t delta = 15;
  SplitRatios ratios;
  double threshold = 0.5;
  unsigned jobs = 1;

  std::string data;        // FGR1 file or directory
  std::string test_data;
  std::string checkpoint;
  std::string out;
  std::string variants = "full,no-gan,no-eta,ntm+gan+eta";
  std::string sweep_param = "memory_len";
  std::string sweep_values = "4,8,16";

  /// Every accepted key, in to_text() order.
  static const std::vector<std::string>& keys();

  /// Sets one key. `preset` overwrites L, K, d and H.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// large (L=200, K=196, d=256, H=300) or desk (L=K=d=16, H=24).
  void apply_preset(const std::string& name);

  /// Applies file text on top of the current values. A `preset` line is
  /// applied before every other line regardless of position.
  void merge_text(const std::string& text);
  void merge_file(const std::filesystem::path& path);
  std::string to_text() const;

  ModelConfig model_config() const;  // variant applied, validated
  SynthWorld synth_world() const;    // patches/dim copied from the model
  void validate() const;
};

std::vector<std::string> split_list(const std::string& text, char sep = ',');

}  // namespace hmn
