// SPDX-License-Identifier: Apache-2.0
//
// Detection metrics, inference over episodes, ablation variants and a 2-D PCA
// of read vectors.
//
// Scores are fake probabilities; a frame is called fake when score ≥
// threshold. Rates are percentages.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hmn/data.hpp"
#include "hmn/model.hpp"
#include "hmn/training.hpp"

namespace hmn {

struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::uint32_t> episodes;

  /// Throws DomainError unless score ∈ [0,1] and label ∈ {0,1}.
  void add(double score, int label, std::uint32_t episode);
  std::size_t size() const { return scores.size(); }
};

double frame_accuracy(const ScoreSet& s, double threshold = 0.5);
/// Majority vote per episode; a tied vote counts as fake.
double video_accuracy(const ScoreSet& s, double threshold = 0.5);

struct ErrorRates {
  double apcer = 0.0;  // fakes called real
  double bpcer = 0.0;  // reals called fake
};
ErrorRates apcer_bpcer(const ScoreSet& s, double threshold = 0.5);

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
  double far = 0.0;  // = APCER at threshold
  double frr = 0.0;  // = BPCER at threshold
};
/// Sweeps every distinct score as threshold, keeps the lowest one minimising
/// |FAR − FRR| and reports (FAR + FRR)/2 there.
EerResult eer(const ScoreSet& s);

/// Mean squared error over every element of every grid.
double future_mse(std::span<const FeatureGrid> pred,
                  std::span<const FeatureGrid> truth);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};
/// Centres the vectors and projects them on the two leading principal
/// directions (power iteration with deflation, tol 1e-9, ≤ 10k iterations).
/// All-identical input yields zeros and sets `warning`.
std::vector<Point2> pca_project2d(std::span<const Tensor> vectors,
                                  std::string* warning = nullptr);

struct Inference {
  ScoreSet scores;
  std::vector<Tensor> reads;  // r per frame
  std::vector<int> read_labels;
  std::vector<std::uint32_t> read_episodes;
  std::vector<FeatureGrid> predicted;  // η̂ per frame when the decoder is on
  std::vector<FeatureGrid> truth;
};

using TraceFn = std::function<void(const Episode&, const StepOutput&)>;

/// Forward pass over every frame with fresh memory per episode and z = 0.
Inference run_inference(const HmnParams& params,
                        std::span<const Episode> episodes,
                        const TraceFn& trace = {});

struct MetricsReport {
  std::string variant;
  double frame_acc = 0.0;
  double video_acc = 0.0;
  double eer = 0.0;
  double eer_threshold = 0.0;
  double apcer = 0.0;
  double bpcer = 0.0;
  double future_mse = 0.0;  // NaN when the variant has no decoder
  std::size_t frames = 0;
  std::size_t episodes = 0;
};

MetricsReport evaluate(const HmnParams& params,
                       std::span<const Episode> episodes,
                       double threshold = 0.5);

/// Applies an ablation/baseline variant to a base config. Names: full,
/// no-<tiers> with tiers from {alpha, beta, gamma} joined by '+', no-gan,
/// no-eta, no-gan+eta, and ntm|dmn with optional suffix +eta or +gan+eta.
ModelConfig apply_variant(ModelConfig base, const std::string& variant);
std::vector<std::string> known_variants();

/// Trains the variant on `train` from seed cfg.seed and evaluates on `test`.
MetricsReport run_ablation(const std::string& variant, const ModelConfig& base,
                           const TrainConfig& cfg,
                           std::span<const Episode> train,
                           std::span<const Episode> test);

std::string report_json(const MetricsReport& r);
void write_reports_csv(const std::filesystem::path& path,
                       std::span<const MetricsReport> rows);
void write_reports_json(const std::filesystem::path& path,
                        std::span<const MetricsReport> rows);

}  // namespace hmn
