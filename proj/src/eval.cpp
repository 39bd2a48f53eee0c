// SPDX-License-Identifier: Apache-2.0
#include "hmn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace hmn {

void ScoreSet::add(double score, int label, std::uint32_t episode) {
  if (!(score >= 0.0 && score <= 1.0))
    throw DomainError("score " + std::to_string(score) + " outside [0,1]");
  if (label != kReal && label != kFake)
    throw DomainError("label must be 0 (real) or 1 (fake)");
  scores.push_back(score);
  labels.push_back(label);
  episodes.push_back(episode);
}

namespace {

void check_threshold(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw DomainError("threshold must lie in [0,1]");
}

void check_nonempty(const ScoreSet& s) {
  if (s.size() == 0) throw DomainError("empty score set");
  if (s.labels.size() != s.size() || s.episodes.size() != s.size())
    throw DimensionError("score set columns differ in length");
}

std::pair<std::size_t, std::size_t> class_counts(const ScoreSet& s) {
  std::size_t fakes = 0;
  for (int l : s.labels) fakes += l == kFake;
  return {fakes, s.size() - fakes};
}

}  // namespace

double frame_accuracy(const ScoreSet& s, double threshold) {
  check_threshold(threshold);
  check_nonempty(s);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    correct += (s.scores[i] >= threshold) == (s.labels[i] == kFake);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(s.size());
}

double video_accuracy(const ScoreSet& s, double threshold) {
  check_threshold(threshold);
  check_nonempty(s);
  struct Tally {
    std::size_t fake_votes = 0, real_votes = 0, fake_labels = 0, frames = 0;
  };
  std::map<std::uint32_t, Tally> per;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Tally& t = per[s.episodes[i]];
    (s.scores[i] >= threshold ? t.fake_votes : t.real_votes) += 1;
    t.fake_labels += s.labels[i] == kFake;
    ++t.frames;
  }
  std::size_t correct = 0;
  for (const auto& [id, t] : per) {
    const bool called_fake = t.fake_votes >= t.real_votes;
    const bool is_fake = 2 * t.fake_labels >= t.frames;
    correct += called_fake == is_fake;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(per.size());
}

ErrorRates apcer_bpcer(const ScoreSet& s, double threshold) {
  check_threshold(threshold);
  check_nonempty(s);
  const auto [fakes, reals] = class_counts(s);
  if (fakes == 0 || reals == 0)
    throw DomainError("APCER/BPCER need both real and fake samples");
  std::size_t missed = 0, rejected = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool called_fake = s.scores[i] >= threshold;
    if (s.labels[i] == kFake && !called_fake) ++missed;
    if (s.labels[i] == kReal && called_fake) ++rejected;
  }
  return {100.0 * static_cast<double>(missed) / static_cast<double>(fakes),
          100.0 * static_cast<double>(rejected) / static_cast<double>(reals)};
}

EerResult eer(const ScoreSet& s) {
  check_nonempty(s);
  std::vector<double> fake, real;
  for (std::size_t i = 0; i < s.size(); ++i)
    (s.labels[i] == kFake ? fake : real).push_back(s.scores[i]);
  if (fake.empty() || real.empty())
    throw DomainError("EER needs both real and fake samples");
  std::sort(fake.begin(), fake.end());
  std::sort(real.begin(), real.end());
  std::vector<double> thresholds(s.scores);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  // |FAR − FRR| compared exactly as |fa·n_real − fr·n_fake| in integers.
  const auto nf = static_cast<long long>(fake.size());
  const auto nr = static_cast<long long>(real.size());
  long long best_gap = std::numeric_limits<long long>::max();
  EerResult best;
  for (double t : thresholds) {
    const auto fa = static_cast<long long>(
        std::lower_bound(fake.begin(), fake.end(), t) - fake.begin());
    const auto fr = static_cast<long long>(
        real.end() - std::lower_bound(real.begin(), real.end(), t));
    const long long gap = std::llabs(fa * nr - fr * nf);
    if (gap < best_gap) {
      best_gap = gap;
      best.threshold = t;
      best.far = 100.0 * static_cast<double>(fa) / static_cast<double>(nf);
      best.frr = 100.0 * static_cast<double>(fr) / static_cast<double>(nr);
      best.eer = 0.5 * (best.far + best.frr);
    }
  }
  return best;
}

double future_mse(std::span<const FeatureGrid> pred,
                  std::span<const FeatureGrid> truth) {
  if (pred.size() != truth.size())
    throw DimensionError("future_mse: grid counts differ");
  if (pred.empty()) throw DomainError("future_mse: no grids");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < pred.size(); ++g) {
    const auto a = pred[g].data();
    const auto b = truth[g].data();
    if (a.size() != b.size() || pred[g].patches() != truth[g].patches())
      throw DimensionError("future_mse: grid shapes differ");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double e = a[i] - b[i];
      total += e * e;
    }
    n += a.size();
  }
  if (n == 0) throw DomainError("future_mse: grids are empty");
  return total / static_cast<double>(n);
}

namespace {

using Matrix = std::vector<std::vector<double>>;

// Leading eigenpair of a symmetric PSD matrix.
std::pair<double, std::vector<double>> power_iteration(const Matrix& c) {
  const std::size_t n = c.size();
  std::vector<double> v(n), w(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 / static_cast<double>(i + 1);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : x) e /= s;
    return s;
  };
  normalize(v);
  double lambda = 0.0;
  for (int it = 0; it < 10000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += c[i][j] * v[j];
      w[i] = s;
    }
    lambda = normalize(w);
    if (lambda == 0.0) return {0.0, v};
    double diff = 0.0;
    for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
    v.swap(w);
    if (diff < 1e-9) break;
  }
  return {lambda, v};
}

}  // namespace

std::vector<Point2> pca_project2d(std::span<const Tensor> vectors,
                                  std::string* warning) {
  if (vectors.size() < 3)
    throw DomainError("pca_project2d needs at least 3 vectors");
  const std::size_t n = vectors.size();
  const std::size_t d = vectors.front().size();
  for (const Tensor& v : vectors)
    if (v.size() != d) throw DimensionError("pca_project2d: lengths differ");

  std::vector<double> centre(d, 0.0);
  for (const Tensor& v : vectors)
    for (std::size_t j = 0; j < d; ++j) centre[j] += v[j];
  for (double& c : centre) c /= static_cast<double>(n);
  Matrix x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x[i][j] = vectors[i][j] - centre[j];

  Matrix cov(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a][b] += x[i][a] * x[i][b];
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) cov[a][b] /= static_cast<double>(n - 1);
    trace += cov[a][a];
  }

  std::vector<Point2> out(n);
  if (trace <= 1e-300) {
    if (warning) *warning = "all vectors are identical; projections are zero";
    return out;
  }
  const auto [l1, v1] = power_iteration(cov);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) cov[a][b] -= l1 * v1[a] * v1[b];
  auto [l2, v2] = power_iteration(cov);
  const bool flat = l2 <= 1e-12 * l1;
  if (flat && warning) *warning = "data has rank 1; second coordinate is zero";
  for (std::size_t i = 0; i < n; ++i) {
    double px = 0.0, py = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      px += x[i][j] * v1[j];
      py += x[i][j] * v2[j];
    }
    out[i] = {px, flat ? 0.0 : py};
  }
  return out;
}

Inference run_inference(const HmnParams& params,
                        std::span<const Episode> episodes,
                        const TraceFn& trace) {
  Inference inf;
  for (const Episode& ep : episodes) {
    EpisodeState state = episode_reset(params.config);
    Tape tape;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const StepOutput out = hmn_step(tape, params, state, ep.frames[t]);
      if (trace) trace(ep, out);
      const double fake = std::clamp(out.y_hat[1], 0.0, 1.0);
      inf.scores.add(fake, ep.label, ep.id);
      inf.reads.push_back(out.r.to_tensor());
      inf.read_labels.push_back(ep.label);
      inf.read_episodes.push_back(ep.id);
      if (!out.eta_hat.empty()) {
        FeatureGrid g(params.config.patches, params.config.dim);
        for (std::size_t k = 0; k < out.eta_hat.size(); ++k) {
          const auto v = out.eta_hat[k].value();
          std::copy(v.begin(), v.end(), g.patch(k).begin());
        }
        inf.predicted.push_back(std::move(g));
        inf.truth.push_back(ep.futures[t]);
      }
    }
  }
  return inf;
}

MetricsReport evaluate(const HmnParams& params,
                       std::span<const Episode> episodes, double threshold) {
  if (episodes.empty()) throw DomainError("evaluate: no episodes");
  const Inference inf = run_inference(params, episodes);
  MetricsReport r;
  r.frame_acc = frame_accuracy(inf.scores, threshold);
  r.video_acc = video_accuracy(inf.scores, threshold);
  const auto [fakes, reals] = class_counts(inf.scores);
  if (fakes > 0 && reals > 0) {
    const EerResult e = eer(inf.scores);
    r.eer = e.eer;
    r.eer_threshold = e.threshold;
    const ErrorRates er = apcer_bpcer(inf.scores, threshold);
    r.apcer = er.apcer;
    r.bpcer = er.bpcer;
  } else {
    r.eer = r.eer_threshold = r.apcer = r.bpcer =
        std::numeric_limits<double>::quiet_NaN();
  }
  r.future_mse = inf.predicted.empty()
                     ? std::numeric_limits<double>::quiet_NaN()
                     : future_mse(inf.predicted, inf.truth);
  r.frames = inf.scores.size();
  r.episodes = episodes.size();
  return r;
}

ModelConfig apply_variant(ModelConfig c, const std::string& variant) {
  auto bad = [&] {
    return DomainError("unknown variant '" + variant +
                       "'; try: full, no-alpha, no-beta+gamma, no-gan, "
                       "no-eta, ntm+gan+eta, dmn, ...");
  };
  if (variant == "full") return c;
  if (variant == "no-gan") {
    c.use_gan = false;
    return c;
  }
  if (variant == "no-eta" || variant == "no-gan+eta") {
    c.use_gan = false;
    c.use_eta = false;
    return c;
  }
  for (const auto& [prefix, kind] :
       {std::pair{std::string("ntm"), MemoryKind::kNtm},
        std::pair{std::string("dmn"), MemoryKind::kDmn}}) {
    if (variant.rfind(prefix, 0) != 0) continue;
    const std::string rest = variant.substr(prefix.size());
    c.memory = kind;
    if (rest.empty()) {
      c.use_gan = c.use_eta = false;
    } else if (rest == "+eta") {
      c.use_gan = false;
    } else if (rest != "+gan+eta") {
      throw bad();
    }
    return c;
  }
  if (variant.rfind("no-", 0) == 0) {
    std::set<std::string> tiers;
    std::stringstream ss(variant.substr(3));
    std::string tier;
    while (std::getline(ss, tier, '+')) {
      if (tier != "alpha" && tier != "beta" && tier != "gamma") throw bad();
      if (!tiers.insert(tier).second) throw bad();
    }
    if (tiers.empty()) throw bad();
    c.use_alpha = !tiers.count("alpha");
    c.use_beta = !tiers.count("beta");
    c.use_gamma = !tiers.count("gamma");
    return c;
  }
  throw bad();
}

std::vector<std::string> known_variants() {
  return {"full",         "no-alpha",        "no-beta",   "no-gamma",
          "no-alpha+beta", "no-alpha+gamma", "no-beta+gamma",
          "no-alpha+beta+gamma", "no-gan",    "no-eta",    "no-gan+eta",
          "ntm",          "ntm+eta",         "ntm+gan+eta", "dmn",
          "dmn+eta",      "dmn+gan+eta"};
}

MetricsReport run_ablation(const std::string& variant, const ModelConfig& base,
                           const TrainConfig& cfg,
                           std::span<const Episode> train_set,
                           std::span<const Episode> test) {
  const ModelConfig mc = apply_variant(base, variant);
  HmnParams params = make_model(mc, cfg.seed);
  train(params, train_set, cfg);
  MetricsReport r = evaluate(params, test);
  r.variant = variant;
  return r;
}

namespace {

nlohmann::json to_json(const MetricsReport& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isnan(v)) return nullptr;
    return v;
  };
  return {{"variant", r.variant},         {"frame_acc", num(r.frame_acc)},
          {"video_acc", num(r.video_acc)}, {"eer", num(r.eer)},
          {"eer_threshold", num(r.eer_threshold)},
          {"apcer", num(r.apcer)},         {"bpcer", num(r.bpcer)},
          {"future_mse", num(r.future_mse)},
          {"frames", r.frames},            {"episodes", r.episodes}};
}

}  // namespace

std::string report_json(const MetricsReport& r) { return to_json(r).dump(); }

void write_reports_csv(const std::filesystem::path& path,
                       std::span<const MetricsReport> rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(8);
  os << "variant,frame_acc,video_acc,eer,eer_threshold,apcer,bpcer,future_mse,"
        "frames,episodes\n";
  for (const MetricsReport& r : rows)
    os << r.variant << ',' << r.frame_acc << ',' << r.video_acc << ',' << r.eer
       << ',' << r.eer_threshold << ',' << r.apcer << ',' << r.bpcer << ','
       << r.future_mse << ',' << r.frames << ',' << r.episodes << '\n';
}

void write_reports_json(const std::filesystem::path& path,
                        std::span<const MetricsReport> rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const MetricsReport& r : rows) arr.push_back(to_json(r));
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << arr.dump(2) << '\n';
}

}  // namespace hmn
