// SPDX-License-Identifier: Apache-2.0
#include "hmn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace hmn {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw DomainError("learning rate must be finite and >= 0");
  if (batch_size == 0 || window == 0 || d_steps == 0)
    throw DomainError("batch size, window and d-steps must be positive");
  if (lambda_cls < 0.0 || lambda_mse < 0.0 || noise_width < 0.0)
    throw DomainError("loss weights and noise width must be >= 0");
}

Var d_loss(Tape& tape, const DiscriminatorParams& disc, Var r,
           std::span<const Var> eta_real, std::span<const Var> eta_fake) {
  const Var real = discriminator_logit(tape, disc, r, eta_real);
  const Var fake = discriminator_logit(tape, disc, r, eta_fake);
  if (!std::isfinite(real[0]) || !std::isfinite(fake[0]))
    throw NumericError("discriminator produced a non-finite logit");
  return add(bce_with_logits(real, 1.0), bce_with_logits(fake, 0.0));
}

GeneratorLoss g_loss(Tape& tape, const HmnParams& params, Var condition,
                     std::span<const Var> eta_fake, Var y_hat,
                     std::size_t y_true, std::span<const Var> eta_true,
                     const TrainConfig& cfg) {
  const auto p = y_hat.value();
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw DomainError("g_loss: y_hat has a negative entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw DomainError("g_loss: y_hat does not sum to 1");
  if (y_true >= p.size()) throw DomainError("g_loss: class index out of range");

  const ModelConfig& c = params.config;
  GeneratorLoss out;
  out.cls = nll(y_hat, y_true);
  out.total = scale(out.cls, cfg.lambda_cls);
  if (c.use_eta) {
    if (eta_fake.size() != eta_true.size() || eta_fake.empty())
      throw DimensionError("g_loss: predicted and true futures differ in K");
    std::vector<Var> errs;
    errs.reserve(eta_fake.size());
    for (std::size_t k = 0; k < eta_fake.size(); ++k)
      errs.push_back(sum_squared_error(eta_true[k], eta_fake[k]));
    out.mse = sum(concat(errs));
    out.total = add(out.total, scale(out.mse, cfg.lambda_mse));
  }
  if (c.use_gan) {
    out.adv = bce_with_logits(
        discriminator_logit(tape, params.disc, condition, eta_fake), 1.0);
    out.total = add(out.total, out.adv);
  }
  return out;
}

Adam::Adam(std::vector<Tensor*> params, double learning_rate)
    : params_(std::move(params)), lr_(learning_rate) {
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void Adam::step(std::span<const Tensor> grads) {
  if (grads.size() != params_.size())
    throw DimensionError("Adam::step: one gradient per parameter required");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params_[i]->size())
      throw DimensionError("Adam::step: gradient shape mismatch");
    if (!grads[i].all_finite())
      throw NumericError("Adam::step: non-finite gradient");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i]->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
    }
  }
}

std::vector<Tensor> collect_grads(const Tape& tape,
                                  std::span<Tensor* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor* p : params) out.push_back(tape.param_grad(*p));
  return out;
}

namespace {

struct Stream {
  std::size_t episode = 0;
  std::size_t frame = 0;
  EpisodeState state;
};

struct Record {
  StepOutput out;
  const Episode* episode;
  std::size_t frame;
};

class EpisodeQueue {
 public:
  EpisodeQueue(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng_)]);
    }
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::mt19937_64& rng_;
};

std::vector<Var> constants(Tape& tape, std::span<const Var> vars) {
  std::vector<Var> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(tape.constant(v.value()));
  return out;
}

void check_loss(double v, std::size_t step, const char* what) {
  if (!std::isfinite(v) || v > 1e6)
    throw NumericError("training diverged at step " + std::to_string(step) +
                       ": " + what + " = " + std::to_string(v) +
                       " (try a smaller learning rate)");
}

}  // namespace

std::vector<LossRow> train(HmnParams& params,
                           std::span<const Episode> episodes,
                           const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  const ModelConfig& mc = params.config;
  mc.validate();
  if (episodes.empty()) throw DomainError("train: empty episode stream");
  for (const Episode& ep : episodes) {
    if (ep.frames.empty() || ep.frames.size() != ep.futures.size())
      throw DomainError("train: episode " + std::to_string(ep.id) +
                        " is empty or lacks futures");
    if (ep.frames.front().patches() != mc.patches ||
        ep.frames.front().dim() != mc.dim)
      throw DimensionError("train: episode grids do not match the model");
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EpisodeQueue queue(episodes.size(), rng);

  auto gen_params = params.generator_tensors();
  auto disc_params = params.discriminator_tensors();
  Adam gen_opt(gen_params, cfg.learning_rate);
  Adam disc_opt(disc_params, cfg.learning_rate);

  std::vector<Stream> streams(cfg.batch_size);
  for (Stream& s : streams) {
    s.episode = queue.next();
    s.state = episode_reset(mc);
  }

  std::vector<LossRow> trace;
  trace.reserve(cfg.steps);
  std::vector<double> noise(mc.noise_dim);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape gen;
    std::vector<Record> records;
    records.reserve(cfg.batch_size * cfg.window);
    for (Stream& s : streams) {
      for (std::size_t w = 0; w < cfg.window; ++w) {
        if (s.frame == episodes[s.episode].length()) {
          s.episode = queue.next();
          s.frame = 0;
          s.state = episode_reset(mc);
        }
        const Episode& ep = episodes[s.episode];
        std::span<const double> z;
        if (mc.use_eta) {
          for (double& v : noise) v = cfg.noise_width * normal(rng);
          z = noise;
        }
        records.push_back(
            {hmn_step(gen, params, s.state, ep.frames[s.frame], z), &ep, s.frame});
        ++s.frame;
      }
    }
    const double inv = 1.0 / static_cast<double>(records.size());

    LossRow row;
    row.step = step;
    if (mc.use_gan) {
      for (std::size_t k = 0; k < cfg.d_steps; ++k) {
        Tape dt;
        std::vector<Var> losses;
        losses.reserve(records.size());
        for (const Record& rec : records) {
          const Var r = dt.constant(rec.out.r.value());
          const auto real = rec.episode->futures[rec.frame].bind(dt);
          const auto fake = constants(dt, rec.out.eta_hat);
          losses.push_back(d_loss(dt, params.disc, r, real, fake));
        }
        const Var total = scale(sum(concat(losses)), inv);
        check_loss(total[0], step, "d_loss");
        dt.backward(total);
        disc_opt.step(collect_grads(dt, disc_params));
        row.d_loss = total[0];
      }
    }

    std::vector<Var> totals;
    totals.reserve(records.size());
    for (const Record& rec : records) {
      const auto truth = rec.episode->futures[rec.frame].bind(gen);
      // r conditions D as a fixed input; the generator is scored through η̂.
      const Var condition = gen.constant(rec.out.r.value());
      const GeneratorLoss g =
          g_loss(gen, params, condition, rec.out.eta_hat, rec.out.y_hat,
                 static_cast<std::size_t>(rec.episode->label), truth, cfg);
      totals.push_back(g.total);
      row.g_cls += g.cls[0] * inv;
      if (g.mse.valid()) row.g_mse += g.mse[0] * inv;
      if (g.adv.valid()) row.g_adv += g.adv[0] * inv;
    }
    const Var total = scale(sum(concat(totals)), inv);
    check_loss(total[0], step, "g_loss");
    gen.backward(total);
    gen_opt.step(collect_grads(gen, gen_params));
    for (Stream& s : streams) s.state.detach();

    trace.push_back(row);
    if (on_step) on_step(row);
  }
  return trace;
}

GradCheckResult objective_grad_check(HmnParams& params, const Episode& ep,
                                     std::size_t warmup, std::size_t frames,
                                     const TrainConfig& cfg,
                                     std::uint64_t seed, double eps) {
  const ModelConfig& mc = params.config;
  if (frames == 0 || warmup + frames > ep.length())
    throw DomainError("objective_grad_check: frame range out of range");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> noise(warmup + frames);
  if (mc.use_eta)
    for (auto& z : noise) {
      z.resize(mc.noise_dim);
      for (double& v : z) v = cfg.noise_width * normal(rng);
    }

  // Warm-up frames run as an earlier training window would: their state is
  // carried in, detached.
  EpisodeState warm = episode_reset(mc);
  {
    Tape tape;
    for (std::size_t t = 0; t < warmup; ++t)
      hmn_step(tape, params, warm, ep.frames[t], noise[t]);
    warm.detach();
  }

  std::vector<Tensor> conditions;
  std::vector<std::vector<Tensor>> fakes;
  {
    Tape tape;
    EpisodeState state = warm;
    for (std::size_t t = warmup; t < warmup + frames; ++t) {
      const StepOutput out = hmn_step(tape, params, state, ep.frames[t], noise[t]);
      conditions.push_back(out.r.to_tensor());
      std::vector<Tensor> eta;
      for (const Var& v : out.eta_hat) eta.push_back(v.to_tensor());
      fakes.push_back(std::move(eta));
    }
  }

  std::vector<LossFn> terms;
  terms.push_back([&](Tape& tape) {
    EpisodeState state = warm;
    std::vector<Var> parts;
    for (std::size_t i = 0; i < frames; ++i) {
      const std::size_t t = warmup + i;
      const StepOutput out = hmn_step(tape, params, state, ep.frames[t], noise[t]);
      parts.push_back(g_loss(tape, params, tape.constant(conditions[i]),
                             out.eta_hat, out.y_hat,
                             static_cast<std::size_t>(ep.label),
                             ep.futures[t].bind(tape), cfg)
                          .total);
    }
    return sum(concat(parts));
  });
  if (mc.use_gan)
    terms.push_back([&](Tape& tape) {
      std::vector<Var> parts;
      for (std::size_t i = 0; i < frames; ++i) {
        std::vector<Var> fake;
        for (const Tensor& e : fakes[i]) fake.push_back(tape.constant(e));
        parts.push_back(d_loss(tape, params.disc, tape.constant(conditions[i]),
                               ep.futures[warmup + i].bind(tape), fake));
      }
      return sum(concat(parts));
    });
  const auto tensors = params.all_tensors();
  return grad_check(terms, tensors, eps);
}

void write_loss_csv(const std::filesystem::path& path,
                    std::span<const LossRow> rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "step,d_loss,g_adv,g_cls,g_mse\n";
  for (const LossRow& r : rows)
    os << r.step << ',' << r.d_loss << ',' << r.g_adv << ',' << r.g_cls << ','
       << r.g_mse << '\n';
}

std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "memory_len=" << c.memory_len << '\n'
     << "patches=" << c.patches << '\n'
     << "dim=" << c.dim << '\n'
     << "hidden=" << c.hidden << '\n'
     << "noise_dim=" << c.noise_dim << '\n'
     << "memory=" << to_string(c.memory) << '\n'
     << "use_beta=" << c.use_beta << '\n'
     << "use_alpha=" << c.use_alpha << '\n'
     << "use_gamma=" << c.use_gamma << '\n'
     << "use_gan=" << c.use_gan << '\n'
     << "use_eta=" << c.use_eta << '\n';
  return os.str();
}

ModelConfig parse_model_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("model config line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("model config lacks '" + key + "'");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto size = [&](const std::string& key) {
    const std::string v = take(key);
    try {
      std::size_t pos = 0;
      const unsigned long long n = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
      throw FormatError("model config '" + key + "' is not a size: " + v);
    }
  };
  auto flag = [&](const std::string& key) {
    const std::string v = take(key);
    if (v != "0" && v != "1")
      throw FormatError("model config '" + key + "' must be 0 or 1");
    return v == "1";
  };
  ModelConfig c;
  c.memory_len = size("memory_len");
  c.patches = size("patches");
  c.dim = size("dim");
  c.hidden = size("hidden");
  c.noise_dim = size("noise_dim");
  c.memory = parse_memory_kind(take("memory"));
  c.use_beta = flag("use_beta");
  c.use_alpha = flag("use_alpha");
  c.use_gamma = flag("use_gamma");
  c.use_gan = flag("use_gan");
  c.use_eta = flag("use_eta");
  if (!kv.empty())
    throw FormatError("model config has unknown key '" + kv.begin()->first + "'");
  return c;
}

namespace {

constexpr char kCheckpointMagic[4] = {'H', 'M', 'N', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (is.gcount() != 4) throw FormatError("checkpoint truncated in " + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, HmnParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  const std::string cfg = model_config_text(params.config);
  put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  params.for_each([&](const std::string& name, Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put_u32(os, static_cast<std::uint32_t>(dim));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!os) throw FormatError("write failed for " + path.string());
}

HmnParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(path.string() + ": not an HMN1 checkpoint");
  const std::uint32_t cfg_len = get_u32(is, "config length");
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  if (static_cast<std::uint32_t>(is.gcount()) != cfg_len)
    throw FormatError("checkpoint truncated in config block");
  HmnParams params = make_model(parse_model_config_text(cfg), 0);

  std::map<std::string, Tensor> stored;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t name_len = get_u32(is, "tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (static_cast<std::uint32_t>(is.gcount()) != name_len)
      throw FormatError("checkpoint truncated in tensor name");
    const std::uint32_t rank = get_u32(is, name);
    if (rank < 1 || rank > 2)
      throw FormatError("checkpoint tensor " + name + " has rank " +
                        std::to_string(rank));
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_u32(is, name));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (static_cast<std::size_t>(is.gcount()) != t.size() * sizeof(double))
      throw FormatError("checkpoint truncated in tensor " + name);
    stored.emplace(name, std::move(t));
  }
  params.for_each([&](const std::string& name, Tensor& t) {
    auto it = stored.find(name);
    if (it == stored.end())
      throw FormatError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape())
      throw FormatError("checkpoint tensor " + name + " has shape " +
                        shape_string(it->second.shape()) + ", expected " +
                        shape_string(t.shape()));
    t = std::move(it->second);
    stored.erase(it);
  });
  if (!stored.empty())
    throw FormatError("checkpoint has unexpected tensor " + stored.begin()->first);
  return params;
}

}  // namespace hmn
