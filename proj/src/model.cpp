// SPDX-License-Identifier: Apache-2.0
#include "hmn/model.hpp"

#include <cmath>
#include <json.hpp>

namespace hmn {

std::string to_string(MemoryKind kind) {
  switch (kind) {
    case MemoryKind::kHierarchical: return "hmn";
    case MemoryKind::kNtm: return "ntm";
    case MemoryKind::kDmn: return "dmn";
  }
  return "?";
}

MemoryKind parse_memory_kind(const std::string& name) {
  if (name == "hmn") return MemoryKind::kHierarchical;
  if (name == "ntm") return MemoryKind::kNtm;
  if (name == "dmn") return MemoryKind::kDmn;
  throw DomainError("unknown memory kind '" + name + "' (hmn, ntm, dmn)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.memory_len = 16;
  c.patches = 16;
  c.dim = 16;
  c.hidden = 24;
  return c;
}

void ModelConfig::validate() const {
  if (memory_len == 0 || patches == 0 || dim == 0 || hidden == 0)
    throw DomainError("model sizes L, K, d, H must be positive");
  if (use_gan && !use_eta)
    throw DomainError("the adversarial term needs the future decoder");
}

DiscriminatorParams DiscriminatorParams::random(std::size_t dim,
                                                std::size_t hidden,
                                                std::mt19937_64& rng) {
  DiscriminatorParams p;
  p.enc = BiGruParams::random(dim, hidden, rng);
  const double fb = 1.0 / std::sqrt(4.0 * hidden);
  p.fuse_w = uniform_tensor({hidden, 4 * hidden}, fb, rng);
  p.fuse_b = Tensor({hidden});
  p.out_w = uniform_tensor({1, hidden}, 1.0 / std::sqrt(double(hidden)), rng);
  p.out_b = Tensor({1});
  return p;
}

namespace {

template <class F>
std::vector<Tensor*> collect(F&& visit) {
  std::vector<Tensor*> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

}  // namespace

std::vector<Tensor*> HmnParams::generator_tensors() {
  return collect([&](auto f) { for_each_generator(f); });
}

std::vector<Tensor*> HmnParams::discriminator_tensors() {
  return collect([&](auto f) { for_each_discriminator(f); });
}

std::vector<Tensor*> HmnParams::all_tensors() {
  return collect([&](auto f) { for_each(f); });
}

std::size_t HmnParams::parameter_count() {
  std::size_t n = 0;
  for (const Tensor* t : all_tensors()) n += t->size();
  return n;
}

HmnParams make_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.dim, h = config.hidden, h2 = 2 * h;
  HmnParams p;
  p.config = config;
  p.input_enc = BiGruParams::random(d, h, rng);
  p.input_attn = AttentionParams::random(h2, h, rng);
  p.memory.patch_enc = p.input_enc;  // stored and incoming patches start aligned
  p.memory.patch_attn = AttentionParams::random(2 * h2, h, rng);
  p.memory.slot_enc = BiGruParams::random(2 * h2, h, rng);
  p.memory.output_attn = AttentionParams::random(3 * h2, h, rng);
  p.memory.out_proj =
      uniform_tensor({h2, 3 * h2}, 1.0 / std::sqrt(3.0 * h2), rng);
  p.ntm = NtmParams::random(config.memory_len, h2, rng);
  p.dmn = DmnParams::random(config.memory_len, h2, h, rng);
  p.cls_w = uniform_tensor({2, h2}, 1.0 / std::sqrt(double(h2)), rng);
  p.cls_b = Tensor({2});
  const std::size_t init_in = h2 + config.noise_dim;
  p.dec_init_w = uniform_tensor({h, init_in}, 1.0 / std::sqrt(double(init_in)), rng);
  p.dec_init_b = Tensor({h});
  p.decoder = BiGruParams::random(0, h, rng);
  p.eta_w = uniform_tensor({d, h2}, 1.0 / std::sqrt(double(h2)), rng);
  p.eta_b = Tensor({d});
  p.eta_b.fill(0.5);  // keeps the ReLU head alive at initialisation
  p.disc = DiscriminatorParams::random(d, h, rng);
  return p;
}

void EpisodeState::detach() {
  hier.detach();
  for (Carried& s : flat.slots) s.detach();
  flat.r_prev.detach();
}

EpisodeState episode_reset(const ModelConfig& config) {
  config.validate();
  EpisodeState s;
  s.hier = memory_reset(config.memory_len, config.patches, config.dim,
                        config.hidden);
  if (config.memory != MemoryKind::kHierarchical)
    s.flat = FlatMemoryState(config.memory_len, 2 * config.hidden);
  return s;
}

Var classify(Tape& tape, const HmnParams& params, Var r) {
  return softmax(affine(tape.param(params.cls_w), r, tape.param(params.cls_b)));
}

std::vector<Var> predict_future(Tape& tape, const HmnParams& params, Var r,
                                std::span<const double> noise) {
  const ModelConfig& c = params.config;
  if (!noise.empty() && noise.size() != c.noise_dim)
    throw DimensionError("predict_future: noise must have " +
                         std::to_string(c.noise_dim) + " entries");
  const Var z = noise.empty() ? tape.zeros(c.noise_dim) : tape.constant(noise);
  const Var parts[2] = {r, z};
  const Var init = tanh(affine(tape.param(params.dec_init_w), concat(parts),
                               tape.param(params.dec_init_b)));
  const auto states = bigru_decode(tape, params.decoder, init,
                                   static_cast<int>(c.patches));
  const Var w = tape.param(params.eta_w);
  const Var b = tape.param(params.eta_b);
  std::vector<Var> out;
  out.reserve(states.size());
  for (const Var& h : states) out.push_back(relu(affine(w, h, b)));
  return out;
}

Var discriminator_logit(Tape& tape, const DiscriminatorParams& disc, Var r,
                        std::span<const Var> eta) {
  const auto enc = bigru_encode(tape, disc.enc, eta);
  const Var parts[2] = {mean(enc), r};
  const Var fused = tanh(affine(tape.param(disc.fuse_w), concat(parts),
                                tape.param(disc.fuse_b)));
  return affine(tape.param(disc.out_w), fused, tape.param(disc.out_b));
}

StepOutput hmn_step(Tape& tape, const HmnParams& params, EpisodeState& state,
                    const FeatureGrid& f, std::span<const double> noise) {
  const ModelConfig& c = params.config;
  if (f.patches() != c.patches || f.dim() != c.dim)
    throw DimensionError("hmn_step: grid is " + std::to_string(f.patches()) +
                         "x" + std::to_string(f.dim()) + ", model expects " +
                         std::to_string(c.patches) + "x" +
                         std::to_string(c.dim));
  StepOutput out;
  out.frame = state.frame;
  const auto patches = f.bind(tape);
  const auto enc = bigru_encode(tape, params.input_enc, patches);

  if (c.memory == MemoryKind::kHierarchical) {
    const Attended b = c.use_beta ? attend(tape, params.input_attn, enc)
                                  : mean_pool(tape, enc);
    out.beta = b.weights;
    const MemoryRead read =
        memory_read(tape, state.hier, params.memory, enc, b.pooled,
                    {c.use_alpha, c.use_gamma});
    out.r = read.r;
    out.alpha = read.alpha;
    out.gamma = read.gamma;
    out.first_valid = read.first_valid;
    memory_update(state.hier, f);
  } else {
    const Var s = mean(enc);
    const auto slots = state.flat.bind(
        tape, c.memory == MemoryKind::kNtm ? params.ntm.init_memory
                                           : params.dmn.init_memory);
    if (c.memory == MemoryKind::kNtm) {
      const NtmParams& p = params.ntm;
      const Var key = affine(tape.param(p.key_w), s, tape.param(p.key_b));
      const Var strength = add(
          tape.constant(std::vector<double>{1.0}),
          softplus(affine(tape.param(p.strength_w), s, tape.param(p.strength_b))));
      out.gamma = ntm_address(slots, key, strength);
      out.r = ntm_read(slots, out.gamma);
      const Var erase =
          sigmoid(affine(tape.param(p.erase_w), s, tape.param(p.erase_b)));
      const Var add_vec =
          tanh(affine(tape.param(p.add_w), s, tape.param(p.add_b)));
      state.flat.assign(ntm_update(tape, slots, out.gamma, erase, add_vec));
    } else {
      const DmnParams& p = params.dmn;
      const Var q = tanh(affine(tape.param(p.query_w), s, tape.param(p.query_b)));
      out.r = dmn_read(tape, p, slots, q, s);
      state.flat.assign(dmn_update(tape, p, slots, out.r, q));
    }
    state.flat.r_prev.set(out.r);
  }

  out.y_hat = classify(tape, params, out.r);
  if (c.use_eta) out.eta_hat = predict_future(tape, params, out.r, noise);
  ++state.frame;
  return out;
}

std::string trace_json(const StepOutput& out, const ModelConfig& config) {
  using nlohmann::json;
  const std::size_t L = config.memory_len, K = config.patches;
  std::vector<double> beta(K, 0.0);
  if (out.beta.valid())
    beta.assign(out.beta.value().begin(), out.beta.value().end());
  std::vector<std::vector<double>> alpha(L, std::vector<double>(K, 0.0));
  for (std::size_t i = 0; i < out.alpha.size(); ++i) {
    const auto a = out.alpha[i].value();
    alpha[out.first_valid + i].assign(a.begin(), a.end());
  }
  std::vector<double> gamma(L, 0.0);
  if (out.gamma.valid()) {
    const auto g = out.gamma.value();
    for (std::size_t i = 0; i < g.size(); ++i) gamma[out.first_valid + i] = g[i];
  }
  json j;
  j["frame"] = out.frame;
  j["beta"] = beta;
  j["alpha"] = alpha;
  j["gamma"] = gamma;
  return j.dump();
}

}  // namespace hmn
