// SPDX-License-Identifier: Apache-2.0
#include "hmn/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "hmn/eval.hpp"

namespace hmn {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return out;
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class M>
Field num(std::string key, M member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            std::invoke(member, c) = parse_number<T>(key, v);
          },
          [member](const RunConfig& c) {
            const T v = std::invoke(member, const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>)
              return fmt(v);
            else
              return std::to_string(v);
          }};
}

template <class M>
Field text(std::string key, M member) {
  return {key,
          [member](RunConfig& c, const std::string& v) { std::invoke(member, c) = v; },
          [member](const RunConfig& c) {
            return std::string(std::invoke(member, const_cast<RunConfig&>(c)));
          }};
}

const std::vector<Field>& fields() {
  using C = RunConfig;
  static const std::vector<Field> f = {
      {"preset", [](C& c, const std::string& v) { c.apply_preset(v); },
       [](const C& c) { return c.preset; }},
      num<std::size_t>("memory_len", [](C& c) -> auto& { return c.model.memory_len; }),
      num<std::size_t>("patches", [](C& c) -> auto& { return c.model.patches; }),
      num<std::size_t>("dim", [](C& c) -> auto& { return c.model.dim; }),
      num<std::size_t>("hidden", [](C& c) -> auto& { return c.model.hidden; }),
      num<std::size_t>("noise_dim", [](C& c) -> auto& { return c.model.noise_dim; }),
      text("variant", [](C& c) -> auto& { return c.variant; }),
      num<double>("learning_rate", [](C& c) -> auto& { return c.train.learning_rate; }),
      num<std::size_t>("batch_size", [](C& c) -> auto& { return c.train.batch_size; }),
      num<std::size_t>("window", [](C& c) -> auto& { return c.train.window; }),
      num<std::size_t>("steps", [](C& c) -> auto& { return c.train.steps; }),
      num<std::uint64_t>("seed", [](C& c) -> auto& { return c.train.seed; }),
      num<double>("lambda_cls", [](C& c) -> auto& { return c.train.lambda_cls; }),
      num<double>("lambda_mse", [](C& c) -> auto& { return c.train.lambda_mse; }),
      num<std::size_t>("d_steps", [](C& c) -> auto& { return c.train.d_steps; }),
      num<double>("noise_width", [](C& c) -> auto& { return c.train.noise_width; }),
      num<std::size_t>("episodes", [](C& c) -> auto& { return c.episodes; }),
      num<std::size_t>("frames", [](C& c) -> auto& { return c.frames; }),
      num<std::size_t>("delta", [](C& c) -> auto& { return c.delta; }),
      num<std::size_t>("stride", [](C& c) -> auto& { return c.world.stride; }),
      {"tamper",
       [](C& c, const std::string& v) {
         try {
           c.world.tamper = parse_tamper_mode(v);
         } catch (const DomainError& e) {
           throw ConfigError(e.what());
         }
       },
       [](const C& c) { return to_string(c.world.tamper); }},
      num<double>("identity_scale", [](C& c) -> auto& { return c.world.identity_scale; }),
      num<double>("motion_scale", [](C& c) -> auto& { return c.world.motion_scale; }),
      num<double>("omega_min", [](C& c) -> auto& { return c.world.omega_min; }),
      num<double>("omega_max", [](C& c) -> auto& { return c.world.omega_max; }),
      num<double>("synth_noise", [](C& c) -> auto& { return c.world.noise_width; }),
      num<double>("val_ratio", [](C& c) -> auto& { return c.ratios.val; }),
      num<double>("test_ratio", [](C& c) -> auto& { return c.ratios.test; }),
      num<double>("threshold", [](C& c) -> auto& { return c.threshold; }),
      num<unsigned>("jobs", [](C& c) -> auto& { return c.jobs; }),
      text("data", [](C& c) -> auto& { return c.data; }),
      text("test_data", [](C& c) -> auto& { return c.test_data; }),
      text("checkpoint", [](C& c) -> auto& { return c.checkpoint; }),
      text("out", [](C& c) -> auto& { return c.out; }),
      text("variants", [](C& c) -> auto& { return c.variants; }),
      text("sweep_param", [](C& c) -> auto& { return c.sweep_param; }),
      text("sweep_values", [](C& c) -> auto& { return c.sweep_values; }),
  };
  return f;
}

const Field& field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, trim(value));
}

std::string RunConfig::get(const std::string& key) const {
  return field(key).get(*this);
}

void RunConfig::apply_preset(const std::string& name) {
  ModelConfig sizes;
  if (name == "desk") {
    sizes = ModelConfig::desk();
  } else if (name != "large") {
    throw ConfigError("unknown preset '" + name + "' (large, desk)");
  }
  preset = name;
  model.memory_len = sizes.memory_len;
  model.patches = sizes.patches;
  model.dim = sizes.dim;
  model.hidden = sizes.hidden;
}

void RunConfig::merge_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> lines;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    lines.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  for (const auto& [k, v] : lines)
    if (k == "preset") set(k, v);
  for (const auto& [k, v] : lines)
    if (k != "preset") set(k, v);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + '\n';
  return out;
}

ModelConfig RunConfig::model_config() const {
  try {
    ModelConfig c = apply_variant(model, variant);
    c.validate();
    return c;
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

SynthWorld RunConfig::synth_world() const {
  SynthWorld w = world;
  w.patches = model.patches;
  w.dim = model.dim;
  return w;
}

void RunConfig::validate() const {
  model_config();
  try {
    train.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (frames <= delta || delta == 0)
    throw ConfigError("need frames > delta >= 1");
  if (world.omega_min <= 0.0 || world.omega_max < world.omega_min)
    throw ConfigError("need 0 < omega_min <= omega_max");
  if (threshold < 0.0 || threshold > 1.0)
    throw ConfigError("threshold must lie in [0, 1]");
  if (jobs == 0) throw ConfigError("jobs must be >= 1");
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace hmn
