// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "hmn/eval.hpp"
#include "hmn/run_config.hpp"
#include "hmn/training.hpp"

namespace hmn::cli {
namespace {

/// Missing or contradictory command-line input.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

const std::string& require(const std::string& value, const char* key) {
  if (value.empty())
    throw UsageError(std::string("missing ") + flag_name(key) + " <path>");
  return value;
}

void log_config(std::ostream& err, const RunConfig& cfg) {
  err << "# resolved config\n";
  std::istringstream is(cfg.to_text());
  for (std::string line; std::getline(is, line);) err << "#   " << line << '\n';
}

RecordHeader header_for(const RunConfig& cfg) {
  RecordHeader h;
  h.patches = static_cast<std::uint32_t>(cfg.model.patches);
  h.dim = static_cast<std::uint32_t>(cfg.model.dim);
  h.delta = static_cast<std::uint32_t>(cfg.delta);
  return h;
}

Split synth_split(const RunConfig& cfg) {
  const auto all = synth_dataset(cfg.synth_world(), cfg.episodes, cfg.frames,
                                 cfg.delta, cfg.train.seed, cfg.jobs);
  return split(all, cfg.ratios, cfg.train.seed);
}

std::vector<Episode> load(const std::string& path, std::size_t patches,
                          std::size_t dim) {
  RecordHeader h;
  auto eps = read_records(path, &h);
  if (h.patches != patches || h.dim != dim)
    throw FormatError(path + " holds " + std::to_string(h.patches) + "x" +
                      std::to_string(h.dim) + " grids, model expects " +
                      std::to_string(patches) + "x" + std::to_string(dim));
  if (eps.empty()) throw FormatError(path + " holds no episodes");
  return eps;
}

/// Training and test episodes: files when given, else the synthetic split.
std::pair<std::vector<Episode>, std::vector<Episode>> train_test(
    const RunConfig& cfg) {
  if (!cfg.data.empty() && !cfg.test_data.empty())
    return {load(cfg.data, cfg.model.patches, cfg.model.dim),
            load(cfg.test_data, cfg.model.patches, cfg.model.dim)};
  if (!cfg.data.empty() || !cfg.test_data.empty())
    throw UsageError("give both --data and --test-data, or neither");
  Split s = synth_split(cfg);
  return {std::move(s.train), std::move(s.test)};
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first
/// failure after all workers stop.
template <class F>
void parallel_for(std::size_t n, unsigned jobs, F&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned k = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
  if (k <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < k; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
}

std::string num(double v) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

void print_table(std::ostream& out, std::span<const MetricsReport> rows) {
  out << std::left << std::setw(16) << "variant" << std::right
      << std::setw(10) << "frame%" << std::setw(10) << "video%"
      << std::setw(10) << "eer%" << std::setw(10) << "apcer%"
      << std::setw(10) << "bpcer%" << std::setw(12) << "future_mse" << '\n';
  for (const MetricsReport& r : rows)
    out << std::left << std::setw(16) << r.variant << std::right
        << std::setw(10) << num(r.frame_acc) << std::setw(10)
        << num(r.video_acc) << std::setw(10) << num(r.eer) << std::setw(10)
        << num(r.apcer) << std::setw(10) << num(r.bpcer) << std::setw(12)
        << num(r.future_mse) << '\n';
}

void write_reports(const std::string& path,
                   std::span<const MetricsReport> rows) {
  if (std::filesystem::path(path).extension() == ".json")
    write_reports_json(path, rows);
  else
    write_reports_csv(path, rows);
}

// ---- subcommands ----------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const std::filesystem::path dir = require(cfg.out, "out");
  std::filesystem::create_directories(dir);
  const Split s = synth_split(cfg);
  const RecordHeader h = header_for(cfg);
  const std::pair<const char*, const std::vector<Episode>*> parts[] = {
      {"train", &s.train}, {"val", &s.val}, {"test", &s.test}};
  for (const auto& [name, eps] : parts) {
    if (eps->empty()) continue;
    const auto path = dir / (std::string(name) + ".fgr");
    write_records(path, *eps, h);
    out << name << ": " << eps->size() << " episodes -> " << path.string()
        << '\n';
  }
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::filesystem::path ckpt = require(cfg.out, "out");
  const ModelConfig mc = cfg.model_config();
  const auto episodes = cfg.data.empty()
                            ? synth_split(cfg).train
                            : load(cfg.data, mc.patches, mc.dim);
  HmnParams params = make_model(mc, cfg.train.seed);
  err << "# " << params.parameter_count() << " parameters, "
      << episodes.size() << " training episodes\n";
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  const auto rows = train(params, episodes, cfg.train, [&](const LossRow& r) {
    if ((r.step + 1) % every == 0)
      err << "step " << r.step + 1 << "  d " << r.d_loss << "  adv "
          << r.g_adv << "  cls " << r.g_cls << "  mse " << r.g_mse << '\n';
  });
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, params);
  auto loss_csv = ckpt;
  loss_csv.replace_extension(".loss.csv");
  write_loss_csv(loss_csv, rows);
  auto cfg_file = ckpt;
  cfg_file.replace_extension(".cfg");
  std::ofstream(cfg_file) << cfg.to_text();
  out << "checkpoint " << ckpt.string() << "\nloss " << loss_csv.string()
      << "\nconfig " << cfg_file.string() << '\n';
  return kExitOk;
}

std::vector<Episode> eval_episodes(const RunConfig& cfg, const ModelConfig& mc) {
  const std::string& path = cfg.test_data.empty() ? cfg.data : cfg.test_data;
  if (!path.empty()) return load(path, mc.patches, mc.dim);
  return synth_split(cfg).test;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  HmnParams params = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const auto episodes = eval_episodes(cfg, params.config);
  MetricsReport r = evaluate(params, episodes, cfg.threshold);
  r.variant = std::filesystem::path(cfg.checkpoint).stem().string();
  out << report_json(r) << '\n';
  if (!cfg.out.empty()) write_reports(cfg.out, std::span(&r, 1));
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto variants = split_list(cfg.variants);
  if (variants.empty()) throw UsageError("--variants is empty");
  for (const auto& v : variants) {
    try {
      apply_variant(cfg.model, v).validate();
    } catch (const DomainError& e) {
      throw UsageError(e.what());
    }
  }
  const auto [train_set, test_set] = train_test(cfg);
  std::vector<MetricsReport> rows(variants.size());
  parallel_for(variants.size(), cfg.jobs, [&](std::size_t i) {
    rows[i] = run_ablation(variants[i], cfg.model, cfg.train, train_set, test_set);
  });
  err << "# " << train_set.size() << " training / " << test_set.size()
      << " test episodes\n";
  print_table(out, rows);
  if (!cfg.out.empty()) write_reports(cfg.out, rows);
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out) {
  static const char* const kParams[] = {"memory_len", "patches", "delta",
                                        "episodes"};
  if (std::find(std::begin(kParams), std::end(kParams), cfg.sweep_param) ==
      std::end(kParams))
    throw UsageError("--sweep-param must be memory_len, patches, delta or episodes");
  const auto values = split_list(cfg.sweep_values);
  if (values.empty()) throw UsageError("--sweep-values is empty");
  std::vector<RunConfig> runs;
  for (const auto& v : values) {
    RunConfig c = cfg;
    c.set(cfg.sweep_param, v);
    c.validate();
    c.jobs = 1;
    runs.push_back(std::move(c));
  }
  std::vector<MetricsReport> rows(runs.size());
  parallel_for(runs.size(), cfg.jobs, [&](std::size_t i) {
    const Split s = synth_split(runs[i]);
    rows[i] = run_ablation(runs[i].variant, runs[i].model, runs[i].train,
                           s.train, s.test);
  });
  std::ostringstream csv;
  csv.precision(8);
  csv << "param,value,frame_acc,video_acc,eer,apcer,bpcer,future_mse\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MetricsReport& r = rows[i];
    csv << cfg.sweep_param << ',' << values[i] << ',' << r.frame_acc << ','
        << r.video_acc << ',' << r.eer << ',' << r.apcer << ',' << r.bpcer
        << ',' << r.future_mse << '\n';
  }
  if (cfg.out.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(cfg.out);
    if (!f) throw std::runtime_error("cannot write " + cfg.out);
    f << csv.str();
    out << "sweep of " << rows.size() << " runs -> " << cfg.out << '\n';
  }
  return kExitOk;
}

int cmd_grad_check(const RunConfig& cfg, std::ostream& out) {
  ModelConfig tiny = cfg.model_config();
  tiny.memory_len = tiny.patches = tiny.dim = tiny.hidden = 2;
  tiny.noise_dim = 2;
  HmnParams params = make_model(tiny, cfg.train.seed);
  SynthWorld world = cfg.synth_world();
  world.patches = world.dim = 2;
  const Episode ep = synth_episode(world, 4, 1, cfg.train.seed, true);
  const GradCheckResult r =
      objective_grad_check(params, ep, 0, 3, cfg.train, cfg.train.seed);
  const bool ok = r.max_rel_error < 1e-4;
  out << "max rel err " << std::scientific << std::setprecision(3)
      << r.max_rel_error << " over " << r.entries_checked << " entries ("
      << (ok ? "ok" : "FAILED") << ")\n";
  return ok ? kExitOk : kExitRuntime;
}

int cmd_project(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  HmnParams params = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const auto episodes = eval_episodes(cfg, params.config);
  const Inference inf = run_inference(params, episodes);
  std::string warning;
  const auto pts = pca_project2d(inf.reads, &warning);
  if (!warning.empty()) err << "warning: " << warning << '\n';
  std::ostringstream csv;
  csv.precision(10);
  csv << "id,label,x,y\n";
  for (std::size_t i = 0; i < pts.size(); ++i)
    csv << inf.read_episodes[i] << ',' << inf.read_labels[i] << ','
        << pts[i].x << ',' << pts[i].y << '\n';
  if (cfg.out.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(cfg.out);
    if (!f) throw std::runtime_error("cannot write " + cfg.out);
    f << csv.str();
    out << pts.size() << " points -> " << cfg.out << '\n';
  }
  return kExitOk;
}

int cmd_trace(const RunConfig& cfg, std::optional<std::uint32_t> episode,
              std::ostream& out) {
  HmnParams params = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  auto episodes = eval_episodes(cfg, params.config);
  if (episode) {
    std::erase_if(episodes, [&](const Episode& e) { return e.id != *episode; });
    if (episodes.empty())
      throw UsageError("no episode with id " + std::to_string(*episode));
  }
  std::ofstream file;
  if (!cfg.out.empty()) {
    file.open(cfg.out);
    if (!file) throw std::runtime_error("cannot write " + cfg.out);
  }
  std::ostream& sink = cfg.out.empty() ? out : file;
  run_inference(params, episodes, [&](const Episode& e, const StepOutput& s) {
    auto j = nlohmann::json::parse(trace_json(s, params.config));
    j["episode"] = e.id;
    j["label"] = e.label;
    j["score"] = s.y_hat[kFake];
    sink << j.dump() << '\n';
  });
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{"Hierarchical memory network: synthetic data, training, "
               "evaluation and diagnostics"};
  app.name(args.empty() ? "hmn" : args[0]);
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config", config_file, "key=value config file")
      ->check(CLI::ExistingFile);

  std::map<std::string, std::string> flags;
  const RunConfig defaults;
  for (const std::string& key : RunConfig::keys()) {
    std::string names = flag_name(key);
    if (key == "learning_rate") names += ",--lr";
    const std::string d = defaults.get(key);
    app.add_option(names, flags[key],
                   "config key " + key + (d.empty() ? "" : " (default " + d + ")"))
        ->type_name("VALUE");
  }

  std::optional<std::uint32_t> trace_episode;
  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "write synthetic train/val/test FGR1 files to --out DIR"},
      {"train", "train a model and write --out checkpoint, loss CSV and config"},
      {"eval", "score a --checkpoint on --data (or the synthetic test split)"},
      {"ablate", "train and evaluate every name in --variants"},
      {"sweep", "vary --sweep-param over --sweep-values and report metrics"},
      {"grad-check", "finite-difference check of the objective on a tiny model"},
      {"project", "2-D PCA of read vectors as id,label,x,y CSV"},
      {"trace", "attention weights per frame as JSON lines"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    if (std::string(name) == "trace")
      sub->add_option("--episode", trace_episode, "only this episode id");
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    const auto preset = app.get_option("--preset");
    if (!config_file.empty()) cfg.merge_file(config_file);
    if (preset->count() > 0) cfg.set("preset", flags["preset"]);
    for (const std::string& key : RunConfig::keys())
      if (key != "preset" && app.get_option(flag_name(key))->count() > 0)
        cfg.set(key, flags[key]);
    cfg.validate();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  log_config(err, cfg);

  try {
    if (command == "gen-data") return cmd_gen_data(cfg, out);
    if (command == "train") return cmd_train(cfg, out, err);
    if (command == "eval") return cmd_eval(cfg, out);
    if (command == "ablate") return cmd_ablate(cfg, out, err);
    if (command == "sweep") return cmd_sweep(cfg, out);
    if (command == "grad-check") return cmd_grad_check(cfg, out);
    if (command == "project") return cmd_project(cfg, out, err);
    if (command == "trace") return cmd_trace(cfg, trace_episode, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << "error: unhandled command " << command << '\n';
  return kExitUsage;
}

}  // namespace hmn::cli
