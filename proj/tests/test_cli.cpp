// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "cli.hpp"
#include "hmn/eval.hpp"
#include "hmn/run_config.hpp"
#include "hmn/training.hpp"

using namespace hmn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hmn");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("hmn_cli_" + std::to_string(::getpid()) + "_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

const std::vector<std::string> kSmall = {"--preset", "desk", "--episodes", "6", "--frames", "4",
                                         "--delta", "1", "--val-ratio", "0.2",
                                         "--test-ratio", "0.2"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return args;
}

// NTM whose fixed memory holds one prototype per class; the encoder passes
// feature 0 or 1 through, so the read picks the matching prototype.
HmnParams perfect_ntm() {
  ModelConfig c;
  c.memory_len = c.patches = c.dim = c.hidden = c.noise_dim = 2;
  c = apply_variant(c, "ntm");
  HmnParams p = make_model(c, 1);
  p.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
  for (GruParams* g : {&p.input_enc.fwd, &p.input_enc.bwd}) g->b_z.fill(50.0);
  p.input_enc.fwd.w_h.at(0, 0) = 1.0;
  p.input_enc.fwd.w_h.at(1, 1) = 1.0;
  for (std::size_t i = 0; i < 4; ++i) p.ntm.key_w.at(i, i) = 1.0;
  p.ntm.strength_b.fill(50.0);
  p.ntm.erase_b.fill(-50.0);
  p.ntm.init_memory.at(0, 0) = 1.0;
  p.ntm.init_memory.at(1, 1) = 1.0;
  p.cls_w.at(0, 0) = 10.0;
  p.cls_w.at(1, 1) = 10.0;
  return p;
}

std::vector<Episode> separable_episodes() {
  std::vector<Episode> eps;
  for (std::uint32_t id = 0; id < 6; ++id) {
    Episode e;
    e.id = id;
    e.label = id % 2 == 0 ? kReal : kFake;
    for (int t = 0; t < 3; ++t) {
      FeatureGrid g(2, 2);
      for (std::size_t k = 0; k < 2; ++k) g.patch(k)[e.label] = 2.0 + 0.25 * t + 0.1 * k;
      e.frames.push_back(g);
      e.futures.push_back(g);
    }
    eps.push_back(e);
  }
  return eps;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("grad-check: tiny model passes with seed 7") {
  const Result r = run_cli({"grad-check", "--seed", "7"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("(ok)") != std::string::npos);
  const auto pos = r.out.find("max rel err ");
  REQUIRE(pos != std::string::npos);
  CHECK(std::stod(r.out.substr(pos + 12)) < 1e-4);
}

TEST_CASE("train with zero steps writes the initial parameters") {
  TempDir dir("init");
  const Result r = run_cli(with_small({"train", "--steps", "0", "--seed", "5", "--out",
                                       dir / "m.hmn"}));
  REQUIRE(r.code == cli::kExitOk);
  HmnParams loaded = load_checkpoint(dir / "m.hmn");
  HmnParams fresh = make_model(ModelConfig::desk(), 5);
  CHECK(loaded.config == fresh.config);
  const auto a = loaded.all_tensors(), b = fresh.all_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  CHECK(fs::exists(dir / "m.loss.csv"));
  CHECK(slurp(dir / "m.cfg").find("steps = 0") != std::string::npos);
}

TEST_CASE("train twice with the same seed gives byte-identical checkpoints") {
  TempDir dir("repro");
  for (const char* name : {"a.hmn", "b.hmn"})
    REQUIRE(run_cli(with_small({"train", "--steps", "3", "--out", dir / name})).code == 0);
  CHECK(slurp(dir / "a.hmn") == slurp(dir / "b.hmn"));
  CHECK(slurp(dir / "a.loss.csv") == slurp(dir / "b.loss.csv"));
  REQUIRE(run_cli(with_small({"train", "--steps", "3", "--seed", "43", "--out", dir / "c.hmn"}))
              .code == 0);
  CHECK(slurp(dir / "a.hmn") != slurp(dir / "c.hmn"));
}

TEST_CASE("eval on a perfectly separating checkpoint") {
  TempDir dir("perfect");
  HmnParams p = perfect_ntm();
  save_checkpoint(dir / "ntm.hmn", p);
  const auto eps = separable_episodes();
  write_records(dir / "sep.fgr", eps, RecordHeader{1, 2, 2, 1});
  const Result r = run_cli({"eval", "--checkpoint", dir / "ntm.hmn", "--data", dir / "sep.fgr",
                            "--out", dir / "report.json"});
  REQUIRE(r.code == cli::kExitOk);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["frame_acc"] == 100.0);
  CHECK(j["video_acc"] == 100.0);
  CHECK(j["eer"] == 0.0);
  CHECK(j["frames"] == 18);
  CHECK(j["future_mse"].is_null());
  std::ifstream is(dir / "report.json");
  CHECK(nlohmann::json::parse(is)[0]["variant"] == "ntm");
}

TEST_CASE("gen-data, then eval, project and trace on the written files") {
  TempDir dir("pipeline");
  REQUIRE(run_cli(with_small({"gen-data", "--out", dir / "data"})).code == 0);
  RecordHeader h;
  const auto train = read_records(dir / "data/train.fgr", &h);
  CHECK(train.size() == 4);
  CHECK(h.patches == 16);
  CHECK(h.delta == 1);
  CHECK(read_records(dir / "data/test.fgr").size() == 1);
  CHECK(read_records(dir / "data/val.fgr").size() == 1);

  REQUIRE(run_cli(with_small({"train", "--steps", "1", "--data", dir / "data/train.fgr", "--out",
                              dir / "m.hmn"}))
              .code == 0);
  const Result ev = run_cli({"eval", "--checkpoint", dir / "m.hmn", "--test-data",
                             dir / "data/train.fgr", "--out", dir / "m.csv"});
  REQUIRE(ev.code == 0);
  CHECK(nlohmann::json::parse(ev.out)["frames"] == 16);
  CHECK(slurp(dir / "m.csv").rfind("variant,frame_acc", 0) == 0);

  const Result pr = run_cli({"project", "--checkpoint", dir / "m.hmn", "--data",
                             dir / "data/train.fgr"});
  REQUIRE(pr.code == 0);
  std::istringstream lines(pr.out);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "id,label,x,y");
  std::size_t n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 16);

  const std::string ep = std::to_string(train[1].id);
  const Result tr = run_cli({"trace", "--checkpoint", dir / "m.hmn", "--data",
                             dir / "data/train.fgr", "--episode", ep});
  REQUIRE(tr.code == 0);
  std::istringstream tl(tr.out);
  n = 0;
  while (std::getline(tl, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["episode"] == train[1].id);
    CHECK(j["gamma"].size() == 16);
    CHECK(j["frame"] == n);
    ++n;
  }
  CHECK(n == 4);
  CHECK(run_cli({"trace", "--checkpoint", dir / "m.hmn", "--data", dir / "data/train.fgr",
                 "--episode", "999"})
            .code == cli::kExitUsage);
}

TEST_CASE("ablate and sweep on a tiny synthetic split") {
  TempDir dir("ablate");
  const Result ab = run_cli(with_small({"ablate", "--steps", "1", "--variants",
                                        "full,no-eta,ntm+gan+eta", "--jobs", "2", "--out",
                                        dir / "ab.json"}));
  REQUIRE(ab.code == 0);
  CHECK(ab.out.find("ntm+gan+eta") != std::string::npos);
  std::ifstream is(dir / "ab.json");
  const auto arr = nlohmann::json::parse(is);
  REQUIRE(arr.size() == 3);
  CHECK(arr[1]["future_mse"].is_null());

  const Result sw = run_cli(with_small({"sweep", "--steps", "1", "--sweep-param", "memory_len",
                                        "--sweep-values", "1,3"}));
  REQUIRE(sw.code == 0);
  CHECK(sw.out.rfind("param,value,frame_acc", 0) == 0);
  CHECK(sw.out.find("memory_len,3,") != std::string::npos);
  CHECK(run_cli(with_small({"sweep", "--sweep-param", "hidden"})).code == cli::kExitUsage);
}

TEST_CASE("config file, flag precedence and the logged configuration") {
  TempDir dir("config");
  {
    std::ofstream os(dir / "run.cfg");
    os << "# comment\npreset = desk\nsteps = 7\nlearning_rate = 0.01\nmemory_len = 5\n";
  }
  const Result r = run_cli({"grad-check", "--config", dir / "run.cfg", "--steps", "3"});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("#   steps = 3\n") != std::string::npos);
  CHECK(r.err.find("#   learning_rate = 0.01\n") != std::string::npos);
  CHECK(r.err.find("#   memory_len = 5\n") != std::string::npos);
  CHECK(r.err.find("#   hidden = 24\n") != std::string::npos);
  // --preset on the command line re-applies the preset before other flags
  const Result p = run_cli({"grad-check", "--config", dir / "run.cfg", "--preset", "large"});
  CHECK(p.err.find("#   hidden = 300\n") != std::string::npos);
  CHECK(p.err.find("#   steps = 7\n") != std::string::npos);

  RunConfig cfg;
  cfg.merge_file(dir / "run.cfg");
  RunConfig back;
  back.merge_text(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
}

TEST_CASE("exit codes") {
  TempDir dir("codes");
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"--help"}).code == cli::kExitOk);
  CHECK(run_cli({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--memory-len", "abc"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--memory-len", "0"}).code == cli::kExitUsage);
  CHECK(run_cli({"ablate", "--variants", "full,bogus"}).code == cli::kExitUsage);
  CHECK(run_cli({"train"}).code == cli::kExitUsage);  // no --out
  CHECK(run_cli({"eval", "--checkpoint", dir / "missing.hmn"}).code == cli::kExitRuntime);
  {
    std::ofstream os(dir / "bad.cfg");
    os << "colour = blue\n";
  }
  const Result bad = run_cli({"grad-check", "--config", dir / "bad.cfg"});
  CHECK(bad.code == cli::kExitUsage);
  CHECK(bad.err.find("colour") != std::string::npos);
  {
    std::ofstream(dir / "junk.fgr") << "not a record file";
  }
  CHECK(run_cli(with_small({"train", "--steps", "1", "--data", dir / "junk.fgr", "--out",
                            dir / "x.hmn"}))
            .code == cli::kExitRuntime);
}

TEST_CASE("the installed binary runs as a separate process") {
  const std::string bin = HMN_CLI_PATH;
  REQUIRE(fs::exists(bin));
  const int help = std::system((bin + " --help > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(help) == 0);
  const int none = std::system((bin + " > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(none) == cli::kExitUsage);
  const int gc = std::system((bin + " grad-check --seed 3 > /dev/null 2>&1").c_str());
  CHECK(WEXITSTATUS(gc) == 0);
}

}  // TEST_SUITE
