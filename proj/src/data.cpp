// SPDX-License-Identifier: Apache-2.0
#include "hmn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

namespace hmn {

std::string to_string(TamperMode mode) {
  return mode == TamperMode::kPatchSplice ? "patch-splice" : "temporal-break";
}

TamperMode parse_tamper_mode(const std::string& name) {
  if (name == "patch-splice") return TamperMode::kPatchSplice;
  if (name == "temporal-break") return TamperMode::kTemporalBreak;
  throw DomainError("unknown tamper mode '" + name +
                    "' (patch-splice, temporal-break)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

struct Process {
  std::size_t K, d;
  std::vector<double> identity;  // K·d, possibly spliced
  std::vector<double> motion;    // K·d
  std::vector<double> omega;     // K
  std::vector<double> phase;     // K

  FeatureGrid sample(double t, const std::vector<double>& phi, double noise,
                     std::mt19937_64& rng) const {
    std::normal_distribution<double> eps(0.0, 1.0);
    FeatureGrid g(K, d);
    auto data = g.data();
    for (std::size_t k = 0; k < K; ++k) {
      const double s = std::sin(omega[k] * t + phi[k]);
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = k * d + j;
        const double pre = identity[i] + motion[i] * s + noise * eps(rng);
        data[i] = static_cast<double>(static_cast<float>(softplus(pre)));
      }
    }
    return g;
  }
};

// Identity = one d-vector shared by all patches plus smaller per-patch detail,
// so a splice of two identities is visible inside a single grid.
std::vector<double> draw_identity(std::size_t K, std::size_t d, double scale,
                                  std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> base(d);
  for (double& v : base) v = n(rng);
  std::vector<double> id(K * d);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < d; ++j)
      id[k * d + j] = scale * (base[j] + 0.25 * n(rng));
  return id;
}

std::vector<double> draw_phases(std::size_t K, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  std::vector<double> phi(K);
  for (double& v : phi) v = u(rng);
  return phi;
}

}  // namespace

Episode synth_episode(const SynthWorld& world, std::size_t T,
                      std::size_t delta, std::uint64_t seed, bool fake,
                      std::uint32_t id) {
  if (delta < 1 || T <= delta)
    throw DomainError("synth_episode needs T > delta >= 1 (T=" +
                      std::to_string(T) + ", delta=" + std::to_string(delta) +
                      ")");
  if (world.patches == 0 || world.dim == 0 || world.stride == 0)
    throw DomainError("synth_episode: K, d and stride must be positive");
  if (world.omega_min > world.omega_max || world.noise_width < 0.0)
    throw DomainError("synth_episode: bad frequency range or noise width");

  std::mt19937_64 rng(seed);
  const std::size_t K = world.patches, d = world.dim;
  Process p{K, d, {}, {}, {}, {}};
  p.identity = draw_identity(K, d, world.identity_scale, rng);
  std::uniform_real_distribution<double> mot(-world.motion_scale,
                                             world.motion_scale);
  p.motion.resize(K * d);
  for (double& v : p.motion) v = mot(rng);
  std::uniform_real_distribution<double> om(world.omega_min, world.omega_max);
  p.omega.resize(K);
  for (double& v : p.omega) v = om(rng);
  p.phase = draw_phases(K, rng);

  const bool splice = fake && world.tamper == TamperMode::kPatchSplice;
  const bool temporal = fake && world.tamper == TamperMode::kTemporalBreak;
  if (splice) {
    const auto other = draw_identity(K, d, world.identity_scale, rng);
    std::uniform_int_distribution<std::size_t> start(0, K - 1);
    const std::size_t s = start(rng);
    const std::size_t len = std::max<std::size_t>(1, K / 2);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t k = (s + i) % K;
      std::copy_n(other.begin() + k * d, d, p.identity.begin() + k * d);
    }
  }

  Episode ep;
  ep.id = id;
  ep.label = fake ? kFake : kReal;
  ep.source = fake ? "synthetic/" + to_string(world.tamper) : "synthetic/real";
  ep.frames.reserve(T);
  ep.futures.reserve(T);
  for (std::size_t f = 0; f < T; ++f) {
    const double t = static_cast<double>(f * world.stride);
    const auto phi_now = temporal ? draw_phases(K, rng) : p.phase;
    ep.frames.push_back(p.sample(t, phi_now, world.noise_width, rng));
    const auto phi_future = temporal ? draw_phases(K, rng) : p.phase;
    ep.futures.push_back(p.sample(t + static_cast<double>(delta), phi_future,
                                  world.noise_width, rng));
  }
  return ep;
}

std::vector<Episode> synth_dataset(const SynthWorld& world, std::size_t n,
                                   std::size_t T, std::size_t delta,
                                   std::uint64_t seed, unsigned jobs) {
  std::vector<Episode> out(n);
  auto make = [&](std::size_t i) {
    out[i] = synth_episode(world, T, delta, splitmix64(seed ^ splitmix64(i)),
                           i % 2 == 1, static_cast<std::uint32_t>(i));
  };
  if (n > 0) make(0);  // surfaces argument errors on the calling thread
  jobs = std::max(1u, jobs);
  if (jobs == 1 || n < 2) {
    for (std::size_t i = 1; i < n; ++i) make(i);
    return out;
  }
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < jobs; ++w)
    workers.emplace_back([&, w] {
      for (std::size_t i = 1 + w; i < n; i += jobs) make(i);
    });
  for (auto& t : workers) t.join();
  return out;
}

namespace {

constexpr char kMagic[4] = {'F', 'G', 'R', '1'};

static_assert(std::endian::native == std::endian::little,
              "record I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_grid(std::ostream& os, const FeatureGrid& g, std::vector<float>& buf) {
  const auto data = g.data();
  buf.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    buf[i] = static_cast<float>(data[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw FormatError("cannot open record file " + path_);
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  void bytes(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(path_ + ": truncated while reading " + what);
  }

  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }

  FeatureGrid grid(std::size_t K, std::size_t d, std::vector<float>& buf) {
    buf.resize(K * d);
    bytes(buf.data(), buf.size() * sizeof(float), "grid payload");
    std::vector<double> data(buf.begin(), buf.end());
    return FeatureGrid(K, d, std::move(data));
  }

  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

std::vector<Episode> read_file(const std::filesystem::path& path,
                               RecordHeader& header) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(r.path() + ": bad magic, not an FGR1 record file");
  header.version = r.u32("version");
  if (header.version != 1)
    throw FormatError(r.path() + ": unsupported version " +
                      std::to_string(header.version));
  header.patches = r.u32("K");
  header.dim = r.u32("d");
  header.delta = r.u32("delta");
  if (header.patches == 0 || header.dim == 0)
    throw FormatError(r.path() + ": header declares an empty grid");

  std::vector<Episode> out;
  std::vector<float> buf;
  while (!r.at_end()) {
    Episode ep;
    ep.id = r.u32("episode id");
    const std::uint32_t T = r.u32("episode length");
    std::uint8_t label;
    r.bytes(&label, 1, "label");
    if (label > 1)
      throw FormatError(r.path() + ": episode " + std::to_string(ep.id) +
                        " has label " + std::to_string(label));
    ep.label = label;
    ep.source = path.filename().string();
    ep.frames.reserve(T);
    ep.futures.reserve(T);
    for (std::uint32_t t = 0; t < T; ++t)
      ep.frames.push_back(r.grid(header.patches, header.dim, buf));
    for (std::uint32_t t = 0; t < T; ++t)
      ep.futures.push_back(r.grid(header.patches, header.dim, buf));
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace

std::size_t write_records(const std::filesystem::path& path,
                          std::span<const Episode> episodes,
                          const RecordHeader& header) {
  if (header.patches == 0 || header.dim == 0)
    throw FormatError("record header needs positive K and d");
  for (const Episode& ep : episodes) {
    if (ep.frames.size() != ep.futures.size())
      throw FormatError("episode " + std::to_string(ep.id) +
                        ": frames and futures differ in length");
    for (const auto* list : {&ep.frames, &ep.futures})
      for (const FeatureGrid& g : *list)
        if (g.patches() != header.patches || g.dim() != header.dim)
          throw FormatError("episode " + std::to_string(ep.id) +
                            ": grid shape differs from the header");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write record file " + path.string());
  os.write(kMagic, 4);
  put_u32(os, header.version);
  put_u32(os, header.patches);
  put_u32(os, header.dim);
  put_u32(os, header.delta);
  std::vector<float> buf;
  for (const Episode& ep : episodes) {
    put_u32(os, ep.id);
    put_u32(os, static_cast<std::uint32_t>(ep.frames.size()));
    const std::uint8_t label = static_cast<std::uint8_t>(ep.label);
    os.write(reinterpret_cast<const char*>(&label), 1);
    for (const FeatureGrid& g : ep.frames) put_grid(os, g, buf);
    for (const FeatureGrid& g : ep.futures) put_grid(os, g, buf);
  }
  if (!os) throw FormatError("write failed for " + path.string());
  return episodes.size();
}

std::vector<Episode> read_records(const std::filesystem::path& path,
                                  RecordHeader* header) {
  RecordHeader h;
  if (!std::filesystem::is_directory(path)) {
    auto out = read_file(path, h);
    if (header) *header = h;
    return out;
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(path))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw FormatError("record directory " + path.string() + " is empty");
  std::vector<Episode> out;
  bool first = true;
  for (const auto& f : files) {
    RecordHeader fh;
    auto eps = read_file(f, fh);
    if (first) {
      h = fh;
      first = false;
    } else if (!(fh == h)) {
      throw FormatError(f.string() + ": header differs from " +
                        files.front().string());
    }
    for (Episode& ep : eps) out.push_back(std::move(ep));
  }
  if (header) *header = h;
  return out;
}

Split split(std::span<const Episode> episodes, const SplitRatios& ratios,
            std::uint64_t seed) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 ||
      std::abs(total - 1.0) > 1e-9)
    throw DomainError("split ratios must be non-negative and sum to 1");
  const std::size_t n = episodes.size();
  auto count = [n](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_val = count(ratios.val);
  const std::size_t n_test = count(ratios.test);
  if (n_val + n_test > n) throw DomainError("split: ratios exceed episode count");
  const std::size_t n_train = n - n_val - n_test;
  if ((ratios.train > 0.0 && n_train == 0) || (ratios.val > 0.0 && n_val == 0) ||
      (ratios.test > 0.0 && n_test == 0))
    throw DomainError("split: " + std::to_string(n) +
                      " episodes are too few for non-empty splits");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  Split s;
  for (std::size_t i = 0; i < n; ++i) {
    const Episode& ep = episodes[order[i]];
    if (i < n_val) s.val.push_back(ep);
    else if (i < n_val + n_test) s.test.push_back(ep);
    else s.train.push_back(ep);
  }
  return s;
}

}  // namespace hmn
