#pragma once

// Video records, the line-oriented manifest that lists them, and a synthetic
// generator with planted, per-modality decodable label signal.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "computer/ctf.hpp"
#include "computer/model.hpp"

namespace computer {

/// One video. Tensors are stored in f32, as on disk.
///   context  T x S x D
///   vis      T x N x D
///   key      T x N x D, or T x N x 51 raw keypoints in [0, 1]
///   labels   STAL: T x N x C multi-hot; GAR: 1 x C one-hot
struct VideoRecord {
  std::string id;
  Tensor<float> context, vis, key, labels;

  std::size_t clips() const { return vis.dim(0); }
  std::size_t actors() const { return vis.dim(1); }
  std::size_t dim() const { return vis.dim(2); }
  std::size_t classes() const { return labels.shape().back(); }
  TaskMode mode() const { return labels.rank() == 3 ? TaskMode::stal : TaskMode::gar; }

  /// GAR class index.
  std::size_t group_label() const {
    const auto& d = labels.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  }

  template <std::floating_point T>
  VideoFeatures<T> features() const {
    return {context.cast<T>(), vis.cast<T>(), key.cast<T>()};
  }

  /// STAL targets as (T N) x C, row t * N + i.
  template <std::floating_point T>
  Tensor<T> stal_targets() const {
    return labels.cast<T>().reshaped({clips() * actors(), classes()});
  }

  bool operator==(const VideoRecord&) const = default;
};

/// Checks internal consistency; `where` names the source in messages.
inline void validate_record(const VideoRecord& r, const std::string& where) {
  auto fail = [&](const std::string& what) {
    throw ShapeMismatchError(where + ": " + what);
  };
  if (r.vis.rank() != 3) fail("actor features must be T x N x D, got " + shape_str(r.vis.shape()));
  const std::size_t t = r.clips(), n = r.actors(), d = r.dim();
  if (t == 0 || n == 0 || d == 0) fail("empty actor features " + shape_str(r.vis.shape()));
  if (r.context.rank() != 3 || r.context.dim(0) != t || r.context.dim(2) != d ||
      r.context.dim(1) == 0)
    fail("context " + shape_str(r.context.shape()) + " does not match actors " +
         shape_str(r.vis.shape()));
  if (r.key.rank() != 3 || r.key.dim(0) != t || r.key.dim(1) != n ||
      (r.key.dim(2) != d && r.key.dim(2) != kKeypointWidth))
    fail("keypoints " + shape_str(r.key.shape()) + " do not match actors " +
         shape_str(r.vis.shape()));
  const bool stal = r.labels.rank() == 3 && r.labels.dim(0) == t && r.labels.dim(1) == n;
  const bool gar = r.labels.rank() == 2 && r.labels.dim(0) == 1;
  if (!stal && !gar) fail("labels " + shape_str(r.labels.shape()) + " fit neither task");
  float ones = 0;
  for (float v : r.labels.data()) {
    if (v != 0.0f && v != 1.0f) fail("label value " + std::to_string(v) + " not in {0,1}");
    ones += v;
  }
  if (gar && ones != 1.0f) fail("GAR labels must be one-hot");
}

// ---------------------------------------------------------------- manifest

/// Line grammar (see docs/formats.md):
///   line    := comment | blank | record
///   comment := '#' any*
///   record  := id WS T WS N WS context WS vis WS key WS labels
/// Paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string id;
  std::size_t clips = 0, actors = 0;
  std::string context, vis, key, labels;
};

inline std::vector<ManifestEntry> parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("manifest not found: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string extra;
    if (!(ss >> e.id >> e.clips >> e.actors >> e.context >> e.vis >> e.key >> e.labels) ||
        (ss >> extra))
      throw ConfigError(path.string() + ":" + std::to_string(lineno) +
                        ": expected 'id T N context vis key labels'");
    out.push_back(std::move(e));
  }
  return out;
}

/// Loads every record of a manifest. `expected_dim` (0 = any) must match D.
inline std::vector<VideoRecord> load_manifest(const std::filesystem::path& path,
                                              std::size_t expected_dim = 0) {
  const auto dir = path.parent_path();
  std::vector<VideoRecord> out;
  for (const auto& e : parse_manifest(path)) {
    VideoRecord r;
    r.id = e.id;
    r.context = ctf::read<float>(dir / e.context);
    r.vis = ctf::read<float>(dir / e.vis);
    r.key = ctf::read<float>(dir / e.key);
    r.labels = ctf::read<float>(dir / e.labels);
    const std::string vis_path = (dir / e.vis).string();
    validate_record(r, vis_path);
    if (r.clips() != e.clips || r.actors() != e.actors)
      throw ShapeMismatchError(vis_path + ": manifest says T = " + std::to_string(e.clips) +
                               ", N = " + std::to_string(e.actors) + ", file has " +
                               shape_str(r.vis.shape()));
    if (expected_dim && r.dim() != expected_dim)
      throw ShapeMismatchError(vis_path + ": D = " + std::to_string(r.dim()) +
                               ", config expects " + std::to_string(expected_dim));
    out.push_back(std::move(r));
  }
  return out;
}

/// Writes <dir>/<name>.manifest and one CTF file per tensor under <dir>/<name>/.
inline std::filesystem::path save_manifest(const std::filesystem::path& dir,
                                           const std::string& name,
                                           const std::vector<VideoRecord>& videos) {
  std::filesystem::create_directories(dir / name);
  const auto manifest = dir / (name + ".manifest");
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << "# id T N context vis key labels\n";
  for (const auto& v : videos) {
    auto rel = [&](const char* part) { return name + "/" + v.id + "." + part + ".ctf"; };
    ctf::write(dir / rel("context"), v.context);
    ctf::write(dir / rel("vis"), v.vis);
    ctf::write(dir / rel("key"), v.key);
    ctf::write(dir / rel("labels"), v.labels);
    out << v.id << ' ' << v.clips() << ' ' << v.actors() << ' ' << rel("context") << ' '
        << rel("vis") << ' ' << rel("key") << ' ' << rel("labels") << '\n';
  }
  if (!out) throw IoError("cannot write " + manifest.string());
  return manifest;
}

// --------------------------------------------------------------- synthetic

/// Where a class's label bit can be decoded from.
enum class LabelSource { vis, key, joint };

struct SyntheticConfig {
  std::uint64_t seed = 1;
  /// Seeds identities, scenes and noise; labels never depend on it.
  std::optional<std::uint64_t> noise_seed;
  std::size_t videos = 100;
  std::size_t test_videos = 64;
  std::size_t clips = 6;    // T
  std::size_t actors = 2;   // N
  std::size_t tokens = 4;   // S
  std::size_t dim = 16;     // D
  std::size_t classes = 5;  // C
  double sigma = 0.3;
  /// Share of each bit's evidence moved from clip t to clips t - 1 and t + 1.
  double rho = 0.5;
  double frac_vis = 0.4, frac_key = 0.2, frac_joint = 0.4;
  double signal = 1.0;    // amplitude of planted bit evidence
  double identity = 1.0;  // per-actor appearance component
  double scene = 1.0;     // per-clip scene component, drifting over time
  double drift = 0.5;
  double context_signal = 0.5;
  TaskMode mode = TaskMode::stal;
  bool raw_keypoints = false;
  double gar_flip = 0.2;  // per-bit deviation of actors from the group pattern

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("synthetic: " + m); };
    if (clips == 0 || actors == 0 || tokens == 0 || dim == 0 || classes == 0)
      bad("T, N, S, D and C must be positive");
    if (videos == 0) bad("need at least one training video");
    if (sigma < 0) bad("sigma must be >= 0");
    if (rho < 0 || rho > 1) bad("rho must lie in [0, 1]");
    if (frac_vis < 0 || frac_key < 0 || frac_joint < 0 ||
        std::abs(frac_vis + frac_key + frac_joint - 1.0) > 1e-9)
      bad("modality fractions must be >= 0 and sum to 1");
    if (mode == TaskMode::gar && classes < 2) bad("GAR needs at least 2 classes");
    if (gar_flip < 0 || gar_flip > 0.5) bad("gar_flip must lie in [0, 0.5]");
  }
};

/// Largest-remainder apportionment of C classes to vis / key / joint sources,
/// in that order.
inline std::vector<LabelSource> label_sources(const SyntheticConfig& cfg) {
  const double f[3] = {cfg.frac_vis, cfg.frac_key, cfg.frac_joint};
  std::size_t n[3], total = 0;
  std::vector<std::pair<double, std::size_t>> rem;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = f[s] * static_cast<double>(cfg.classes);
    n[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    total += n[s];
    rem.push_back({-(exact - static_cast<double>(n[s])), s});
  }
  std::stable_sort(rem.begin(), rem.end());
  for (std::size_t i = 0; total < cfg.classes; ++i, ++total) ++n[rem[i].second];
  std::vector<LabelSource> out;
  for (std::size_t s = 0; s < 3; ++s)
    out.insert(out.end(), n[s], static_cast<LabelSource>(s));
  return out;
}

struct SyntheticSplit {
  std::vector<VideoRecord> train, test;
};

namespace detail {

inline std::vector<double> unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double n = 0;
  for (auto& x : v) {
    x = rng.normal();
    n += x * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

// Dataset-level planting directions, shared by train and test videos.
struct World {
  // [modality][bit] -> direction, for evidence at t, about t + 1, about t - 1.
  std::vector<std::vector<double>> cur[2], next[2], prev[2], ctx;
  std::vector<std::vector<double>> kp_map;  // 51 x D, raw keypoint rendering
  std::vector<std::vector<int>> gar_patterns;  // C x (bits vis + bits key)
};

}  // namespace detail

/// Label bits per actor and clip come from a latent stream seeded by `seed`
/// alone. Each class reads one vis bit, one key bit, or the XOR of one of
/// each. Evidence for bit b of actor i at clip t is planted as
///   sqrt(1 - rho) at clip t, sqrt(rho / 2) at clips t - 1 and t + 1
/// along fixed random directions; the rest of a feature row is the actor's
/// identity, the clip's scene vector and Gaussian noise.
inline SyntheticSplit generate_split(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto sources = label_sources(cfg);
  std::vector<std::size_t> vis_bit(cfg.classes, 0), key_bit(cfg.classes, 0);
  std::size_t bits[2] = {0, 0};
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    if (sources[c] != LabelSource::key) vis_bit[c] = bits[0]++;
    if (sources[c] != LabelSource::vis) key_bit[c] = bits[1]++;
  }
  const std::size_t d = cfg.dim, nt = cfg.clips, na = cfg.actors;

  Rng root(cfg.seed);
  Rng world_rng = root.fork(1);
  Rng latent_rng = root.fork(2);
  Rng noise_rng = cfg.noise_seed ? Rng(*cfg.noise_seed).fork(3) : root.fork(3);

  detail::World w;
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t b = 0; b < bits[m]; ++b) {
      w.cur[m].push_back(detail::unit_vector(world_rng, d));
      w.next[m].push_back(detail::unit_vector(world_rng, d));
      w.prev[m].push_back(detail::unit_vector(world_rng, d));
    }
  for (std::size_t b = 0; b < bits[0]; ++b) w.ctx.push_back(detail::unit_vector(world_rng, d));
  for (std::size_t k = 0; k < kKeypointWidth; ++k)
    w.kp_map.push_back(detail::unit_vector(world_rng, d));
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<int> pat(bits[0] + bits[1]);
    for (auto& x : pat) x = world_rng.bernoulli(0.5) ? 1 : 0;
    w.gar_patterns.push_back(std::move(pat));
  }

  const double a_cur = std::sqrt(1.0 - cfg.rho), a_side = std::sqrt(cfg.rho / 2.0);
  auto make_video = [&](std::size_t index) {
    VideoRecord r;
    r.id = "v" + std::to_string(10000 + index).substr(1);
    // Latent bits [modality][t][i][b].
    std::size_t group = 0;
    if (cfg.mode == TaskMode::gar) group = latent_rng.index(cfg.classes);
    std::vector<std::vector<std::vector<int>>> lat[2];
    for (std::size_t m = 0; m < 2; ++m) {
      lat[m].assign(nt, std::vector<std::vector<int>>(na, std::vector<int>(bits[m])));
      for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t i = 0; i < na; ++i)
          for (std::size_t b = 0; b < bits[m]; ++b) {
            if (cfg.mode == TaskMode::gar) {
              const int base = w.gar_patterns[group][m * bits[0] + b];
              lat[m][t][i][b] = latent_rng.bernoulli(cfg.gar_flip) ? 1 - base : base;
            } else {
              lat[m][t][i][b] = latent_rng.bernoulli(0.5) ? 1 : 0;
            }
          }
    }
    if (cfg.mode == TaskMode::stal) {
      r.labels = Tensor<float>({nt, na, cfg.classes});
      for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t i = 0; i < na; ++i)
          for (std::size_t c = 0; c < cfg.classes; ++c) {
            int y = 0;
            switch (sources[c]) {
              case LabelSource::vis: y = lat[0][t][i][vis_bit[c]]; break;
              case LabelSource::key: y = lat[1][t][i][key_bit[c]]; break;
              case LabelSource::joint: y = lat[0][t][i][vis_bit[c]] ^ lat[1][t][i][key_bit[c]]; break;
            }
            r.labels(t, i, c) = static_cast<float>(y);
          }
    } else {
      r.labels = Tensor<float>({1, cfg.classes});
      r.labels[group] = 1.0f;
    }

    // Appearance: identities per modality and actor, drifting scene.
    std::vector<std::vector<double>> ident[2];
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t i = 0; i < na; ++i) ident[m].push_back(detail::unit_vector(noise_rng, d));
    std::vector<std::vector<double>> scene{detail::unit_vector(noise_rng, d)};
    for (std::size_t t = 1; t < nt; ++t) {
      auto step = detail::unit_vector(noise_rng, d);
      std::vector<double> s(d);
      double n = 0;
      for (std::size_t j = 0; j < d; ++j) {
        s[j] = scene.back()[j] + cfg.drift * step[j];
        n += s[j] * s[j];
      }
      for (auto& x : s) x /= std::sqrt(n);
      scene.push_back(std::move(s));
    }
    auto sgn = [](int b) { return b ? 1.0 : -1.0; };
    auto actor_row = [&](std::size_t m, std::size_t t, std::size_t i) {
      std::vector<double> x(d);
      for (std::size_t j = 0; j < d; ++j)
        x[j] = cfg.identity * ident[m][i][j] + cfg.scene * scene[t][j] +
               cfg.sigma * noise_rng.normal();
      for (std::size_t b = 0; b < bits[m]; ++b) {
        for (std::size_t j = 0; j < d; ++j) {
          x[j] += cfg.signal * a_cur * sgn(lat[m][t][i][b]) * w.cur[m][b][j];
          if (t + 1 < nt)
            x[j] += cfg.signal * a_side * sgn(lat[m][t + 1][i][b]) * w.next[m][b][j];
          if (t > 0) x[j] += cfg.signal * a_side * sgn(lat[m][t - 1][i][b]) * w.prev[m][b][j];
        }
      }
      return x;
    };

    r.vis = Tensor<float>({nt, na, d});
    const std::size_t kw = cfg.raw_keypoints ? kKeypointWidth : d;
    r.key = Tensor<float>({nt, na, kw});
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t i = 0; i < na; ++i) {
        auto xv = actor_row(0, t, i);
        auto xk = actor_row(1, t, i);
        for (std::size_t j = 0; j < d; ++j) r.vis(t, i, j) = static_cast<float>(xv[j]);
        if (!cfg.raw_keypoints) {
          for (std::size_t j = 0; j < d; ++j) r.key(t, i, j) = static_cast<float>(xk[j]);
          continue;
        }
        for (std::size_t k = 0; k < kKeypointWidth; ++k) {
          double z = 0;
          for (std::size_t j = 0; j < d; ++j) z += w.kp_map[k][j] * xk[j];
          r.key(t, i, k) = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
        }
      }

    // Context token s follows actor s mod N, carrying its current vis evidence.
    r.context = Tensor<float>({nt, cfg.tokens, d});
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t s = 0; s < cfg.tokens; ++s) {
        const std::size_t i = s % na;
        for (std::size_t j = 0; j < d; ++j) {
          double x = cfg.scene * scene[t][j] + cfg.identity * ident[0][i][j] +
                     cfg.sigma * noise_rng.normal();
          for (std::size_t b = 0; b < bits[0]; ++b)
            x += cfg.context_signal * a_cur * sgn(lat[0][t][i][b]) * w.ctx[b][j];
          r.context(t, s, j) = static_cast<float>(x);
        }
      }
    return r;
  };

  SyntheticSplit out;
  for (std::size_t v = 0; v < cfg.videos; ++v) out.train.push_back(make_video(v));
  for (std::size_t v = 0; v < cfg.test_videos; ++v)
    out.test.push_back(make_video(cfg.videos + v));
  return out;
}

/// Training videos followed by test videos.
inline std::vector<VideoRecord> generate(const SyntheticConfig& cfg) {
  auto s = generate_split(cfg);
  s.train.insert(s.train.end(), s.test.begin(), s.test.end());
  return s.train;
}

}  // namespace computer
