#pragma once

// The full query machine: per-modality stacks of (HH-HUB -> HC-HUB) stages,
// an aggregator MLP over the refined actor queries, and the two task heads.

#include <optional>
#include <string>
#include <vector>

#include "computer/hub.hpp"

namespace computer {

enum class TaskMode { stal, gar };

inline const char* task_name(TaskMode m) { return m == TaskMode::stal ? "stal" : "gar"; }

/// Which actor features fill the HH memory of the keypoint branch.
enum class HhMemory { visual, matched };

struct AblationFlags {
  bool use_hierarchy = true;
  bool use_hh = true;
  bool use_hc = true;
  bool use_temporal = true;
  bool use_selection = true;
  bool use_vis = true;
  bool use_key = true;
  bool use_consistency = true;

  std::size_t modality_count() const { return std::size_t{use_vis} + std::size_t{use_key}; }

  void validate() const {
    if (!use_vis && !use_key) throw ConfigError("flags: no modality active");
    if (!use_hh && !use_hc) throw ConfigError("flags: need at least one of use_hh / use_hc");
    if (!use_hierarchy && !(use_hh && use_hc))
      throw ConfigError("flags: use_hierarchy = false merges both HUBs; keep use_hh and use_hc on");
    if (use_consistency && modality_count() < 2)
      throw ConfigError("flags: consistency loss needs both modalities");
  }

  bool operator==(const AblationFlags&) const = default;
};

inline constexpr std::size_t kKeypoints = 17;
inline constexpr std::size_t kKeypointWidth = kKeypoints * 3;

struct ModelConfig {
  std::size_t dim = 4;        // D
  std::size_t classes = 3;    // C
  std::size_t hidden = 8;     // aggregator hidden width
  std::size_t kp_hidden = 8;  // keypoint embedder hidden width
  std::size_t depth = 1;      // (HH -> HC) stages
  HubConfig hub;
  SelectionConfig sel;
  TaskMode mode = TaskMode::stal;
  AblationFlags flags;
  /// Keypoint input is raw 17 x 3 skeletons passed through the embedder.
  bool raw_keypoints = false;
  HhMemory hh_memory = HhMemory::visual;

  void validate() const {
    if (dim == 0 || classes == 0 || hidden == 0 || kp_hidden == 0)
      throw ConfigError("model: dim, classes, hidden and kp_hidden must be positive");
    if (mode == TaskMode::gar && classes < 2)
      throw ConfigError("model: GAR needs at least 2 classes");
    if (depth == 0) throw ConfigError("model: depth must be >= 1");
    if (hub.attn.layers == 0) throw ConfigError("model: attention layers must be >= 1");
    if (hub.attn.heads == 0 || dim % hub.attn.heads != 0)
      throw ConfigError("model: D = " + std::to_string(dim) + " not divisible by heads = " +
                        std::to_string(hub.attn.heads));
    sel.validate();
    flags.validate();
    if (raw_keypoints && hh_key_memory() == HhMemory::matched && flags.use_key)
      throw ConfigError("model: modality-matched HH memory needs pre-embedded keypoint features");
  }

  /// HH memory of the key branch; without the vis modality there are no
  /// visual actor features to attend to.
  HhMemory hh_key_memory() const { return flags.use_vis ? hh_memory : HhMemory::matched; }
};

/// Two-layer perceptron x -> relu(x W1 + b1) W2 + b2.
template <std::floating_point T>
struct Mlp {
  Parameter<T> w1, b1, w2, b2;

  static Mlp init(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out,
                  const std::string& prefix, const std::string& group) {
    return {{prefix + ".w1", group, init::glorot_uniform<T>(rng, in, hidden)},
            {prefix + ".b1", group, init::constant<T>(1, hidden, T(0))},
            {prefix + ".w2", group, init::glorot_uniform<T>(rng, hidden, out)},
            {prefix + ".b2", group, init::constant<T>(1, out, T(0))}};
  }

  std::size_t in() const { return w1.value.rows(); }

  Var<T> forward(const Var<T>& x) {
    auto& tape = x.tape();
    if (x.cols() != in())
      throw DimensionError("mlp: input " + shape_str(x.value().shape()) + " vs width " +
                           std::to_string(in()));
    Var<T> h = relu(add_row(matmul(x, tape.parameter(w1)), tape.parameter(b1)));
    return add_row(matmul(h, tape.parameter(w2)), tape.parameter(b2));
  }

  template <class F>
  void for_each(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
};

template <std::floating_point T>
struct StageParams {
  HubParams<T> hh, hc;
};

template <std::floating_point T>
struct ModalityMachineParams {
  std::vector<StageParams<T>> stages;

  static ModalityMachineParams init(Rng& rng, const ModelConfig& cfg, const std::string& prefix) {
    ModalityMachineParams m;
    for (std::size_t s = 0; s < cfg.depth; ++s) {
      const std::string p = prefix + ".s" + std::to_string(s);
      auto hh = HubParams<T>::init(rng, cfg.dim, cfg.hub, p + ".hh");
      auto hc = HubParams<T>::init(rng, cfg.dim, cfg.hub, p + ".hc");
      m.stages.push_back({std::move(hh), std::move(hc)});
    }
    return m;
  }

  std::size_t depth() const { return stages.size(); }

  template <class F>
  void for_each(F&& f) {
    for (auto& s : stages) {
      s.hh.for_each(f);
      s.hc.for_each(f);
    }
  }
};

template <std::floating_point T>
struct ComputerParams {
  std::optional<ModalityMachineParams<T>> vis, key;
  Mlp<T> aggregator;
  std::optional<Mlp<T>> embedder;

  ModalityMachineParams<T>& machine(Modality m) {
    auto& p = m == Modality::vis ? vis : key;
    if (!p) throw ConfigError(std::string("model: modality ") + modality_name(m) + " inactive");
    return *p;
  }

  template <class F>
  void for_each(F&& f) {
    if (vis) vis->for_each(f);
    if (key) key->for_each(f);
    aggregator.for_each(f);
    if (embedder) embedder->for_each(f);
  }

  std::vector<Parameter<T>*> list() {
    std::vector<Parameter<T>*> out;
    for_each([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t count() {
    std::size_t n = 0;
    for_each([&](Parameter<T>& p) { n += p.value.size(); });
    return n;
  }
};

/// Glorot-uniform matrices, zero biases, unit norm gains, null tokens from
/// N(0, 0.02^2). Only active modalities get a machine.
template <std::floating_point T>
ComputerParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ComputerParams<T> p;
  if (cfg.flags.use_vis) p.vis = ModalityMachineParams<T>::init(rng, cfg, "vis");
  if (cfg.flags.use_key) p.key = ModalityMachineParams<T>::init(rng, cfg, "key");
  p.aggregator = Mlp<T>::init(rng, cfg.flags.modality_count() * cfg.dim, cfg.hidden,
                              cfg.classes, "aggregator", "aggregator");
  if (cfg.raw_keypoints && cfg.flags.use_key)
    p.embedder = Mlp<T>::init(rng, kKeypointWidth, cfg.kp_hidden, cfg.dim, "kp_embed",
                              "keypoint_embedder");
  return p;
}

/// Closed form of ComputerParams::count():
///   stack   = L (3 D^2 + 2 D)
///   hub     = (3 or 1 shared) stack + 3 D^2 + 3 D
///   machine = depth * 2 hub, one per active modality
///   aggr    = m D H + H + H C + C            (m active modalities)
///   embed   = 51 Hk + Hk + Hk D + D          (raw keypoints only)
inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.dim, l = c.hub.attn.layers;
  const std::size_t stack = l * (3 * d * d + 2 * d);
  const std::size_t hub = (c.hub.share_channels ? 1 : 3) * stack + 3 * d * d + 3 * d;
  const std::size_t m = c.flags.modality_count();
  std::size_t n = m * c.depth * 2 * hub;
  n += m * d * c.hidden + c.hidden + c.hidden * c.classes + c.classes;
  if (c.raw_keypoints && c.flags.use_key)
    n += kKeypointWidth * c.kp_hidden + c.kp_hidden + c.kp_hidden * c.dim + c.dim;
  return n;
}

/// Feature banks of one video. Actor banks are T x N x D (actor order is
/// the identity and is the same in every clip); raw keypoints are T x N x 51.
template <std::floating_point T>
struct VideoFeatures {
  ClipFeatures<T> context;
  ClipFeatures<T> vis;
  Tensor<T> key;
  std::optional<ClipFeatures<T>> key_tokens;  // when key is T x N x D
  ClipFeatures<T> merged_vis;                 // actors first, then context
  std::optional<ClipFeatures<T>> merged_key;

  VideoFeatures() = default;
  VideoFeatures(Tensor<T> context_tokens, Tensor<T> vis_tokens, Tensor<T> key_in)
      : context(std::move(context_tokens)), vis(std::move(vis_tokens)), key(std::move(key_in)) {
    if (key.rank() != 3 || key.dim(0) != vis.clips() || key.dim(1) != vis.tokens())
      throw DimensionError("video: keypoint bank " + shape_str(key.shape()) +
                           " does not match actor bank " +
                           shape_str(vis.tokens_tensor().shape()));
    if (context.clips() != vis.clips() || context.dim() != vis.dim())
      throw DimensionError("video: context " + shape_str(context.tokens_tensor().shape()) +
                           " vs actors " + shape_str(vis.tokens_tensor().shape()));
    if (vis.tokens() == 0) throw DimensionError("video: no actors");
    merged_vis = merge_tokens(vis, context);
    if (key.dim(2) == vis.dim()) {
      key_tokens = ClipFeatures<T>(key);
      merged_key = merge_tokens(*key_tokens, context);
    }
  }

  std::size_t clips() const { return vis.clips(); }
  std::size_t actors() const { return vis.tokens(); }
  std::size_t dim() const { return vis.dim(); }
};

namespace detail {

template <std::floating_point T>
const ClipFeatures<T>& hh_bank(const VideoFeatures<T>& v, Modality m, const ModelConfig& cfg,
                               bool merged) {
  const bool matched = m == Modality::key && cfg.hh_key_memory() == HhMemory::matched;
  if (!matched) return merged ? v.merged_vis : v.vis;
  if (!v.key_tokens)
    throw ConfigError("model: modality-matched HH memory needs pre-embedded keypoint features");
  return merged ? *v.merged_key : *v.key_tokens;
}

}  // namespace detail

/// Refines the queries of all actors of clip t (one row per actor, in actor
/// order) through the modality's stages.
template <std::floating_point T>
Var<T> refine_clip(const Var<T>& queries, std::size_t t, const VideoFeatures<T>& video,
                   ModalityMachineParams<T>& p, const ModelConfig& cfg, Modality m) {
  const auto& f = cfg.flags;
  const MemoryOptions opts{.select = f.use_selection, .temporal = f.use_temporal};
  const std::size_t n = queries.rows();
  if (n != video.actors())
    throw DimensionError("model: " + std::to_string(n) + " queries for " +
                         std::to_string(video.actors()) + " actors");
  Var<T> q = queries;
  for (auto& stage : p.stages) {
    if (!f.use_hierarchy) {
      const auto& bank = detail::hh_bank(video, m, cfg, true);
      std::vector<Var<T>> rows;
      for (std::size_t i = 0; i < n; ++i) {
        MemoryOptions o = opts;
        o.exclude_token = i;
        rows.push_back(hub_forward(slice_rows(q, i, 1), build_memory(bank, t, cfg.sel, o),
                                   stage.hc, cfg.hub));
      }
      q = concat_rows(std::span<const Var<T>>(rows));
      continue;
    }
    if (f.use_hh) {
      const auto& bank = detail::hh_bank(video, m, cfg, false);
      std::vector<Var<T>> rows;
      for (std::size_t i = 0; i < n; ++i)
        rows.push_back(hh_hub(slice_rows(q, i, 1), i, t, bank, cfg.sel, stage.hh, cfg.hub, opts));
      q = concat_rows(std::span<const Var<T>>(rows));
    }
    if (f.use_hc) q = hc_hub(q, t, video.context, cfg.sel, stage.hc, cfg.hub, opts);
  }
  return q;
}

/// One actor's refined query: the composition of HH and HC stages.
template <std::floating_point T>
Var<T> modality_forward(const Var<T>& q, std::size_t actor, std::size_t t,
                        const VideoFeatures<T>& video, ModalityMachineParams<T>& p,
                        const ModelConfig& cfg, Modality m) {
  const auto& f = cfg.flags;
  const MemoryOptions opts{.select = f.use_selection, .temporal = f.use_temporal};
  Var<T> x = q;
  for (auto& stage : p.stages) {
    if (!f.use_hierarchy) {
      MemoryOptions o = opts;
      o.exclude_token = actor;
      x = hub_forward(x, build_memory(detail::hh_bank(video, m, cfg, true), t, cfg.sel, o),
                      stage.hc, cfg.hub);
      continue;
    }
    if (f.use_hh)
      x = hh_hub(x, actor, t, detail::hh_bank(video, m, cfg, false), cfg.sel, stage.hh, cfg.hub,
                 opts);
    if (f.use_hc) x = hc_hub(x, t, video.context, cfg.sel, stage.hc, cfg.hub, opts);
  }
  return x;
}

/// Flattens 17 x 3 keypoints per row into the embedder; coordinates outside
/// [0, 1] are clamped with a tape warning.
template <std::floating_point T>
Var<T> embed_keypoints(Tape<T>& tape, Tensor<T> kp, Mlp<T>& embedder) {
  if (kp.rank() == 2 && kp.rows() == kKeypoints && kp.cols() == 3)
    kp = kp.reshaped({1, kKeypointWidth});
  if (kp.rank() != 2 || kp.cols() != kKeypointWidth)
    throw DimensionError("embed_keypoints: expected 17 x 3 or n x 51, got " +
                         shape_str(kp.shape()));
  bool clamped = false;
  for (auto& v : kp.data()) {
    const T c = std::clamp(v, T(0), T(1));
    if (c != v || std::isnan(v)) {
      clamped = true;
      v = std::isnan(v) ? T(0) : c;
    }
  }
  if (clamped) tape.warn("embed_keypoints: coordinates outside [0, 1] clamped");
  return embedder.forward(tape.constant(std::move(kp)));
}

/// Refined rows of all actors at all clips, row t * N + i.
template <std::floating_point T>
struct VideoForward {
  std::optional<Var<T>> vis, key;
  Var<T> scores;  // STAL: (T N) x C in (0,1); GAR: 1 x C on the simplex
};

template <std::floating_point T>
Var<T> modality_queries(Tape<T>& tape, const VideoFeatures<T>& v, ComputerParams<T>& p,
                        Modality m) {
  if (m == Modality::vis)
    return tape.constant(v.vis.tokens_tensor().reshaped({v.clips() * v.actors(), v.dim()}));
  const std::size_t rows = v.clips() * v.actors();
  if (p.embedder) return embed_keypoints(tape, v.key.reshaped({rows, v.key.dim(2)}), *p.embedder);
  if (v.key.dim(2) != v.dim())
    throw DimensionError("model: keypoint features " + shape_str(v.key.shape()) +
                         " need the embedder");
  return tape.constant(v.key.reshaped({rows, v.dim()}));
}

template <std::floating_point T>
Var<T> refine_video(Tape<T>& tape, const VideoFeatures<T>& v, ComputerParams<T>& p,
                    const ModelConfig& cfg, Modality m) {
  Var<T> q = modality_queries(tape, v, p, m);
  const std::size_t n = v.actors();
  std::vector<Var<T>> clips;
  for (std::size_t t = 0; t < v.clips(); ++t)
    clips.push_back(refine_clip(slice_rows(q, t * n, n), t, v, p.machine(m), cfg, m));
  return concat_rows(std::span<const Var<T>>(clips));
}

/// Aggregator head over refined rows: STAL scores every row with sigmoids,
/// GAR averages rows over actors and time and applies a softmax.
template <std::floating_point T>
Var<T> predict_from_refined(const std::optional<Var<T>>& vis, const std::optional<Var<T>>& key,
                            ComputerParams<T>& p, TaskMode mode) {
  if (!vis && !key) throw ConfigError("predict: no modality output");
  const Var<T>& any = vis ? *vis : *key;
  if (any.rows() == 0) throw DimensionError("predict: empty actor set");
  auto pool = [&](const Var<T>& x) { return mode == TaskMode::gar ? mean_rows(x) : x; };
  Var<T> fused = vis && key ? concat_cols<T>({pool(*vis), pool(*key)}) : pool(any);
  Var<T> logits = p.aggregator.forward(fused);
  return mode == TaskMode::gar ? row_softmax(logits) : sigmoid(logits);
}

template <std::floating_point T>
VideoForward<T> forward_video(Tape<T>& tape, const VideoFeatures<T>& v, ComputerParams<T>& p,
                              const ModelConfig& cfg) {
  if (v.dim() != cfg.dim)
    throw DimensionError("model: video features have D = " + std::to_string(v.dim()) +
                         ", config D = " + std::to_string(cfg.dim));
  VideoForward<T> out;
  if (cfg.flags.use_vis) out.vis = refine_video(tape, v, p, cfg, Modality::vis);
  if (cfg.flags.use_key) out.key = refine_video(tape, v, p, cfg, Modality::key);
  out.scores = predict_from_refined(out.vis, out.key, p, cfg.mode);
  return out;
}

}  // namespace computer
