#pragma once

// HUman-centric query Block: an actor query attends over past / current /
// future key-value memories, one attention stack per channel, and the three
// channel outputs are concatenated and mapped back to D by W_a.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "computer/attention.hpp"

namespace computer {

/// Per-video token bank X (T clips x S tokens x D) with its per-clip mean.
template <std::floating_point T>
class ClipFeatures {
 public:
  ClipFeatures() = default;

  explicit ClipFeatures(Tensor<T> x) : x_(std::move(x)) {
    if (x_.rank() != 3)
      throw DimensionError("ClipFeatures: expected T x S x D, got " +
                           shape_str(x_.shape()));
    const std::size_t nt = x_.dim(0), s = x_.dim(1), d = x_.dim(2);
    summary_ = Tensor<T>({nt, d});
    for (std::size_t t = 0; t < nt; ++t) {
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < d; ++j) summary_(t, j) += x_(t, i, j);
      if (s > 0)
        for (std::size_t j = 0; j < d; ++j) summary_(t, j) /= static_cast<T>(s);
    }
  }

  std::size_t clips() const { return x_.dim(0); }
  std::size_t tokens() const { return x_.dim(1); }
  std::size_t dim() const { return x_.dim(2); }
  const Tensor<T>& tokens_tensor() const { return x_; }
  const Tensor<T>& summary() const { return summary_; }

  /// Token rows of clip t, optionally without one row.
  Tensor<T> clip(std::size_t t, std::optional<std::size_t> skip = {}) const {
    const std::size_t s = tokens(), d = dim();
    std::vector<T> rows;
    rows.reserve(s * d);
    for (std::size_t i = 0; i < s; ++i) {
      if (skip && *skip == i) continue;
      auto begin = x_.data().begin() + static_cast<std::ptrdiff_t>((t * s + i) * d);
      rows.insert(rows.end(), begin, begin + static_cast<std::ptrdiff_t>(d));
    }
    const std::size_t m = rows.size() / std::max<std::size_t>(d, 1);
    if (m == 0) return {};
    return Tensor<T>({m, d}, std::move(rows));
  }

 private:
  Tensor<T> x_;
  Tensor<T> summary_;
};

/// Token-wise concatenation of two banks with the same T and D.
template <std::floating_point T>
ClipFeatures<T> merge_tokens(const ClipFeatures<T>& a, const ClipFeatures<T>& b) {
  if (a.clips() != b.clips() || a.dim() != b.dim())
    throw DimensionError("merge_tokens: banks disagree on T or D");
  const std::size_t nt = a.clips(), sa = a.tokens(), sb = b.tokens(), d = a.dim();
  Tensor<T> x({nt, sa + sb, d});
  for (std::size_t t = 0; t < nt; ++t) {
    for (std::size_t i = 0; i < sa; ++i)
      for (std::size_t j = 0; j < d; ++j) x(t, i, j) = a.tokens_tensor()(t, i, j);
    for (std::size_t i = 0; i < sb; ++i)
      for (std::size_t j = 0; j < d; ++j) x(t, sa + i, j) = b.tokens_tensor()(t, i, j);
  }
  return ClipFeatures<T>(std::move(x));
}

enum class Modality { vis, key };

inline const char* modality_name(Modality m) {
  return m == Modality::vis ? "vis" : "key";
}

template <std::floating_point T>
struct ActorQuery {
  Tensor<T> vec;  // 1 x D
  std::size_t actor_id = 0;
  std::size_t time = 0;
  Modality modality = Modality::vis;
};

struct SelectionConfig {
  std::size_t w = 2;
  std::size_t k = 1;

  void validate() const {
    if (k < 1 || k > w)
      throw ConfigError("selection: need 1 <= k <= w, got k = " +
                        std::to_string(k) + ", w = " + std::to_string(w));
  }
};

struct ClipSelection {
  std::vector<std::size_t> past;
  std::vector<std::size_t> future;
};

/// Top-k clips on each side of t within the window, ranked by cosine of clip
/// summaries to clip t, ties by temporal distance then index; each side is
/// returned in temporal order.
template <std::floating_point T>
ClipSelection select_clips(const ClipFeatures<T>& f, std::size_t t,
                           const SelectionConfig& cfg) {
  cfg.validate();
  if (t >= f.clips())
    throw DimensionError("select_clips: t = " + std::to_string(t) +
                         " outside [0, " + std::to_string(f.clips()) + ")");
  const auto anchor = f.summary().row_span(t);
  auto pick = [&](std::size_t lo, std::size_t hi) {  // candidates [lo, hi)
    struct Cand {
      T sim;
      std::size_t dist, idx;
    };
    std::vector<Cand> c;
    for (std::size_t i = lo; i < hi; ++i)
      c.push_back({cosine_sim<T>(f.summary().row_span(i), anchor).value,
                   i > t ? i - t : t - i, i});
    const std::size_t keep = std::min(cfg.k, c.size());
    std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(keep),
                      c.end(), [](const Cand& a, const Cand& b) {
                        if (a.sim != b.sim) return a.sim > b.sim;
                        if (a.dist != b.dist) return a.dist < b.dist;
                        return a.idx < b.idx;
                      });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < keep; ++i) out.push_back(c[i].idx);
    std::sort(out.begin(), out.end());
    return out;
  };
  ClipSelection s;
  s.past = pick(t >= cfg.w ? t - cfg.w : 0, t);
  s.future = pick(t + 1, std::min(f.clips(), t + cfg.w + 1));
  return s;
}

/// Raw memory rows of one channel. An empty channel is served by the HUB's
/// learned null token. With clip selection each side is one segment holding
/// the selected clips' rows; without it every clip in the window is its own
/// segment and the channel output is the mean over segments.
template <std::floating_point T>
struct MemoryChannel {
  std::vector<Tensor<T>> segments;
  std::vector<std::size_t> clips;

  bool empty() const { return segments.empty(); }
  std::size_t rows() const {
    std::size_t r = 0;
    for (const auto& s : segments) r += s.rows();
    return r;
  }
  bool operator==(const MemoryChannel&) const = default;
};

template <std::floating_point T>
struct TemporalMemory {
  MemoryChannel<T> past, current, future;

  const MemoryChannel<T>& channel(std::size_t c) const {
    return c == 0 ? past : c == 1 ? current : future;
  }
  bool operator==(const TemporalMemory&) const = default;
};

struct MemoryOptions {
  /// Top-k clip selection; false puts every clip of the window in memory,
  /// one segment per clip.
  bool select = true;
  /// False leaves past and future empty (null tokens).
  bool temporal = true;
  /// Token row of the current clip to leave out (the query actor itself).
  std::optional<std::size_t> exclude_token{};
};

template <std::floating_point T>
TemporalMemory<T> build_memory(const ClipFeatures<T>& f, std::size_t t,
                               const SelectionConfig& cfg,
                               const MemoryOptions& opts = {}) {
  TemporalMemory<T> mem;
  Tensor<T> cur = f.clip(t, opts.exclude_token);
  if (!cur.empty()) {
    mem.current.segments.push_back(std::move(cur));
    mem.current.clips.push_back(t);
  }
  if (!opts.temporal) return mem;

  auto fill = [&](MemoryChannel<T>& ch, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return;
    ch.clips = idx;
    if (!opts.select) {
      for (auto i : idx) ch.segments.push_back(f.clip(i));
      return;
    }
    const std::size_t d = f.dim();
    std::vector<T> rows;
    for (auto i : idx) {
      Tensor<T> c = f.clip(i);
      rows.insert(rows.end(), c.data().begin(), c.data().end());
    }
    const std::size_t m = rows.size() / d;
    ch.segments.push_back(Tensor<T>({m, d}, std::move(rows)));
  };

  if (opts.select) {
    const ClipSelection s = select_clips(f, t, cfg);
    fill(mem.past, s.past);
    fill(mem.future, s.future);
  } else {
    cfg.validate();
    std::vector<std::size_t> past, future;
    for (std::size_t i = t >= cfg.w ? t - cfg.w : 0; i < t; ++i) past.push_back(i);
    for (std::size_t i = t + 1; i < std::min(f.clips(), t + cfg.w + 1); ++i)
      future.push_back(i);
    fill(mem.past, past);
    fill(mem.future, future);
  }
  return mem;
}

struct HubConfig {
  AttentionConfig attn;
  /// One attention stack for all three channels instead of one per channel.
  bool share_channels = false;
};

inline constexpr std::array<const char*, 3> kChannelNames{"past", "current",
                                                          "future"};

template <std::floating_point T>
struct HubParams {
  std::vector<AttnStackParams<T>> stacks;  // 3, or 1 when shared
  Parameter<T> wa;                         // 3D x D
  std::array<Parameter<T>, 3> null_tokens;

  static HubParams init(Rng& rng, std::size_t d, const HubConfig& cfg,
                        const std::string& prefix) {
    std::vector<AttnStackParams<T>> stacks;
    const std::size_t n = cfg.share_channels ? 1 : 3;
    for (std::size_t c = 0; c < n; ++c)
      stacks.push_back(AttnStackParams<T>::init(
          rng, d, cfg.attn.layers,
          prefix + "." + (cfg.share_channels ? "shared" : kChannelNames[c])));
    Parameter<T> wa{prefix + ".wa", "hub.wa",
                    init::glorot_uniform<T>(rng, 3 * d, d)};
    auto null = [&](std::size_t c) {
      return Parameter<T>{prefix + ".null_" + kChannelNames[c], "null_tokens",
                          init::normal<T>(rng, 1, d, 0.02)};
    };
    return {std::move(stacks), std::move(wa), {null(0), null(1), null(2)}};
  }

  std::size_t dim() const { return wa.value.cols(); }

  AttnStackParams<T>& stack(std::size_t channel) {
    return stacks.size() == 1 ? stacks[0] : stacks[channel];
  }

  template <class F>
  void for_each(F&& f) {
    for (auto& s : stacks) s.for_each(f);
    f(wa);
    for (auto& n : null_tokens) f(n);
  }
};

/// Output of one channel: mean over its segments of attend_stack(q, segment).
template <std::floating_point T>
Var<T> channel_forward(const Var<T>& q, const MemoryChannel<T>& ch,
                       std::size_t c, HubParams<T>& p, const HubConfig& cfg) {
  auto& tape = q.tape();
  if (ch.empty()) {
    Var<T> null = tape.parameter(p.null_tokens[c]);
    return attend_stack(q, null, null, p.stack(c), cfg.attn);
  }
  std::vector<Var<T>> outs;
  outs.reserve(ch.segments.size());
  for (const auto& seg : ch.segments) {
    Var<T> m = tape.constant(seg);
    outs.push_back(attend_stack(q, m, m, p.stack(c), cfg.attn));
  }
  return average(std::span<const Var<T>>(outs));
}

/// [Attn(q, past), Attn(q, current), Attn(q, future)] W_a for each query row.
template <std::floating_point T>
Var<T> hub_forward(const Var<T>& q, const TemporalMemory<T>& mem,
                   HubParams<T>& p, const HubConfig& cfg) {
  if (q.cols() != p.dim())
    throw DimensionError("hub_forward: query " + shape_str(q.value().shape()) +
                         " vs D = " + std::to_string(p.dim()));
  std::array<Var<T>, 3> outs;
  for (std::size_t c = 0; c < 3; ++c)
    outs[c] = channel_forward(q, mem.channel(c), c, p, cfg);
  return matmul(concat_cols(std::span<const Var<T>>(outs)),
                q.tape().parameter(p.wa));
}

/// Human-human HUB: memories are the other actors' tokens; the query actor's
/// own row is dropped from the current clip only.
template <std::floating_point T>
Var<T> hh_hub(const Var<T>& q, std::size_t actor, std::size_t t,
              const ClipFeatures<T>& humans, const SelectionConfig& sel,
              HubParams<T>& p, const HubConfig& cfg, MemoryOptions opts = {}) {
  opts.exclude_token = actor;
  return hub_forward(q, build_memory(humans, t, sel, opts), p, cfg);
}

/// Human-context HUB: memories are the context grid tokens, no exclusion.
/// The query may carry several actors (one per row) of the same clip.
template <std::floating_point T>
Var<T> hc_hub(const Var<T>& q, std::size_t t, const ClipFeatures<T>& context,
              const SelectionConfig& sel, HubParams<T>& p, const HubConfig& cfg,
              MemoryOptions opts = {}) {
  opts.exclude_token.reset();
  return hub_forward(q, build_memory(context, t, sel, opts), p, cfg);
}

}  // namespace computer
