#pragma once

// Scaled dot-product attention of a query against a key-value memory, and the
// stacked (attend -> residual -> layer norm) refinement used in every HUB
// channel.

#include <cmath>
#include <string>
#include <vector>

#include "computer/autodiff.hpp"
#include "computer/init.hpp"

namespace computer {

struct AttentionConfig {
  std::size_t layers = 2;
  std::size_t heads = 1;
  bool residual = true;
  bool norm = true;
};

/// Projections of one attention layer; all D x D.
template <std::floating_point T>
struct AttnParams {
  Parameter<T> wq, wk, wv;

  static AttnParams init(Rng& rng, std::size_t d, const std::string& prefix) {
    return {{prefix + ".wq", "attn.wq", init::glorot_uniform<T>(rng, d, d)},
            {prefix + ".wk", "attn.wk", init::glorot_uniform<T>(rng, d, d)},
            {prefix + ".wv", "attn.wv", init::glorot_uniform<T>(rng, d, d)}};
  }

  std::size_t dim() const { return wq.value.rows(); }

  template <class F>
  void for_each(F&& f) {
    f(wq);
    f(wk);
    f(wv);
  }
};

template <std::floating_point T>
struct AttnLayerParams {
  AttnParams<T> attn;
  Parameter<T> gain, bias;
};

template <std::floating_point T>
struct AttnStackParams {
  std::vector<AttnLayerParams<T>> layers;

  static AttnStackParams init(Rng& rng, std::size_t d, std::size_t depth,
                              const std::string& prefix) {
    AttnStackParams s;
    for (std::size_t l = 0; l < depth; ++l) {
      const std::string p = prefix + ".l" + std::to_string(l);
      auto attn = AttnParams<T>::init(rng, d, p);
      s.layers.push_back(
          {std::move(attn),
           {p + ".ln_gain", "attn.norm", init::constant<T>(1, d, T(1))},
           {p + ".ln_bias", "attn.norm", init::constant<T>(1, d, T(0))}});
    }
    return s;
  }

  template <class F>
  void for_each(F&& f) {
    for (auto& l : layers) {
      l.attn.for_each(f);
      f(l.gain);
      f(l.bias);
    }
  }
};

/// Output of attend together with the attention weights (n x M per head,
/// heads stacked along rows).
template <std::floating_point T>
struct Attended {
  Var<T> out;
  Var<T> weights;
};

/// softmax((q Wq)(K Wk)^T / sqrt(d)) (V Wv) for each of the n query rows.
/// With h heads the projections split into h column blocks of width D/h,
/// each scaled by sqrt(D/h), and the head outputs are concatenated.
template <std::floating_point T>
Attended<T> attend_with_weights(const Var<T>& q, const Var<T>& keys,
                                const Var<T>& values, AttnParams<T>& p,
                                std::size_t heads = 1) {
  auto& tape = q.tape();
  const std::size_t d = p.dim();
  if (keys.rows() == 0)
    throw DimensionError("attend: empty memory (M = 0); substitute a null token");
  if (keys.rows() != values.rows())
    throw DimensionError("attend: keys have " + std::to_string(keys.rows()) +
                         " rows, values " + std::to_string(values.rows()));
  if (q.cols() != d || keys.cols() != d || values.cols() != d)
    throw DimensionError("attend: width mismatch, query " +
                         shape_str(q.value().shape()) + ", keys " +
                         shape_str(keys.value().shape()) + ", values " +
                         shape_str(values.value().shape()) + ", D = " +
                         std::to_string(d));
  if (heads == 0 || d % heads != 0)
    throw DimensionError("attend: D = " + std::to_string(d) +
                         " not divisible by heads = " + std::to_string(heads));

  Var<T> qp = matmul(q, tape.parameter(p.wq));
  Var<T> kp = matmul(keys, tape.parameter(p.wk));
  Var<T> vp = matmul(values, tape.parameter(p.wv));
  if (heads == 1) {
    Var<T> scores = scale(matmul_bt(qp, kp), T(1) / std::sqrt(static_cast<T>(d)));
    Var<T> w = row_softmax(scores);
    return {matmul(w, vp), w};
  }
  const std::size_t dh = d / heads;
  std::vector<Var<T>> outs, ws;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(qp, h * dh, dh);
    Var<T> kh = slice_cols(kp, h * dh, dh);
    Var<T> vh = slice_cols(vp, h * dh, dh);
    Var<T> w = row_softmax(
        scale(matmul_bt(qh, kh), T(1) / std::sqrt(static_cast<T>(dh))));
    outs.push_back(matmul(w, vh));
    ws.push_back(w);
  }
  return {concat_cols(std::span<const Var<T>>(outs)),
          concat_rows(std::span<const Var<T>>(ws))};
}

template <std::floating_point T>
Var<T> attend(const Var<T>& q, const Var<T>& keys, const Var<T>& values,
              AttnParams<T>& p, std::size_t heads = 1) {
  return attend_with_weights(q, keys, values, p, heads).out;
}

/// Refines the query layer by layer against the same memory:
/// x <- norm(x + attend(x, K, V)).
template <std::floating_point T>
Var<T> attend_stack(const Var<T>& q, const Var<T>& keys, const Var<T>& values,
                    AttnStackParams<T>& p, const AttentionConfig& cfg) {
  if (p.layers.empty()) throw ConfigError("attend_stack: no layers");
  auto& tape = q.tape();
  Var<T> x = q;
  for (auto& layer : p.layers) {
    Var<T> a = attend(x, keys, values, layer.attn, cfg.heads);
    if (cfg.residual) a = add(x, a);
    if (cfg.norm)
      a = layer_norm(a, tape.parameter(layer.gain), tape.parameter(layer.bias));
    x = a;
  }
  return x;
}

}  // namespace computer
