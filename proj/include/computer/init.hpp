#pragma once

#include <cmath>

#include "computer/rng.hpp"
#include "computer/tensor.hpp"

namespace computer::init {

/// Glorot/Xavier uniform bound sqrt(6 / (fan_in + fan_out)).
inline double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <std::floating_point T>
Tensor<T> glorot_uniform(Rng& rng, std::size_t rows, std::size_t cols) {
  const double b = glorot_bound(rows, cols);
  Tensor<T> t({rows, cols});
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-b, b));
  return t;
}

template <std::floating_point T>
Tensor<T> normal(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor<T> t({rows, cols});
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <std::floating_point T>
Tensor<T> constant(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>({rows, cols}, value);
}

}  // namespace computer::init
