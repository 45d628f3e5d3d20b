#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "computer/autodiff.hpp"

namespace computer {

/// Builds a scalar objective on the given tape, binding its parameters with
/// Tape::parameter(). Must be deterministic for fixed parameter values.
template <std::floating_point T>
using Objective = std::function<Var<T>(Tape<T>&)>;

template <std::floating_point T>
struct ParamCheck {
  std::string name;
  std::string group;
  T max_rel_err = 0;
  T max_abs_err = 0;
};

template <std::floating_point T>
struct GradCheckReport {
  std::vector<ParamCheck<T>> params;

  T max_rel_err() const {
    T m = 0;
    for (const auto& p : params) m = std::max(m, p.max_rel_err);
    return m;
  }

  /// Worst relative error per parameter group, groups in first-seen order.
  std::vector<std::pair<std::string, T>> by_group() const {
    std::vector<std::pair<std::string, T>> out;
    for (const auto& p : params) {
      auto it = std::find_if(out.begin(), out.end(),
                             [&](const auto& e) { return e.first == p.group; });
      if (it == out.end())
        out.emplace_back(p.group, p.max_rel_err);
      else
        it->second = std::max(it->second, p.max_rel_err);
    }
    return out;
  }
};

/// Relative error with the denominator floored at 1e-8.
template <std::floating_point T>
T relative_error(T analytic, T numeric) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
  return std::abs(analytic - numeric) / denom;
}

/// Evaluates f without recording gradients.
template <std::floating_point T>
T evaluate(const Objective<T>& f) {
  TapeOptions opts;
  opts.grad_enabled = false;
  opts.check_finite = false;
  Tape<T> tape(opts);
  const T v = f(tape).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return v;
}

/// Central-difference derivative of the objective along element i of
/// parameter k.
template <std::floating_point T>
using NumericDerivative = std::function<T(std::size_t k, std::size_t i, T eps)>;

/// Compares reverse-mode gradients of f with central differences
/// (f(p + eps) - f(p - eps)) / (2 eps), element by element. `numeric`, when
/// given, supplies the difference quotient instead, e.g. from the same
/// objective evaluated at higher precision.
/// Parameter gradients are left holding the analytic values.
template <std::floating_point T>
GradCheckReport<T> grad_check(const Objective<T>& f,
                              std::span<Parameter<T>* const> params, T eps,
                              TapeOptions opts = {}, NumericDerivative<T> numeric = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape(opts);
    Var<T> root = f(tape);
    if (!std::isfinite(root.item()))
      throw NumericError("grad_check: objective is not finite");
    tape.backward(root);
  }
  if (!numeric)
    numeric = [&](std::size_t k, std::size_t i, T h) {
      auto* p = params[k];
      const T saved = p->value[i];
      p->value[i] = saved + h;
      const T fp = evaluate(f);
      p->value[i] = saved - h;
      const T fm = evaluate(f);
      p->value[i] = saved;
      return (fp - fm) / (T(2) * h);
    };
  GradCheckReport<T> report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* p = params[k];
    ParamCheck<T> pc{p->name, p->group};
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T num = numeric(k, i, eps);
      const T analytic = p->grad[i];
      pc.max_rel_err = std::max(pc.max_rel_err, relative_error(analytic, num));
      pc.max_abs_err = std::max(pc.max_abs_err, std::abs(analytic - num));
    }
    report.params.push_back(std::move(pc));
  }
  return report;
}

}  // namespace computer
