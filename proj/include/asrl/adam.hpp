#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "asrl/error.hpp"
#include "asrl/params.hpp"

namespace asrl {

template <typename T>
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
  explicit AdamState(const ParamSet<T>& like) : AdamState(like.size()) {}
};

// Bias-corrected Adam on a flat parameter vector, in place. The moments are
// kept in double.
template <typename T>
void adam_update(std::span<T> p, std::span<const T> g, AdamState<T>& state, double lr) {
  if (!(lr >= 0.0)) throw Error("adam_step: lr must be non-negative");
  if (p.size() != g.size()) throw ShapeError("adam_step: gradient shape mismatch");
  if (!std::all_of(g.begin(), g.end(), [](T x) { return std::isfinite(static_cast<double>(x)); }))
    throw UpdateRejected("adam_step: non-finite gradient");
  if (state.m.size() != p.size()) state = AdamState<T>(p.size());

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

template <typename T>
void adam_step(ParamSet<T>& params, const Gradient<T>& grad, AdamState<T>& state, double lr) {
  if (!params.congruent(grad)) throw ShapeError("adam_step: gradient shape mismatch");
  adam_update(params.flat(), grad.flat(), state, lr);
}

}  // namespace asrl
