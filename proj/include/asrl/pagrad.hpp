#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "asrl/augment.hpp"
#include "asrl/distill.hpp"
#include "asrl/error.hpp"
#include "asrl/params.hpp"
#include "asrl/ppo.hpp"

namespace asrl {

inline constexpr double kPagradDegenerateNorm = 1e-12;

// g_main + g_aux - min(0, <g_aux, g_main>) / |g_main|^2 * g_main.
// A vanishing g_main leaves the sum unprojected.
template <typename T>
std::vector<T> pagrad_combine(std::span<const T> g_main, std::span<const T> g_aux) {
  if (g_main.size() != g_aux.size()) throw ShapeError("pagrad_combine: length mismatch");
  double dot = 0.0, norm2 = 0.0;
  for (std::size_t i = 0; i < g_main.size(); ++i) {
    dot += static_cast<double>(g_aux[i]) * g_main[i];
    norm2 += static_cast<double>(g_main[i]) * g_main[i];
  }
  std::vector<T> out(g_main.size());
  if (dot >= 0.0 || std::sqrt(norm2) < kPagradDegenerateNorm) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_main[i] + g_aux[i];
    return out;
  }
  const double k = dot / norm2;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(static_cast<double>(g_main[i]) + g_aux[i] - k * g_main[i]);
  return out;
}

template <typename T>
std::vector<T> pagrad_combine(const std::vector<T>& g_main, const std::vector<T>& g_aux) {
  return pagrad_combine(std::span<const T>(g_main), std::span<const T>(g_aux));
}

template <typename T>
Gradient<T> pagrad_combine(const Gradient<T>& g_main, const Gradient<T>& g_aux) {
  if (!g_main.congruent(g_aux)) throw ShapeError("pagrad_combine: gradient shapes differ");
  Gradient<T> out(g_main.n_actions());
  out.vec() = pagrad_combine(g_main.flat(), g_aux.flat());
  return out;
}

// DrAC: grad(L_PPO) + alpha_r * grad(drac_term), optionally PAGrad-projected.
inline GradCombiner drac_combiner(AugKind kind, double alpha_r, bool project, const AugParams& aug = {}) {
  return [=](const ParamSet<float>& params, std::span<const ImageTensor> obs, Gradient<float> g, std::uint64_t seed) {
    auto [terms, aux] = drac_term(params, kind, seed, obs, aug);
    aux *= static_cast<float>(alpha_r);
    if (project) return pagrad_combine(g, aux);
    g += aux;
    return g;
  };
}

}  // namespace asrl
