#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "asrl/adam.hpp"
#include "asrl/augment.hpp"
#include "asrl/error.hpp"
#include "asrl/network.hpp"
#include "asrl/params.hpp"
#include "asrl/ppo.hpp"
#include "asrl/rng.hpp"
#include "asrl/serialize.hpp"

namespace asrl {

// Frozen teacher outputs on one original (unaugmented) observation.
struct DistillTarget {
  ImageTensor obs;
  std::vector<double> teacher_probs;
  double teacher_value = 0.0;
};

struct DistillBuffer {
  std::vector<DistillTarget> targets;
  std::size_t capacity = 0;

  std::size_t size() const { return targets.size(); }
  bool empty() const { return targets.empty(); }
  int n_actions() const { return targets.empty() ? 0 : static_cast<int>(targets.front().teacher_probs.size()); }
};

template <typename T>
DistillBuffer snapshot_targets(const ParamSet<T>& params_old, std::span<const ImageTensor> observations) {
  if (observations.empty()) throw Error("snapshot_targets: no observations");
  DistillBuffer buf;
  buf.capacity = observations.size();
  buf.targets.reserve(observations.size());
  const auto out = forward(params_old, observations);
  for (std::size_t i = 0; i < observations.size(); ++i)
    buf.targets.push_back({observations[i], out[i].probs, out[i].value});
  return buf;
}

template <typename T>
DistillBuffer snapshot_targets(const ParamSet<T>& params_old, const std::vector<ImageTensor>& observations) {
  return snapshot_targets(params_old, std::span<const ImageTensor>(observations));
}

// KL(p || q) in nats for two distributions given q's log-probabilities.
inline double kl_divergence(std::span<const double> p, std::span<const double> log_q) {
  double kl = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a)
    if (p[a] > 0.0) kl += p[a] * (std::log(p[a]) - log_q[a]);
  return kl;
}

struct DistillLoss {
  double loss = 0.0;
  double kl = 0.0;
  double value = 0.0;  // mean squared value deviation, 0 when the term is off
};

// mean KL(teacher || pi(phi(o))) + [include_value] mean (V_teacher - V(phi(o)))^2
template <typename T>
std::pair<DistillLoss, Gradient<T>> dis_loss(const ParamSet<T>& params, AugKind kind, std::uint64_t seed,
                                             std::span<const DistillTarget> targets, bool include_value,
                                             const AugParams& aug = {}) {
  if (targets.empty()) throw Error("dis_loss: no targets");
  const int B = static_cast<int>(targets.size());
  const int A = params.n_actions();
  std::vector<ImageTensor> obs;
  obs.reserve(B);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (static_cast<int>(targets[i].teacher_probs.size()) != A) throw ShapeError("dis_loss: teacher action count");
    obs.push_back(kind == AugKind::Identity ? targets[i].obs : apply_one(kind, seed, i, targets[i].obs, aug));
  }
  ForwardCache<T> cache;
  const auto out = forward(params, obs, &cache);
  DistillLoss terms;
  std::vector<OutputGrad> grads(B);
  const double inv = 1.0 / B;
  for (int i = 0; i < B; ++i) {
    const auto& p = targets[i].teacher_probs;
    terms.kl += kl_divergence(p, out[i].log_probs) * inv;
    grads[i].dlogits.resize(A);
    for (int a = 0; a < A; ++a) grads[i].dlogits[a] = inv * (out[i].probs[a] - p[a]);
    if (include_value) {
      const double dv = out[i].value - targets[i].teacher_value;
      terms.value += dv * dv * inv;
      grads[i].dvalue = inv * 2.0 * dv;
    }
  }
  terms.loss = terms.kl + terms.value;
  if (!std::isfinite(terms.loss)) throw NonFiniteLoss("dis_loss: non-finite loss");
  return {terms, backward(params, cache, grads)};
}

template <typename T>
std::pair<DistillLoss, Gradient<T>> dis_loss(const ParamSet<T>& params, AugKind kind, std::uint64_t seed,
                                             const DistillBuffer& targets, bool include_value,
                                             const AugParams& aug = {}) {
  return dis_loss(params, kind, seed, std::span<const DistillTarget>(targets.targets), include_value, aug);
}

// L_DA = L_dis(identity) + L_dis(kind).
template <typename T>
std::pair<DistillLoss, Gradient<T>> da_loss(const ParamSet<T>& params, AugKind kind, std::uint64_t seed,
                                            std::span<const DistillTarget> targets, bool include_value,
                                            const AugParams& aug = {}) {
  auto [a, ga] = dis_loss(params, AugKind::Identity, seed, targets, include_value, aug);
  auto [b, gb] = dis_loss(params, kind, seed, targets, include_value, aug);
  ga += gb;
  return {DistillLoss{a.loss + b.loss, a.kl + b.kl, a.value + b.value}, std::move(ga)};
}

template <typename T>
std::pair<DistillLoss, Gradient<T>> da_loss(const ParamSet<T>& params, AugKind kind, std::uint64_t seed,
                                            const DistillBuffer& targets, bool include_value,
                                            const AugParams& aug = {}) {
  return da_loss(params, kind, seed, std::span<const DistillTarget>(targets.targets), include_value, aug);
}

// Self-consistency term: the current policy and value on the original
// observations act as a frozen anchor for the outputs on augmented ones.
template <typename T>
std::pair<DistillLoss, Gradient<T>> drac_term(const ParamSet<T>& params, AugKind kind, std::uint64_t seed,
                                              std::span<const ImageTensor> batch, const AugParams& aug = {}) {
  if (batch.empty()) throw Error("drac_term: empty batch");
  const auto anchor = snapshot_targets(params, batch);
  return dis_loss(params, kind, seed, anchor, true, aug);
}

struct DistillConfig {
  int epochs = 3;
  int minibatches = 8;     // used when minibatch_size is 0
  int minibatch_size = 0;  // fixed minibatch size; overrides minibatches when > 0
  double lr = 1e-4;
  bool include_value = true;
  AugParams aug;

  static DistillConfig inda() { return {}; }
  static DistillConfig exda() {
    DistillConfig c;
    c.epochs = 30;
    c.minibatch_size = 256;
    c.lr = 1e-3;
    c.include_value = false;
    return c;
  }
};

struct DistillStats {
  int optimizer_steps = 0;
  double first_loss = 0.0;
  double last_epoch_loss = 0.0;
};

// Minibatched Adam on L_DA with a fresh optimizer state. With several kinds,
// consecutive minibatches cycle through them.
inline DistillStats run_distill_phase(ParamSet<float>& params, const DistillBuffer& targets,
                                      const std::vector<AugKind>& kinds, const DistillConfig& cfg,
                                      std::uint64_t seed) {
  if (targets.empty()) throw Error("run_distill_phase: no targets");
  if (kinds.empty()) throw ConfigError("run_distill_phase: no augmentation kinds");
  const std::size_t n = targets.size();
  const std::size_t mb =
      cfg.minibatch_size > 0 ? static_cast<std::size_t>(cfg.minibatch_size)
                             : std::max<std::size_t>(1, n / static_cast<std::size_t>(std::max(cfg.minibatches, 1)));
  const std::size_t n_batches = std::max<std::size_t>(1, (n + mb - 1) / mb);
  AdamState<float> adam(params);
  Rng rng(derive_seed(seed, 0xd157));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  DistillStats stats;
  std::size_t turn = 0;
  std::vector<DistillTarget> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx.begin(), idx.end());
    double epoch_loss = 0.0;
    for (std::size_t m = 0; m < n_batches; ++m) {
      const std::size_t lo = m * mb, hi = std::min(n, lo + mb);
      if (lo >= hi) break;
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(targets.targets[idx[i]]);
      const AugKind kind = kinds[turn++ % kinds.size()];
      auto [terms, grad] = da_loss(params, kind, derive_seed(seed, epoch, m), std::span<const DistillTarget>(batch),
                                   cfg.include_value, cfg.aug);
      if (stats.optimizer_steps == 0) stats.first_loss = terms.loss;
      adam_step(params, grad, adam, cfg.lr);
      ++stats.optimizer_steps;
      epoch_loss += terms.loss;
    }
    stats.last_epoch_loss = epoch_loss / static_cast<double>(n_batches);
  }
  return stats;
}

// RAD: the PPO update sees augmented observations in place of the originals.
inline RolloutBuffer rad_augment(const RolloutBuffer& buffer, AugKind kind, std::uint64_t seed,
                                 const AugParams& aug = {}) {
  RolloutBuffer out = buffer;
  if (kind == AugKind::Identity) return out;
  for (std::size_t i = 0; i < out.transitions.size(); ++i)
    out.transitions[i].obs = apply_one(kind, seed, i, out.transitions[i].obs, aug);
  return out;
}

// Mean KL(teacher || student) on the buffer's original observations.
template <typename T>
double mean_teacher_kl(const ParamSet<T>& student, const DistillBuffer& targets) {
  if (targets.empty()) throw Error("mean_teacher_kl: no targets");
  std::vector<ImageTensor> obs;
  obs.reserve(targets.size());
  for (const auto& t : targets.targets) obs.push_back(t.obs);
  const auto out = forward(student, obs);
  double kl = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) kl += kl_divergence(targets.targets[i].teacher_probs, out[i].log_probs);
  return kl / static_cast<double>(out.size());
}

// Buffer files use the parameter-file container with three entries:
//   obs [N,3,32,32], probs [N,|A|], values [N]
inline void save_distill_buffer(const std::string& path, const DistillBuffer& buf) {
  if (buf.empty()) throw IoError("save_distill_buffer: empty buffer");
  const auto N = static_cast<std::uint32_t>(buf.size());
  const auto A = static_cast<std::uint32_t>(buf.n_actions());
  NamedArray obs{"obs", {N, kChannels, kHeight, kWidth}, {}};
  NamedArray probs{"probs", {N, A}, {}};
  NamedArray values{"values", {N}, {}};
  obs.values.reserve(static_cast<std::size_t>(N) * kImageSize);
  for (const auto& t : buf.targets) {
    if (t.obs.size() != static_cast<std::size_t>(kImageSize)) throw ShapeError("save_distill_buffer: observation shape");
    obs.values.insert(obs.values.end(), t.obs.data.begin(), t.obs.data.end());
    for (double p : t.teacher_probs) probs.values.push_back(static_cast<float>(p));
    values.values.push_back(static_cast<float>(t.teacher_value));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path);
  write_arrays(os, {std::move(obs), std::move(probs), std::move(values)});
}

inline DistillBuffer load_distill_buffer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  const auto arrays = read_arrays(is);
  if (arrays.size() != 3 || arrays[0].name != "obs" || arrays[1].name != "probs" || arrays[2].name != "values")
    throw IoError("distill buffer file: unexpected entries");
  const auto& obs = arrays[0];
  const auto& probs = arrays[1];
  const auto& values = arrays[2];
  if (obs.dims.size() != 4 || probs.dims.size() != 2 || values.dims.size() != 1) throw IoError("distill buffer file: ranks");
  const std::size_t N = obs.dims[0], A = probs.dims[1];
  if (probs.dims[0] != N || values.dims[0] != N || obs.dims[1] != kChannels || obs.dims[2] != kHeight ||
      obs.dims[3] != kWidth)
    throw IoError("distill buffer file: inconsistent dims");
  DistillBuffer buf;
  buf.capacity = N;
  buf.targets.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    auto& t = buf.targets[i];
    t.obs.data.assign(obs.values.begin() + i * kImageSize, obs.values.begin() + (i + 1) * kImageSize);
    t.teacher_probs.assign(probs.values.begin() + i * A, probs.values.begin() + (i + 1) * A);
    t.teacher_value = values.values[i];
  }
  return buf;
}

}  // namespace asrl
