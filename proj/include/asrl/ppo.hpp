#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "asrl/adam.hpp"
#include "asrl/envs.hpp"
#include "asrl/error.hpp"
#include "asrl/network.hpp"
#include "asrl/params.hpp"
#include "asrl/rng.hpp"

namespace asrl {

struct PpoConfig {
  double gamma = 0.999;
  double lambda = 0.95;
  int steps_per_rollout = 256;
  int epochs = 3;
  int minibatches = 8;
  double clip = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double lr = 5e-4;
  int n_envs = 8;
  bool normalize_rewards = true;
  bool normalize_advantages = true;

  void validate() const {
    if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1) throw ConfigError("ppo: gamma/lambda must be in [0,1]");
    if (!(clip > 0)) throw ConfigError("ppo: clip must be > 0");
    if (steps_per_rollout < 1 || epochs < 0 || minibatches < 1 || n_envs < 1) throw ConfigError("ppo: bad sizes");
  }
};

struct Transition {
  ImageTensor obs;
  int action = 0;
  double reward = 0.0;  // as used for learning (normalized when enabled)
  double raw_reward = 0.0;
  bool done = false;
  double logprob_old = 0.0;
  double value_old = 0.0;
};

// T x N transitions stored time-major: index = t * n_envs + env.
struct RolloutBuffer {
  int steps = 0;
  int n_envs = 0;
  std::vector<Transition> transitions;
  std::vector<double> bootstrap_values;  // V(o_T) per env
  std::vector<double> advantages;
  std::vector<double> value_targets;
  std::vector<double> completed_returns;  // raw returns of episodes that ended in this rollout
  std::vector<int> completed_levels;

  std::size_t size() const { return transitions.size(); }
  const Transition& at(int t, int env) const { return transitions[static_cast<std::size_t>(t) * n_envs + env]; }
};

// Running variance of discounted returns, used to scale rewards.
class RewardNormalizer {
 public:
  RewardNormalizer() = default;
  RewardNormalizer(int n_envs, double gamma) : returns_(n_envs, 0.0), gamma_(gamma) {}

  // Scales one reward per env and advances the running statistics.
  std::vector<double> normalize(std::span<const double> rewards, std::span<const std::uint8_t> dones) {
    for (std::size_t i = 0; i < rewards.size(); ++i) returns_[i] = returns_[i] * gamma_ + rewards[i];
    update(returns_);
    const double sd = std::sqrt(var_ + 1e-8);
    std::vector<double> out(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) {
      out[i] = rewards[i] / sd;
      if (dones[i]) returns_[i] = 0.0;
    }
    return out;
  }

  double stddev() const { return std::sqrt(var_ + 1e-8); }

 private:
  void update(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    const double bm = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double bv = 0.0;
    for (double x : xs) bv += (x - bm) * (x - bm);
    bv /= n;
    const double delta = bm - mean_;
    const double total = count_ + n;
    mean_ += delta * n / total;
    var_ = (var_ * count_ + bv * n + delta * delta * count_ * n / total) / total;
    count_ = total;
  }

  std::vector<double> returns_;
  double gamma_ = 0.999;
  double mean_ = 0.0;
  double var_ = 1.0;
  double count_ = 1e-4;
};

// N environments stepped in lockstep. Finished episodes are replaced by a
// fresh level drawn from the mode's pools.
class VecEnv {
 public:
  VecEnv(GameSpec spec, ModeSpec mode, int n, std::uint64_t seed)
      : spec_(spec), mode_(std::move(mode)), seed_(seed), episodes_(n, 0) {
    envs_.reserve(n);
    obs_.reserve(n);
    for (int i = 0; i < n; ++i) {
      envs_.push_back(make_env(spec_, mode_, derive_seed(seed_, i, 0)));
      obs_.push_back(reset(envs_.back()));
    }
  }

  int size() const { return static_cast<int>(envs_.size()); }
  const GameSpec& spec() const { return spec_; }
  const std::vector<Observation>& observations() const { return obs_; }
  const EnvState& env(int i) const { return envs_[i]; }

  struct Outcome {
    std::vector<double> rewards;
    std::vector<std::uint8_t> dones;
    std::vector<double> finished_returns;
    std::vector<int> finished_levels;
  };

  Outcome step(std::span<const int> actions) {
    Outcome out;
    out.rewards.resize(envs_.size());
    out.dones.resize(envs_.size());
    for (std::size_t i = 0; i < envs_.size(); ++i) {
      auto r = asrl::step(envs_[i], actions[i]);
      out.rewards[i] = r.reward;
      out.dones[i] = r.done;
      if (r.done) {
        out.finished_returns.push_back(envs_[i].episode_return);
        out.finished_levels.push_back(envs_[i].level_seed);
        episodes_[i] += 1;
        envs_[i] = make_env(spec_, mode_, derive_seed(seed_, i, episodes_[i]));
        obs_[i] = reset(envs_[i]);
      } else {
        obs_[i] = std::move(r.obs);
      }
    }
    return out;
  }

 private:
  GameSpec spec_;
  ModeSpec mode_;
  std::uint64_t seed_;
  std::vector<EnvState> envs_;
  std::vector<Observation> obs_;
  std::vector<std::uint64_t> episodes_;
};

inline int sample_action(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(probs.size()) - 1;
}

// GAE:  delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t
//       A_t     = delta_t + gamma lambda (1 - done_t) A_{t+1}
//       target  = A_t + V_t
inline std::pair<std::vector<double>, std::vector<double>> compute_gae(std::span<const double> rewards,
                                                                       std::span<const double> values,
                                                                       std::span<const std::uint8_t> dones,
                                                                       double bootstrap_value, double gamma,
                                                                       double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ShapeError("compute_gae: length mismatch");
  std::vector<double> adv(n), targets(n);
  double next_value = bootstrap_value, next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double mask = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * mask * next_value - values[i];
    adv[i] = delta + gamma * lambda * mask * next_adv;
    targets[i] = adv[i] + values[i];
    next_value = values[i];
    next_adv = adv[i];
  }
  return {adv, targets};
}

inline void compute_advantages(RolloutBuffer& buf, double gamma, double lambda) {
  buf.advantages.assign(buf.size(), 0.0);
  buf.value_targets.assign(buf.size(), 0.0);
  std::vector<double> r(buf.steps), v(buf.steps);
  std::vector<std::uint8_t> d(buf.steps);
  for (int e = 0; e < buf.n_envs; ++e) {
    for (int t = 0; t < buf.steps; ++t) {
      const auto& tr = buf.at(t, e);
      r[t] = tr.reward;
      v[t] = tr.value_old;
      d[t] = tr.done ? 1 : 0;
    }
    auto [a, g] = compute_gae(r, v, d, buf.bootstrap_values[e], gamma, lambda);
    for (int t = 0; t < buf.steps; ++t) {
      buf.advantages[static_cast<std::size_t>(t) * buf.n_envs + e] = a[t];
      buf.value_targets[static_cast<std::size_t>(t) * buf.n_envs + e] = g[t];
    }
  }
}

// Steps every env T times under pi_theta and records the transitions.
template <typename T>
RolloutBuffer collect_rollout(const ParamSet<T>& params, VecEnv& envs, const PpoConfig& cfg, Rng& rng,
                              RewardNormalizer* normalizer = nullptr) {
  RolloutBuffer buf;
  buf.steps = cfg.steps_per_rollout;
  buf.n_envs = envs.size();
  buf.transitions.reserve(static_cast<std::size_t>(buf.steps) * buf.n_envs);
  std::vector<int> actions(buf.n_envs);
  for (int t = 0; t < buf.steps; ++t) {
    const auto& obs = envs.observations();
    const auto out = forward(params, obs);
    for (int e = 0; e < buf.n_envs; ++e) actions[e] = sample_action(out[e].probs, rng);
    const auto first = buf.transitions.size();
    for (int e = 0; e < buf.n_envs; ++e) {
      Transition tr;
      tr.obs = obs[e];
      tr.action = actions[e];
      tr.logprob_old = out[e].log_probs[actions[e]];
      tr.value_old = out[e].value;
      buf.transitions.push_back(std::move(tr));
    }
    auto res = envs.step(actions);
    std::vector<double> scaled = res.rewards;
    if (normalizer) scaled = normalizer->normalize(res.rewards, res.dones);
    for (int e = 0; e < buf.n_envs; ++e) {
      auto& tr = buf.transitions[first + e];
      tr.raw_reward = res.rewards[e];
      tr.reward = scaled[e];
      tr.done = res.dones[e];
    }
    buf.completed_returns.insert(buf.completed_returns.end(), res.finished_returns.begin(), res.finished_returns.end());
    buf.completed_levels.insert(buf.completed_levels.end(), res.finished_levels.begin(), res.finished_levels.end());
  }
  const auto last = forward(params, envs.observations());
  buf.bootstrap_values.resize(buf.n_envs);
  for (int e = 0; e < buf.n_envs; ++e) buf.bootstrap_values[e] = last[e].value;
  compute_advantages(buf, cfg.gamma, cfg.lambda);
  return buf;
}

struct PpoSample {
  const ImageTensor* obs = nullptr;
  int action = 0;
  double logprob_old = 0.0;
  double advantage = 0.0;  // normalized within the minibatch by the caller
  double value_target = 0.0;
};

struct PpoLossTerms {
  double loss = 0.0;
  double policy_objective = 0.0;  // L_pi
  double value_loss = 0.0;        // L_V
  double entropy = 0.0;
};

// Clipped surrogate for one sample: min(rho A, clip(rho, 1-eps, 1+eps) A).
inline double clipped_surrogate(double ratio, double advantage, double eps) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

// L_PPO = -L_pi + alpha L_V - beta * entropy, averaged over the minibatch.
template <typename T>
std::pair<PpoLossTerms, Gradient<T>> ppo_loss(const ParamSet<T>& params, std::span<const PpoSample> batch,
                                              const PpoConfig& cfg) {
  const int B = static_cast<int>(batch.size());
  const int A = params.n_actions();
  std::vector<ImageTensor> obs;
  obs.reserve(B);
  for (const auto& s : batch) obs.push_back(*s.obs);
  ForwardCache<T> cache;
  const auto out = forward(params, obs, &cache);
  PpoLossTerms terms;
  std::vector<OutputGrad> grads(B);
  const double inv = 1.0 / B;
  for (int i = 0; i < B; ++i) {
    const auto& s = batch[i];
    const auto& o = out[i];
    const double ratio = std::exp(o.log_probs[s.action] - s.logprob_old);
    const double surr1 = ratio * s.advantage;
    const double surr2 = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * s.advantage;
    const double dsurr_dratio = surr1 <= surr2 ? s.advantage : 0.0;
    double ent = 0.0;
    for (int a = 0; a < A; ++a) ent -= o.probs[a] * o.log_probs[a];
    const double dv = o.value - s.value_target;
    terms.policy_objective += std::min(surr1, surr2) * inv;
    terms.value_loss += dv * dv * inv;
    terms.entropy += ent * inv;

    auto& g = grads[i];
    g.dlogits.resize(A);
    for (int a = 0; a < A; ++a) {
      const double onehot = a == s.action ? 1.0 : 0.0;
      const double dratio = ratio * (onehot - o.probs[a]);
      const double dent = -o.probs[a] * (o.log_probs[a] + ent);
      g.dlogits[a] = inv * (-dsurr_dratio * dratio - cfg.entropy_coef * dent);
    }
    g.dvalue = inv * 2.0 * cfg.value_coef * dv;
  }
  terms.loss = -terms.policy_objective + cfg.value_coef * terms.value_loss - cfg.entropy_coef * terms.entropy;
  if (!std::isfinite(terms.loss)) throw NonFiniteLoss("ppo_loss: non-finite loss");
  return {terms, backward(params, cache, grads)};
}

// Hook that turns the PPO gradient of a minibatch into the applied gradient.
// Plain PPO returns it unchanged; DrAC adds a weighted auxiliary gradient and
// DrAC+PAGrad projects that auxiliary gradient first.
using GradCombiner =
    std::function<Gradient<float>(const ParamSet<float>&, std::span<const ImageTensor>, Gradient<float>, std::uint64_t)>;

inline GradCombiner identity_combiner() {
  return [](const ParamSet<float>&, std::span<const ImageTensor>, Gradient<float> g, std::uint64_t) { return g; };
}

struct PpoUpdateStats {
  int optimizer_steps = 0;
  double mean_loss = 0.0;
};

// epochs x minibatches Adam steps over shuffled minibatches of the buffer.
inline PpoUpdateStats ppo_update(ParamSet<float>& params, AdamState<float>& adam, const RolloutBuffer& buf,
                                 const PpoConfig& cfg, const GradCombiner& combiner, Rng& rng) {
  if (buf.advantages.size() != buf.size()) throw Error("ppo_update: advantages not computed");
  PpoUpdateStats stats;
  const std::size_t n = buf.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t mb = std::max<std::size_t>(1, n / cfg.minibatches);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(idx.begin(), idx.end());
    for (int m = 0; m < cfg.minibatches; ++m) {
      const std::size_t lo = m * mb;
      const std::size_t hi = m + 1 == cfg.minibatches ? n : lo + mb;
      std::vector<PpoSample> batch;
      batch.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& tr = buf.transitions[idx[i]];
        batch.push_back({&tr.obs, tr.action, tr.logprob_old, buf.advantages[idx[i]], buf.value_targets[idx[i]]});
      }
      if (cfg.normalize_advantages && batch.size() > 1) {
        double mean = 0.0, var = 0.0;
        for (const auto& s : batch) mean += s.advantage;
        mean /= batch.size();
        for (const auto& s : batch) var += (s.advantage - mean) * (s.advantage - mean);
        const double sd = std::sqrt(var / batch.size()) + 1e-8;
        for (auto& s : batch) s.advantage = (s.advantage - mean) / sd;
      }
      auto [terms, grad] = ppo_loss(params, std::span<const PpoSample>(batch), cfg);
      std::vector<ImageTensor> obs;
      obs.reserve(batch.size());
      for (const auto& s : batch) obs.push_back(*s.obs);
      grad = combiner(params, obs, std::move(grad), rng.next_u64());
      adam_step(params, grad, adam, cfg.lr);
      stats.optimizer_steps += 1;
      stats.mean_loss += terms.loss;
    }
  }
  if (stats.optimizer_steps > 0) stats.mean_loss /= stats.optimizer_steps;
  return stats;
}

}  // namespace asrl
