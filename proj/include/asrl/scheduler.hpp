#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "asrl/adam.hpp"
#include "asrl/augment.hpp"
#include "asrl/distill.hpp"
#include "asrl/envs.hpp"
#include "asrl/error.hpp"
#include "asrl/image.hpp"
#include "asrl/pagrad.hpp"
#include "asrl/params.hpp"
#include "asrl/ppo.hpp"
#include "asrl/rng.hpp"

namespace asrl {

// DA runs after the PPO update of epoch n when n is in [start, end] and
// (n - 1) mod interval == 0.
struct InDaSchedule {
  int start = 0;
  int end = 0;
  int interval = 5;
  int total = 0;

  void validate() const {
    if (start < 0 || start > end || end > total) throw ConfigError("schedule: need 0 <= S <= T <= N");
    if (interval < 1) throw ConfigError("schedule: interval must be >= 1");
  }
  bool is_da_epoch(int n) const { return n >= start && n <= end && n >= 1 && (n - 1) % interval == 0; }
  int count_phases() const {
    int k = 0;
    for (int n = 1; n <= total; ++n) k += is_da_epoch(n);
    return k;
  }
};

// ---------------------------------------------------------------------------
// Windowed UCB over augmentations.

struct ArmStats {
  AugKind arm = AugKind::Identity;
  int pulls = 0;
  std::deque<double> recent;  // last W gains, oldest first

  double mean() const {
    if (recent.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double g : recent) s += g;
    return s / static_cast<double>(recent.size());
  }
};

struct UcbOptions {
  int window = 3;
  int min_exploration = 15;
  double eps_force = 1e-6;
  std::optional<double> fixed_c;  // replaces forced exploration when set
};

struct UcbState {
  std::vector<ArmStats> arms;
  UcbOptions options;

  UcbState() = default;
  UcbState(const std::vector<AugKind>& kinds, UcbOptions opts = {}) : options(opts) {
    if (kinds.empty()) throw ConfigError("ucb: no arms");
    if (opts.window < 1 || opts.min_exploration < 0) throw ConfigError("ucb: bad window or exploration count");
    for (auto k : kinds) arms.push_back({k, 0, {}});
  }

  int size() const { return static_cast<int>(arms.size()); }
  // Completed rounds s; equals the sum of pull counts.
  int rounds() const {
    int s = 0;
    for (const auto& a : arms) s += a.pulls;
    return s;
  }
  bool in_warmup() const { return rounds() < options.min_exploration * size(); }

  void record(int arm, double gain) {
    auto& a = arms.at(arm);
    a.pulls += 1;
    a.recent.push_back(gain);
    while (static_cast<int>(a.recent.size()) > options.window) a.recent.pop_front();
  }
};

// Mean of (advantage + value) over every transition of the given rollouts.
inline double gain_of_interval(std::span<const RolloutBuffer> buffers) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& b : buffers) {
    if (b.advantages.size() != b.size()) throw Error("gain_of_interval: advantages not computed");
    for (std::size_t i = 0; i < b.size(); ++i) sum += b.advantages[i] + b.transitions[i].value_old;
    n += b.size();
  }
  if (n == 0) throw Error("gain_of_interval: no transitions");
  return sum / static_cast<double>(n);
}

// mean_k + c sqrt(log s / N_k) with s = total pulls and log(1) = 0.
inline std::vector<double> ucb_scores(const UcbState& st, double c) {
  const int s = st.rounds();
  const double log_s = s > 1 ? std::log(static_cast<double>(s)) : 0.0;
  std::vector<double> out(st.arms.size());
  for (std::size_t k = 0; k < st.arms.size(); ++k) {
    const auto& a = st.arms[k];
    out[k] = a.pulls == 0 ? std::numeric_limits<double>::infinity() : a.mean() + c * std::sqrt(log_s / a.pulls);
  }
  return out;
}

// Argmax of the UCB scores; unpulled arms come first, ties go to the lowest index.
inline int ucb_select(const UcbState& st, double c) {
  for (int k = 0; k < st.size(); ++k)
    if (st.arms[k].pulls == 0) return k;
  const auto scores = ucb_scores(st, c);
  int best = 0;
  for (int k = 1; k < st.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

// c = (G_max - G_min + eps) / (sqrt(log s) * max(1/sqrt(N_min) - 1/sqrt(N_max), 1/sqrt(W-1) - 1/sqrt(W)))
// where N_min and N_max are the pull counts of the arms holding G_min and G_max.
inline double forced_exploration_c(const UcbState& st) {
  const int s = st.rounds();
  if (s < 2) throw Error("forced_exploration_c: needs at least two rounds");
  if (st.size() < 2) throw Error("forced_exploration_c: needs at least two arms");
  int hi = -1, lo = -1;
  for (int k = 0; k < st.size(); ++k) {
    if (st.arms[k].pulls == 0) throw Error("forced_exploration_c: every arm must be pulled");
    const double m = st.arms[k].mean();
    if (hi < 0 || m > st.arms[hi].mean()) hi = k;
    if (lo < 0 || m < st.arms[lo].mean()) lo = k;
  }
  const double W = std::max(st.options.window, 2);
  const double floor_term = 1.0 / std::sqrt(W - 1.0) - 1.0 / std::sqrt(W);
  const double count_term = 1.0 / std::sqrt(st.arms[lo].pulls) - 1.0 / std::sqrt(st.arms[hi].pulls);
  const double num = st.arms[hi].mean() - st.arms[lo].mean() + st.options.eps_force;
  return num / (std::sqrt(std::log(static_cast<double>(s))) * std::max(count_term, floor_term));
}

struct UcbChoice {
  int arm = 0;
  double c = 0.0;
  bool warmup = false;
  std::vector<double> scores;  // empty during warmup
};

// Round-robin until every arm has the minimum exploration count, then the
// UCB rule with a fixed or forced-exploration coefficient.
inline UcbChoice ucb_next(const UcbState& st) {
  UcbChoice ch;
  if (st.size() == 1) return ch;
  const int s = st.rounds();
  if (st.in_warmup()) {
    ch.warmup = true;
    ch.arm = s % st.size();
    return ch;
  }
  const bool all_pulled = std::all_of(st.arms.begin(), st.arms.end(), [](const ArmStats& a) { return a.pulls > 0; });
  if (st.options.fixed_c) ch.c = *st.options.fixed_c;
  else if (s >= 2 && all_pulled) ch.c = forced_exploration_c(st);
  ch.arm = ucb_select(st, ch.c);
  ch.scores = ucb_scores(st, ch.c);
  return ch;
}

struct ArmTraceRow {
  int round = 0;  // 1-based
  int epoch = 0;
  int arm = 0;
  double gain = std::numeric_limits<double>::quiet_NaN();
  double c = 0.0;
  bool warmup = false;
  std::vector<double> scores;
};

// Plays `rounds` bandit rounds against a gain oracle; returns the chosen arms.
inline std::vector<int> simulate_bandit(UcbState& st, int rounds, const std::function<double(int arm, int round)>& gain) {
  std::vector<int> chosen;
  chosen.reserve(rounds);
  for (int r = 0; r < rounds; ++r) {
    const int arm = ucb_next(st).arm;
    st.record(arm, gain(arm, r));
    chosen.push_back(arm);
  }
  return chosen;
}

// ---------------------------------------------------------------------------
// RL runs.

struct RunConfig {
  GameSpec game = GameSpec::gem_maze();
  int n_train_backgrounds = 1;
  PpoConfig ppo;
  long total_steps = 200000;
  std::uint64_t seed = 1;
  double init_scale = 1.0;
  AugParams aug;
  double store_fraction = 0.25;  // tail of training an ExDA observation store samples from

  long steps_per_epoch() const { return static_cast<long>(ppo.steps_per_rollout) * ppo.n_envs; }
  int epochs() const {
    return std::max(1, static_cast<int>(std::lround(static_cast<double>(total_steps) / steps_per_epoch())));
  }
};

struct EpochRecord {
  int epoch = 0;
  long env_steps = 0;
  double rollout_return = std::numeric_limits<double>::quiet_NaN();  // mean of episodes finished in the rollout
  int episodes = 0;
  bool da_phase = false;
  double seconds = 0.0;
};

using EpochHook = std::function<void(const EpochRecord&, const ParamSet<float>&)>;

// DA phases during RL: a fixed kind or a UCB choice per phase.
struct DaPlan {
  InDaSchedule schedule;
  std::vector<AugKind> arms;
  bool ucb = false;
  bool random_choice = false;  // one uniformly drawn arm per phase
  UcbOptions ucb_options;
  DistillConfig distill = DistillConfig::inda();
};

struct RlOptions {
  GradCombiner combiner;                 // empty means plain PPO
  std::optional<AugKind> rad_kind;       // RAD augmentation of the PPO batch
  std::optional<DaPlan> da;              // InDA / UCB-InDA
  std::size_t store_capacity = 0;        // observations kept for a later ExDA phase
};

struct RlRun {
  ParamSet<float> params;
  std::vector<EpochRecord> epochs;
  std::vector<ArmTraceRow> arm_trace;
  std::vector<AugKind> arms;
  std::vector<PackedImage> store;
  int da_phases = 0;
};

namespace stream {
inline constexpr std::uint64_t kInit = 1, kEnv = 2, kAct = 3, kDa = 4, kRad = 5, kStore = 6, kReinit = 7, kExda = 8;
}

inline RlRun run_rl(const RunConfig& cfg, const RlOptions& opts, const EpochHook& hook = {}) {
  cfg.ppo.validate();
  const int N = cfg.epochs();
  RlRun run{init_params<float>(cfg.game.n_actions(), derive_seed(cfg.seed, stream::kInit), cfg.init_scale), {}, {}, {},
            {}, 0};
  AdamState<float> adam(run.params);
  VecEnv envs(cfg.game, ModeSpec::make(Mode::Train, cfg.n_train_backgrounds), cfg.ppo.n_envs,
              derive_seed(cfg.seed, stream::kEnv));
  Rng rng(derive_seed(cfg.seed, stream::kAct));
  RewardNormalizer normalizer(cfg.ppo.n_envs, cfg.ppo.gamma);
  const GradCombiner combiner = opts.combiner ? opts.combiner : identity_combiner();

  std::optional<UcbState> ucb;
  if (opts.da) {
    auto sched = opts.da->schedule;
    sched.total = N;
    sched.validate();
    if (opts.da->arms.empty()) throw ConfigError("run: DA needs at least one augmentation");
    run.arms = opts.da->arms;
    if (opts.da->ucb) {
      if (sched.interval < 2) throw ConfigError("ucb: interval must be >= 2 to measure gains");
      ucb.emplace(opts.da->arms, opts.da->ucb_options);
    }
  }
  std::deque<std::vector<ImageTensor>> recent;  // observations of the last I rollouts
  struct Pending {
    int row = -1;
    int remaining = 0;
    double sum = 0.0;
    std::size_t count = 0;
  } pending;
  auto close_pending = [&] {
    if (pending.row < 0) return;
    auto& row = run.arm_trace[pending.row];
    if (pending.count > 0) {
      row.gain = pending.sum / static_cast<double>(pending.count);
      ucb->record(row.arm, row.gain);
    }
    pending = {};
  };

  Rng store_rng(derive_seed(cfg.seed, stream::kStore));
  const int store_from = N - static_cast<int>(std::ceil(cfg.store_fraction * N)) + 1;
  std::size_t store_seen = 0;

  for (int n = 1; n <= N; ++n) {
    const auto t0 = std::chrono::steady_clock::now();
    auto buf = collect_rollout(run.params, envs, cfg.ppo, rng, cfg.ppo.normalize_rewards ? &normalizer : nullptr);
    EpochRecord rec;
    rec.epoch = n;
    rec.env_steps = static_cast<long>(n) * cfg.steps_per_epoch();
    rec.episodes = static_cast<int>(buf.completed_returns.size());
    if (rec.episodes > 0) {
      double s = 0.0;
      for (double r : buf.completed_returns) s += r;
      rec.rollout_return = s / rec.episodes;
    }
    if (opts.store_capacity > 0 && n >= store_from) {
      for (const auto& tr : buf.transitions) {
        if (run.store.size() < opts.store_capacity) run.store.push_back(PackedImage::pack(tr.obs));
        else {
          const auto j = static_cast<std::size_t>(store_rng.below(store_seen + 1));
          if (j < opts.store_capacity) run.store[j] = PackedImage::pack(tr.obs);
        }
        ++store_seen;
      }
    }
    if (ucb && pending.row >= 0) {
      for (std::size_t i = 0; i < buf.size(); ++i) pending.sum += buf.advantages[i] + buf.transitions[i].value_old;
      pending.count += buf.size();
      if (--pending.remaining == 0) close_pending();
    }
    if (opts.da) {
      std::vector<ImageTensor> obs;
      obs.reserve(buf.size());
      for (const auto& tr : buf.transitions) obs.push_back(tr.obs);
      recent.push_back(std::move(obs));
      while (static_cast<int>(recent.size()) > opts.da->schedule.interval) recent.pop_front();
    }

    if (opts.rad_kind) {
      const auto aug = rad_augment(buf, *opts.rad_kind, derive_seed(cfg.seed, stream::kRad, n), cfg.aug);
      ppo_update(run.params, adam, aug, cfg.ppo, combiner, rng);
    } else {
      ppo_update(run.params, adam, buf, cfg.ppo, combiner, rng);
    }

    if (opts.da) {
      auto sched = opts.da->schedule;
      sched.total = N;
      if (sched.is_da_epoch(n)) {
        close_pending();
        AugKind kind = opts.da->arms.front();
        if (opts.da->random_choice) {
          Rng coin(derive_seed(cfg.seed, stream::kDa, n, 0xc01));
          kind = opts.da->arms[coin.below(opts.da->arms.size())];
        }
        if (ucb) {
          const auto choice = ucb_next(*ucb);
          kind = ucb->arms[choice.arm].arm;
          ArmTraceRow row;
          row.round = static_cast<int>(run.arm_trace.size()) + 1;
          row.epoch = n;
          row.arm = choice.arm;
          row.c = choice.c;
          row.warmup = choice.warmup;
          row.scores = choice.scores;
          run.arm_trace.push_back(std::move(row));
          pending.row = static_cast<int>(run.arm_trace.size()) - 1;
          pending.remaining = sched.interval - 1;
        }
        std::vector<ImageTensor> d;
        for (const auto& r : recent) d.insert(d.end(), r.begin(), r.end());
        const auto targets = snapshot_targets(run.params, d);
        run_distill_phase(run.params, targets, {kind}, opts.da->distill, derive_seed(cfg.seed, stream::kDa, n));
        rec.da_phase = true;
        run.da_phases += 1;
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.epochs.push_back(rec);
    if (hook) hook(rec, run.params);
  }
  if (ucb) close_pending();
  return run;
}

inline RlRun run_ppo(const RunConfig& cfg, std::size_t store_capacity = 0, const EpochHook& hook = {}) {
  RlOptions o;
  o.store_capacity = store_capacity;
  return run_rl(cfg, o, hook);
}

inline RlRun run_rad(const RunConfig& cfg, AugKind kind, const EpochHook& hook = {}) {
  RlOptions o;
  o.rad_kind = kind;
  return run_rl(cfg, o, hook);
}

inline RlRun run_drac(const RunConfig& cfg, AugKind kind, double alpha_r, bool pagrad, const EpochHook& hook = {}) {
  RlOptions o;
  o.combiner = drac_combiner(kind, alpha_r, pagrad, cfg.aug);
  return run_rl(cfg, o, hook);
}

inline RlRun run_inda(const RunConfig& cfg, InDaSchedule schedule, AugKind kind,
                      DistillConfig distill = DistillConfig::inda(), const EpochHook& hook = {}) {
  distill.aug = cfg.aug;
  RlOptions o;
  o.da = DaPlan{schedule, {kind}, false, false, {}, distill};
  return run_rl(cfg, o, hook);
}

// InDA drawing the phase augmentation uniformly from `kinds`; with
// {color_jitter, random_conv} this is the random-color setting.
inline RlRun run_inda_random(const RunConfig& cfg, InDaSchedule schedule, const std::vector<AugKind>& kinds,
                             DistillConfig distill = DistillConfig::inda(), const EpochHook& hook = {}) {
  distill.aug = cfg.aug;
  RlOptions o;
  o.da = DaPlan{schedule, kinds, false, true, {}, distill};
  return run_rl(cfg, o, hook);
}

inline RlRun run_ucb_inda(const RunConfig& cfg, const std::vector<AugKind>& arms, InDaSchedule schedule,
                          UcbOptions ucb = {}, DistillConfig distill = DistillConfig::inda(),
                          std::size_t store_capacity = 0, const EpochHook& hook = {}) {
  distill.aug = cfg.aug;
  RlOptions o;
  o.da = DaPlan{schedule, arm_set(arms, true), true, false, ucb, distill};
  o.store_capacity = store_capacity;
  return run_rl(cfg, o, hook);
}

// Distillation after RL: freezes the teacher, optionally re-draws the
// student, then runs one long DA phase over the stored observations.
struct ExdaOptions {
  std::vector<AugKind> kinds{AugKind::ColorJitter};
  DistillConfig distill = DistillConfig::exda();
  bool reinit = false;
};

struct ExdaResult {
  ParamSet<float> student;
  DistillBuffer targets;
  DistillStats stats;
};

inline ExdaResult distill_after_training(const ParamSet<float>& teacher, const std::vector<PackedImage>& store,
                                         const ExdaOptions& opts, std::uint64_t seed, double init_scale = 1.0) {
  if (store.empty()) throw Error("exda: empty observation store");
  std::vector<ImageTensor> obs;
  obs.reserve(store.size());
  for (const auto& p : store) obs.push_back(p.unpack());
  ExdaResult r{teacher, snapshot_targets(teacher, obs), {}};
  if (opts.reinit) r.student = init_params<float>(teacher.n_actions(), derive_seed(seed, stream::kReinit), init_scale);
  r.stats = run_distill_phase(r.student, r.targets, opts.kinds, opts.distill, derive_seed(seed, stream::kExda));
  return r;
}

struct ExdaRun {
  RlRun rl;  // the teacher run
  ExdaResult exda;
};

inline ExdaRun run_exda(const RunConfig& cfg, ExdaOptions opts, std::size_t store_capacity,
                        const EpochHook& hook = {}) {
  opts.distill.aug = cfg.aug;
  auto rl = run_ppo(cfg, store_capacity, hook);
  auto ex = distill_after_training(rl.params, rl.store, opts, cfg.seed, cfg.init_scale);
  return {std::move(rl), std::move(ex)};
}

// UCB-InDA followed by ExDA over every arm except the excluded kinds.
inline ExdaRun run_ucb_exda(const RunConfig& cfg, const std::vector<AugKind>& arms, InDaSchedule schedule,
                            UcbOptions ucb, DistillConfig inda, ExdaOptions exda, std::size_t store_capacity,
                            const std::vector<AugKind>& exclude = {AugKind::Black}, const EpochHook& hook = {}) {
  auto rl = run_ucb_inda(cfg, arms, schedule, ucb, inda, store_capacity, hook);
  exda.kinds.clear();
  for (auto k : rl.arms)
    if (std::find(exclude.begin(), exclude.end(), k) == exclude.end()) exda.kinds.push_back(k);
  if (exda.kinds.empty()) exda.kinds.push_back(AugKind::Identity);
  exda.distill.aug = cfg.aug;
  auto ex = distill_after_training(rl.params, rl.store, exda, cfg.seed, cfg.init_scale);
  return {std::move(rl), std::move(ex)};
}

}  // namespace asrl
