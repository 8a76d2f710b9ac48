#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "asrl/augment.hpp"
#include "asrl/distill.hpp"
#include "asrl/envs.hpp"
#include "asrl/error.hpp"
#include "asrl/network.hpp"
#include "asrl/params.hpp"
#include "asrl/ppo.hpp"
#include "asrl/rng.hpp"
#include "asrl/scheduler.hpp"
#include "asrl/serialize.hpp"

namespace asrl {

inline constexpr std::string_view kCsvVersion = "# asrl-csv v1";

enum class Method { Ppo, Rad, Drac, DracPagrad, Inda, Exda, UcbInda, UcbExda };

inline constexpr std::array<Method, 8> kAllMethods = {Method::Ppo,  Method::Rad,  Method::Drac,    Method::DracPagrad,
                                                      Method::Inda, Method::Exda, Method::UcbInda, Method::UcbExda};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::Ppo: return "ppo";
    case Method::Rad: return "rad";
    case Method::Drac: return "drac";
    case Method::DracPagrad: return "drac-pagrad";
    case Method::Inda: return "inda";
    case Method::Exda: return "exda";
    case Method::UcbInda: return "ucb-inda";
    case Method::UcbExda: return "ucb-exda";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : kAllMethods)
    if (method_name(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

// Kind setting for RAD / DrAC / InDA / ExDA. "random_color" draws
// color_jitter or random_conv per DA phase.
inline constexpr std::string_view kRandomColor = "random_color";

struct ExperimentConfig {
  Method method = Method::Ppo;
  GameId game = GameId::GemMaze;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs/out";
  long total_steps = 200000;
  int max_episode_steps = 256;
  int maze_min_cells = 5;
  int maze_max_cells = 5;
  double maze_braid = 0.0;
  int n_train_backgrounds = 1;
  int n_test_backgrounds = 8;
  double init_scale = 1.0;
  int eval_episodes = 100;
  int eval_interval = 10;
  bool eval_greedy = false;
  std::string jsd_kind = "color_jitter";
  int jsd_probe_size = 256;

  PpoConfig ppo;

  std::string kind = "color_jitter";
  std::vector<AugKind> arms{AugKind::Identity,   AugKind::RandomCrop,  AugKind::Grayscale,
                            AugKind::CutoutColor, AugKind::RandomConv, AugKind::ColorJitter};
  AugParams aug;

  double alpha_r = 0.1;

  int s_start = 0;
  int t_end = -1;  // -1 means the last epoch
  int i_interval = 5;
  int da_epochs = 3;
  int da_minibatches = 8;
  double da_lr = 1e-4;
  bool da_value = true;

  int exda_epochs = 30;
  int exda_minibatch_size = 256;
  double exda_lr = 1e-3;
  bool exda_value = false;
  bool exda_reinit = false;
  int exda_buffer = 8192;
  double exda_store_fraction = 0.25;
  std::vector<AugKind> exda_exclude{AugKind::Black};
  std::string exda_targets;   // distill-buffer file; skips RL when set
  std::string teacher_params; // student start for exda_targets runs
  bool save_buffer = false;

  int ucb_window = 3;
  int ucb_min_exploration = 15;
  double ucb_eps = 1e-6;
  std::optional<double> ucb_c;

  GameSpec game_spec() const {
    auto g = GameSpec::of(game);
    g.max_steps = max_episode_steps;
    g.maze_min_cells = maze_min_cells;
    g.maze_max_cells = maze_max_cells;
    g.braid = maze_braid;
    return g;
  }

  RunConfig run_config(std::uint64_t seed) const {
    RunConfig r;
    r.game = game_spec();
    r.n_train_backgrounds = n_train_backgrounds;
    r.ppo = ppo;
    r.total_steps = total_steps;
    r.seed = seed;
    r.init_scale = init_scale;
    r.aug = aug;
    r.store_fraction = exda_store_fraction;
    return r;
  }

  int epochs() const { return run_config(seeds.empty() ? 1 : seeds.front()).epochs(); }

  InDaSchedule schedule() const {
    InDaSchedule s;
    s.start = s_start;
    s.end = t_end < 0 ? epochs() : t_end;
    s.interval = i_interval;
    s.total = epochs();
    return s;
  }

  DistillConfig inda_distill() const {
    DistillConfig d = DistillConfig::inda();
    d.epochs = da_epochs;
    d.minibatches = da_minibatches;
    d.lr = da_lr;
    d.include_value = da_value;
    d.aug = aug;
    return d;
  }

  DistillConfig exda_distill() const {
    DistillConfig d = DistillConfig::exda();
    d.epochs = exda_epochs;
    d.minibatch_size = exda_minibatch_size;
    d.lr = exda_lr;
    d.include_value = exda_value;
    d.aug = aug;
    return d;
  }

  UcbOptions ucb_options() const { return {ucb_window, ucb_min_exploration, ucb_eps, ucb_c}; }

  // Kinds named by `kind`; random_color expands to its two members.
  std::vector<AugKind> kinds() const {
    if (kind == kRandomColor) return {AugKind::ColorJitter, AugKind::RandomConv};
    return {parse_aug(kind)};
  }

  void validate() const {
    ppo.validate();
    if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
    if (total_steps < 0) throw ConfigError("total_steps: must be >= 0");
    if (total_steps == 0 && !(method == Method::Exda && !exda_targets.empty()))
      throw ConfigError("total_steps: must be > 0 unless exda runs from exda_targets");
    if (method == Method::Exda && total_steps == 0 && !exda_reinit && teacher_params.empty())
      throw ConfigError("teacher_params: required for exda from exda_targets without exda_reinit");
    if (max_episode_steps < 1) throw ConfigError("max_episode_steps: must be >= 1");
    if (maze_min_cells < 2 || maze_max_cells > gem::kCells || maze_min_cells > maze_max_cells)
      throw ConfigError("maze_min_cells/maze_max_cells: need 2 <= min <= max <= 5");
    if (!(maze_braid >= 0 && maze_braid <= 1)) throw ConfigError("maze_braid: must be in [0,1]");
    if (n_train_backgrounds < 1 || n_test_backgrounds < 1) throw ConfigError("n_*_backgrounds: must be >= 1");
    if (!(init_scale >= 0)) throw ConfigError("init_scale: must be >= 0");
    if (eval_episodes < 1) throw ConfigError("eval_episodes: must be >= 1");
    if (eval_interval < 0) throw ConfigError("eval_interval: must be >= 0");
    if (jsd_probe_size < 1) throw ConfigError("jsd_probe_size: must be >= 1");
    parse_aug(jsd_kind);
    kinds();
    if (arms.empty()) throw ConfigError("arms: at least one augmentation is required");
    if (!(alpha_r >= 0)) throw ConfigError("alpha_r: must be >= 0");
    if (i_interval < 1) throw ConfigError("i_interval: must be >= 1");
    if ((method == Method::UcbInda || method == Method::UcbExda) && i_interval < 2)
      throw ConfigError("i_interval: UCB methods need >= 2");
    if (total_steps > 0) {
      if (s_start < 0 || (t_end >= 0 && t_end < s_start) || (t_end > epochs()))
        throw ConfigError("s_start/t_end: need 0 <= s_start <= t_end <= epochs");
    }
    if (da_epochs < 0 || da_minibatches < 1 || !(da_lr >= 0)) throw ConfigError("da_*: bad values");
    if (exda_epochs < 0 || exda_minibatch_size < 1 || !(exda_lr >= 0)) throw ConfigError("exda_*: bad values");
    if (exda_buffer < 1) throw ConfigError("exda_buffer: must be >= 1");
    if (!(exda_store_fraction > 0 && exda_store_fraction <= 1)) throw ConfigError("exda_store_fraction: must be in (0,1]");
    if (ucb_window < 1 || ucb_min_exploration < 0 || !(ucb_eps > 0)) throw ConfigError("ucb_*: bad values");
  }
};

// ---------------------------------------------------------------------------
// Config text format: `key = value` lines, `[section]` headers, `#` comments.

namespace cfgio {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": invalid number '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": invalid boolean '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string fmt(bool v) { return v ? "true" : "false"; }

inline std::string join_kinds(const std::vector<AugKind>& ks) {
  std::string s;
  for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? ", " : "") + std::string(aug_name(ks[i]));
  return s;
}

struct Key {
  std::string_view section;
  std::string_view name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define ASRL_NUM(sec, field, type)                                                                  \
  Key {                                                                                             \
    sec, #field, [](ExperimentConfig& c, const std::string& v) { c.field = parse_number<type>(#field, v); }, \
        [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.field)); }                 \
  }
#define ASRL_PPO(field, type)                                                                                 \
  Key {                                                                                                       \
    "ppo", #field, [](ExperimentConfig& c, const std::string& v) { c.ppo.field = parse_number<type>(#field, v); }, \
        [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.ppo.field)); }                       \
  }
#define ASRL_AUG(field)                                                                                      \
  Key {                                                                                                      \
    "augment", #field, [](ExperimentConfig& c, const std::string& v) { c.aug.field = parse_number<double>(#field, v); }, \
        [](const ExperimentConfig& c) { return fmt(c.aug.field); }                                          \
  }
#define ASRL_BOOL(sec, field)                                                                        \
  Key {                                                                                              \
    sec, #field, [](ExperimentConfig& c, const std::string& v) { c.field = parse_bool(#field, v); }, \
        [](const ExperimentConfig& c) { return fmt(c.field); }                                       \
  }
#define ASRL_STR(sec, field)                                                                \
  Key {                                                                                     \
    sec, #field, [](ExperimentConfig& c, const std::string& v) { c.field = v; },            \
        [](const ExperimentConfig& c) { return c.field; }                                   \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"general", "method", [](ExperimentConfig& c, const std::string& v) { c.method = parse_method(v); },
          [](const ExperimentConfig& c) { return std::string(method_name(c.method)); }},
      Key{"general", "game", [](ExperimentConfig& c, const std::string& v) { c.game = parse_game(v); },
          [](const ExperimentConfig& c) { return std::string(game_name(c.game)); }},
      Key{"general", "seeds",
          [](ExperimentConfig& c, const std::string& v) {
            c.seeds.clear();
            for (const auto& s : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
          },
          [](const ExperimentConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? ", " : "") + std::to_string(c.seeds[i]);
            return s;
          }},
      ASRL_STR("general", output_dir),
      ASRL_NUM("general", total_steps, long),
      ASRL_NUM("general", max_episode_steps, int),
      ASRL_NUM("general", maze_min_cells, int),
      ASRL_NUM("general", maze_max_cells, int),
      ASRL_NUM("general", maze_braid, double),
      ASRL_NUM("general", n_train_backgrounds, int),
      ASRL_NUM("general", n_test_backgrounds, int),
      ASRL_NUM("general", init_scale, double),
      ASRL_NUM("general", eval_episodes, int),
      ASRL_NUM("general", eval_interval, int),
      ASRL_BOOL("general", eval_greedy),
      ASRL_STR("general", jsd_kind),
      ASRL_NUM("general", jsd_probe_size, int),
      ASRL_PPO(gamma, double),
      ASRL_PPO(lambda, double),
      ASRL_PPO(steps_per_rollout, int),
      Key{"ppo", "ppo_epochs",
          [](ExperimentConfig& c, const std::string& v) { c.ppo.epochs = parse_number<int>("ppo_epochs", v); },
          [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.ppo.epochs)); }},
      ASRL_PPO(minibatches, int),
      ASRL_PPO(clip, double),
      ASRL_PPO(value_coef, double),
      ASRL_PPO(entropy_coef, double),
      ASRL_PPO(lr, double),
      ASRL_PPO(n_envs, int),
      Key{"ppo", "normalize_rewards",
          [](ExperimentConfig& c, const std::string& v) { c.ppo.normalize_rewards = parse_bool("normalize_rewards", v); },
          [](const ExperimentConfig& c) { return fmt(c.ppo.normalize_rewards); }},
      Key{"ppo", "normalize_advantages",
          [](ExperimentConfig& c, const std::string& v) {
            c.ppo.normalize_advantages = parse_bool("normalize_advantages", v);
          },
          [](const ExperimentConfig& c) { return fmt(c.ppo.normalize_advantages); }},
      ASRL_STR("augment", kind),
      Key{"augment", "arms",
          [](ExperimentConfig& c, const std::string& v) {
            c.arms.clear();
            for (const auto& s : split_list(v)) c.arms.push_back(parse_aug(s));
          },
          [](const ExperimentConfig& c) { return join_kinds(c.arms); }},
      ASRL_AUG(crop_min_fraction),
      ASRL_AUG(cutout_min_fraction),
      ASRL_AUG(cutout_max_fraction),
      ASRL_AUG(jitter_scale_lo),
      ASRL_AUG(jitter_scale_hi),
      ASRL_AUG(jitter_shift),
      ASRL_NUM("drac", alpha_r, double),
      ASRL_NUM("inda", s_start, int),
      ASRL_NUM("inda", t_end, int),
      ASRL_NUM("inda", i_interval, int),
      ASRL_NUM("inda", da_epochs, int),
      ASRL_NUM("inda", da_minibatches, int),
      ASRL_NUM("inda", da_lr, double),
      ASRL_BOOL("inda", da_value),
      ASRL_NUM("exda", exda_epochs, int),
      ASRL_NUM("exda", exda_minibatch_size, int),
      ASRL_NUM("exda", exda_lr, double),
      ASRL_BOOL("exda", exda_value),
      ASRL_BOOL("exda", exda_reinit),
      ASRL_NUM("exda", exda_buffer, int),
      ASRL_NUM("exda", exda_store_fraction, double),
      Key{"exda", "exda_exclude",
          [](ExperimentConfig& c, const std::string& v) {
            c.exda_exclude.clear();
            for (const auto& s : split_list(v)) c.exda_exclude.push_back(parse_aug(s));
          },
          [](const ExperimentConfig& c) { return join_kinds(c.exda_exclude); }},
      ASRL_STR("exda", exda_targets),
      ASRL_STR("exda", teacher_params),
      ASRL_BOOL("exda", save_buffer),
      ASRL_NUM("ucb", ucb_window, int),
      ASRL_NUM("ucb", ucb_min_exploration, int),
      ASRL_NUM("ucb", ucb_eps, double),
      Key{"ucb", "ucb_c",
          [](ExperimentConfig& c, const std::string& v) {
            if (v == "forced") c.ucb_c.reset();
            else c.ucb_c = parse_number<double>("ucb_c", v);
          },
          [](const ExperimentConfig& c) { return c.ucb_c ? fmt(*c.ucb_c) : std::string("forced"); }},
  };
  return table;
}

#undef ASRL_NUM
#undef ASRL_PPO
#undef ASRL_AUG
#undef ASRL_BOOL
#undef ASRL_STR

inline const Key* find_key(std::string_view name) {
  for (const auto& k : keys())
    if (k.name == name) return &k;
  return nullptr;
}

}  // namespace cfgio

// Applies one key; throws ConfigError naming the key on a bad value.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto* k = cfgio::find_key(key);
  if (!k) throw ConfigError("unknown key '" + key + "'");
  k->set(cfg, value);
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section = "general";
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto t = cfgio::trim(line);
    if (t.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header");
      section = cfgio::trim(std::string_view(t).substr(1, t.size() - 2));
      bool known = false;
      for (const auto& k : cfgio::keys()) known = known || k.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const auto key = cfgio::trim(std::string_view(t).substr(0, eq));
    const auto value = cfgio::trim(std::string_view(t).substr(eq + 1));
    const auto* k = cfgio::find_key(key);
    if (!k) throw ConfigError(where + "unknown key '" + key + "'");
    if (k->section != section)
      throw ConfigError(where + "key '" + key + "' belongs to section [" + std::string(k->section) + "]");
    try {
      k->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  auto cfg = parse_config_text(ss.str());
  cfg.validate();
  return cfg;
}

// Full config text with every key, grouped by section.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string_view section;
  for (const auto& k : cfgio::keys()) {
    if (k.section != section) {
      section = k.section;
      os << (os.tellp() > 0 ? "\n" : "") << "[" << section << "]\n";
    }
    os << k.name << " = " << k.get(cfg) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  double mean_return = 0.0;
  std::vector<double> returns;
  std::vector<int> levels;
};

// Runs `episodes` full episodes with actions sampled from the policy (or its
// argmax when greedy), stepping up to 16 environments in lockstep.
template <typename T>
EvalResult evaluate_detailed(const ParamSet<T>& params, const GameSpec& spec, const ModeSpec& mode, int episodes,
                             std::uint64_t seed, bool greedy = false) {
  if (episodes < 1) throw Error("evaluate: episodes must be >= 1");
  const int lanes = std::min(episodes, 16);
  Rng rng(derive_seed(seed, 0xe7a1));
  std::vector<EnvState> envs;
  std::vector<Observation> obs;
  std::vector<int> slot_episode(lanes);
  int started = 0;
  for (int i = 0; i < lanes; ++i) {
    envs.push_back(make_env(spec, mode, derive_seed(seed, 0xe7a2, started)));
    obs.push_back(reset(envs.back()));
    slot_episode[i] = started++;
  }
  EvalResult r;
  r.returns.assign(episodes, 0.0);
  r.levels.assign(episodes, 0);
  std::vector<bool> active(lanes, true);
  int live = lanes;
  while (live > 0) {
    std::vector<ImageTensor> batch;
    std::vector<int> idx;
    for (int i = 0; i < lanes; ++i)
      if (active[i]) {
        batch.push_back(obs[i]);
        idx.push_back(i);
      }
    const auto out = forward(params, batch);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const int i = idx[j];
      const auto& p = out[j].probs;
      const int a = greedy ? static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) : sample_action(p, rng);
      auto res = step(envs[i], a);
      if (!res.done) {
        obs[i] = std::move(res.obs);
        continue;
      }
      r.returns[slot_episode[i]] = envs[i].episode_return;
      r.levels[slot_episode[i]] = envs[i].level_seed;
      if (started < episodes) {
        envs[i] = make_env(spec, mode, derive_seed(seed, 0xe7a2, started));
        obs[i] = reset(envs[i]);
        slot_episode[i] = started++;
      } else {
        active[i] = false;
        --live;
      }
    }
  }
  double s = 0.0;
  for (double v : r.returns) s += v;
  r.mean_return = s / episodes;
  return r;
}

template <typename T>
double evaluate(const ParamSet<T>& params, const GameSpec& spec, const ModeSpec& mode, int episodes,
                std::uint64_t seed, bool greedy = false) {
  return evaluate_detailed(params, spec, mode, episodes, seed, greedy).mean_return;
}

// JSD(p, q) = KL(p||m)/2 + KL(q||m)/2 with m = (p + q)/2, natural log.
inline double jensen_shannon(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("jensen_shannon: size mismatch");
  double js = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    const double m = 0.5 * (p[a] + q[a]);
    const double tp = p[a] > 0.0 ? 0.5 * p[a] * std::log(p[a] / m) : 0.0;
    const double tq = q[a] > 0.0 ? 0.5 * q[a] * std::log(q[a] / m) : 0.0;
    js += tp + tq;
  }
  return std::clamp(js, 0.0, std::log(2.0));
}

template <typename T>
double policy_jsd(const ParamSet<T>& params, std::span<const ImageTensor> observations, AugKind kind,
                  std::uint64_t seed, const AugParams& aug = {}) {
  if (observations.empty()) throw Error("policy_jsd: no observations");
  const auto original = forward(params, observations);
  const auto augmented = forward(params, apply(kind, seed, observations, aug));
  double s = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) s += jensen_shannon(original[i].probs, augmented[i].probs);
  return s / static_cast<double>(original.size());
}

template <typename T>
double policy_jsd(const ParamSet<T>& params, const std::vector<ImageTensor>& observations, AugKind kind,
                  std::uint64_t seed, const AugParams& aug = {}) {
  return policy_jsd(params, std::span<const ImageTensor>(observations), kind, seed, aug);
}

// Fixed probe set: every 4th observation of uniformly random play.
inline std::vector<ImageTensor> probe_observations(const GameSpec& spec, const ModeSpec& mode, int count,
                                                   std::uint64_t seed) {
  VecEnv envs(spec, mode, 8, derive_seed(seed, 0x9b0e));
  Rng rng(derive_seed(seed, 0x9b0f));
  std::vector<ImageTensor> out;
  std::vector<int> actions(envs.size());
  for (int t = 0; static_cast<int>(out.size()) < count; ++t) {
    if (t % 4 == 0)
      for (const auto& o : envs.observations())
        if (static_cast<int>(out.size()) < count) out.push_back(o);
    for (auto& a : actions) a = static_cast<int>(rng.below(spec.n_actions()));
    envs.step(actions);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score normalization.

struct ScoreRow {
  std::string method;
  std::string game;
  std::string mode;
  double score = 0.0;
};

struct NormalizedScore {
  ScoreRow row;
  double reference = 0.0;
  double normalized = 0.0;
};

// Divides each score by the best PPO train-mode score of its game.
inline std::vector<NormalizedScore> normalize_scores(const std::vector<ScoreRow>& rows,
                                                     const std::vector<ScoreRow>& ppo_reference_rows) {
  std::map<std::string, double> ref;
  for (const auto& r : ppo_reference_rows)
    if (r.method == "ppo" && r.mode == "train") {
      auto it = ref.find(r.game);
      ref[r.game] = it == ref.end() ? r.score : std::max(it->second, r.score);
    }
  std::vector<NormalizedScore> out;
  for (const auto& r : rows) {
    const auto it = ref.find(r.game);
    if (it == ref.end()) throw Error("normalize_scores: no PPO train reference for game " + r.game);
    if (!(it->second > 0)) throw Error("normalize_scores: PPO reference for " + r.game + " is not positive");
    out.push_back({r, it->second, r.score / it->second});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments.

struct MetricsRow {
  int epoch = 0;
  long env_steps = 0;
  double rollout_return = std::numeric_limits<double>::quiet_NaN();
  double train_return = std::numeric_limits<double>::quiet_NaN();
  double testbg_return = std::numeric_limits<double>::quiet_NaN();
  double testlv_return = std::numeric_limits<double>::quiet_NaN();
  double policy_jsd = std::numeric_limits<double>::quiet_NaN();
  bool da_phase = false;
  double wall_seconds = 0.0;
  std::string method;
  std::uint64_t seed = 0;
};

struct SummaryRow {
  std::string method;
  std::string stage;  // "final", or "teacher" for the RL part of ExDA methods
  std::uint64_t seed = 0;
  double train_return = std::numeric_limits<double>::quiet_NaN();
  double testbg_return = std::numeric_limits<double>::quiet_NaN();
  double testlv_return = std::numeric_limits<double>::quiet_NaN();
  double policy_jsd = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct ExperimentResult {
  std::vector<MetricsRow> metrics;
  std::vector<SummaryRow> summary;
  int failed_seeds = 0;
};

namespace csv {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string clean(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double to_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw IoError("csv: bad number '" + s + "'");
  }
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw IoError("csv: missing column " + std::string(name));
  }
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  Table t;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.front() == '#') continue;
    if (t.header.empty()) t.header = split(line);
    else t.rows.push_back(split(line));
  }
  if (t.header.empty()) throw IoError(path.string() + ": no header");
  return t;
}

}  // namespace csv

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kCsvVersion << " metrics\n"
     << "method,seed,epoch,env_steps,rollout_return,train_return,testbg_return,testlv_return,policy_jsd,da_phase\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.seed << ',' << r.epoch << ',' << r.env_steps << ',' << csv::num(r.rollout_return) << ','
       << csv::num(r.train_return) << ',' << csv::num(r.testbg_return) << ',' << csv::num(r.testlv_return) << ','
       << csv::num(r.policy_jsd) << ',' << (r.da_phase ? 1 : 0) << '\n';
}

inline void write_timing_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kCsvVersion << " timing\nmethod,seed,epoch,wall_seconds\n";
  for (const auto& r : rows) os << r.method << ',' << r.seed << ',' << r.epoch << ',' << csv::num(r.wall_seconds) << '\n';
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kCsvVersion << " summary\nmethod,stage,seed,train_return,testbg_return,testlv_return,policy_jsd,status\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.stage << ',' << r.seed << ',' << csv::num(r.train_return) << ','
       << csv::num(r.testbg_return) << ',' << csv::num(r.testlv_return) << ',' << csv::num(r.policy_jsd) << ','
       << csv::clean(r.status) << '\n';
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= xs.size();
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(v / (xs.size() - 1)) : 0.0};
}

// Mean and sample standard deviation across successful seeds.
inline void write_aggregate_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kCsvVersion << " aggregate\nmethod,stage,metric,n,mean,std\n";
  std::vector<std::pair<std::string, std::string>> groups;
  for (const auto& r : rows)
    if (std::find(groups.begin(), groups.end(), std::pair{r.method, r.stage}) == groups.end())
      groups.emplace_back(r.method, r.stage);
  for (const auto& [method, stage] : groups) {
    for (const char* metric : {"train_return", "testbg_return", "testlv_return", "policy_jsd"}) {
      std::vector<double> xs;
      for (const auto& r : rows) {
        if (r.method != method || r.stage != stage || r.status != "ok") continue;
        const std::string_view m = metric;
        const double v = m == "train_return" ? r.train_return
                         : m == "testbg_return" ? r.testbg_return
                         : m == "testlv_return" ? r.testlv_return
                                                : r.policy_jsd;
        if (!std::isnan(v)) xs.push_back(v);
      }
      const auto [mu, sd] = mean_std(xs);
      os << method << ',' << stage << ',' << metric << ',' << xs.size() << ',' << csv::num(mu) << ',' << csv::num(sd)
         << '\n';
    }
  }
}

inline void write_arm_trace_csv(const std::filesystem::path& path,
                                const std::vector<std::pair<std::uint64_t, RlRun>>& runs) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << kCsvVersion << " arm_trace\nseed,round,epoch,arm,gain,c,warmup";
  const auto& arms = runs.front().second.arms;
  for (auto k : arms) os << ",ucb_" << aug_name(k);
  os << '\n';
  for (const auto& [seed, run] : runs)
    for (const auto& r : run.arm_trace) {
      os << seed << ',' << r.round << ',' << r.epoch << ',' << aug_name(run.arms[r.arm]) << ',' << csv::num(r.gain) << ','
         << csv::num(r.c) << ',' << (r.warmup ? 1 : 0);
      for (std::size_t k = 0; k < run.arms.size(); ++k)
        os << ',' << (r.scores.empty() ? std::string("nan") : csv::num(r.scores[k]));
      os << '\n';
    }
}

struct Evaluator {
  GameSpec spec;
  ModeSpec train, testbg, testlv;
  int episodes = 100;
  bool greedy = false;
  std::uint64_t seed = 0;
  std::vector<ImageTensor> probe;
  AugKind jsd_kind = AugKind::ColorJitter;
  AugParams aug;

  Evaluator(const ExperimentConfig& cfg, std::uint64_t run_seed)
      : spec(cfg.game_spec()),
        train(ModeSpec::make(Mode::Train, cfg.n_train_backgrounds, cfg.n_test_backgrounds)),
        testbg(ModeSpec::make(Mode::TestBg, cfg.n_train_backgrounds, cfg.n_test_backgrounds)),
        testlv(ModeSpec::make(Mode::TestLv, cfg.n_train_backgrounds, cfg.n_test_backgrounds)),
        episodes(cfg.eval_episodes),
        greedy(cfg.eval_greedy),
        seed(derive_seed(run_seed, 0xe7a0)),
        probe(probe_observations(spec, train, cfg.jsd_probe_size, derive_seed(run_seed, 0x9b00))),
        jsd_kind(parse_aug(cfg.jsd_kind)),
        aug(cfg.aug) {}

  double jsd(const ParamSet<float>& p) const { return policy_jsd(p, probe, jsd_kind, derive_seed(seed, 0x15d), aug); }

  template <typename Row>
  void fill(const ParamSet<float>& p, Row& row) const {
    row.train_return = evaluate(p, spec, train, episodes, derive_seed(seed, 1), greedy);
    row.testbg_return = evaluate(p, spec, testbg, episodes, derive_seed(seed, 2), greedy);
    row.testlv_return = evaluate(p, spec, testlv, episodes, derive_seed(seed, 3), greedy);
    row.policy_jsd = jsd(p);
  }
};

namespace detail {

inline SummaryRow final_row(const Evaluator& ev, const ParamSet<float>& p, std::string method, std::string stage,
                            std::uint64_t seed) {
  SummaryRow row;
  row.method = std::move(method);
  row.stage = std::move(stage);
  row.seed = seed;
  ev.fill(p, row);
  return row;
}

}  // namespace detail

// Runs every seed of the configured method and writes the output files:
//   metrics.csv, summary.csv, aggregate.csv, timing.csv, config.txt,
//   params_seed<k>.bin, plus arm_trace.csv for UCB methods and
//   teacher_seed<k>.bin / buffer_seed<k>.bin for ExDA methods.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "config.txt");
    os << serialize_config(cfg);
  }
  const std::string mname(method_name(cfg.method));
  ExperimentResult result;
  std::vector<std::pair<std::uint64_t, RlRun>> ucb_runs;
  for (const auto seed : cfg.seeds) {
    const Evaluator ev(cfg, seed);
    std::vector<MetricsRow> rows;
    const auto hook = [&](const EpochRecord& rec, const ParamSet<float>& p) {
      MetricsRow row;
      row.method = mname;
      row.seed = seed;
      row.epoch = rec.epoch;
      row.env_steps = rec.env_steps;
      row.rollout_return = rec.rollout_return;
      row.da_phase = rec.da_phase;
      row.wall_seconds = rec.seconds;
      row.policy_jsd = ev.jsd(p);
      if (cfg.eval_interval > 0 && rec.epoch % cfg.eval_interval == 0) ev.fill(p, row);
      rows.push_back(row);
      if (log) *log << mname << " seed " << seed << " epoch " << rec.epoch << " return " << csv::num(rec.rollout_return)
                    << "\n" << std::flush;
    };
    try {
      const auto rc = cfg.run_config(seed);
      const auto suffix = "_seed" + std::to_string(seed) + ".bin";
      auto exda_opts = [&] {
        ExdaOptions o;
        o.kinds = cfg.kinds();
        o.distill = cfg.exda_distill();
        o.reinit = cfg.exda_reinit;
        return o;
      };
      auto finish_exda = [&](const ExdaRun& run) {
        result.summary.push_back(detail::final_row(ev, run.rl.params, mname, "teacher", seed));
        save_params((dir / ("teacher" + suffix)).string(), run.rl.params);
        if (cfg.save_buffer) save_distill_buffer((dir / ("buffer" + suffix)).string(), run.exda.targets);
        return run.exda.student;
      };
      ParamSet<float> final_params(rc.game.n_actions());
      switch (cfg.method) {
        case Method::Ppo: final_params = run_ppo(rc, 0, hook).params; break;
        case Method::Rad: final_params = run_rad(rc, cfg.kinds().front(), hook).params; break;
        case Method::Drac: final_params = run_drac(rc, cfg.kinds().front(), cfg.alpha_r, false, hook).params; break;
        case Method::DracPagrad: final_params = run_drac(rc, cfg.kinds().front(), cfg.alpha_r, true, hook).params; break;
        case Method::Inda:
          final_params = cfg.kind == kRandomColor
                             ? run_inda_random(rc, cfg.schedule(), cfg.kinds(), cfg.inda_distill(), hook).params
                             : run_inda(rc, cfg.schedule(), cfg.kinds().front(), cfg.inda_distill(), hook).params;
          break;
        case Method::Exda:
          if (!cfg.exda_targets.empty() && cfg.total_steps == 0) {
            const auto targets = load_distill_buffer(cfg.exda_targets);
            ParamSet<float> student =
                cfg.exda_reinit ? init_params<float>(targets.n_actions(), derive_seed(seed, stream::kReinit), cfg.init_scale)
                                : load_params(cfg.teacher_params);
            run_distill_phase(student, targets, cfg.kinds(), cfg.exda_distill(), derive_seed(seed, stream::kExda));
            final_params = std::move(student);
          } else {
            final_params = finish_exda(run_exda(rc, exda_opts(), static_cast<std::size_t>(cfg.exda_buffer), hook));
          }
          break;
        case Method::UcbInda: {
          auto run = run_ucb_inda(rc, cfg.arms, cfg.schedule(), cfg.ucb_options(), cfg.inda_distill(), 0, hook);
          final_params = run.params;
          ucb_runs.emplace_back(seed, std::move(run));
          break;
        }
        case Method::UcbExda: {
          auto run = run_ucb_exda(rc, cfg.arms, cfg.schedule(), cfg.ucb_options(), cfg.inda_distill(), exda_opts(),
                                  static_cast<std::size_t>(cfg.exda_buffer), cfg.exda_exclude, hook);
          final_params = finish_exda(run);
          ucb_runs.emplace_back(seed, std::move(run.rl));
          break;
        }
      }
      save_params((dir / ("params" + suffix)).string(), final_params);
      result.summary.push_back(detail::final_row(ev, final_params, mname, "final", seed));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      SummaryRow row;
      row.method = mname;
      row.stage = "final";
      row.seed = seed;
      row.status = std::string("failed: ") + e.what();
      result.summary.push_back(row);
      result.failed_seeds += 1;
      if (log) *log << mname << " seed " << seed << " failed: " << e.what() << "\n";
    }
    result.metrics.insert(result.metrics.end(), rows.begin(), rows.end());
  }
  write_metrics_csv(dir / "metrics.csv", result.metrics);
  write_timing_csv(dir / "timing.csv", result.metrics);
  write_summary_csv(dir / "summary.csv", result.summary);
  write_aggregate_csv(dir / "aggregate.csv", result.summary);
  if (!ucb_runs.empty()) write_arm_trace_csv(dir / "arm_trace.csv", ucb_runs);
  return result;
}

// ---------------------------------------------------------------------------
// Report: gnuplot column files per metric plus a normalized score table.

inline void emit_report(const std::filesystem::path& run_dir, std::ostream& out) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw IoError("report: not a directory: " + run_dir.string());
  std::vector<fs::path> dirs;
  if (fs::exists(run_dir / "metrics.csv")) dirs.push_back(run_dir);
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(run_dir))
    if (e.is_directory() && fs::exists(e.path() / "metrics.csv")) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  dirs.insert(dirs.end(), subdirs.begin(), subdirs.end());
  if (dirs.empty()) throw IoError("report: no metrics.csv under " + run_dir.string());

  // (method -> epoch -> metric -> values across seeds)
  const std::vector<std::string> metrics = {"rollout_return", "train_return", "testbg_return", "testlv_return",
                                            "policy_jsd"};
  std::map<std::string, std::map<int, std::vector<std::vector<double>>>> curves;
  std::vector<std::string> methods;
  std::vector<ScoreRow> scores;
  std::string game = "gemmaze";
  for (const auto& d : dirs) {
    const auto m = csv::read(d / "metrics.csv");
    if (m.rows.empty()) throw IoError("report: empty metrics in " + (d / "metrics.csv").string());
    const int cm = m.column("method"), ce = m.column("epoch");
    std::vector<int> cols;
    for (const auto& name : metrics) cols.push_back(m.column(name));
    for (const auto& row : m.rows) {
      const auto& method = row.at(cm);
      if (std::find(methods.begin(), methods.end(), method) == methods.end()) methods.push_back(method);
      auto& slot = curves[method][std::stoi(row.at(ce))];
      slot.resize(metrics.size());
      for (std::size_t k = 0; k < metrics.size(); ++k) {
        const double v = csv::to_double(row.at(cols[k]));
        if (!std::isnan(v)) slot[k].push_back(v);
      }
    }
    if (fs::exists(d / "config.txt")) {
      std::ifstream is(d / "config.txt");
      std::stringstream ss;
      ss << is.rdbuf();
      game = std::string(game_name(parse_config_text(ss.str()).game));
    }
    const auto s = csv::read(d / "summary.csv");
    const int sm = s.column("method"), ss = s.column("stage"), st = s.column("status");
    const int ct = s.column("train_return"), cb = s.column("testbg_return"), cl = s.column("testlv_return");
    std::map<std::string, std::vector<std::vector<double>>> per;
    for (const auto& row : s.rows) {
      if (row.at(st) != "ok" || row.at(ss) != "final") continue;
      auto& v = per[row.at(sm)];
      v.resize(3);
      v[0].push_back(csv::to_double(row.at(ct)));
      v[1].push_back(csv::to_double(row.at(cb)));
      v[2].push_back(csv::to_double(row.at(cl)));
    }
    for (const auto& [method, v] : per) {
      const char* modes[3] = {"train", "test-bg", "test-lv"};
      for (int k = 0; k < 3; ++k) scores.push_back({method, game, modes[k], mean_std(v[k]).first});
    }
  }

  const fs::path report_dir = run_dir / "report";
  fs::create_directories(report_dir);
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    std::ofstream os(report_dir / (metrics[k] + ".dat"));
    os << "# epoch";
    for (const auto& m : methods) os << ' ' << m;
    os << '\n';
    std::vector<int> epochs;
    for (const auto& m : methods)
      for (const auto& [e, _] : curves[m])
        if (std::find(epochs.begin(), epochs.end(), e) == epochs.end()) epochs.push_back(e);
    std::sort(epochs.begin(), epochs.end());
    for (int e : epochs) {
      os << e;
      for (const auto& m : methods) {
        const auto it = curves[m].find(e);
        os << ' ' << (it == curves[m].end() ? std::string("nan") : csv::num(mean_std(it->second[k]).first));
      }
      os << '\n';
    }
  }

  std::vector<std::string> table_methods;
  for (const auto& s : scores)
    if (std::find(table_methods.begin(), table_methods.end(), s.method) == table_methods.end())
      table_methods.push_back(s.method);
  std::vector<NormalizedScore> norm;
  bool normalized = true;
  try {
    norm = normalize_scores(scores, scores);
  } catch (const Error&) {
    normalized = false;
    for (const auto& s : scores) norm.push_back({s, 1.0, s.score});
  }
  out << (normalized ? "Scores normalized by the best PPO train score (* marks the row maximum)\n"
                     : "Raw scores, no PPO reference in this run directory (* marks the row maximum)\n");
  out << std::left << std::setw(10) << "mode";
  for (const auto& m : table_methods) out << std::setw(14) << m;
  out << '\n';
  for (const char* mode : {"train", "test-bg", "test-lv"}) {
    std::vector<double> vals;
    for (const auto& m : table_methods) {
      double v = std::numeric_limits<double>::quiet_NaN();
      for (const auto& n : norm)
        if (n.row.method == m && n.row.mode == mode) v = n.normalized;
      vals.push_back(v);
    }
    int best = -1;
    for (std::size_t i = 0; i < vals.size(); ++i)
      if (!std::isnan(vals[i]) && (best < 0 || vals[i] > vals[best])) best = static_cast<int>(i);
    out << std::setw(10) << mode;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(3) << vals[i] << (static_cast<int>(i) == best ? "*" : "");
      out << std::setw(14) << cell.str();
    }
    out << '\n';
  }
  out << "plot data: " << report_dir.string() << "/{";
  for (std::size_t k = 0; k < metrics.size(); ++k) out << (k ? "," : "") << metrics[k];
  out << "}.dat\n";
}

}  // namespace asrl
