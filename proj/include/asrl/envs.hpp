#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asrl/error.hpp"
#include "asrl/image.hpp"
#include "asrl/rng.hpp"

namespace asrl {

using Observation = ImageTensor;

enum class GameId { GemMaze, RunnerRail };

inline std::string_view game_name(GameId g) { return g == GameId::GemMaze ? "gemmaze" : "runnerrail"; }

inline GameId parse_game(std::string_view s) {
  if (s == "gemmaze") return GameId::GemMaze;
  if (s == "runnerrail") return GameId::RunnerRail;
  throw ConfigError("unknown game '" + std::string(s) + "'");
}

struct GameSpec {
  GameId id = GameId::GemMaze;
  int max_steps = 256;
  double goal_reward = 10.0;
  double step_reward = 0.0;
  // GemMaze layout knobs: maze side in cells is drawn per level from
  // [maze_min_cells, maze_max_cells]; braid is the fraction of dead ends
  // opened into loops.
  int maze_min_cells = 5;
  int maze_max_cells = 5;
  double braid = 0.0;

  int n_actions() const { return id == GameId::GemMaze ? 5 : 4; }

  static GameSpec gem_maze() { return GameSpec{GameId::GemMaze}; }
  static GameSpec runner_rail() { return GameSpec{GameId::RunnerRail}; }
  static GameSpec of(GameId id) { return GameSpec{id}; }

  friend bool operator==(const GameSpec&, const GameSpec&) = default;
};

// Action ids.
namespace gem_action {
inline constexpr int kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kNoop = 4;
}
namespace rail_action {
inline constexpr int kLeft = 0, kRight = 1, kJump = 2, kNoop = 3;
}

enum class Mode { Train, TestBg, TestLv };

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Train: return "train";
    case Mode::TestBg: return "test-bg";
    case Mode::TestLv: return "test-lv";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "train") return Mode::Train;
  if (s == "test-bg") return Mode::TestBg;
  if (s == "test-lv") return Mode::TestLv;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

inline constexpr int kTrainLevelBase = 0;
inline constexpr int kTestLevelBase = 10000;
inline constexpr int kLevelCount = 200;

// Level-seed range and background pool for one evaluation mode.
// Train uses backgrounds [0, B); test-bg uses [B, B + B_test).
struct ModeSpec {
  Mode mode = Mode::Train;
  int level_begin = kTrainLevelBase;
  int level_end = kTrainLevelBase + kLevelCount;
  std::vector<int> backgrounds{0};

  static ModeSpec make(Mode m, int n_train_backgrounds = 1, int n_test_backgrounds = 8) {
    ModeSpec s;
    s.mode = m;
    s.backgrounds.clear();
    if (m == Mode::TestLv) {
      s.level_begin = kTestLevelBase;
      s.level_end = kTestLevelBase + kLevelCount;
    }
    if (m == Mode::TestBg) {
      for (int b = 0; b < n_test_backgrounds; ++b) s.backgrounds.push_back(n_train_backgrounds + b);
    } else {
      for (int b = 0; b < n_train_backgrounds; ++b) s.backgrounds.push_back(b);
    }
    return s;
  }
};

namespace gem {
inline constexpr int kGrid = 11;  // tiles, including the outer wall ring
inline constexpr int kCells = 5;  // maze cells per side
}  // namespace gem

namespace rail {
inline constexpr int kTrackLength = 48;
inline constexpr int kViewCols = 16;
inline constexpr int kViewRows = 16;
inline constexpr int kGroundRow = 12;  // rows >= this are ground in the view
inline constexpr int kJumpSteps = 3;
}  // namespace rail

struct EnvState {
  GameSpec spec;
  int level_seed = 0;
  int background = 0;
  // GemMaze: kGrid x kGrid tiles, true = wall. RunnerRail: kTrackLength
  // columns, true = gap.
  std::vector<std::uint8_t> blocked;
  int agent_x = 0, agent_y = 0;
  int goal_x = 0, goal_y = 0;
  int start_x = 0, start_y = 0;
  int air = 0;  // RunnerRail jump counter
  int steps = 0;
  bool done = false;
  double episode_return = 0.0;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepResult {
  Observation obs;
  double reward = 0.0;
  bool done = false;
};

// Shortest wall-respecting path length from start to goal, or -1.
inline int maze_path_length(const EnvState& s) {
  using gem::kGrid;
  std::vector<int> dist(kGrid * kGrid, -1);
  std::deque<int> q;
  dist[s.start_y * kGrid + s.start_x] = 0;
  q.push_back(s.start_y * kGrid + s.start_x);
  const int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
  while (!q.empty()) {
    const int cur = q.front();
    q.pop_front();
    const int x = cur % kGrid, y = cur / kGrid;
    if (x == s.goal_x && y == s.goal_y) return dist[cur];
    for (int d = 0; d < 4; ++d) {
      const int nx = x + dx[d], ny = y + dy[d];
      if (nx < 0 || ny < 0 || nx >= kGrid || ny >= kGrid) continue;
      const int ni = ny * kGrid + nx;
      if (s.blocked[ni] || dist[ni] >= 0) continue;
      dist[ni] = dist[cur] + 1;
      q.push_back(ni);
    }
  }
  return -1;
}

// Returns true when the runner can reach the track end from column 0.
inline bool rail_solvable(const EnvState& s) {
  using namespace rail;
  // Reachable grounded columns; a jump clears up to kJumpSteps - 1 gap columns.
  std::vector<bool> reach(kTrackLength, false);
  reach[0] = !s.blocked[0];
  for (int x = 0; x < kTrackLength; ++x) {
    if (!reach[x]) continue;
    if (x + 1 < kTrackLength && !s.blocked[x + 1]) reach[x + 1] = true;
    for (int j = 1; j <= kJumpSteps; ++j)
      if (x + j < kTrackLength && !s.blocked[x + j]) reach[x + j] = true;
  }
  return reach[kTrackLength - 1];
}

namespace detail {

inline bool generate_maze(EnvState& s, std::uint64_t seed) {
  using namespace gem;
  Rng rng(derive_seed(seed, 0x3a2e));
  s.blocked.assign(kGrid * kGrid, 1);
  const int n = rng.range(std::clamp(s.spec.maze_min_cells, 2, kCells), std::clamp(s.spec.maze_max_cells, 2, kCells) + 1);
  // The maze occupies the top-left n x n cells; the rest of the grid is wall.
  auto tile = [&](int x, int y) -> std::uint8_t& { return s.blocked[y * kGrid + x]; };
  // Recursive backtracker over cells at odd tile coordinates.
  std::vector<bool> seen(n * n, false);
  std::vector<std::pair<int, int>> stack;
  const int sx = rng.range(0, n), sy = rng.range(0, n);
  stack.emplace_back(sx, sy);
  seen[sy * n + sx] = true;
  tile(2 * sx + 1, 2 * sy + 1) = 0;
  const int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
  while (!stack.empty()) {
    const auto [cx, cy] = stack.back();
    int options[4], k = 0;
    for (int d = 0; d < 4; ++d) {
      const int nx = cx + dx[d], ny = cy + dy[d];
      if (nx >= 0 && ny >= 0 && nx < n && ny < n && !seen[ny * n + nx]) options[k++] = d;
    }
    if (k == 0) {
      stack.pop_back();
      continue;
    }
    const int d = options[rng.below(k)];
    const int nx = cx + dx[d], ny = cy + dy[d];
    seen[ny * n + nx] = true;
    tile(2 * cx + 1 + dx[d], 2 * cy + 1 + dy[d]) = 0;
    tile(2 * nx + 1, 2 * ny + 1) = 0;
    stack.emplace_back(nx, ny);
  }
  // Braiding: knock out one wall next to a dead end, with probability braid.
  if (s.spec.braid > 0.0) {
    for (int cy = 0; cy < n; ++cy)
      for (int cx = 0; cx < n; ++cx) {
        int open = 0, closed[4], m = 0;
        for (int d = 0; d < 4; ++d) {
          const int nx = cx + dx[d], ny = cy + dy[d];
          if (nx < 0 || ny < 0 || nx >= n || ny >= n) continue;
          if (tile(2 * cx + 1 + dx[d], 2 * cy + 1 + dy[d])) closed[m++] = d;
          else ++open;
        }
        const double u = rng.uniform();
        if (open == 1 && m > 0 && u < s.spec.braid) {
          const int d = closed[rng.below(m)];
          tile(2 * cx + 1 + dx[d], 2 * cy + 1 + dy[d]) = 0;
        }
      }
  }
  const int a = rng.range(0, n * n);
  int g = rng.range(0, n * n - 1);
  if (g >= a) ++g;
  s.start_x = 2 * (a % n) + 1;
  s.start_y = 2 * (a / n) + 1;
  s.goal_x = 2 * (g % n) + 1;
  s.goal_y = 2 * (g / n) + 1;
  return maze_path_length(s) > 0;
}

inline bool generate_rail(EnvState& s, std::uint64_t seed) {
  using namespace rail;
  Rng rng(derive_seed(seed, 0x7a11));
  s.blocked.assign(kTrackLength, 0);
  int x = 4 + rng.range(0, 4);
  while (x < kTrackLength - 3) {
    const int width = rng.range(1, 3);
    for (int i = 0; i < width; ++i) s.blocked[x + i] = 1;
    x += width + 3 + rng.range(0, 6);
  }
  s.start_x = 0;
  s.start_y = 0;
  s.goal_x = kTrackLength - 1;
  s.goal_y = 0;
  return rail_solvable(s);
}

struct Rgb {
  float r, g, b;
};

inline float q255(double v) {
  return static_cast<float>(std::clamp<long>(std::lround(v * 255.0), 0, 255)) / 255.0f;
}

// Sprite colours; backgrounds never reach these exact values on entity pixels
// because entities are painted over the background.
inline constexpr Rgb kWall{0.15f, 0.15f, 0.15f};
inline constexpr Rgb kAgent{1.0f, 1.0f, 1.0f};
inline constexpr Rgb kGem{1.0f, 0.8f, 0.0f};
inline constexpr Rgb kGround{0.35f, 0.2f, 0.1f};

// Background texture for one id: a two-colour pattern, either a gradient or
// a checkerboard, with colours and geometry seeded by the id.
struct BackgroundStyle {
  Rgb c0, c1;
  int pattern = 0;
  int cell = 2;

  static BackgroundStyle of(int id) {
    Rng rng(derive_seed(0xbac6, static_cast<std::uint64_t>(id)));
    auto channel = [&] { return static_cast<float>(rng.uniform(0.3, 0.95)); };
    BackgroundStyle st;
    st.c0 = {channel(), channel(), channel()};
    st.c1 = {channel(), channel(), channel()};
    st.pattern = static_cast<int>(rng.below(3));
    st.cell = 2 + static_cast<int>(rng.below(4));
    return st;
  }

  Rgb pixel(int y, int x) const {
    double t = 0.0;
    switch (pattern) {
      case 0: t = y / double(kHeight - 1); break;
      case 1: t = x / double(kWidth - 1); break;
      default: t = ((y / cell + x / cell) % 2) ? 1.0 : 0.0; break;
    }
    return Rgb{q255(c0.r + (c1.r - c0.r) * t), q255(c0.g + (c1.g - c0.g) * t), q255(c0.b + (c1.b - c0.b) * t)};
  }
};

inline void put(Observation& o, int y, int x, Rgb c) {
  o.at(0, y, x) = q255(c.r);
  o.at(1, y, x) = q255(c.g);
  o.at(2, y, x) = q255(c.b);
}

}  // namespace detail

inline void paint_background(Observation& o, int background) {
  const auto style = detail::BackgroundStyle::of(background);
  for (int y = 0; y < kHeight; ++y)
    for (int x = 0; x < kWidth; ++x) detail::put(o, y, x, style.pixel(y, x));
}

// Mask of foreground (entity) pixels for the current state; background pixels
// are exactly the complement.
inline std::vector<std::uint8_t> foreground_mask(const EnvState& s) {
  std::vector<std::uint8_t> mask(kHeight * kWidth, 0);
  if (s.spec.id == GameId::GemMaze) {
    using gem::kGrid;
    // Interior 9x9 tiles span the image; the outer wall ring is implicit.
    for (int y = 0; y < kHeight; ++y)
      for (int x = 0; x < kWidth; ++x) {
        const int ty = 1 + y * (kGrid - 2) / kHeight;
        const int tx = 1 + x * (kGrid - 2) / kWidth;
        const bool entity = s.blocked[ty * kGrid + tx] || (tx == s.agent_x && ty == s.agent_y) ||
                            (tx == s.goal_x && ty == s.goal_y);
        mask[y * kWidth + x] = entity ? 1 : 0;
      }
  } else {
    using namespace rail;
    const int scale = kWidth / kViewCols;
    for (int y = 0; y < kHeight; ++y)
      for (int x = 0; x < kWidth; ++x) {
        const int row = y / scale;
        const int col = s.agent_x - kViewCols / 2 + x / scale;
        bool entity = false;
        if (row >= kGroundRow) entity = col >= 0 && col < kTrackLength && !s.blocked[col];
        if (col == s.agent_x && row == kGroundRow - 1 - (s.air > 0 ? 2 : 0)) entity = true;
        if (col == s.goal_x && (row == kGroundRow - 1 || row == kGroundRow - 2)) entity = true;
        mask[y * kWidth + x] = entity ? 1 : 0;
      }
  }
  return mask;
}

// Deterministic function of (layout, agent position, background id).
inline Observation render(const EnvState& s) {
  Observation o;
  paint_background(o, s.background);
  if (s.spec.id == GameId::GemMaze) {
    using gem::kGrid;
    for (int y = 0; y < kHeight; ++y)
      for (int x = 0; x < kWidth; ++x) {
        const int ty = 1 + y * (kGrid - 2) / kHeight;
        const int tx = 1 + x * (kGrid - 2) / kWidth;
        if (s.blocked[ty * kGrid + tx]) detail::put(o, y, x, detail::kWall);
        if (tx == s.goal_x && ty == s.goal_y) detail::put(o, y, x, detail::kGem);
        if (tx == s.agent_x && ty == s.agent_y) detail::put(o, y, x, detail::kAgent);
      }
  } else {
    using namespace rail;
    const int scale = kWidth / kViewCols;
    for (int y = 0; y < kHeight; ++y)
      for (int x = 0; x < kWidth; ++x) {
        const int row = y / scale;
        const int col = s.agent_x - kViewCols / 2 + x / scale;
        if (row >= kGroundRow && col >= 0 && col < kTrackLength && !s.blocked[col])
          detail::put(o, y, x, detail::kGround);
        if (col == s.goal_x && (row == kGroundRow - 1 || row == kGroundRow - 2)) detail::put(o, y, x, detail::kGem);
        if (col == s.agent_x && row == kGroundRow - 1 - (s.air > 0 ? 2 : 0)) detail::put(o, y, x, detail::kAgent);
      }
  }
  return o;
}

// Builds a level for an explicit (level seed, background) pair. Unsolvable
// layouts are regenerated from the next sub-seed.
inline EnvState make_level(const GameSpec& spec, int level_seed, int background) {
  EnvState s;
  s.spec = spec;
  s.level_seed = level_seed;
  s.background = background;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto seed = derive_seed(static_cast<std::uint64_t>(level_seed), static_cast<std::uint64_t>(attempt));
    const bool ok = spec.id == GameId::GemMaze ? detail::generate_maze(s, seed) : detail::generate_rail(s, seed);
    if (ok) {
      s.agent_x = s.start_x;
      s.agent_y = s.start_y;
      return s;
    }
  }
  throw GenerationError("level generation failed 100 times for seed " + std::to_string(level_seed));
}

inline EnvState make_env(const GameSpec& spec, const ModeSpec& mode, std::uint64_t rng_seed) {
  if (mode.level_end <= mode.level_begin || mode.backgrounds.empty()) throw Error("make_env: empty pool");
  Rng rng(derive_seed(rng_seed, 0xe4f));
  const int level = mode.level_begin + rng.range(0, mode.level_end - mode.level_begin);
  const int bg = mode.backgrounds[rng.below(mode.backgrounds.size())];
  return make_level(spec, level, bg);
}

inline Observation reset(EnvState& s) {
  s.agent_x = s.start_x;
  s.agent_y = s.start_y;
  s.air = 0;
  s.steps = 0;
  s.done = false;
  s.episode_return = 0.0;
  return render(s);
}

inline StepResult step(EnvState& s, int action) {
  if (s.done) throw EpisodeFinished("step: episode already finished");
  if (action < 0 || action >= s.spec.n_actions()) throw Error("step: action out of range");
  double reward = s.spec.step_reward;
  bool reached = false, failed = false;
  if (s.spec.id == GameId::GemMaze) {
    using namespace gem_action;
    int nx = s.agent_x, ny = s.agent_y;
    if (action == kUp) --ny;
    if (action == kDown) ++ny;
    if (action == kLeft) --nx;
    if (action == kRight) ++nx;
    if (!s.blocked[ny * gem::kGrid + nx]) {
      s.agent_x = nx;
      s.agent_y = ny;
    }
    reached = s.agent_x == s.goal_x && s.agent_y == s.goal_y;
  } else {
    using namespace rail_action;
    int dx = 0;
    if (action == kLeft) dx = -1;
    if (action == kRight) dx = 1;
    if (action == kJump) {
      dx = 1;
      if (s.air == 0) s.air = rail::kJumpSteps;
    }
    s.agent_x = std::clamp(s.agent_x + dx, 0, rail::kTrackLength - 1);
    if (s.air > 0) --s.air;
    if (s.air == 0 && s.blocked[s.agent_x]) failed = true;
    reached = !failed && s.agent_x == s.goal_x;
  }
  s.steps += 1;
  if (reached) reward += s.spec.goal_reward;
  s.done = reached || failed || s.steps >= s.spec.max_steps;
  s.episode_return += reward;
  return StepResult{render(s), reward, s.done};
}

}  // namespace asrl
