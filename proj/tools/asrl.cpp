// Command-line front end: train / eval / report.
//
//   asrl train <config> [--<key> <value> ...]
//   asrl eval <params> --game gemmaze --mode test-bg [--episodes N] [--seed S]
//   asrl report <run_dir>
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "asrl/asrl.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Augmentation-scheduling RL toolkit"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Run an experiment from a config file");
  std::string config_path;
  bool quiet = false;
  train->add_option("config", config_path, "Config file (key = value lines)")->required();
  train->add_flag("-q,--quiet", quiet, "Suppress per-epoch progress");
  std::map<std::string, std::string> overrides;
  for (const auto& key : asrl::cfgio::keys()) {
    const std::string name(key.name);
    train->add_option_function<std::string>(
        "--" + name, [&overrides, name](const std::string& v) { overrides[name] = v; },
        "Override config key " + name);
  }

  auto* eval = app.add_subcommand("eval", "Evaluate a saved parameter file");
  std::string params_path, game = "gemmaze", mode = "train";
  int episodes = 100, max_steps = 256, n_train_bg = 1, n_test_bg = 8;
  std::uint64_t seed = 0;
  bool greedy = false;
  eval->add_option("params", params_path, "Parameter file")->required();
  eval->add_option("--game", game, "gemmaze or runnerrail")->capture_default_str();
  eval->add_option("--mode", mode, "train, test-bg or test-lv")->capture_default_str();
  eval->add_option("--episodes", episodes, "Episodes to run")->capture_default_str();
  eval->add_option("--seed", seed, "Evaluation seed")->capture_default_str();
  eval->add_option("--max_episode_steps", max_steps, "Episode step limit")->capture_default_str();
  eval->add_option("--n_train_backgrounds", n_train_bg, "Backgrounds in the train pool")->capture_default_str();
  eval->add_option("--n_test_backgrounds", n_test_bg, "Backgrounds in the test-bg pool")->capture_default_str();
  eval->add_flag("--greedy", greedy, "Take the most probable action instead of sampling");

  auto* report = app.add_subcommand("report", "Summarize a run directory");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "Directory written by train")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      std::ifstream is(config_path);
      if (!is) throw asrl::ConfigError("cannot open config " + config_path);
      std::stringstream ss;
      ss << is.rdbuf();
      auto cfg = asrl::parse_config_text(ss.str());
      for (const auto& [k, v] : overrides) asrl::set_config_value(cfg, k, v);
      cfg.validate();
      const auto result = asrl::run_experiment(cfg, quiet ? nullptr : &std::cerr);
      for (const auto& row : result.summary)
        std::cout << row.method << " seed " << row.seed << " " << row.stage << ": train "
                  << asrl::csv::num(row.train_return) << " test-bg " << asrl::csv::num(row.testbg_return)
                  << " test-lv " << asrl::csv::num(row.testlv_return) << " (" << row.status << ")\n";
      std::cout << "wrote " << cfg.output_dir << "\n";
      return result.failed_seeds > 0 ? kExitRuntime : kExitOk;
    }
    if (*eval) {
      if (episodes < 1) throw asrl::ConfigError("--episodes must be >= 1");
      if (max_steps < 1) throw asrl::ConfigError("--max_episode_steps must be >= 1");
      auto spec = asrl::GameSpec::of(asrl::parse_game(game));
      spec.max_steps = max_steps;
      const auto m = asrl::ModeSpec::make(asrl::parse_mode(mode), n_train_bg, n_test_bg);
      const auto params = asrl::load_params(params_path);
      if (params.n_actions() != spec.n_actions())
        throw asrl::ConfigError("parameter file has " + std::to_string(params.n_actions()) + " actions, " + game +
                                " needs " + std::to_string(spec.n_actions()));
      const double mean = asrl::evaluate(params, spec, m, episodes, seed, greedy);
      std::cout << game << " " << mode << " mean_return " << asrl::csv::num(mean) << " over " << episodes
                << " episodes\n";
      return kExitOk;
    }
    if (*report) {
      asrl::emit_report(run_dir, std::cout);
      return kExitOk;
    }
  } catch (const asrl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
