// vapors: simulate, train, plan, evaluate and label.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vapors/checkpoint.hpp"
#include "vapors/config.hpp"
#include "vapors/harness.hpp"
#include "vapors/planner.hpp"
#include "vapors/trainer.hpp"

namespace fs = std::filesystem;
using namespace vapors;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr const char* kOutEnv = "VAPORS_OUT";

struct Globals {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
};

// --out beats VAPORS_OUT beats the default.
std::string resolve_out(const Globals& g, const std::string& fallback) {
  if (!g.out.empty()) return g.out;
  if (const char* env = std::getenv(kOutEnv); env && *env) return env;
  return fallback;
}

AppConfig load_app_config(const Globals& g) {
  if (g.config_path.empty()) return default_config();
  if (!fs::exists(g.config_path)) throw UsageError("config file not found: " + g.config_path);
  return load_config(g.config_path);
}

// "a..b" or a single seed.
std::pair<std::uint64_t, std::uint64_t> parse_seed_range(const std::string& s) {
  auto to_u64 = [&](const std::string& t) {
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("bad seed range '" + s + "' (expected a..b)");
    return std::stoull(t);
  };
  const auto dots = s.find("..");
  if (dots == std::string::npos) {
    const auto v = to_u64(s);
    return {v, v};
  }
  const auto a = to_u64(s.substr(0, dots));
  const auto b = to_u64(s.substr(dots + 2));
  if (b < a) throw UsageError("empty seed range '" + s + "'");
  return {a, b};
}

ObsGrid load_observation(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".pbm") return load_pbm_file(path);
  return gray_to_mask(load_pgm_file(path));
}

int cmd_sim_collect(const Globals& g, const std::string& policy, int episodes) {
  const AppConfig cfg = load_app_config(g);
  const std::string out = resolve_out(g, "runs/collect");
  fs::create_directories(out);
  const TrainEnv env = cfg.train_env();
  for (int i = 0; i < episodes; ++i) {
    const EpisodeSetup setup = env.setup_for(static_cast<std::size_t>(i));
    const std::uint64_t seed = derive_seed(g.seed, 11, static_cast<std::uint64_t>(i));
    EpisodeLog log;
    if (policy == "random") {
      log = run_random_episode(setup, cfg.policy, seed, derive_seed(g.seed, 12, static_cast<std::uint64_t>(i)));
    } else if (policy == "heuristic") {
      log = run_heuristic_episode(setup, cfg.policy, seed);
    } else {
      log = run_acquire_only_episode(setup, cfg.policy, seed);
    }
    std::ofstream f(fs::path(out) / ("episode_" + std::to_string(i) + ".jsonl"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write into " + out);
    write_jsonl(f, log);
    std::cout << "episode " << i << " spread " << to_string(setup.spread) << " transitions " << log.records.size()
              << " pickup " << log.total_pickup() << '\n';
  }
  return 0;
}

int cmd_train(const Globals& g, int updates) {
  AppConfig cfg = load_app_config(g);
  if (updates > 0) cfg.train.updates = updates;
  const std::string out = resolve_out(g, "runs/train");
  const TrainResult res = train(cfg.train_env(), cfg.model, cfg.train, g.seed, out, &std::cout);
  std::cout << "checkpoint " << res.final_checkpoint << '\n'
            << "episodes collected " << res.episodes_collected << '\n';
  return 0;
}

int cmd_plan(const Globals& g, const std::string& ckpt_path, const std::vector<std::string>& obs_paths,
             const std::vector<std::string>& prim_names) {
  const AppConfig cfg = load_app_config(g);
  if (obs_paths.empty()) throw UsageError("plan needs at least one --obs");
  if (prim_names.size() + 1 != obs_paths.size())
    throw UsageError("plan needs exactly one --prim between consecutive --obs images");
  const Checkpoint ck = load_checkpoint_for(cfg, ckpt_path);
  std::vector<ObsGrid> obs;
  for (const auto& p : obs_paths) {
    obs.push_back(load_observation(p));
    if (obs.back().width() != cfg.model.grid || obs.back().height() != cfg.model.grid)
      throw UsageError(p + ": observation must be " + std::to_string(cfg.model.grid) + "x" +
                       std::to_string(cfg.model.grid));
  }
  std::vector<int> prims;
  for (const auto& n : prim_names) {
    try {
      prims.push_back(index_of(primitive_from_string(n)));
    } catch (const std::exception&) {
      throw UsageError("unknown primitive '" + n + "'");
    }
  }
  const PlanResult r = plan(obs, prims, ck.params, cfg.policy);
  nlohmann::json j;
  j["chosen"] = std::string(to_string(r.chosen_kind()));
  j["predicted_return"] = r.predicted_return;
  for (int k : r.best_sequence) j["best_sequence"].push_back(std::string(to_string(primitive_from_index(k))));
  for (const auto& [seq, ret] : r.all_candidates) {
    std::string key;
    for (int k : seq) key += k == 0 ? 'A' : 'R';
    j["candidates"][key] = ret;
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::vector<std::string>& policies, const std::string& seeds,
             const std::string& ckpt_path, const std::string& preset, const std::string& spread) {
  AppConfig cfg = load_app_config(g);
  if (!policies.empty()) cfg.experiment.policies = policies;
  if (!seeds.empty()) std::tie(cfg.experiment.seed_first, cfg.experiment.seed_last) = parse_seed_range(seeds);
  if (!preset.empty()) {
    cfg.experiment.preset = preset_by_name(preset);
    cfg.policy.budget = cfg.experiment.preset.budget;
    cfg.sim.episode_budget = cfg.policy.budget;
  }
  if (!spread.empty()) cfg.experiment.spread = spread_from_string(spread);
  cfg.validate();

  std::optional<Checkpoint> ck;
  for (const auto& p : cfg.experiment.policies)
    if (p == "vapors" && !ck) ck = load_checkpoint_for(cfg, ckpt_path);

  const std::string out = resolve_out(g, "runs/eval");
  const auto res = run_experiment(cfg, ck ? &ck->params : nullptr, out);
  write_summary_csv(std::cout, res.summary);
  return 0;
}

int cmd_label(const Globals& g, const std::string& empty, const std::string& current, double thresh,
              const std::string& output) {
  std::string path = output;
  if (path.empty()) {
    const std::string dir = resolve_out(g, ".");
    fs::create_directories(dir);
    path = (fs::path(dir) / "label.pbm").string();
  }
  const ObsGrid mask = label_tool(empty, current, thresh, path);
  std::cout << path << ' ' << count_set(mask) << " foreground pixels\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plate clearing with learned latent dynamics and primitive planning"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "TOML configuration file");
  app.add_option("--seed", g.seed, "Base random seed");
  app.add_option("--out", g.out, std::string("Output directory (default from ") + kOutEnv + ")");

  auto* collect = app.add_subcommand("sim-collect", "Roll out a scripted policy and write episode logs");
  std::string collect_policy = "random";
  int collect_episodes = 5;
  collect->add_option("--policy", collect_policy)->check(CLI::IsMember({"random", "heuristic", "acquire"}));
  collect->add_option("--episodes", collect_episodes)->check(CLI::PositiveNumber);

  auto* train_cmd = app.add_subcommand("train", "Train the dynamics model; writes metrics.csv and checkpoints");
  int updates = 0;
  train_cmd->add_option("--updates", updates, "Override the number of update steps")->check(CLI::PositiveNumber);

  auto* plan_cmd = app.add_subcommand("plan", "Choose the next primitive for an observation history");
  std::string plan_ckpt;
  std::vector<std::string> plan_obs, plan_prims;
  plan_cmd->add_option("--ckpt", plan_ckpt)->required();
  plan_cmd->add_option("--obs", plan_obs, "Mask images (PBM, or PGM thresholded at mid-gray), oldest first")
      ->required();
  plan_cmd->add_option("--prim", plan_prims, "Primitives executed between consecutive observations");

  auto* eval_cmd = app.add_subcommand("eval", "Run policies over a seed range and write clearance curves");
  std::vector<std::string> eval_policies;
  std::string eval_seeds, eval_ckpt, eval_preset, eval_spread;
  eval_cmd->add_option("--policy", eval_policies)->check(CLI::IsMember({"vapors", "heuristic", "acquire"}));
  eval_cmd->add_option("--seeds", eval_seeds, "Seed range a..b");
  eval_cmd->add_option("--ckpt", eval_ckpt);
  eval_cmd->add_option("--preset", eval_preset)->check(CLI::IsMember({"beans", "spaghetti"}));
  eval_cmd->add_option("--spread", eval_spread)->check(CLI::IsMember({"clustered", "half", "full"}));

  auto* label_cmd = app.add_subcommand("label", "Background-subtraction labeling of a PGM pair");
  std::string label_empty, label_current, label_output;
  double label_thresh = 20.0;
  label_cmd->add_option("--empty", label_empty)->required();
  label_cmd->add_option("--current", label_current)->required();
  label_cmd->add_option("--thresh", label_thresh)->check(CLI::NonNegativeNumber);
  label_cmd->add_option("--output", label_output, "Output PBM (default <out>/label.pbm)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*collect) return cmd_sim_collect(g, collect_policy, collect_episodes);
    if (*train_cmd) return cmd_train(g, updates);
    if (*plan_cmd) return cmd_plan(g, plan_ckpt, plan_obs, plan_prims);
    if (*eval_cmd) return cmd_eval(g, eval_policies, eval_seeds, eval_ckpt, eval_preset, eval_spread);
    if (*label_cmd) return cmd_label(g, label_empty, label_current, label_thresh, label_output);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
