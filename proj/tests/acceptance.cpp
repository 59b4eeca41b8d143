// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.
//
//   acceptance [--only name]... [--work dir] [--cli path]

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "test_support.hpp"
#include "vapors/geometry.hpp"
#include "vapors/harness.hpp"
#include "vapors/trainer.hpp"

using namespace vapors;
using namespace vapors::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int precision = 4) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << x;
  return ss.str();
}

// ---- shared trained model --------------------------------------------------

struct Trained {
  TrainResult result;
  double seconds = 0.0;
};

const Trained& trained_model(const fs::path& work) {
  static std::optional<Trained> cache;
  if (!cache) {
    const AppConfig cfg = default_config();
    const auto t0 = Clock::now();
    Trained t;
    t.result = train(cfg.train_env(), cfg.model, cfg.train, 0, (work / "train").string());
    t.seconds = seconds_since(t0);
    cache = std::move(t);
  }
  return *cache;
}

// ---- criteria ----------------------------------------------------------------

Verdict policy_ordering(const fs::path& work) {
  const auto& model = trained_model(work).result.params;
  AppConfig cfg = default_config();
  cfg.experiment.seed_first = 0;
  cfg.experiment.seed_last = 19;
  const auto t0 = Clock::now();
  cfg.experiment.spread = Spread::HalfSpread;
  const auto half = run_experiment(cfg, &model, (work / "eval_half").string());
  cfg.experiment.spread = Spread::FullSpread;
  cfg.experiment.policies = {"vapors", "acquire"};
  const auto full = run_experiment(cfg, &model, (work / "eval_full").string());
  const double secs = seconds_since(t0);

  const double hv = half.summary_for("vapors").final_pickup.mean;
  const double hh = half.summary_for("heuristic").final_pickup.mean;
  const double ha = half.summary_for("acquire").final_pickup.mean;
  const double fv = full.summary_for("vapors").final_pickup.mean;
  const double fa = full.summary_for("acquire").final_pickup.mean;
  const double gain = fa > 0 ? fv / fa - 1.0 : 0.0;
  const bool pass = hv >= hh && hv >= ha && gain >= 0.10 && secs < 600.0;
  return {pass, "half: vapors " + fmt(hv) + " heuristic " + fmt(hh) + " acquire " + fmt(ha) + "; full: vapors " +
                    fmt(fv) + " acquire " + fmt(fa) + " (+" + fmt(100.0 * gain, 3) + "%); 20 seeds; " +
                    fmt(secs, 3) + " s"};
}

Verdict planner_exactness() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> kd(1, 3), hd(1, 5), coarse(0, 4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int mismatches = 0;
  const auto t0 = Clock::now();
  for (int trial = 0; trial < 100; ++trial) {
    const int k = kd(rng), h = hd(rng);
    std::map<std::vector<int>, double> table;
    // Coarse values make ties common.
    for (const auto& s : enumerate_sequences(k, h)) table[s] = trial % 2 ? u(rng) : 0.25 * coarse(rng);
    const auto r = select_plan(k, h, [&](const std::vector<std::vector<int>>& seqs) {
      std::vector<double> out;
      for (const auto& s : seqs) out.push_back(table.at(s));
      return out;
    });
    // Oracle: count in base k, keep the first strict maximum.
    int total = 1;
    for (int i = 0; i < h; ++i) total *= k;
    std::vector<int> best;
    double best_val = 0.0;
    for (int idx = 0; idx < total; ++idx) {
      std::vector<int> seq(h);
      for (int i = h - 1, rest = idx; i >= 0; --i, rest /= k) seq[i] = rest % k;
      if (best.empty() || table.at(seq) > best_val) {
        best = seq;
        best_val = table.at(seq);
      }
    }
    mismatches += r.best_sequence != best || r.chosen != best.front() ||
                  r.all_candidates.size() != static_cast<std::size_t>(total);
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 1.0,
          std::to_string(100 - mismatches) + "/100 tables match; " + fmt(secs * 1e3, 3) + " ms"};
}

Verdict gradient_correctness() {
  const auto cfg = ModelConfig::miniature();
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  for (std::uint64_t s = 0; s < 50; ++s) {
    LossWeights w;
    ModelConfig c = cfg;
    c.overshooting = 1 + static_cast<int>(s % 3);
    const auto res = finite_difference_check(random_batch(c, 2, 4, 1000 + s, s % 2), random_params<double>(c, 2000 + s), w);
    if (res.max_rel_error > worst) {
      worst = res.max_rel_error;
      where = std::string(kParamNames[res.worst_param]);
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "max relative error " + fmt(worst, 3) + " (" + where + ") over 50 points; " + fmt(secs, 3) + " s"};
}

Verdict training_health(const fs::path& work) {
  const auto& t = trained_model(work);
  const auto& m = t.result.metrics;
  double first = 0.0;
  const int n_first = std::min<int>(50, static_cast<int>(m.size()));
  for (int i = 0; i < n_first; ++i) first += m[i].loss.total / n_first;
  const double last = m.back().loss.total;

  // Held-out episodes: random primitives, plate seeds disjoint from training.
  const AppConfig cfg = default_config();
  const TrainEnv env = cfg.train_env();
  std::vector<double> predicted, actual;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto log = run_random_episode(env.setup_for(s), env.policy, 1'000'000 + s, 2'000'000 + s);
    const auto p = predicted_rewards(log, t.result.params);
    for (std::size_t i = 0; i < p.size(); ++i) {
      predicted.push_back(p[i]);
      actual.push_back(log.records[i].reward);
    }
  }
  const double r = pearson(predicted, actual);
  const bool pass = last < 0.5 * first && r >= 0.7 && t.seconds < 1800.0;
  return {pass, "loss " + fmt(last) + " vs first-50 mean " + fmt(first) + " (" + fmt(100.0 * last / first, 3) +
                    "%); held-out reward Pearson " + fmt(r, 3) + " on " + std::to_string(actual.size()) +
                    " transitions; " + fmt(t.seconds, 3) + " s"};
}

Verdict labeler_fidelity() {
  SimConfig sim;
  std::mt19937_64 rng(55);
  std::uniform_int_distribution<int> items(1, 40), spread(0, 2);
  double worst = 1.0, mean = 0.0;
  const auto t0 = Clock::now();
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto sp = static_cast<Spread>(spread(rng));
    const auto state = reset(sim, 300 + i, items(rng), sp);
    const auto empty = reset(sim, 300 + i, 0, sp);
    const auto mask = background_subtract_label(render_gray(empty, sim, 2 * i), render_gray(state, sim, 2 * i + 1), 20.0);
    const double dice = 1.0 - dice_loss(mask, render_mask(state, sim));
    worst = std::min(worst, dice);
    mean += dice / 50.0;
  }
  const double secs = seconds_since(t0);
  return {worst >= 0.95 && secs < 10.0,
          "min Dice " + fmt(worst) + ", mean " + fmt(mean) + " over 50 pairs; " + fmt(secs, 3) + " s"};
}

Verdict geometry_oracles() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  std::uniform_int_distribution<int> npts(0, 30), gridpt(0, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec2> pts;
    const int n = npts(rng);
    // Every other configuration sits on a dyadic lattice, so collinear and
    // duplicate points are exact in floating point.
    for (int i = 0; i < n; ++i)
      pts.push_back(trial % 2 ? Vec2{u(rng), u(rng)} : Vec2{gridpt(rng) / 128.0, gridpt(rng) / 128.0});
    const double fast = convex_hull_area(pts), slow = brute_force_hull_area(pts);
    worst = std::max(worst, std::abs(fast - slow) / std::max(slow, 1e-300));
    if (slow == 0.0 && fast != 0.0) worst = 1.0;
  }
  int blur_mismatch = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_mask(rng, 64, 64, 0.01 + 0.01 * trial);
    const auto fast = gaussian_blur(m, 3.0);
    const auto slow = direct_blur(m, 3.0);
    blur_mismatch += densest_pixel(fast) != brute_extremum(slow, true, nullptr);
    blur_mismatch += furthest_pixel(fast, m) != brute_extremum(slow, false, &m);
  }
  return {worst <= 1e-9 && blur_mismatch == 0, "hull max relative error " + fmt(worst, 3) +
                                                   " over 200 sets; blur extrema mismatches " +
                                                   std::to_string(blur_mismatch) + "/100"};
}

// ---- determinism via the CLI -------------------------------------------------

int run_cli(const std::string& cli, const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = "'" + cli + "' " + args + " >'" + stdout_file.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Number of differing or missing files between two trees, or -1 if the first is empty.
int tree_diff(const fs::path& a, const fs::path& b, int& files) {
  int diff = 0;
  files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), a);
    diff += !fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel);
  }
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) diff += !fs::exists(a / fs::relative(e.path(), b));
  return files == 0 ? -1 : diff;
}

Verdict determinism(const fs::path& work, const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: " + cli};
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  const fs::path cfg = root / "short.toml";
  fs::create_directories(root);
  std::ofstream(cfg) << "[experiment]\nseed_first = 0\nseed_last = 4\n"
                        "[train]\nupdates = 60\ncollect_every = 20\nseed_episodes = 2\nbatch_size = 8\n"
                        "checkpoint_every = 30\n";

  SimConfig sim;
  const auto state = reset(sim, 8, 15, Spread::HalfSpread);
  save_file<GrayGrid>((root / "empty.pgm").string(), render_gray(reset(sim, 8, 0, Spread::HalfSpread), sim, 1),
                      write_pgm);
  save_file<GrayGrid>((root / "current.pgm").string(), render_gray(state, sim, 2), write_pgm);
  save_file<ObsGrid>((root / "obs.pbm").string(), render_mask(state, sim), write_pbm);

  int failures = 0, files_total = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run;
    fs::create_directories(d);
    const std::string g = "--config '" + cfg.string() + "' --seed 5 ";
    const std::vector<std::pair<std::string, std::string>> steps = {
        {"collect_random", g + "--out '" + (d / "collect_random").string() + "' sim-collect --policy random --episodes 4"},
        {"collect_heur", g + "--out '" + (d / "collect_heur").string() + "' sim-collect --policy heuristic --episodes 4"},
        {"collect_acq", g + "--out '" + (d / "collect_acq").string() + "' sim-collect --policy acquire --episodes 4"},
        {"train", g + "--out '" + (d / "train").string() + "' train"},
        {"eval", g + "--out '" + (d / "eval").string() +
                     "' eval --policy vapors --policy heuristic --policy acquire --ckpt '" +
                     (d / "train" / "ckpt_60.bin").string() + "'"},
        {"plan", g + "plan --ckpt '" + (d / "train" / "ckpt_60.bin").string() + "' --obs '" +
                     (root / "obs.pbm").string() + "'"},
        {"label", g + "label --empty '" + (root / "empty.pgm").string() + "' --current '" +
                      (root / "current.pgm").string() + "' --output '" + (d / "label.pbm").string() + "'"},
    };
    fs::create_directories(d / "stdout");
    for (const auto& [name, args] : steps) failures += run_cli(cli, args, d / "stdout" / (name + ".txt")) != 0;
  }
  // Stdout of train/label mentions the output path, which differs between runs.
  for (const char* name : {"train", "label"}) {
    fs::remove(root / "a" / "stdout" / (std::string(name) + ".txt"));
    fs::remove(root / "b" / "stdout" / (std::string(name) + ".txt"));
  }
  const int diff = tree_diff(root / "a", root / "b", files_total);
  return {failures == 0 && diff == 0,
          std::to_string(files_total) + " output files from 7 invocations compared, " + std::to_string(diff) +
              " differ; " + std::to_string(failures) + " invocations failed"};
}

// ---- invariants --------------------------------------------------------------

Verdict invariants() {
  std::vector<std::string> broken;
  std::mt19937_64 rng(7);

  {  // hull area never shrinks as points are added
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    bool ok = true;
    for (int trial = 0; trial < 100 && ok; ++trial) {
      std::vector<Vec2> pts;
      double prev = 0.0;
      for (int i = 0; i < 20; ++i) {
        pts.push_back({u(rng), u(rng)});
        const double a = convex_hull_area(pts);
        ok = ok && a >= prev - 1e-12;
        prev = a;
      }
    }
    if (!ok) broken.push_back("hull monotonicity");
  }
  {  // KL component is non-negative
    bool ok = true;
    const auto cfg = ModelConfig::miniature();
    for (std::uint64_t s = 0; s < 50 && ok; ++s)
      ok = evaluate(random_batch(cfg, 3, 5, s), random_params<double>(cfg, 77 + s), {}).kl >= 0.0;
    if (!ok) broken.push_back("KL >= 0");
  }
  {  // Dice symmetry
    bool ok = true;
    for (int i = 0; i < 100 && ok; ++i) {
      const auto a = random_mask(rng, 32, 32, 0.3), b = random_mask(rng, 32, 32, 0.2);
      ok = dice_loss(a, b) == dice_loss(b, a);
    }
    if (!ok) broken.push_back("Dice symmetry");
  }
  {  // argmax invariant to positive reward scaling
    bool ok = true;
    std::uniform_real_distribution<double> u(-1.0, 1.0), c(0.01, 100.0);
    for (int i = 0; i < 100 && ok; ++i) {
      std::vector<double> base;
      for (int j = 0; j < 16; ++j) base.push_back(u(rng));
      const double scale = c(rng);
      const auto a = select_plan(2, 4, [&](const auto&) { return base; });
      const auto b = select_plan(2, 4, [&](const auto&) {
        auto s = base;
        for (auto& x : s) x *= scale;
        return s;
      });
      ok = a.best_sequence == b.best_sequence;
    }
    if (!ok) broken.push_back("argmax scaling invariance");
  }
  {  // budget enforcement and no action on an empty plate
    bool ok = true;
    EpisodeSetup setup;
    setup.spread = Spread::FullSpread;
    PolicyConfig pol;
    for (std::uint64_t s = 0; s < 20 && ok; ++s) {
      for (const auto& log : {run_acquire_only_episode(setup, pol, s), run_heuristic_episode(setup, pol, s),
                              run_random_episode(setup, pol, s, s + 1)}) {
        ok = ok && static_cast<int>(log.records.size()) <= pol.budget;
        ObsGrid prev = log.initial_obs;
        for (const auto& r : log.records) {
          ok = ok && !is_empty(prev) && r.recomputed_reward() == r.reward;
          prev = r.obs_after;
        }
      }
    }
    setup.sim.acquire_prob = 0.0;
    ok = ok && run_acquire_only_episode(setup, pol, 0).records.size() == static_cast<std::size_t>(pol.budget);
    if (!ok) broken.push_back("budget enforcement");
  }
  std::string detail = "hull monotonicity, KL >= 0, Dice symmetry, argmax scaling invariance, budget enforcement";
  if (!broken.empty()) {
    detail = "broken:";
    for (const auto& b : broken) detail += " " + b + ";";
  }
  return {broken.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<std::string> only;
  std::string work = (fs::temp_directory_path() / "vapors_acceptance").string();
#ifdef VAPORS_CLI
  std::string cli = VAPORS_CLI;
#else
  std::string cli;
#endif
  app.add_option("--only", only, "Run only the named criteria");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--cli", cli, "Path to the vapors binary");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"planner-exactness", planner_exactness},
      {"gradient-correctness", gradient_correctness},
      {"labeler-fidelity", labeler_fidelity},
      {"geometry-oracles", geometry_oracles},
      {"invariants", invariants},
      {"determinism", [&] { return determinism(work, cli); }},
      {"training-health", [&] { return training_health(work); }},
      {"policy-ordering", [&] { return policy_ordering(work); }},
  };

  int failed = 0, ran = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
    failed += !v.pass;
    ++ran;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
