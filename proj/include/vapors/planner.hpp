#pragma once

// High-level policy: receding-horizon search over every primitive sequence,
// scored by rewards decoded along imagined latent rollouts. Also the
// perception-action loop shared by all policies and the two baselines.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vapors/dynamics.hpp"
#include "vapors/perception.hpp"
#include "vapors/platesim.hpp"

namespace vapors {

struct PolicyConfig {
  int horizon = 4;
  int budget = 8;
  double heuristic_threshold = 0.25;  // fraction of plate pixels covered by food
  int num_primitives = kDefaultNumPrimitives;
  std::uint64_t plan_noise_seed = 0;
  bool clamp_horizon_to_budget = true;  // never look past the remaining action budget
  InstantiationParams low_level;

  void validate() const {
    if (budget < 1) throw ConfigError("budget must be >= 1");
    if (horizon < 1 || horizon > budget) throw ConfigError("horizon must satisfy 1 <= horizon <= budget");
    if (num_primitives < 1) throw ConfigError("num_primitives must be >= 1");
    if (heuristic_threshold < 0.0 || heuristic_threshold > 1.0)
      throw ConfigError("heuristic_threshold must lie in [0, 1]");
  }
};

struct PlanResult {
  int chosen = 0;
  std::vector<int> best_sequence;
  double predicted_return = 0.0;
  std::map<std::vector<int>, double> all_candidates;

  PrimitiveKind chosen_kind() const { return primitive_from_index(chosen); }
};

/// All K^H sequences in lexicographic order of primitive indices.
inline std::vector<std::vector<int>> enumerate_sequences(int num_primitives, int horizon) {
  if (num_primitives < 1 || horizon < 1) throw ContractViolation("need K >= 1 and H >= 1");
  std::vector<std::vector<int>> out;
  std::vector<int> seq(horizon, 0);
  for (;;) {
    out.push_back(seq);
    int i = horizon - 1;
    while (i >= 0 && ++seq[i] == num_primitives) seq[i--] = 0;
    if (i < 0) break;
  }
  return out;
}

/// Scores every sequence (one return per sequence, same order).
using SequenceScorer = std::function<std::vector<double>(const std::vector<std::vector<int>>&)>;

/// Exhaustive argmax; the first maximal sequence in lexicographic order wins.
inline PlanResult select_plan(int num_primitives, int horizon, const SequenceScorer& score) {
  const auto seqs = enumerate_sequences(num_primitives, horizon);
  const auto returns = score(seqs);
  if (returns.size() != seqs.size()) throw ContractViolation("scorer returned the wrong number of returns");
  PlanResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    r.all_candidates.emplace(seqs[i], returns[i]);
    if (returns[i] > returns[best]) best = i;
  }
  r.best_sequence = seqs[best];
  r.chosen = r.best_sequence.front();
  r.predicted_return = returns[best];
  return r;
}

/// Sum of decoded reward means along prior rollouts from `start`, one rollout
/// per sequence. All sequences share the same frozen prior noise.
template <typename S>
std::vector<double> imagined_returns(const LatentState<S>& start, const std::vector<std::vector<int>>& sequences,
                                     const ModelParams<S>& p, std::uint64_t noise_seed) {
  const auto& cfg = p.config;
  const auto n = static_cast<Eigen::Index>(sequences.size());
  if (n == 0) return {};
  const std::size_t horizon = sequences.front().size();

  LatentState<S> state;
  state.deterministic = start.deterministic.col(0).replicate(1, n);
  state.mean = start.mean.col(0).replicate(1, n);
  state.logstd = start.logstd.col(0).replicate(1, n);
  state.sample = start.sample.col(0).replicate(1, n);

  std::mt19937_64 rng(noise_seed);
  std::vector<double> returns(sequences.size(), 0.0);
  for (std::size_t i = 0; i < horizon; ++i) {
    std::vector<int> prims;
    for (const auto& s : sequences) prims.push_back(s[i]);
    const Mat<S> eps = detail::standard_normal<S>(rng, cfg.stoch, 1).replicate(1, n);
    state = prior_transition(state, prims, p, &eps);
    const Mat<S> r = decode_rewards(state, p);
    for (Eigen::Index c = 0; c < n; ++c) returns[c] += static_cast<double>(r(0, c));
  }
  return returns;
}

/// Posterior-encode the history, then pick the sequence with the highest
/// imagined return. `history_prims[t]` leads from obs t to obs t+1.
template <typename S>
PlanResult plan(const std::vector<ObsGrid>& history_obs, const std::vector<int>& history_prims, const ModelParams<S>& p,
                const PolicyConfig& cfg, int horizon) {
  if (history_obs.empty()) throw ContractViolation("plan needs a nonempty history");
  if (p.config.num_primitives != cfg.num_primitives) throw ContractViolation("model and policy disagree on K");
  const LatentState<S> start = posterior_encode(history_obs, history_prims, p).back();
  return select_plan(cfg.num_primitives, horizon, [&](const std::vector<std::vector<int>>& seqs) {
    return imagined_returns(start, seqs, p, cfg.plan_noise_seed);
  });
}

template <typename S>
PlanResult plan(const std::vector<ObsGrid>& history_obs, const std::vector<int>& history_prims, const ModelParams<S>& p,
                const PolicyConfig& cfg) {
  return plan(history_obs, history_prims, p, cfg, cfg.horizon);
}

// ---- perception-action loop --------------------------------------------------

struct EpisodeSetup {
  SimConfig sim;
  int n_items = 15;
  Spread spread = Spread::HalfSpread;
};

struct DecisionContext {
  const std::vector<ObsGrid>& obs_history;
  const std::vector<int>& prim_history;
  int steps_left;
};

using PrimitiveChooser = std::function<int(const DecisionContext&)>;

/// Reset, then alternate mask -> primitive -> low-level action -> step until
/// the budget is spent or the plate is empty.
inline EpisodeLog run_episode(const EpisodeSetup& setup, const PolicyConfig& policy, std::uint64_t seed,
                              const std::string& policy_name, const PrimitiveChooser& choose) {
  policy.validate();
  SimConfig sim = setup.sim;
  sim.episode_budget = policy.budget;
  const Calibration calib = sim.calibration();

  PlateState state = reset(sim, seed, setup.n_items, setup.spread);
  EpisodeLog log;
  log.policy = policy_name;
  log.seed = seed;
  log.initial_obs = render_mask(state, sim);

  std::vector<ObsGrid> obs{log.initial_obs};
  std::vector<int> prims;
  for (int t = 0; t < policy.budget; ++t) {
    const ObsGrid& mask = obs.back();
    if (is_empty(mask)) break;
    const int k = choose({obs, prims, policy.budget - t});
    const auto action = instantiate_action(mask, primitive_from_index(k), calib, policy.low_level);
    if (!action) break;
    StepResult res = step(sim, state, *action);
    state = std::move(res.state);
    obs.push_back(res.record.obs_after);
    prims.push_back(k);
    log.records.push_back(std::move(res.record));
  }
  log.success = is_empty(obs.back());
  return log;
}

template <typename S>
PrimitiveChooser vapors_chooser(const ModelParams<S>& params, const PolicyConfig& policy) {
  return [&params, policy](const DecisionContext& ctx) {
    const int h = policy.clamp_horizon_to_budget ? std::min(policy.horizon, ctx.steps_left) : policy.horizon;
    return plan(ctx.obs_history, ctx.prim_history, params, policy, h).chosen;
  };
}

/// Number of mask pixels whose centers lie on the plate.
inline int plate_pixel_count(const SimConfig& sim) {
  const Calibration calib = sim.calibration();
  int n = 0;
  for (int v = 0; v < sim.grid_height; ++v)
    for (int u = 0; u < sim.grid_width; ++u) n += norm(calib.to_plate(u, v) - sim.plate_center) <= sim.plate_radius;
  return n;
}

inline double mask_coverage_fraction(const ObsGrid& mask, int plate_pixels) {
  return plate_pixels > 0 ? static_cast<double>(count_set(mask)) / plate_pixels : 0.0;
}

/// Group-then-acquire rule: rearrange while the covered fraction exceeds the threshold.
inline PrimitiveKind heuristic_choice(double coverage_fraction, double threshold) {
  return coverage_fraction > threshold ? PrimitiveKind::Rearrange : PrimitiveKind::Acquire;
}

template <typename S>
EpisodeLog run_vapors_episode(const EpisodeSetup& setup, const ModelParams<S>& params, const PolicyConfig& policy,
                              std::uint64_t seed) {
  return run_episode(setup, policy, seed, "vapors", vapors_chooser(params, policy));
}

inline EpisodeLog run_acquire_only_episode(const EpisodeSetup& setup, const PolicyConfig& policy, std::uint64_t seed) {
  return run_episode(setup, policy, seed, "acquire",
                     [](const DecisionContext&) { return index_of(PrimitiveKind::Acquire); });
}

inline EpisodeLog run_heuristic_episode(const EpisodeSetup& setup, const PolicyConfig& policy, std::uint64_t seed) {
  const int plate_pixels = plate_pixel_count(setup.sim);
  return run_episode(setup, policy, seed, "heuristic", [&](const DecisionContext& ctx) {
    return index_of(heuristic_choice(mask_coverage_fraction(ctx.obs_history.back(), plate_pixels),
                                     policy.heuristic_threshold));
  });
}

inline EpisodeLog run_random_episode(const EpisodeSetup& setup, const PolicyConfig& policy, std::uint64_t seed,
                                     std::uint64_t choice_seed) {
  std::mt19937_64 rng(choice_seed);
  std::uniform_int_distribution<int> pick(0, policy.num_primitives - 1);
  return run_episode(setup, policy, seed, "random", [&](const DecisionContext&) { return pick(rng); });
}

}  // namespace vapors
