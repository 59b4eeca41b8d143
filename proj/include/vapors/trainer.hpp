#pragma once

// Interleaved collect/update training of the latent dynamics model.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vapors/checkpoint.hpp"
#include "vapors/dynamics.hpp"
#include "vapors/optim.hpp"
#include "vapors/planner.hpp"
#include "vapors/replay.hpp"

namespace vapors {

struct TrainSchedule {
  int updates = 2250;
  int collect_every = 150;
  int seed_episodes = 5;  // random-policy episodes before the first update
  int batch_size = 32;
  int sequence_length = 8;
  double explore_start = 0.3;
  double explore_end = 0.1;
  int checkpoint_every = 750;
  bool augment = false;  // random square symmetries of replay windows
  LossWeights weights;
  AdamConfig adam;

  void validate() const {
    if (updates < 1) throw ConfigError("updates must be >= 1");
    if (collect_every < 1) throw ConfigError("collect_every must be >= 1");
    if (seed_episodes < 1) throw ConfigError("seed_episodes must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (sequence_length < 2) throw ConfigError("sequence_length must be >= 2");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    for (double e : {explore_start, explore_end})
      if (e < 0.0 || e > 1.0) throw ConfigError("exploration rates must lie in [0, 1]");
  }

  int collections() const { return (updates + collect_every - 1) / collect_every; }
};

/// Environment used for data collection.
struct TrainEnv {
  SimConfig sim;
  PolicyConfig policy;
  int n_items = 15;
  std::vector<Spread> spreads{Spread::Clustered, Spread::HalfSpread, Spread::FullSpread};

  EpisodeSetup setup_for(std::size_t episode) const {
    if (spreads.empty()) throw ConfigError("at least one spread is required");
    return {sim, n_items, spreads[episode % spreads.size()]};
  }
};

struct MetricsRow {
  int step = 0;
  LossReport loss;
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<MetricsRow> metrics;
  int episodes_collected = 0;  // during updates, excluding the seed episodes
  ReplayStore replay;
  std::string final_checkpoint;
};

inline void write_metrics_header(std::ostream& out) { out << "step,recon,kl,reward_mse,total\n"; }

inline void write_metrics_row(std::ostream& out, const MetricsRow& m) {
  out << m.step << ',' << std::setprecision(9) << m.loss.recon << ',' << m.loss.kl << ',' << m.loss.reward << ','
      << m.loss.total << '\n';
}

/// Linear decay over collection rounds.
inline double exploration_rate(const TrainSchedule& s, int round) {
  const int n = s.collections();
  if (n <= 1) return s.explore_start;
  const double f = static_cast<double>(round) / (n - 1);
  return s.explore_start + f * (s.explore_end - s.explore_start);
}

/// Planner choice, replaced by a uniformly random primitive with probability `epsilon`.
template <typename S>
EpisodeLog run_exploring_episode(const EpisodeSetup& setup, const ModelParams<S>& params, const PolicyConfig& policy,
                                 std::uint64_t seed, double epsilon, std::uint64_t explore_seed) {
  std::mt19937_64 rng(explore_seed);
  std::bernoulli_distribution explore(epsilon);
  std::uniform_int_distribution<int> pick(0, policy.num_primitives - 1);
  const auto greedy = vapors_chooser(params, policy);
  return run_episode(setup, policy, seed, "vapors-explore", [&](const DecisionContext& ctx) {
    const bool random = explore(rng);
    const int k = pick(rng);
    return random ? k : greedy(ctx);
  });
}

namespace detail {
enum SeedStream : std::uint64_t { kInitStream = 1, kSeedEpisodes, kSeedChoices, kCollect, kExplore, kSampling };
}

/// Runs the full schedule. With a nonempty `out_dir`, writes metrics.csv and
/// ckpt_<step>.bin there. A non-finite loss throws TrainingError; checkpoints
/// already written stay on disk.
inline TrainResult train(const TrainEnv& env, ModelConfig model, const TrainSchedule& schedule, std::uint64_t seed,
                         const std::string& out_dir = {}, std::ostream* progress = nullptr) {
  schedule.validate();
  env.policy.validate();
  model.num_primitives = env.policy.num_primitives;
  model.init_seed = derive_seed(seed, detail::kInitStream);

  TrainResult res;
  res.params = ModelParams<float>::initialize(model);
  auto opt = OptimizerState<float>::create(model, schedule.adam);

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    metrics.open(std::filesystem::path(out_dir) / "metrics.csv", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write metrics.csv in " + out_dir);
    write_metrics_header(metrics);
  }

  std::size_t episode = 0;
  for (int i = 0; i < schedule.seed_episodes; ++i, ++episode)
    res.replay.append(run_random_episode(env.setup_for(episode), env.policy,
                                         derive_seed(seed, detail::kSeedEpisodes, i),
                                         derive_seed(seed, detail::kSeedChoices, i)));

  std::mt19937_64 sampler(derive_seed(seed, detail::kSampling));
  for (int s = 0; s < schedule.updates; ++s) {
    if (s % schedule.collect_every == 0) {
      const int round = s / schedule.collect_every;
      res.replay.append(run_exploring_episode(env.setup_for(episode++), res.params, env.policy,
                                              derive_seed(seed, detail::kCollect, round),
                                              exploration_rate(schedule, round),
                                              derive_seed(seed, detail::kExplore, round)));
      ++res.episodes_collected;
    }

    TrainBatch batch = res.replay.sample(schedule.batch_size, schedule.sequence_length, sampler, schedule.augment);
    batch.batch_id = s;
    auto grads = ModelParams<float>::zeros(model);
    const LossReport loss = evaluate(batch, res.params, schedule.weights, &grads);
    if (!std::isfinite(loss.total)) throw TrainingError("non-finite training loss", batch.batch_id);
    adam_step(res.params, grads, opt);
    if (!res.params.all_finite()) throw TrainingError("parameters became non-finite", batch.batch_id);

    const MetricsRow row{s + 1, loss};
    res.metrics.push_back(row);
    if (metrics) write_metrics_row(metrics, row);

    const bool last = s + 1 == schedule.updates;
    if (!out_dir.empty() && ((s + 1) % schedule.checkpoint_every == 0 || last)) {
      metrics.flush();
      const auto path = std::filesystem::path(out_dir) / ("ckpt_" + std::to_string(s + 1) + ".bin");
      save_checkpoint(path.string(), res.params, s + 1);
      res.final_checkpoint = path.string();
    }
    if (progress && ((s + 1) % 250 == 0 || last))
      *progress << "step " << (s + 1) << " total " << loss.total << " recon " << loss.recon << " kl " << loss.kl
                << " reward " << loss.reward << '\n';
  }
  return res;
}

/// One-step reward predictions for every transition of an episode: filter the
/// posterior up to obs t, step the prior with the executed primitive, decode.
template <typename S>
std::vector<double> predicted_rewards(const EpisodeLog& log, const ModelParams<S>& params) {
  const auto obs = log.observations();
  std::vector<int> prims;
  for (const auto& r : log.records) prims.push_back(index_of(r.primitive));
  const auto post = posterior_encode(obs, prims, params);
  std::vector<double> out;
  for (std::size_t t = 0; t < log.records.size(); ++t)
    out.push_back(decode_reward(prior_transition(post[t], prims[t], params), params));
  return out;
}

}  // namespace vapors
