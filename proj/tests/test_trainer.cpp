#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "test_support.hpp"
#include "vapors/checkpoint.hpp"
#include "vapors/optim.hpp"
#include "vapors/replay.hpp"
#include "vapors/trainer.hpp"

using namespace vapors;
using namespace vapors::testing;

namespace {

ModelConfig mini_config() {
  ModelConfig c;
  c.grid = 8;
  c.kernel1 = 2;
  c.kernel2 = 2;
  c.enc_channels1 = 3;
  c.enc_channels2 = 2;
  c.dec_channels1 = 3;
  c.dec_channels2 = 2;
  c.deter = 8;
  c.stoch = 4;
  c.hidden = 6;
  return c;
}

// Every tensor element set to `v`.
template <typename S>
ModelParams<S> filled(const ModelConfig& cfg, S v) {
  auto p = ModelParams<S>::zeros(cfg);
  for (auto& t : p.tensors) t.setConstant(v);
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("vapors_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---- Adam ----------------------------------------------------------------------

TEST(Adam, FirstStepByHand) {
  const auto cfg = mini_config();
  auto params = ModelParams<double>::zeros(cfg);
  auto grads = ModelParams<double>::zeros(cfg);
  grads.tensors[0](0, 0) = 1.0;
  auto opt = OptimizerState<double>::create(cfg);
  const auto info = adam_step(params, grads, opt);
  EXPECT_TRUE(info.applied);
  EXPECT_EQ(opt.step, 1);
  EXPECT_NEAR(params.tensors[0](0, 0), -1e-3 / (1.0 + 1e-4), 1e-15);
  EXPECT_EQ(params.tensors[0](0, 1), 0.0);
}

TEST(Adam, SecondStepByHand) {
  const auto cfg = mini_config();
  auto params = ModelParams<double>::zeros(cfg);
  auto grads = ModelParams<double>::zeros(cfg);
  auto opt = OptimizerState<double>::create(cfg);
  grads.tensors[0](0, 0) = 1.0;
  adam_step(params, grads, opt);
  grads.tensors[0](0, 0) = -2.0;
  adam_step(params, grads, opt);
  const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(params.tensors[0](0, 0), -1e-3 / (1.0 + 1e-4) - 1e-3 * mhat / (std::sqrt(vhat) + 1e-4), 1e-14);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  const auto cfg = mini_config();
  auto params = random_params<double>(cfg, 1);
  const auto before = params;
  auto opt = OptimizerState<double>::create(cfg);
  opt.first_moment = filled<double>(cfg, 0.5);
  opt.second_moment = filled<double>(cfg, 0.25);
  adam_step(params, ModelParams<double>::zeros(cfg), opt);
  // Fresh optimizer state plus a zero gradient must leave params untouched.
  auto fresh = OptimizerState<double>::create(cfg);
  auto p2 = before;
  adam_step(p2, ModelParams<double>::zeros(cfg), fresh);
  for (int i = 0; i < kNumParams; ++i) EXPECT_EQ(p2.tensors[i], before.tensors[i]);
  EXPECT_NEAR(opt.first_moment.tensors[0](0, 0), 0.45, 1e-15);
  EXPECT_NEAR(opt.second_moment.tensors[0](0, 0), 0.25 * 0.999, 1e-15);
}

TEST(Adam, ClipsToGlobalNorm) {
  const auto cfg = mini_config();
  auto params = ModelParams<double>::zeros(cfg);
  auto grads = ModelParams<double>::zeros(cfg);
  grads.tensors[0](0, 0) = 1200.0;
  grads.tensors[1](0, 0) = 1600.0;  // norm 2000
  auto opt = OptimizerState<double>::create(cfg);
  const auto info = adam_step(params, grads, opt);
  EXPECT_DOUBLE_EQ(info.grad_norm, 2000.0);
  EXPECT_DOUBLE_EQ(info.clip_scale, 0.5);
  EXPECT_NEAR(opt.first_moment.tensors[0](0, 0), 0.1 * 600.0, 1e-9);
  EXPECT_NEAR(opt.first_moment.tensors[1](0, 0), 0.1 * 800.0, 1e-9);
  // Post-clip norm recovered from the first moment.
  EXPECT_LE(global_norm(opt.first_moment) / 0.1, 1000.0 + 1e-6);
}

TEST(Adam, NonFiniteGradientSkipsUpdate) {
  const auto cfg = mini_config();
  auto params = random_params<double>(cfg, 2);
  const auto before = params;
  auto grads = ModelParams<double>::zeros(cfg);
  grads.tensors[3](0, 0) = std::numeric_limits<double>::quiet_NaN();
  auto opt = OptimizerState<double>::create(cfg);
  const auto info = adam_step(params, grads, opt);
  EXPECT_FALSE(info.applied);
  EXPECT_EQ(opt.step, 0);
  for (int i = 0; i < kNumParams; ++i) EXPECT_EQ(params.tensors[i], before.tensors[i]);
}

TEST(Adam, FiniteInputsGiveFiniteParams) {
  const auto cfg = mini_config();
  auto params = random_params<double>(cfg, 3);
  auto opt = OptimizerState<double>::create(cfg);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1e6);
  for (int s = 0; s < 20; ++s) {
    auto g = ModelParams<double>::zeros(cfg);
    for (auto& t : g.tensors)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
    adam_step(params, g, opt);
    EXPECT_TRUE(params.all_finite());
  }
}

// ---- checkpoints ----------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const auto cfg = mini_config();
  const auto params = random_params<float>(cfg, 5);
  std::stringstream ss;
  save_checkpoint(ss, params, 42);
  const auto ck = load_checkpoint(ss, &cfg);
  EXPECT_EQ(ck.step, 42);
  for (int i = 0; i < kNumParams; ++i) EXPECT_EQ(ck.params.tensors[i], params.tensors[i]);
  const auto batch = random_batch(cfg, 3, 4, 6);
  const auto a = evaluate(batch, params, {});
  const auto b = evaluate(batch, ck.params, {});
  EXPECT_EQ(a.total, b.total);
  std::stringstream again;
  save_checkpoint(again, ck.params, 42);
  std::stringstream first;
  save_checkpoint(first, params, 42);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Checkpoint, RejectsMismatchesAndCorruption) {
  const auto cfg = mini_config();
  std::stringstream ss;
  save_checkpoint(ss, random_params<float>(cfg, 7), 1);
  const std::string good = ss.str();

  auto other = cfg;
  other.deter = 9;
  {
    std::stringstream in(good);
    EXPECT_THROW(load_checkpoint(in, &other), CheckpointError);
  }
  {
    std::stringstream in(good.substr(0, good.size() - 4));
    EXPECT_THROW(load_checkpoint(in), CheckpointError);
  }
  {
    std::string bad = good;
    bad.replace(bad.find("param "), 6, "parm  ");
    std::stringstream in(bad);
    EXPECT_THROW(load_checkpoint(in), CheckpointError);
  }
  {
    std::string bad = good;
    const auto pos = bad.find(" 8 f32");
    ASSERT_NE(pos, std::string::npos);
    bad.replace(pos, 6, " 7 f32");
    std::stringstream in(bad);
    EXPECT_THROW(load_checkpoint(in), CheckpointError);
  }
  {
    std::stringstream in("not a checkpoint\n");
    EXPECT_THROW(load_checkpoint(in), CheckpointError);
  }
}

// ---- replay ---------------------------------------------------------------------

namespace {

ReplayStore small_store() {
  TrainEnv env;
  ReplayStore store;
  for (int i = 0; i < 4; ++i) store.append(run_random_episode(env.setup_for(i), env.policy, 100 + i, 200 + i));
  return store;
}

}  // namespace

TEST(Replay, WindowsStayInsideEpisodes) {
  const auto store = small_store();
  for (const auto& w : store.windows(8)) {
    const auto& ep = store.episodes()[w.episode];
    const int n_obs = static_cast<int>(ep.records.size()) + 1;
    EXPECT_GE(w.start, 0);
    EXPECT_TRUE(w.start + 8 <= n_obs || w.start == 0);
    const auto s = store.window(w, 8);
    const auto obs = ep.observations();
    for (int t = 0; t < 8; ++t) {
      const int i = w.start + t;
      if (i < n_obs) {
        EXPECT_EQ(s.valid[t], 1);
        EXPECT_EQ(s.obs[t], obs[i]);
        if (t > 0) {
          EXPECT_EQ(s.rewards[t], ep.records[i - 1].reward);
        }
        if (t + 1 < 8 && i + 1 < n_obs) {
          EXPECT_EQ(s.primitives[t], index_of(ep.records[i].primitive));
        }
      } else {
        EXPECT_EQ(s.valid[t], 0);
      }
    }
  }
}

TEST(Replay, ShortEpisodeIsPadded) {
  ReplayStore store;
  TrainEnv env;
  auto log = run_random_episode(env.setup_for(0), env.policy, 5, 6);
  log.records.resize(2);
  store.append(log);
  const auto w = store.windows(8);
  ASSERT_EQ(w.size(), 1u);
  const auto s = store.window(w[0], 8);
  EXPECT_EQ(std::count(s.valid.begin(), s.valid.end(), 1), 3);
  EXPECT_EQ(s.obs.size(), 8u);
  EXPECT_EQ(s.primitives.size(), 7u);
}

TEST(Replay, SamplingReproduciblePerSeed) {
  const auto store = small_store();
  std::mt19937_64 a(9), b(9), c(10);
  const auto wa = store.sample_windows(32, 8, a);
  EXPECT_EQ(wa, store.sample_windows(32, 8, b));
  EXPECT_NE(wa, store.sample_windows(32, 8, c));
}

TEST(Replay, EmptyStoreAndEmptyEpisodes) {
  ReplayStore store;
  EpisodeLog empty;
  store.append(empty);
  EXPECT_EQ(store.size(), 0u);
  std::mt19937_64 rng(1);
  EXPECT_THROW(store.sample(4, 8, rng), ContractViolation);
}

// ---- training --------------------------------------------------------------------

TEST(Schedule, CollectsOneEpisodePerInterval) {
  TrainSchedule s;
  EXPECT_EQ(s.collections(), 15);
  EXPECT_DOUBLE_EQ(exploration_rate(s, 0), 0.3);
  EXPECT_DOUBLE_EQ(exploration_rate(s, 14), 0.1);
  s.updates = 151;
  EXPECT_EQ(s.collections(), 2);
}

TEST(Train, ShortRunIsDeterministicAndWritesFiles) {
  TrainEnv env;
  TrainSchedule sched;
  sched.updates = 6;
  sched.collect_every = 3;
  sched.seed_episodes = 5;
  sched.batch_size = 4;
  sched.checkpoint_every = 4;
  const auto d1 = temp_dir("train_a"), d2 = temp_dir("train_b");
  const auto r1 = train(env, ModelConfig{}, sched, 11, d1.string());
  const auto r2 = train(env, ModelConfig{}, sched, 11, d2.string());
  EXPECT_EQ(r1.episodes_collected, 2);
  EXPECT_EQ(r1.replay.size(), r1.replay.episodes().size());
  ASSERT_EQ(r1.metrics.size(), 6u);
  EXPECT_EQ(slurp(d1 / "metrics.csv"), slurp(d2 / "metrics.csv"));
  EXPECT_EQ(slurp(d1 / "ckpt_4.bin"), slurp(d2 / "ckpt_4.bin"));
  EXPECT_EQ(slurp(d1 / "ckpt_6.bin"), slurp(d2 / "ckpt_6.bin"));
  EXPECT_EQ(r1.final_checkpoint, (d1 / "ckpt_6.bin").string());
  const auto header = slurp(d1 / "metrics.csv").substr(0, 32);
  EXPECT_EQ(header, "step,recon,kl,reward_mse,total\n1");
  const auto ck = load_checkpoint(r1.final_checkpoint);
  for (int i = 0; i < kNumParams; ++i) EXPECT_EQ(ck.params.tensors[i], r1.params.tensors[i]);
}

TEST(Train, DifferentSeedsDiffer) {
  TrainEnv env;
  TrainSchedule sched;
  sched.updates = 2;
  sched.batch_size = 2;
  const auto a = train(env, ModelConfig{}, sched, 1);
  const auto b = train(env, ModelConfig{}, sched, 2);
  EXPECT_NE(a.metrics[0].loss.total, b.metrics[0].loss.total);
}

TEST(Overfit, SingleRepeatedMaskAndReward) {
  ModelConfig cfg;
  cfg.init_seed = 3;
  auto params = ModelParams<float>::initialize(cfg);
  auto opt = OptimizerState<float>::create(cfg);
  SimConfig sim;
  const auto mask = render_mask(reset(sim, 2, 15, Spread::HalfSpread), sim);
  TrainBatch batch;
  Sequence s;
  for (int t = 0; t < 4; ++t) {
    s.obs.push_back(mask);
    s.rewards.push_back(t == 0 ? 0.0 : 0.166);
    s.valid.push_back(1);
    if (t < 3) s.primitives.push_back(0);
  }
  batch.sequences = {s, s};
  for (int it = 0; it < 400; ++it) {
    batch.noise_seed = static_cast<std::uint64_t>(it);
    auto g = ModelParams<float>::zeros(cfg);
    evaluate(batch, params, {}, &g);
    adam_step(params, g, opt);
  }
  const auto post = posterior_encode(s.obs, s.primitives, params);
  const auto decoded = decode_obs(post.back(), params);
  double mse = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) mse += std::pow(decoded[i] - mask[i], 2);
  mse /= static_cast<double>(mask.size());
  EXPECT_LT(mse, 0.05);
  EXPECT_NEAR(decode_reward(post.back(), params), 0.166, 0.02);
}

TEST(Overfit, OneEpisodeLossDropsBelowQuarter) {
  TrainEnv env;
  ReplayStore store;
  store.append(run_random_episode(env.setup_for(1), env.policy, 77, 78));
  ModelConfig cfg;
  cfg.init_seed = 4;
  auto params = ModelParams<float>::initialize(cfg);
  auto opt = OptimizerState<float>::create(cfg);
  TrainBatch batch;
  for (const auto& w : store.windows(8)) batch.sequences.push_back(store.window(w, 8));
  double first = 0.0, last = 0.0;
  for (int it = 0; it < 500; ++it) {
    batch.noise_seed = static_cast<std::uint64_t>(it);
    auto g = ModelParams<float>::zeros(cfg);
    const auto loss = evaluate(batch, params, {}, &g);
    if (it == 0) first = loss.total;
    last = loss.total;
    adam_step(params, g, opt);
  }
  EXPECT_LT(last, 0.25 * first);
}
