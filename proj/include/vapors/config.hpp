#pragma once

// TOML configuration. Every key is optional; unknown keys are rejected so
// typos fail loudly instead of silently falling back to defaults.

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "vapors/dynamics.hpp"
#include "vapors/planner.hpp"
#include "vapors/platesim.hpp"
#include "vapors/trainer.hpp"

namespace vapors {

/// Task preset: item count and action budget.
struct TaskPreset {
  std::string name;
  int n_items = 15;
  int budget = 8;
};

inline TaskPreset preset_by_name(std::string_view name) {
  if (name == "beans") return {"beans", 15, 8};
  if (name == "spaghetti") return {"spaghetti", 40, 10};
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected beans or spaghetti)");
}

struct ExperimentSettings {
  TaskPreset preset = preset_by_name("beans");
  Spread spread = Spread::HalfSpread;
  std::uint64_t seed_first = 0;
  std::uint64_t seed_last = 19;
  std::vector<std::string> policies{"vapors", "heuristic", "acquire"};

  void validate() const {
    if (seed_last < seed_first) throw ConfigError("seed range is empty");
    if (policies.empty()) throw ConfigError("policy list is empty");
    for (const auto& p : policies)
      if (p != "vapors" && p != "heuristic" && p != "acquire")
        throw ConfigError("unknown policy '" + p + "' (expected vapors, heuristic or acquire)");
  }
};

struct AppConfig {
  SimConfig sim;
  PolicyConfig policy;
  ModelConfig model;
  TrainSchedule train;
  ExperimentSettings experiment;
  std::vector<Spread> train_spreads{Spread::Clustered, Spread::HalfSpread, Spread::FullSpread};

  /// Budget and item count follow the preset.
  TrainEnv train_env() const { return {sim, policy, experiment.preset.n_items, train_spreads}; }
  EpisodeSetup episode_setup() const { return {sim, experiment.preset.n_items, experiment.spread}; }

  void validate() const {
    sim.validate();
    policy.validate();
    model.validate();
    train.validate();
    experiment.validate();
    if (train_spreads.empty()) throw ConfigError("train spreads must be nonempty");
    if (model.num_primitives != policy.num_primitives) throw ConfigError("model and policy disagree on primitives");
  }
};

inline AppConfig default_config() {
  AppConfig c;
  c.policy.budget = c.experiment.preset.budget;
  c.sim.episode_budget = c.policy.budget;
  return c;
}

namespace detail {

class TableReader {
 public:
  TableReader(const toml::table* t, std::string name) : table_(t), name_(std::move(name)) {}

  template <typename T>
  void read(std::string_view key, T& out) {
    seen_.insert(std::string(key));
    if (!table_) return;
    const toml::node* n = table_->get(key);
    if (!n) return;
    if constexpr (std::is_same_v<T, bool>) {
      out = require(n->value<bool>(), key, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      const auto v = require(n->value<std::int64_t>(), key, "an integer");
      if (std::is_unsigned_v<T> && v < 0) fail(key, "a non-negative integer");
      out = static_cast<T>(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(require(n->value<double>(), key, "a number"));
    } else {
      out = require(n->value<std::string>(), key, "a string");
    }
  }

  void read_strings(std::string_view key, std::vector<std::string>& out) {
    seen_.insert(std::string(key));
    if (!table_) return;
    const toml::node* n = table_->get(key);
    if (!n) return;
    const toml::array* arr = n->as_array();
    if (!arr) fail(key, "an array of strings");
    out.clear();
    for (const auto& el : *arr) out.push_back(require(el.value<std::string>(), key, "an array of strings"));
  }

  const toml::table* subtable(std::string_view key) {
    seen_.insert(std::string(key));
    if (!table_) return nullptr;
    const toml::node* n = table_->get(key);
    if (!n) return nullptr;
    if (!n->as_table()) fail(key, "a table");
    return n->as_table();
  }

  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_)
      if (!seen_.count(std::string(k.str())))
        throw ConfigError("unknown key '" + std::string(k.str()) + "' in [" + name_ + "]");
  }

 private:
  template <typename T>
  T require(std::optional<T> v, std::string_view key, const char* what) const {
    if (!v) fail(key, what);
    return *v;
  }
  [[noreturn]] void fail(std::string_view key, const char* what) const {
    throw ConfigError("[" + name_ + "] " + std::string(key) + " must be " + what);
  }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> seen_;
};

inline std::vector<Spread> parse_spreads(const std::vector<std::string>& names) {
  std::vector<Spread> out;
  for (const auto& n : names) out.push_back(spread_from_string(n));
  return out;
}

}  // namespace detail

inline AppConfig config_from_toml(const toml::table& root) {
  AppConfig c = default_config();
  detail::TableReader top(&root, "root");

  {
    detail::TableReader r(top.subtable("sim"), "sim");
    auto& s = c.sim;
    r.read("plate_radius", s.plate_radius);
    r.read("footprint_radius", s.footprint_radius);
    r.read("surface_z", s.surface_z);
    r.read("acquire_radius", s.acquire_radius);
    r.read("acquire_prob", s.acquire_prob);
    r.read("acquire_capacity", s.acquire_capacity);
    r.read("acquire_pitch_deg", s.acquire_pitch_deg);
    r.read("capture_radius", s.capture_radius);
    r.read("move_fraction", s.move_fraction);
    r.read("min_separation", s.min_separation);
    r.read("relax_iterations", s.relax_iterations);
    r.read("push_sigma", s.push_sigma);
    r.read("alpha", s.alpha);
    r.read("grid_width", s.grid_width);
    r.read("grid_height", s.grid_height);
    r.read("grid_margin", s.grid_margin);
    r.finish();
  }

  std::string preset = c.experiment.preset.name;
  int n_items = -1;
  int budget = -1;
  {
    detail::TableReader r(top.subtable("experiment"), "experiment");
    auto& e = c.experiment;
    std::string spread(to_string(e.spread));
    r.read("preset", preset);
    r.read("n_items", n_items);
    r.read("budget", budget);
    r.read("spread", spread);
    r.read("seed_first", e.seed_first);
    r.read("seed_last", e.seed_last);
    r.read_strings("policies", e.policies);
    r.finish();
    e.preset = preset_by_name(preset);
    if (n_items >= 0) e.preset.n_items = n_items;
    if (budget >= 0) e.preset.budget = budget;
    e.spread = spread_from_string(spread);
  }

  {
    detail::TableReader r(top.subtable("policy"), "policy");
    auto& p = c.policy;
    p.budget = c.experiment.preset.budget;
    r.read("horizon", p.horizon);
    r.read("heuristic_threshold", p.heuristic_threshold);
    r.read("num_primitives", p.num_primitives);
    r.read("plan_noise_seed", p.plan_noise_seed);
    r.read("clamp_horizon_to_budget", p.clamp_horizon_to_budget);
    r.read("blur_sigma", p.low_level.blur_sigma);
    r.read("crop_width", p.low_level.crop_width);
    r.read("crop_height", p.low_level.crop_height);
    r.finish();
    p.low_level.acquire_pitch_deg = c.sim.acquire_pitch_deg;
    c.sim.episode_budget = p.budget;
  }

  {
    detail::TableReader r(top.subtable("model"), "model");
    auto& m = c.model;
    r.read("kernel1", m.kernel1);
    r.read("kernel2", m.kernel2);
    r.read("enc_channels1", m.enc_channels1);
    r.read("enc_channels2", m.enc_channels2);
    r.read("dec_channels1", m.dec_channels1);
    r.read("dec_channels2", m.dec_channels2);
    r.read("deter", m.deter);
    r.read("stoch", m.stoch);
    r.read("hidden", m.hidden);
    r.read("min_logstd", m.min_logstd);
    r.read("max_logstd", m.max_logstd);
    r.read("overshooting", m.overshooting);
    r.finish();
    m.grid = c.sim.grid_width;
    m.num_primitives = c.policy.num_primitives;
    if (c.sim.grid_width != c.sim.grid_height) throw ConfigError("the dynamics model needs a square grid");
  }

  {
    detail::TableReader r(top.subtable("train"), "train");
    auto& t = c.train;
    std::vector<std::string> spreads;
    for (Spread s : c.train_spreads) spreads.emplace_back(to_string(s));
    r.read("updates", t.updates);
    r.read("collect_every", t.collect_every);
    r.read("seed_episodes", t.seed_episodes);
    r.read("batch_size", t.batch_size);
    r.read("sequence_length", t.sequence_length);
    r.read("explore_start", t.explore_start);
    r.read("explore_end", t.explore_end);
    r.read("checkpoint_every", t.checkpoint_every);
    r.read("augment", t.augment);
    r.read("recon_weight", t.weights.recon);
    r.read("kl_weight", t.weights.kl);
    r.read("reward_weight", t.weights.reward);
    r.read("learning_rate", t.adam.learning_rate);
    r.read("beta1", t.adam.beta1);
    r.read("beta2", t.adam.beta2);
    r.read("epsilon", t.adam.epsilon);
    r.read("clip_norm", t.adam.clip_norm);
    r.read_strings("spreads", spreads);
    r.finish();
    c.train_spreads = detail::parse_spreads(spreads);
  }

  top.finish();
  c.validate();
  return c;
}

inline AppConfig parse_config(std::string_view text, std::string_view source = "config") {
  try {
    return config_from_toml(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string(source) + ": " + std::string(e.description()));
  }
}

inline AppConfig load_config(const std::string& path) {
  try {
    return config_from_toml(toml::parse_file(path));
  } catch (const toml::parse_error& e) {
    throw ConfigError(path + ": " + std::string(e.description()));
  }
}

}  // namespace vapors
