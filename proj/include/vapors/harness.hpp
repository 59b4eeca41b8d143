#pragma once

// Experiment orchestration: policies over a seed range, clearance curves,
// per-seed logs and the labeling utility.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vapors/checkpoint.hpp"
#include "vapors/config.hpp"
#include "vapors/perception.hpp"
#include "vapors/planner.hpp"

namespace vapors {

// Bad invocation: missing or unreadable inputs, mismatched files.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CurvePoint {
  std::string policy;
  int step = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
};

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Sample standard deviation over sqrt(n); stderr is 0 for n < 2.
inline MeanStderr mean_stderr(const std::vector<double>& xs) {
  MeanStderr r;
  if (xs.empty()) return r;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) r.mean += x;
  r.mean /= n;
  if (xs.size() < 2) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return r;
}

/// Cumulative pickup fraction after each step 0..budget; flat after the episode ends.
inline std::vector<double> cumulative_pickup_fraction(const EpisodeLog& log, int budget, int initial_items) {
  std::vector<double> out(static_cast<std::size_t>(budget) + 1, 0.0);
  if (initial_items <= 0) return out;
  int acc = 0;
  for (int t = 1; t <= budget; ++t) {
    if (t <= static_cast<int>(log.records.size())) acc += log.records[t - 1].pickup_count;
    out[t] = static_cast<double>(acc) / initial_items;
  }
  return out;
}

inline std::vector<CurvePoint> clearance_curve(const std::string& policy, const std::vector<EpisodeLog>& logs,
                                               int budget, int initial_items) {
  std::vector<std::vector<double>> per_step(static_cast<std::size_t>(budget) + 1);
  for (const auto& log : logs) {
    const auto c = cumulative_pickup_fraction(log, budget, initial_items);
    for (int t = 0; t <= budget; ++t) per_step[t].push_back(c[t]);
  }
  std::vector<CurvePoint> out;
  for (int t = 0; t <= budget; ++t) {
    const auto ms = mean_stderr(per_step[t]);
    out.push_back({policy, t, ms.mean, ms.stderr_});
  }
  return out;
}

struct PolicySummary {
  std::string policy;
  int episodes = 0;
  MeanStderr final_pickup;
  MeanStderr final_fraction;
  double success_rate = 0.0;
};

inline PolicySummary summarize(const std::string& policy, const std::vector<EpisodeLog>& logs, int initial_items) {
  PolicySummary s;
  s.policy = policy;
  s.episodes = static_cast<int>(logs.size());
  std::vector<double> pick, frac;
  int successes = 0;
  for (const auto& l : logs) {
    pick.push_back(l.total_pickup());
    frac.push_back(initial_items > 0 ? static_cast<double>(l.total_pickup()) / initial_items : 0.0);
    successes += l.success;
  }
  s.final_pickup = mean_stderr(pick);
  s.final_fraction = mean_stderr(frac);
  s.success_rate = logs.empty() ? 0.0 : static_cast<double>(successes) / logs.size();
  return s;
}

struct ExperimentResult {
  std::map<std::string, std::vector<EpisodeLog>> logs;  // per policy, in seed order
  std::vector<CurvePoint> curve;
  std::vector<PolicySummary> summary;

  const PolicySummary& summary_for(const std::string& policy) const {
    for (const auto& s : summary)
      if (s.policy == policy) return s;
    throw ContractViolation("no summary for policy " + policy);
  }
};

inline EpisodeLog run_policy(const std::string& policy, const EpisodeSetup& setup, const PolicyConfig& pcfg,
                             std::uint64_t seed, const ModelParams<float>* params) {
  if (policy == "vapors") {
    if (!params) throw UsageError("the vapors policy needs a checkpoint");
    return run_vapors_episode(setup, *params, pcfg, seed);
  }
  if (policy == "heuristic") return run_heuristic_episode(setup, pcfg, seed);
  if (policy == "acquire") return run_acquire_only_episode(setup, pcfg, seed);
  throw UsageError("unknown policy '" + policy + "'");
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << std::setprecision(10);
  return out;
}

}  // namespace detail

inline void write_curves_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "policy,step,mean,stderr\n";
  for (const auto& p : curve) out << p.policy << ',' << p.step << ',' << p.mean << ',' << p.stderr_ << '\n';
}

inline void write_summary_csv(std::ostream& out, const std::vector<PolicySummary>& rows) {
  out << "policy,episodes,mean_pickup,stderr_pickup,mean_fraction,stderr_fraction,success_rate\n";
  for (const auto& s : rows)
    out << s.policy << ',' << s.episodes << ',' << s.final_pickup.mean << ',' << s.final_pickup.stderr_ << ','
        << s.final_fraction.mean << ',' << s.final_fraction.stderr_ << ',' << s.success_rate << '\n';
}

/// Every listed policy on every seed, all starting from identical plates.
/// With a nonempty `out_dir`, writes curves.csv, summary.csv and
/// logs/<policy>/seed_<n>.jsonl.
inline ExperimentResult run_experiment(const AppConfig& cfg, const ModelParams<float>* params,
                                       const std::string& out_dir = {}) {
  cfg.validate();
  const auto& ex = cfg.experiment;
  for (const auto& p : ex.policies)
    if (p == "vapors" && !params) throw UsageError("the vapors policy needs a checkpoint");

  const EpisodeSetup setup = cfg.episode_setup();
  ExperimentResult res;
  for (const auto& policy : ex.policies) {
    auto& logs = res.logs[policy];
    for (std::uint64_t seed = ex.seed_first; seed <= ex.seed_last; ++seed)
      logs.push_back(run_policy(policy, setup, cfg.policy, seed, params));
    const auto curve = clearance_curve(policy, logs, cfg.policy.budget, setup.n_items);
    res.curve.insert(res.curve.end(), curve.begin(), curve.end());
    res.summary.push_back(summarize(policy, logs, setup.n_items));
  }

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    for (const auto& [policy, logs] : res.logs) {
      const fs::path dir = fs::path(out_dir) / "logs" / policy;
      fs::create_directories(dir);
      for (const auto& log : logs) {
        auto out = detail::open_out(dir / ("seed_" + std::to_string(log.seed) + ".jsonl"));
        write_jsonl(out, log);
      }
    }
    auto curves = detail::open_out(fs::path(out_dir) / "curves.csv");
    write_curves_csv(curves, res.curve);
    auto summary = detail::open_out(fs::path(out_dir) / "summary.csv");
    write_summary_csv(summary, res.summary);
  }
  return res;
}

inline GrayGrid load_pgm_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  try {
    return read_pgm(in);
  } catch (const ContractViolation& e) {
    throw UsageError(path + ": " + e.what());
  }
}

inline ObsGrid load_pbm_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  try {
    return read_pbm(in);
  } catch (const ContractViolation& e) {
    throw UsageError(path + ": " + e.what());
  }
}

/// Background-subtraction labeling of a (empty plate, current plate) PGM pair into a PBM mask.
inline ObsGrid label_tool(const std::string& empty_path, const std::string& current_path, double thresh,
                          const std::string& out_path) {
  const GrayGrid empty = load_pgm_file(empty_path);
  const GrayGrid current = load_pgm_file(current_path);
  if (!empty.same_shape(current))
    throw UsageError("image sizes differ: " + empty_path + " vs " + current_path);
  const ObsGrid mask = background_subtract_label(empty, current, thresh);
  save_file<ObsGrid>(out_path, mask, write_pbm);
  return mask;
}

inline Checkpoint load_checkpoint_for(const AppConfig& cfg, const std::string& path) {
  if (path.empty()) throw UsageError("no checkpoint given");
  if (!std::filesystem::exists(path)) throw UsageError("checkpoint not found: " + path);
  Checkpoint ck = load_checkpoint(path);
  ModelConfig want = cfg.model;
  want.init_seed = ck.params.config.init_seed;  // the architecture must match; the init seed may differ
  if (!(want == ck.params.config)) throw CheckpointError("checkpoint architecture does not match the configuration");
  return ck;
}

}  // namespace vapors
