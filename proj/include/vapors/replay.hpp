#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "vapors/dynamics.hpp"
#include "vapors/platesim.hpp"

namespace vapors {

struct ReplayWindow {
  std::size_t episode = 0;
  int start = 0;
  friend bool operator==(const ReplayWindow&, const ReplayWindow&) = default;
};

/// Append-only episode store. Windows start at any observation index that
/// leaves a full window inside the episode (or index 0 for short episodes,
/// which are padded with invalid steps).
class ReplayStore {
 public:
  void append(EpisodeLog log) {
    if (log.records.empty()) return;  // nothing to learn from an episode without transitions
    episodes_.push_back(std::move(log));
  }

  std::size_t size() const { return episodes_.size(); }
  const std::vector<EpisodeLog>& episodes() const { return episodes_; }

  std::size_t transition_count() const {
    std::size_t n = 0;
    for (const auto& e : episodes_) n += e.records.size();
    return n;
  }

  std::vector<ReplayWindow> windows(int length) const {
    std::vector<ReplayWindow> out;
    for (std::size_t e = 0; e < episodes_.size(); ++e) {
      const int n_obs = static_cast<int>(episodes_[e].records.size()) + 1;
      const int last = std::max(0, n_obs - length);
      for (int s = 0; s <= last; ++s) out.push_back({e, s});
    }
    return out;
  }

  Sequence window(const ReplayWindow& w, int length) const {
    if (length < 2) throw ContractViolation("window length must be >= 2");
    const auto& ep = episodes_.at(w.episode);
    const auto obs = ep.observations();
    const int n_obs = static_cast<int>(obs.size());
    if (w.start < 0 || w.start >= n_obs) throw ContractViolation("window start out of range");
    Sequence s;
    for (int t = 0; t < length; ++t) {
      const int i = w.start + t;
      const bool valid = i < n_obs;
      s.obs.push_back(valid ? obs[i] : obs.back());
      s.valid.push_back(valid ? 1 : 0);
      s.rewards.push_back(valid && t > 0 ? ep.records[i - 1].reward : 0.0);
      if (t + 1 < length) s.primitives.push_back(i < n_obs - 1 ? index_of(ep.records[i].primitive) : 0);
    }
    return s;
  }

  /// Uniform over all windows, with replacement.
  std::vector<ReplayWindow> sample_windows(int batch, int length, std::mt19937_64& rng) const {
    const auto all = windows(length);
    if (all.empty()) throw ContractViolation("replay store is empty");
    std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
    std::vector<ReplayWindow> out;
    for (int b = 0; b < batch; ++b) out.push_back(all[pick(rng)]);
    return out;
  }

  /// With `augment`, each window gets one random grid symmetry applied to all
  /// of its observations.
  TrainBatch sample(int batch, int length, std::mt19937_64& rng, bool augment = false) const {
    TrainBatch tb;
    for (const auto& w : sample_windows(batch, length, rng)) tb.sequences.push_back(window(w, length));
    if (augment) {
      std::uniform_int_distribution<int> pick(0, 7);
      for (auto& s : tb.sequences) {
        const int k = pick(rng);
        for (auto& o : s.obs) o = dihedral(o, k);
      }
    }
    tb.noise_seed = rng();
    return tb;
  }

 private:
  std::vector<EpisodeLog> episodes_;
};

}  // namespace vapors
