#pragma once

// Seeded 2D granular plate: items are points with circular footprints on a
// disk-shaped plate. Acquire removes items near the utensil, Rearrange drags
// items near the push segment toward its end point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vapors/common.hpp"
#include "vapors/geometry.hpp"
#include "vapors/grid.hpp"

namespace vapors {

enum class Spread { Clustered, HalfSpread, FullSpread };

inline std::string_view to_string(Spread s) {
  switch (s) {
    case Spread::Clustered: return "clustered";
    case Spread::HalfSpread: return "half";
    case Spread::FullSpread: return "full";
  }
  return "?";
}

inline Spread spread_from_string(std::string_view s) {
  if (s == "clustered") return Spread::Clustered;
  if (s == "half") return Spread::HalfSpread;
  if (s == "full") return Spread::FullSpread;
  throw ConfigError("unknown spread: " + std::string(s));
}

/// Appearance of the synthetic grayscale camera image.
struct GrayStyle {
  double background_level = 185.0;
  double gradient_u = 0.4;  // intensity change per pixel along u
  double gradient_v = -0.25;
  double texture_sigma = 2.0;  // static plate texture, fixed by texture_seed
  std::uint64_t texture_seed = 1234;
  double sensor_sigma = 0.0;  // per-frame noise
  double item_level = 80.0;
  double item_jitter = 15.0;  // per-item uniform offset in [-jitter, jitter]
};

struct SimConfig {
  Vec2 plate_center{0.0, 0.0};
  double plate_radius = 0.10;
  double footprint_radius = 0.014;
  double surface_z = 0.0;
  int episode_budget = 8;

  // Acquire
  double acquire_radius = 0.012;
  double acquire_prob = 0.9;
  int acquire_capacity = 5;
  double acquire_pitch_deg = 80.0;

  // Rearrange
  double capture_radius = 0.03;
  double move_fraction = 0.9;
  double push_sigma = 0.001;  // 0.01 * plate_radius

  // Excluded volume: items closer than this are pushed apart after placement
  // and after every push. 0 disables.
  double min_separation = 0.006;
  int relax_iterations = 30;

  double alpha = 0.66;

  int grid_width = 64;
  int grid_height = 64;
  double grid_margin = 1.0;
  GrayStyle gray;

  Calibration calibration() const {
    return Calibration::centered(grid_width, grid_height, plate_center, plate_radius, grid_margin, surface_z);
  }

  // Items are placed so their footprint stays on the plate.
  double placement_radius() const { return std::max(0.0, plate_radius - footprint_radius); }

  // Hexagonal packing bound on the number of footprints the plate can hold.
  int packing_capacity() const {
    const double ratio = plate_radius / footprint_radius;
    return static_cast<int>(std::floor(0.9069 * ratio * ratio));
  }

  void validate() const {
    if (!(plate_radius > 0.0) || !(footprint_radius > 0.0) || footprint_radius >= plate_radius)
      throw ConfigError("plate_radius and footprint_radius must satisfy 0 < footprint < plate");
    if (acquire_prob < 0.0 || acquire_prob > 1.0) throw ConfigError("acquire_prob must lie in [0, 1]");
    if (acquire_capacity < 0) throw ConfigError("acquire_capacity must be >= 0");
    if (acquire_radius < 0.0 || capture_radius < 0.0 || push_sigma < 0.0)
      throw ConfigError("radii and noise must be non-negative");
    if (move_fraction < 0.0 || move_fraction > 1.0) throw ConfigError("move_fraction must lie in [0, 1]");
    if (min_separation < 0.0 || relax_iterations < 0) throw ConfigError("min_separation and relax_iterations must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
    if (episode_budget < 0) throw ConfigError("episode_budget must be >= 0");
    if (grid_width <= 0 || grid_height <= 0) throw ConfigError("grid dimensions must be positive");
    if (!(grid_margin > 0.0)) throw ConfigError("grid_margin must be positive");
  }
};

struct FoodItem {
  int id = 0;
  Vec2 position;
  double footprint_radius = 0.0;
  bool acquired = false;
  friend bool operator==(const FoodItem&, const FoodItem&) = default;
};

struct PlateState {
  std::vector<FoodItem> items;
  Vec2 plate_center;
  double plate_radius = 0.0;
  int step_index = 0;
  int initial_items = 0;          // N0 of the episode
  double initial_coverage = 0.0;  // C0 of the episode
  std::mt19937_64 rng;

  int remaining() const {
    return static_cast<int>(std::count_if(items.begin(), items.end(), [](const FoodItem& f) { return !f.acquired; }));
  }
  int acquired_count() const { return static_cast<int>(items.size()) - remaining(); }

  std::vector<Vec2> remaining_positions() const {
    std::vector<Vec2> out;
    for (const auto& f : items)
      if (!f.acquired) out.push_back(f.position);
    return out;
  }

  friend bool operator==(const PlateState&, const PlateState&) = default;
};

inline double compute_coverage(const PlateState& s) {
  const auto pts = s.remaining_positions();
  return convex_hull_area(pts);
}

inline int compute_pickup(const PlateState& before, const PlateState& after) {
  return after.acquired_count() - before.acquired_count();
}

/// Weighted reward: alpha * pickup / N0 + (1 - alpha) * (coverage drop) / C0.
/// Every stored reward is produced by this function, so recomputing it from a
/// record's fields reproduces it bit-for-bit.
inline double reward_from_terms(int pickup, double coverage_before, double coverage_after, double alpha,
                                int initial_items, double initial_coverage) {
  const double pickup_gain = initial_items > 0 ? static_cast<double>(pickup) / initial_items : 0.0;
  const double coverage_loss =
      initial_coverage > 0.0 ? (coverage_before - coverage_after) / initial_coverage : 0.0;
  return alpha * pickup_gain + (1.0 - alpha) * coverage_loss;
}

inline double reward(const PlateState& before, const PlateState& after, double alpha) {
  return reward_from_terms(compute_pickup(before, after), compute_coverage(before), compute_coverage(after), alpha,
                           before.initial_items, before.initial_coverage);
}

namespace detail {

inline Vec2 clamp_to_disk(Vec2 p, Vec2 center, double radius) {
  const Vec2 rel = p - center;
  const double r = norm(rel);
  return r > radius ? center + (radius / r) * rel : p;
}

// Pairwise position-based relaxation toward the minimum separation. Sweeps
// run in id order, so the result is deterministic.
inline void relax_overlaps(const SimConfig& cfg, PlateState& s) {
  const double sep = cfg.min_separation;
  if (sep <= 0.0) return;
  const double rmax = cfg.placement_radius();
  for (int it = 0; it < cfg.relax_iterations; ++it) {
    bool moved = false;
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      if (s.items[i].acquired) continue;
      for (std::size_t j = i + 1; j < s.items.size(); ++j) {
        if (s.items[j].acquired) continue;
        Vec2& a = s.items[i].position;
        Vec2& b = s.items[j].position;
        Vec2 d = b - a;
        double len = norm(d);
        if (len >= sep) continue;
        if (len == 0.0) {
          const double theta = 2.399963229728653 * static_cast<double>(s.items[j].id - s.items[i].id);
          d = {std::cos(theta), std::sin(theta)};
          len = 1.0;
        }
        const double shift = 0.5 * (sep - norm(b - a)) / len;
        a = clamp_to_disk(a - shift * d, s.plate_center, rmax);
        b = clamp_to_disk(b + shift * d, s.plate_center, rmax);
        moved = true;
      }
    }
    if (!moved) break;
  }
}

}  // namespace detail

inline PlateState reset(const SimConfig& cfg, std::uint64_t seed, int n_items, Spread spread) {
  cfg.validate();
  if (n_items < 0) throw ConfigError("n_items must be >= 0");
  if (n_items > cfg.packing_capacity())
    throw ConfigError("n_items " + std::to_string(n_items) + " exceeds plate packing capacity " +
                      std::to_string(cfg.packing_capacity()));

  PlateState s;
  s.plate_center = cfg.plate_center;
  s.plate_radius = cfg.plate_radius;
  s.rng.seed(seed);

  const double rmax = cfg.placement_radius();
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto uniform_in_disk = [&](std::mt19937_64& g) {
    for (;;) {
      const Vec2 p{unit(g), unit(g)};
      if (dot(p, p) <= 1.0) return rmax * p;
    }
  };

  Vec2 cluster_center{};
  Vec2 half_dir{1.0, 0.0};
  if (spread == Spread::Clustered) {
    cluster_center = 0.5 * uniform_in_disk(s.rng);
  } else if (spread == Spread::HalfSpread) {
    const double theta = std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(s.rng);
    half_dir = {std::cos(theta), std::sin(theta)};
  }
  std::normal_distribution<double> cluster(0.0, 0.12 * cfg.plate_radius);

  for (int i = 0; i < n_items; ++i) {
    Vec2 offset;
    switch (spread) {
      case Spread::Clustered:
        do {
          offset = cluster_center + Vec2{cluster(s.rng), cluster(s.rng)};
        } while (norm(offset) > rmax);
        break;
      case Spread::HalfSpread:
        do {
          offset = uniform_in_disk(s.rng);
        } while (dot(offset, half_dir) < 0.0);
        break;
      case Spread::FullSpread:
        offset = uniform_in_disk(s.rng);
        break;
    }
    s.items.push_back({i, cfg.plate_center + offset, cfg.footprint_radius, false});
  }
  detail::relax_overlaps(cfg, s);
  s.initial_items = n_items;
  s.initial_coverage = compute_coverage(s);
  return s;
}

struct TransitionRecord {
  int step = 0;
  ObsGrid obs_before;
  PrimitiveKind primitive = PrimitiveKind::Acquire;
  LowLevelAction action;
  double reward = 0.0;
  ObsGrid obs_after;
  int pickup_count = 0;
  double coverage_before = 0.0;
  double coverage_after = 0.0;
  double alpha = 0.0;
  int initial_items = 0;
  double initial_coverage = 0.0;
  bool misexecuted = false;

  double recomputed_reward() const {
    return reward_from_terms(pickup_count, coverage_before, coverage_after, alpha, initial_items, initial_coverage);
  }

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

ObsGrid render_mask(const PlateState& s, const Calibration& calib, int width, int height);

inline ObsGrid render_mask(const PlateState& s, const SimConfig& cfg) {
  return render_mask(s, cfg.calibration(), cfg.grid_width, cfg.grid_height);
}

struct StepResult {
  PlateState state;
  double reward = 0.0;
  TransitionRecord record;
};

inline bool on_plate(const PlateState& s, const Vec3& p) {
  return norm(Vec2{p.x, p.y} - s.plate_center) <= s.plate_radius;
}

namespace detail {

// Closest point on segment [a, b] to p.
inline Vec2 closest_on_segment(Vec2 a, Vec2 b, Vec2 p) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return a;
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return a + t * ab;
}

inline void apply_acquire(const SimConfig& cfg, PlateState& s, Vec2 target) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < s.items.size(); ++i) {
    const auto& f = s.items[i];
    if (!f.acquired && norm(f.position - target) <= cfg.acquire_radius) candidates.push_back(i);
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return norm(s.items[a].position - target) < norm(s.items[b].position - target);
  });
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  int taken = 0;
  for (std::size_t idx : candidates) {
    if (taken >= cfg.acquire_capacity) break;
    if (u01(s.rng) < cfg.acquire_prob) {
      s.items[idx].acquired = true;
      ++taken;
    }
  }
}

inline void apply_rearrange(const SimConfig& cfg, PlateState& s, Vec2 from, Vec2 to) {
  std::normal_distribution<double> noise(0.0, cfg.push_sigma);
  const double rmax = cfg.placement_radius();
  for (auto& f : s.items) {
    if (f.acquired) continue;
    if (norm(f.position - closest_on_segment(from, to, f.position)) > cfg.capture_radius) continue;
    Vec2 p = f.position + cfg.move_fraction * (to - f.position);
    if (cfg.push_sigma > 0.0) p = p + Vec2{noise(s.rng), noise(s.rng)};
    f.position = clamp_to_disk(p, s.plate_center, rmax);
  }
  relax_overlaps(cfg, s);
}

}  // namespace detail

/// Executes one primitive. Actions targeting points off the plate do nothing
/// and are flagged as misexecuted.
inline StepResult step(const SimConfig& cfg, const PlateState& state, const LowLevelAction& action) {
  if (state.step_index >= cfg.episode_budget) throw ContractViolation("step called past the episode budget");
  if (!is_well_formed(action)) throw ContractViolation("malformed low-level action");

  StepResult out{state, 0.0, {}};
  PlateState& next = out.state;
  const bool valid = on_plate(state, action.dense_point) && (!action.far_point || on_plate(state, *action.far_point));
  if (valid) {
    const Vec2 dense{action.dense_point.x, action.dense_point.y};
    if (action.kind == PrimitiveKind::Acquire) {
      detail::apply_acquire(cfg, next, dense);
    } else {
      detail::apply_rearrange(cfg, next, {action.far_point->x, action.far_point->y}, dense);
    }
  }
  next.step_index = state.step_index + 1;

  const Calibration calib = cfg.calibration();
  TransitionRecord& rec = out.record;
  rec.step = state.step_index;
  rec.obs_before = render_mask(state, calib, cfg.grid_width, cfg.grid_height);
  rec.primitive = action.kind;
  rec.action = action;
  rec.obs_after = render_mask(next, calib, cfg.grid_width, cfg.grid_height);
  rec.pickup_count = compute_pickup(state, next);
  rec.coverage_before = compute_coverage(state);
  rec.coverage_after = compute_coverage(next);
  rec.alpha = cfg.alpha;
  rec.initial_items = state.initial_items;
  rec.initial_coverage = state.initial_coverage;
  rec.misexecuted = !valid;
  rec.reward = rec.recomputed_reward();
  out.reward = rec.reward;
  return out;
}

inline ObsGrid render_mask(const PlateState& s, const Calibration& calib, int width, int height) {
  ObsGrid m(width, height);
  // Pixel-space half extent of a footprint's bounding box under the affine map.
  const double det = std::abs(calib.determinant());
  if (det == 0.0) throw ContractViolation("calibration is not invertible");
  const double ext_u = (std::abs(calib.linear[3]) + std::abs(calib.linear[1])) / det;
  const double ext_v = (std::abs(calib.linear[2]) + std::abs(calib.linear[0])) / det;
  for (const auto& f : s.items) {
    if (f.acquired) continue;
    const Vec2 c = calib.to_pixel(f.position);
    const int u0 = std::max(0, static_cast<int>(std::floor(c.x - f.footprint_radius * ext_u)) - 1);
    const int u1 = std::min(width - 1, static_cast<int>(std::ceil(c.x + f.footprint_radius * ext_u)) + 1);
    const int v0 = std::max(0, static_cast<int>(std::floor(c.y - f.footprint_radius * ext_v)) - 1);
    const int v1 = std::min(height - 1, static_cast<int>(std::ceil(c.y + f.footprint_radius * ext_v)) + 1);
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        if (norm(calib.to_plate(u, v) - f.position) <= f.footprint_radius) m.at(u, v) = 1;
      }
    }
  }
  return m;
}

/// Empty-plate intensity: level + linear gradient + static seeded texture.
inline GrayGrid background_field(const GrayStyle& style, int width, int height) {
  GrayGrid g(width, height);
  std::mt19937_64 tex(style.texture_seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const double cu = 0.5 * (width - 1);
  const double cv = 0.5 * (height - 1);
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      double val = style.background_level + style.gradient_u * (u - cu) + style.gradient_v * (v - cv);
      if (style.texture_sigma > 0.0) val += style.texture_sigma * n(tex);
      g.at(u, v) = std::clamp(val, 0.0, 255.0);
    }
  }
  return g;
}

/// Grayscale analog of a camera frame. Items are painted over the background
/// using the same footprint test as render_mask; frame_seed drives sensor noise.
inline GrayGrid render_gray(const PlateState& s, const SimConfig& cfg, std::uint64_t frame_seed) {
  const int w = cfg.grid_width;
  const int h = cfg.grid_height;
  GrayGrid g = background_field(cfg.gray, w, h);
  const Calibration calib = cfg.calibration();

  std::vector<double> item_shade(s.items.size());
  for (std::size_t i = 0; i < s.items.size(); ++i) {
    std::mt19937_64 shade_rng(cfg.gray.texture_seed ^ (0x9E3779B97F4A7C15ULL * (s.items[i].id + 1)));
    const double jitter = std::uniform_real_distribution<double>(-1.0, 1.0)(shade_rng);
    item_shade[i] = cfg.gray.item_level + cfg.gray.item_jitter * jitter;
  }
  // Later items are drawn on top.
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const Vec2 p = calib.to_plate(u, v);
      for (std::size_t i = s.items.size(); i-- > 0;) {
        const auto& f = s.items[i];
        if (!f.acquired && norm(p - f.position) <= f.footprint_radius) {
          g.at(u, v) = item_shade[i];
          break;
        }
      }
    }
  }
  if (cfg.gray.sensor_sigma > 0.0) {
    std::mt19937_64 sensor(frame_seed);
    std::normal_distribution<double> n(0.0, cfg.gray.sensor_sigma);
    for (auto& val : g.data()) val = std::clamp(val + n(sensor), 0.0, 255.0);
  }
  return g;
}

// ---- episode logs -------------------------------------------------------------

struct EpisodeLog {
  std::string policy;
  std::uint64_t seed = 0;
  std::vector<TransitionRecord> records;
  ObsGrid initial_obs;
  bool success = false;  // plate cleared within the budget

  int total_pickup() const {
    return std::accumulate(records.begin(), records.end(), 0,
                           [](int acc, const TransitionRecord& r) { return acc + r.pickup_count; });
  }

  // Observation sequence: initial mask followed by every post-action mask.
  std::vector<ObsGrid> observations() const {
    std::vector<ObsGrid> obs;
    obs.push_back(records.empty() ? initial_obs : records.front().obs_before);
    for (const auto& r : records) obs.push_back(r.obs_after);
    return obs;
  }

  friend bool operator==(const EpisodeLog&, const EpisodeLog&) = default;
};

namespace detail {

inline nlohmann::json grid_to_json(const ObsGrid& m) {
  return {{"w", m.width()}, {"h", m.height()}, {"rle", rle_encode(m)}};
}

inline ObsGrid grid_from_json(const nlohmann::json& j) {
  return rle_decode(j.at("rle").get<std::string>(), j.at("w").get<int>(), j.at("h").get<int>());
}

inline nlohmann::json vec3_to_json(const Vec3& p) { return nlohmann::json::array({p.x, p.y, p.z}); }
inline Vec3 vec3_from_json(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace detail

inline nlohmann::json to_json(const TransitionRecord& r) {
  nlohmann::json action = {{"kind", std::string(to_string(r.action.kind))},
                           {"dense", detail::vec3_to_json(r.action.dense_point)},
                           {"far", r.action.far_point ? detail::vec3_to_json(*r.action.far_point) : nullptr},
                           {"roll", r.action.roll_deg},
                           {"pitch", r.action.pitch_deg}};
  return {{"step", r.step},
          {"primitive", std::string(to_string(r.primitive))},
          {"action", action},
          {"reward", r.reward},
          {"pickup", r.pickup_count},
          {"coverage_before", r.coverage_before},
          {"coverage_after", r.coverage_after},
          {"alpha", r.alpha},
          {"n0", r.initial_items},
          {"c0", r.initial_coverage},
          {"misexecuted", r.misexecuted},
          {"obs_before", detail::grid_to_json(r.obs_before)},
          {"obs_after", detail::grid_to_json(r.obs_after)}};
}

inline TransitionRecord record_from_json(const nlohmann::json& j) {
  TransitionRecord r;
  r.step = j.at("step").get<int>();
  r.primitive = primitive_from_string(j.at("primitive").get<std::string>());
  const auto& a = j.at("action");
  r.action.kind = primitive_from_string(a.at("kind").get<std::string>());
  r.action.dense_point = detail::vec3_from_json(a.at("dense"));
  if (!a.at("far").is_null()) r.action.far_point = detail::vec3_from_json(a.at("far"));
  r.action.roll_deg = a.at("roll").get<double>();
  r.action.pitch_deg = a.at("pitch").get<double>();
  r.reward = j.at("reward").get<double>();
  r.pickup_count = j.at("pickup").get<int>();
  r.coverage_before = j.at("coverage_before").get<double>();
  r.coverage_after = j.at("coverage_after").get<double>();
  r.alpha = j.at("alpha").get<double>();
  r.initial_items = j.at("n0").get<int>();
  r.initial_coverage = j.at("c0").get<double>();
  r.misexecuted = j.at("misexecuted").get<bool>();
  r.obs_before = detail::grid_from_json(j.at("obs_before"));
  r.obs_after = detail::grid_from_json(j.at("obs_after"));
  return r;
}

inline void write_jsonl(std::ostream& out, const EpisodeLog& log) {
  for (const auto& r : log.records) out << to_json(r).dump() << '\n';
}

inline EpisodeLog read_jsonl(std::istream& in) {
  EpisodeLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    log.records.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  if (!log.records.empty()) {
    log.initial_obs = log.records.front().obs_before;
    log.success = is_empty(log.records.back().obs_after);
  }
  return log;
}

}  // namespace vapors
