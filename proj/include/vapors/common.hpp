#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vapors {

inline constexpr double kPi = 3.14159265358979323846;

/// Independent child seed for stream `stream`, item `index` (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  std::uint64_t z = base ^ (stream * 0x9E3779B97F4A7C15ULL) ^ (index * 0xD1B54A32D192ED03ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline double cross(Vec2 o, Vec2 a, Vec2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

// Violated preconditions (shape mismatches, out-of-range pixels, bad configs).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegeneratePush : public std::domain_error {
 public:
  DegeneratePush() : std::domain_error("push start and end coincide") {}
};

// A non-finite loss during training; carries the id of the batch that produced it.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::int64_t batch_id)
      : std::runtime_error(what + " (batch " + std::to_string(batch_id) + ")"), batch_id_(batch_id) {}
  std::int64_t batch_id() const { return batch_id_; }

 private:
  std::int64_t batch_id_;
};

/// Discrete manipulation strategy. Indices are stable: they define one-hot
/// layout, lexicographic tie-breaking in the planner and the log format.
enum class PrimitiveKind : int { Acquire = 0, Rearrange = 1 };

inline constexpr int kDefaultNumPrimitives = 2;

inline int index_of(PrimitiveKind k) { return static_cast<int>(k); }

inline PrimitiveKind primitive_from_index(int i) {
  if (i != 0 && i != 1) throw ContractViolation("primitive index out of range: " + std::to_string(i));
  return static_cast<PrimitiveKind>(i);
}

inline std::string_view to_string(PrimitiveKind k) {
  return k == PrimitiveKind::Acquire ? "acquire" : "rearrange";
}

inline PrimitiveKind primitive_from_string(std::string_view s) {
  if (s == "acquire") return PrimitiveKind::Acquire;
  if (s == "rearrange") return PrimitiveKind::Rearrange;
  throw ContractViolation("unknown primitive: " + std::string(s));
}

/// Continuous instantiation of a primitive. Acquire uses (dense_point, roll,
/// pitch); Rearrange pushes from far_point to dense_point untilted.
struct LowLevelAction {
  PrimitiveKind kind = PrimitiveKind::Acquire;
  Vec3 dense_point;
  std::optional<Vec3> far_point;
  double roll_deg = 0.0;
  double pitch_deg = 0.0;

  friend bool operator==(const LowLevelAction&, const LowLevelAction&) = default;
};

inline bool is_well_formed(const LowLevelAction& a) {
  if (a.kind == PrimitiveKind::Acquire) return !a.far_point.has_value();
  return a.far_point.has_value() && a.pitch_deg == 0.0;
}

inline LowLevelAction make_acquire(Vec3 dense, double roll_deg, double pitch_deg) {
  return {PrimitiveKind::Acquire, dense, std::nullopt, roll_deg, pitch_deg};
}

inline LowLevelAction make_rearrange(Vec3 dense, Vec3 far, double roll_deg) {
  return {PrimitiveKind::Rearrange, dense, far, roll_deg, 0.0};
}

inline double wrap_degrees_360(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) r += 360.0;
  if (r >= 360.0) r -= 360.0;
  return r;
}

}  // namespace vapors
