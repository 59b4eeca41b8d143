#pragma once

// Mask-space operations that turn a segmentation mask into a continuous
// action: density map, densest / sparsest food pixels, push geometry and
// utensil roll. Also the background-subtraction labeler and the Dice metric.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "vapors/common.hpp"
#include "vapors/grid.hpp"

namespace vapors {

inline int blur_radius(double sigma) { return static_cast<int>(std::ceil(3.0 * sigma)); }

/// Normalized 1D Gaussian taps for offsets -radius..radius.
inline std::vector<double> gaussian_taps(double sigma) {
  const int r = blur_radius(sigma);
  std::vector<double> taps(2 * r + 1);
  double sum = 0.0;
  for (int k = -r; k <= r; ++k) sum += taps[k + r] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& t : taps) t /= sum;
  return taps;
}

/// Separable Gaussian blur with zero padding. An all-ones mask maps to 1 away
/// from the borders.
inline GrayGrid gaussian_blur(const ObsGrid& mask, double sigma) {
  if (!(sigma > 0.0)) throw ContractViolation("blur sigma must be positive");
  const auto taps = gaussian_taps(sigma);
  const int r = blur_radius(sigma);
  const int w = mask.width();
  const int h = mask.height();

  GrayGrid rows(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int uu = u + k;
        if (uu >= 0 && uu < w && mask.at(uu, v)) acc += taps[k + r];
      }
      rows.at(u, v) = acc;
    }

  GrayGrid out(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int vv = v + k;
        if (vv >= 0 && vv < h) acc += taps[k + r] * rows.at(u, vv);
      }
      out.at(u, v) = acc;
    }
  return out;
}

namespace detail {

// Values within this relative band of the extremum count as tied, so that
// rounding differences between equivalent convolution orders cannot flip a
// symmetric tie.
inline constexpr double kTieTolerance = 1e-10;

template <typename Accept>
std::optional<Pixel> scan_extremum(const GrayGrid& g, bool maximize, Accept accept) {
  std::optional<double> best;
  for (int v = 0; v < g.height(); ++v)
    for (int u = 0; u < g.width(); ++u) {
      if (!accept(u, v)) continue;
      const double x = g.at(u, v);
      if (!best || (maximize ? x > *best : x < *best)) best = x;
    }
  if (!best) return std::nullopt;
  const double band = kTieTolerance * std::max(1.0, std::abs(*best));
  for (int v = 0; v < g.height(); ++v)
    for (int u = 0; u < g.width(); ++u) {
      if (!accept(u, v)) continue;
      const double x = g.at(u, v);
      if (maximize ? x >= *best - band : x <= *best + band) return Pixel{u, v};
    }
  return std::nullopt;
}

}  // namespace detail

/// Row-major-first pixel attaining the maximum. nullopt when nothing is
/// positive, i.e. the plate is empty.
inline std::optional<Pixel> densest_pixel(const GrayGrid& blurred) {
  auto p = detail::scan_extremum(blurred, true, [](int, int) { return true; });
  if (!p || !(blurred.at(p->u, p->v) > 0.0)) return std::nullopt;
  return p;
}

/// Lowest-intensity pixel among food-bearing pixels (mask = 1).
inline std::optional<Pixel> furthest_pixel(const GrayGrid& blurred, const ObsGrid& mask) {
  if (!blurred.same_shape(mask)) throw ContractViolation("blurred grid and mask differ in shape");
  return detail::scan_extremum(blurred, false, [&](int u, int v) { return mask.at(u, v) != 0; });
}

/// Direction from dense to far point in degrees, [0, 360).
inline double push_angle(Vec2 dense, Vec2 far) {
  if (dense == far) throw DegeneratePush();
  const double deg = std::atan2(far.y - dense.y, far.x - dense.x) * 180.0 / kPi;
  return wrap_degrees_360(deg);
}

inline Vec3 deproject(Pixel px, const Calibration& calib, int width, int height) {
  if (px.u < 0 || px.v < 0 || px.u >= width || px.v >= height) throw ContractViolation("pixel outside the grid");
  const Vec2 p = calib.to_plate(px.u, px.v);
  return {p.x, p.y, calib.surface_z};
}

/// Self-supervised foreground label: 1 where |current - empty| > thresh.
inline ObsGrid background_subtract_label(const GrayGrid& empty, const GrayGrid& current, double thresh = 20.0) {
  if (!empty.same_shape(current)) throw ContractViolation("label inputs differ in shape");
  ObsGrid m(empty.width(), empty.height());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::abs(current[i] - empty[i]) > thresh ? 1 : 0;
  return m;
}

/// 1 - 2TP / (2TP + FN + FP); two empty masks agree perfectly (0).
inline double dice_loss(const ObsGrid& pred, const ObsGrid& gt) {
  if (!pred.same_shape(gt)) throw ContractViolation("dice inputs differ in shape");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  const double denom = 2.0 * tp + fn + fp;
  if (denom == 0.0) return 0.0;
  return 1.0 - 2.0 * tp / denom;
}

/// W x H window of `mask` centered on `center`; pixels outside the parent read as 0.
inline ObsGrid crop_around(const ObsGrid& mask, Pixel center, int width, int height) {
  if (width > mask.width() || height > mask.height()) throw ContractViolation("crop larger than parent grid");
  ObsGrid crop(width, height);
  const int u0 = center.u - width / 2;
  const int v0 = center.v - height / 2;
  for (int v = 0; v < height; ++v)
    for (int u = 0; u < width; ++u)
      if (mask.in_bounds(u0 + u, v0 + v)) crop.at(u, v) = mask.at(u0 + u, v0 + v);
  return crop;
}

/// Utensil roll orthogonal to the crop's main principal axis, in [0, 180).
/// Pixel offsets are mapped through `to_plate` (the calibration's linear part;
/// the default flips rows so that y points up). nullopt when the crop has
/// fewer than two set pixels or no dominant axis.
inline std::optional<double> principal_axis_orientation(const ObsGrid& crop,
                                                        const std::array<double, 4>& to_plate = {1.0, 0.0, 0.0,
                                                                                                 -1.0}) {
  std::vector<Vec2> pts;
  for (int v = 0; v < crop.height(); ++v)
    for (int u = 0; u < crop.width(); ++u)
      if (crop.at(u, v)) pts.push_back({to_plate[0] * u + to_plate[1] * v, to_plate[2] * u + to_plate[3] * v});
  if (pts.size() < 2) return std::nullopt;

  Vec2 mean{};
  for (const auto& p : pts) mean = mean + p;
  mean = (1.0 / static_cast<double>(pts.size())) * mean;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (const auto& p : pts) {
    const Vec2 d = p - mean;
    sxx += d.x * d.x;
    syy += d.y * d.y;
    sxy += d.x * d.y;
  }
  const double n = static_cast<double>(pts.size());
  sxx /= n;
  syy /= n;
  sxy /= n;
  const double anisotropy = std::hypot(sxx - syy, 2.0 * sxy);
  if (anisotropy <= 1e-12 * std::max(1.0, sxx + syy)) return std::nullopt;

  const double axis_deg = 0.5 * std::atan2(2.0 * sxy, sxx - syy) * 180.0 / kPi;
  double roll = std::fmod(axis_deg + 90.0, 180.0);
  if (roll < 0.0) roll += 180.0;
  if (roll >= 180.0) roll -= 180.0;
  return roll;
}

struct InstantiationParams {
  double blur_sigma = 3.0;
  int crop_width = 15;
  int crop_height = 15;
  double acquire_pitch_deg = 80.0;
};

/// Low-level policy: mask + chosen primitive -> continuous action.
/// nullopt when the mask holds no food.
inline std::optional<LowLevelAction> instantiate_action(const ObsGrid& mask, PrimitiveKind kind,
                                                        const Calibration& calib, const InstantiationParams& params) {
  const GrayGrid blurred = gaussian_blur(mask, params.blur_sigma);
  const auto dense_px = densest_pixel(blurred);
  if (!dense_px) return std::nullopt;
  const Vec3 dense = deproject(*dense_px, calib, mask.width(), mask.height());

  if (kind == PrimitiveKind::Acquire) {
    const int cw = std::min(params.crop_width, mask.width());
    const int ch = std::min(params.crop_height, mask.height());
    const ObsGrid crop = crop_around(mask, *dense_px, cw, ch);
    const double roll = principal_axis_orientation(crop, calib.linear).value_or(0.0);
    return make_acquire(dense, roll, params.acquire_pitch_deg);
  }

  const auto far_px = furthest_pixel(blurred, mask);
  if (!far_px) return std::nullopt;
  const Vec3 far = deproject(*far_px, calib, mask.width(), mask.height());
  double roll = 0.0;
  if (!(*far_px == *dense_px)) roll = push_angle({dense.x, dense.y}, {far.x, far.y});
  return make_rearrange(dense, far, roll);
}

}  // namespace vapors
