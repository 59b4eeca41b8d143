#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vapors/common.hpp"

namespace vapors {

struct Pixel {
  int u = 0;  // column
  int v = 0;  // row
  friend bool operator==(Pixel, Pixel) = default;
};

/// Row-major 2D grid. Binary masks use std::uint8_t cells, grayscale renders double.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int width, int height, T fill = T{}) : width_(width), height_(height) {
    if (width < 0 || height < 0) throw ContractViolation("negative grid dimensions");
    data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool in_bounds(int u, int v) const { return u >= 0 && v >= 0 && u < width_ && v < height_; }

  T& at(int u, int v) { return data_[index(u, v)]; }
  const T& at(int u, int v) const { return data_[index(u, v)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }

  bool same_shape(const auto& other) const { return width_ == other.width() && height_ == other.height(); }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int u, int v) const {
    if (!in_bounds(u, v)) throw ContractViolation("pixel out of bounds");
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(u);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using ObsGrid = Grid<std::uint8_t>;
using GrayGrid = Grid<double>;

inline std::size_t count_set(const ObsGrid& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(), [](auto v) { return v != 0; }));
}

inline bool is_empty(const ObsGrid& m) { return count_set(m) == 0; }

/// Affine pixel <-> plate-frame map. Integer (u, v) address pixel centers.
/// plate = linear * (u, v) + offset; z of every deprojected point is surface_z.
struct Calibration {
  std::array<double, 4> linear{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
  Vec2 offset;
  double surface_z = 0.0;

  double determinant() const { return linear[0] * linear[3] - linear[1] * linear[2]; }

  Vec2 to_plate(double u, double v) const {
    return {linear[0] * u + linear[1] * v + offset.x, linear[2] * u + linear[3] * v + offset.y};
  }

  // Continuous pixel coordinates of a plate-frame point.
  Vec2 to_pixel(Vec2 p) const {
    const double det = determinant();
    if (det == 0.0) throw ContractViolation("calibration is not invertible");
    const double dx = p.x - offset.x;
    const double dy = p.y - offset.y;
    return {(linear[3] * dx - linear[1] * dy) / det, (-linear[2] * dx + linear[0] * dy) / det};
  }

  /// Image rows grow downward, plate y grows upward; the grid spans the plate
  /// diameter times `margin`, centered.
  static Calibration centered(int width, int height, Vec2 plate_center, double plate_radius, double margin,
                              double surface_z = 0.0) {
    const double s = 2.0 * plate_radius * margin / static_cast<double>(std::max(width, height));
    Calibration c;
    c.linear = {s, 0.0, 0.0, -s};
    c.offset = {plate_center.x - s * 0.5 * (width - 1), plate_center.y + s * 0.5 * (height - 1)};
    c.surface_z = surface_z;
    return c;
  }
};

// ---- PGM / PBM ------------------------------------------------------------

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

inline int parse_dim(const std::string& tok, const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size() || v < 0) throw std::invalid_argument(what);
    return v;
  } catch (const std::exception&) {
    throw ContractViolation(std::string("malformed image header field: ") + what);
  }
}

}  // namespace detail

/// Binary (P5) 8-bit PGM; values are rounded and clamped to [0, 255].
inline void write_pgm(std::ostream& out, const GrayGrid& g) {
  out << "P5\n" << g.width() << ' ' << g.height() << "\n255\n";
  for (double v : g.data()) {
    const double c = std::clamp(std::round(v), 0.0, 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(c)));
  }
}

/// Reads P5 or P2, rescaling to [0, 255] when maxval differs.
inline GrayGrid read_pgm(std::istream& in) {
  const std::string magic = detail::next_token(in);
  if (magic != "P5" && magic != "P2") throw ContractViolation("not a PGM file (magic '" + magic + "')");
  const int w = detail::parse_dim(detail::next_token(in), "width");
  const int h = detail::parse_dim(detail::next_token(in), "height");
  const int maxval = detail::parse_dim(detail::next_token(in), "maxval");
  if (maxval <= 0 || maxval > 255) throw ContractViolation("unsupported PGM maxval");
  GrayGrid g(w, h);
  const double scale = 255.0 / maxval;
  for (std::size_t i = 0; i < g.size(); ++i) {
    int v = 0;
    if (magic == "P5") {
      char c;
      if (!in.get(c)) throw ContractViolation("truncated PGM data");
      v = static_cast<unsigned char>(c);
    } else {
      v = detail::parse_dim(detail::next_token(in), "pixel");
    }
    g[i] = v * scale;
  }
  return g;
}

/// Plain-text (P1) PBM. PBM convention: 1 is black (= set pixel).
inline void write_pbm(std::ostream& out, const ObsGrid& m) {
  out << "P1\n" << m.width() << ' ' << m.height() << '\n';
  for (int v = 0; v < m.height(); ++v) {
    for (int u = 0; u < m.width(); ++u) {
      if (u) out << ' ';
      out << (m.at(u, v) ? '1' : '0');
    }
    out << '\n';
  }
}

inline ObsGrid read_pbm(std::istream& in) {
  const std::string magic = detail::next_token(in);
  if (magic != "P1") throw ContractViolation("not a plain PBM file (magic '" + magic + "')");
  const int w = detail::parse_dim(detail::next_token(in), "width");
  const int h = detail::parse_dim(detail::next_token(in), "height");
  ObsGrid m(w, h);
  std::size_t i = 0;
  char c;
  while (i < m.size() && in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (c == '0' || c == '1') {
      m[i++] = static_cast<std::uint8_t>(c - '0');
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      throw ContractViolation("invalid PBM pixel character");
    }
  }
  if (i != m.size()) throw ContractViolation("truncated PBM data");
  return m;
}

inline GrayGrid mask_to_gray(const ObsGrid& m) {
  GrayGrid g(m.width(), m.height());
  for (std::size_t i = 0; i < m.size(); ++i) g[i] = m[i] ? 255.0 : 0.0;
  return g;
}

inline ObsGrid gray_to_mask(const GrayGrid& g, double threshold = 127.5) {
  ObsGrid m(g.width(), g.height());
  for (std::size_t i = 0; i < g.size(); ++i) m[i] = g[i] > threshold ? 1 : 0;
  return m;
}

/// One of the 8 symmetries of a square grid: transpose when k >= 4, then
/// rotate k % 4 quarter turns.
template <typename T>
Grid<T> dihedral(const Grid<T>& g, int k) {
  if (k < 0 || k > 7) throw ContractViolation("dihedral index must lie in [0, 7]");
  if (g.width() != g.height()) throw ContractViolation("dihedral transforms need a square grid");
  const int n = g.width();
  Grid<T> out(n, n);
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      int x = k >= 4 ? v : u;
      int y = k >= 4 ? u : v;
      for (int r = 0; r < k % 4; ++r) {
        const int t = x;
        x = n - 1 - y;
        y = t;
      }
      out.at(x, y) = g.at(u, v);
    }
  }
  return out;
}

template <typename T>
void save_file(const std::string& path, const T& grid, void (*writer)(std::ostream&, const T&)) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  writer(out, grid);
}

// ---- run-length encoding ----------------------------------------------------

/// Row-major run lengths alternating 0-runs and 1-runs, starting with a
/// (possibly empty) run of zeros: "5,3,2" is 00000 111 00.
inline std::string rle_encode(const ObsGrid& m) {
  std::ostringstream os;
  std::uint8_t current = 0;
  std::size_t run = 0;
  bool first = true;
  auto flush = [&] {
    if (!first) os << ',';
    os << run;
    first = false;
  };
  for (std::uint8_t v : m.data()) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      flush();
      current = bit;
      run = 0;
    }
    ++run;
  }
  flush();
  return os.str();
}

inline ObsGrid rle_decode(const std::string& runs, int width, int height) {
  ObsGrid m(width, height);
  std::size_t i = 0;
  std::uint8_t bit = 0;
  std::istringstream is(runs);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    std::size_t len = 0;
    try {
      len = std::stoull(tok);
    } catch (const std::exception&) {
      throw ContractViolation("malformed run length: '" + tok + "'");
    }
    if (i + len > m.size()) throw ContractViolation("run lengths exceed grid size");
    std::fill_n(m.data().begin() + static_cast<std::ptrdiff_t>(i), len, bit);
    i += len;
    bit ^= 1;
  }
  if (i != m.size()) throw ContractViolation("run lengths do not cover the grid");
  return m;
}

}  // namespace vapors
