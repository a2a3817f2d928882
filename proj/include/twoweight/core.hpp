#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tw {

inline constexpr int kMaxDim = 3;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

using Point = std::array<double, kMaxDim>;
using IdxVec = std::array<std::int64_t, kMaxDim>;

inline Point make_point(std::initializer_list<double> cs) {
  Point p{};
  int i = 0;
  for (double c : cs) p[i++] = c;
  return p;
}

inline double dist_sq(const Point& a, const Point& b, int n) {
  double s = 0;
  for (int i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double dist(const Point& a, const Point& b, int n) {
  return std::sqrt(dist_sq(a, b, n));
}

// Axis-parallel box with corners on the 2^-scale lattice, in grid-relative
// coordinates (the grid origin is added only when converting to doubles).
// Half-open: [lo*2^-scale, hi*2^-scale).
struct Box {
  int scale = 0;
  IdxVec lo{};
  IdxVec hi{};

  double side() const { return std::ldexp(double(hi[0] - lo[0]), -scale); }

  Point lo_pt(int n) const {
    Point p{};
    for (int i = 0; i < n; ++i) p[i] = std::ldexp(double(lo[i]), -scale);
    return p;
  }
  Point hi_pt(int n) const {
    Point p{};
    for (int i = 0; i < n; ++i) p[i] = std::ldexp(double(hi[i]), -scale);
    return p;
  }
  Point center(int n) const {
    Point p{};
    for (int i = 0; i < n; ++i) p[i] = std::ldexp(double(lo[i] + hi[i]), -scale - 1);
    return p;
  }

  Box rescaled(int finer_scale) const {
    Box b;
    b.scale = finer_scale;
    const int s = finer_scale - scale;
    for (int i = 0; i < kMaxDim; ++i) {
      b.lo[i] = lo[i] << s;
      b.hi[i] = hi[i] << s;
    }
    return b;
  }

  bool contains_box(const Box& inner, int n) const {
    const int s = std::max(scale, inner.scale);
    const Box a = rescaled(s), b = inner.rescaled(s);
    for (int i = 0; i < n; ++i)
      if (b.lo[i] < a.lo[i] || b.hi[i] > a.hi[i]) return false;
    return true;
  }

  bool intersects(const Box& other, int n) const {
    const int s = std::max(scale, other.scale);
    const Box a = rescaled(s), b = other.rescaled(s);
    for (int i = 0; i < n; ++i)
      if (b.lo[i] >= a.hi[i] || a.lo[i] >= b.hi[i]) return false;
    return true;
  }

  // Point in grid-relative coordinates; exact half-open membership.
  bool contains_point(const Point& u, int n) const {
    for (int i = 0; i < n; ++i) {
      const std::int64_t k = std::int64_t(std::floor(std::ldexp(u[i], scale)));
      if (k < lo[i] || k >= hi[i]) return false;
    }
    return true;
  }

  friend bool operator==(const Box& a, const Box& b) = default;
};

// Euclidean distance between the closures of two boxes.
inline double box_gap(const Box& a, const Box& b, int n) {
  double s = 0;
  const int sc = std::max(a.scale, b.scale);
  const Box x = a.rescaled(sc), y = b.rescaled(sc);
  for (int i = 0; i < n; ++i) {
    std::int64_t g = std::max<std::int64_t>({0, y.lo[i] - x.hi[i], x.lo[i] - y.hi[i]});
    const double gd = std::ldexp(double(g), -sc);
    s += gd * gd;
  }
  return std::sqrt(s);
}

// Distance from a box to the boundary of an enclosing box; zero when the
// inner box is not strictly inside, the gap when they are disjoint.
inline double gap_to_boundary(const Box& inner, const Box& outer, int n) {
  if (!outer.intersects(inner, n)) return box_gap(inner, outer, n);
  if (!outer.contains_box(inner, n)) return 0.0;
  const int sc = std::max(inner.scale, outer.scale);
  const Box a = inner.rescaled(sc), b = outer.rescaled(sc);
  std::int64_t g = std::numeric_limits<std::int64_t>::max();
  for (int i = 0; i < n; ++i) {
    g = std::min(g, a.lo[i] - b.lo[i]);
    g = std::min(g, b.hi[i] - a.hi[i]);
  }
  return std::ldexp(double(g), -sc);
}

inline double point_box_dist(const Point& u, const Box& b, int n) {
  double s = 0;
  for (int i = 0; i < n; ++i) {
    const double lo = std::ldexp(double(b.lo[i]), -b.scale);
    const double hi = std::ldexp(double(b.hi[i]), -b.scale);
    const double g = std::max({0.0, lo - u[i], u[i] - hi});
    s += g * g;
  }
  return std::sqrt(s);
}

// Deterministic sub-seed derivation (splitmix64 step).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Uniform double in [0,1) with 53 random bits; portable across standard
// library implementations (mt19937_64 output is specified by the standard).
inline double uniform53(std::mt19937_64& g) {
  return std::ldexp(double(g() >> 11), -53);
}

inline bool approx_le(double lhs, double rhs, double rel = 1e-12) {
  if (lhs <= rhs) return true;
  return lhs - rhs <= rel * std::max({std::abs(lhs), std::abs(rhs), 1e-300});
}

inline bool approx_eq(double a, double b, double rel = 1e-12) {
  if (a == b) return true;
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace tw
