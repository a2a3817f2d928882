#pragma once

// Dyadic grids and quasicubes: containment and gap arithmetic is done on
// integer lattice boxes in grid-relative coordinates, so containment,
// boundary distances and deep-embedding thresholds at dyadic levels are
// exact. BiLipschitz maps only enter when converting to image coordinates.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "core.hpp"

namespace tw {

struct DyadicGrid {
  int n = 1;
  Point origin_shift{};
  int top_level = 0;     // coarsest level, side 2^-top_level
  int bottom_level = 0;  // finest enumerated level

  void validate() const {
    if (n < 1 || n > kMaxDim) throw std::invalid_argument("grid dimension out of range");
    if (top_level > bottom_level) throw std::invalid_argument("top_level must be <= bottom_level");
  }
};

struct DyadicCube {
  const DyadicGrid* grid = nullptr;
  int level = 0;
  IdxVec idx{};

  double side() const { return std::ldexp(1.0, -level); }

  Box box() const {
    Box b;
    b.scale = level;
    b.lo = idx;
    for (int i = 0; i < kMaxDim; ++i) b.hi[i] = idx[i] + 1;
    return b;
  }

  // Grid-relative coordinates (exact dyadic doubles).
  Point rel_corner() const {
    Point p{};
    for (int i = 0; i < grid->n; ++i) p[i] = std::ldexp(double(idx[i]), -level);
    return p;
  }
  Point rel_center() const {
    Point p{};
    for (int i = 0; i < grid->n; ++i) p[i] = std::ldexp(double(2 * idx[i] + 1), -level - 1);
    return p;
  }
  // Absolute preimage coordinates.
  Point center() const {
    Point p = rel_center();
    for (int i = 0; i < grid->n; ++i) p[i] += grid->origin_shift[i];
    return p;
  }
  Point corner() const {
    Point p = rel_corner();
    for (int i = 0; i < grid->n; ++i) p[i] += grid->origin_shift[i];
    return p;
  }

  DyadicCube parent() const {
    if (level <= grid->top_level) throw std::out_of_range("parent above top level");
    DyadicCube p{grid, level - 1, {}};
    for (int i = 0; i < kMaxDim; ++i) p.idx[i] = idx[i] >> 1;
    return p;
  }
  DyadicCube ancestor(int ell) const {
    if (ell < 0 || level - ell < grid->top_level) throw std::out_of_range("ancestor above top level");
    DyadicCube p{grid, level - ell, {}};
    for (int i = 0; i < kMaxDim; ++i) p.idx[i] = idx[i] >> ell;
    return p;
  }
  bool has_ancestor(int ell) const { return level - ell >= grid->top_level; }

  DyadicCube child(int j) const {
    DyadicCube c{grid, level + 1, {}};
    for (int i = 0; i < grid->n; ++i) c.idx[i] = 2 * idx[i] + ((j >> i) & 1);
    return c;
  }
  std::vector<DyadicCube> children() const {
    std::vector<DyadicCube> out;
    out.reserve(std::size_t(1) << grid->n);
    for (int j = 0; j < (1 << grid->n); ++j) out.push_back(child(j));
    return out;
  }

  bool contains(const DyadicCube& j) const {
    if (j.level < level) return false;
    const int s = j.level - level;
    for (int i = 0; i < grid->n; ++i)
      if ((j.idx[i] >> s) != idx[i]) return false;
    return true;
  }
  // u in absolute preimage coordinates, half-open membership.
  bool contains_point(const Point& u) const {
    for (int i = 0; i < grid->n; ++i) {
      const double rel = u[i] - grid->origin_shift[i];
      if (std::int64_t(std::floor(std::ldexp(rel, level))) != idx[i]) return false;
    }
    return true;
  }

  friend bool operator==(const DyadicCube& a, const DyadicCube& b) {
    return a.grid == b.grid && a.level == b.level && a.idx == b.idx;
  }
};

struct CubeLess {
  bool operator()(const DyadicCube& a, const DyadicCube& b) const {
    if (a.level != b.level) return a.level < b.level;
    return a.idx < b.idx;
  }
};

struct CubeHash {
  std::size_t operator()(const DyadicCube& q) const {
    std::uint64_t h = std::uint64_t(q.level) * 0x9e3779b97f4a7c15ULL;
    for (int i = 0; i < kMaxDim; ++i) h = mix_seed(h, std::uint64_t(q.idx[i]));
    return std::size_t(h);
  }
};

inline void sort_cubes(std::vector<DyadicCube>& v) {
  std::sort(v.begin(), v.end(), CubeLess{});
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

struct QuasiMap {
  enum class Kind { identity, shear, log_spiral };
  Kind kind = Kind::identity;
  double param = 0.0;  // shear slope, or spiral winding rate

  Point forward(Point u, int n) const {
    switch (kind) {
      case Kind::identity:
        return u;
      case Kind::shear: {
        const double s = param * std::abs(u[0]);
        for (int i = 1; i < n; ++i) u[i] += s;
        return u;
      }
      case Kind::log_spiral: {
        const double r2 = u[0] * u[0] + u[1] * u[1];
        if (r2 == 0.0) return u;
        const double th = 0.5 * param * std::log(r2);
        const double c = std::cos(th), s = std::sin(th);
        const double x = c * u[0] - s * u[1], y = s * u[0] + c * u[1];
        u[0] = x;
        u[1] = y;
        return u;
      }
    }
    return u;
  }

  Point inverse(Point x, int n) const {
    switch (kind) {
      case Kind::identity:
        return x;
      case Kind::shear: {
        const double s = param * std::abs(x[0]);
        for (int i = 1; i < n; ++i) x[i] -= s;
        return x;
      }
      case Kind::log_spiral: {
        const double r2 = x[0] * x[0] + x[1] * x[1];
        if (r2 == 0.0) return x;
        const double th = -0.5 * param * std::log(r2);
        const double c = std::cos(th), s = std::sin(th);
        const double u = c * x[0] - s * x[1], v = s * x[0] + c * x[1];
        x[0] = u;
        x[1] = v;
        return x;
      }
    }
    return x;
  }

  double lipschitz(int n) const {
    double L = 0.0;
    if (kind == Kind::shear) L = std::abs(param) * std::sqrt(double(std::max(n - 1, 0)));
    if (kind == Kind::log_spiral) L = std::abs(param);
    return 0.5 * (std::sqrt(L * L + 4.0) + L);
  }
};

struct QuasiCube {
  DyadicCube pre;
  const QuasiMap* map = nullptr;  // null means identity

  double side() const { return pre.side(); }
  Point qcenter() const {
    const Point c = pre.center();
    return map ? map->forward(c, pre.grid->n) : c;
  }
};

struct GoodnessParams {
  int r = 4;
  double eps = 0.25;
  int tau = 5;
  int rho = 10;
  double gamma = 2.0;

  void validate() const {
    if (r < 1) throw std::invalid_argument("r must be positive");
    if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("eps must lie in (0,1)");
    if (tau <= r) throw std::invalid_argument("tau must exceed r");
    if (rho <= r + tau) throw std::invalid_argument("rho must exceed r + tau");
    if (gamma < 2.0) throw std::invalid_argument("gamma must be >= 2");
  }
};

inline GoodnessParams default_goodness(int n, double alpha) {
  GoodnessParams p;
  p.r = 4;
  p.eps = 1.0 / (2.0 * (double(n) + 1.0 - alpha));
  p.tau = p.r + 1;
  p.rho = p.r + p.tau + 1;
  p.gamma = 2.0;
  p.validate();
  return p;
}

struct UpperHalfPoint {
  Point x{};  // image coordinates
  double t = 0.0;
};

// Real-coordinate half-open box, for dilates and triples of cubes.
struct RBox {
  Point lo{}, hi{};

  bool contains_point(const Point& u, int n) const {
    for (int i = 0; i < n; ++i)
      if (!(u[i] >= lo[i] && u[i] < hi[i])) return false;
    return true;
  }
  bool contains_rbox(const RBox& r, int n) const {
    for (int i = 0; i < n; ++i)
      if (r.lo[i] < lo[i] || r.hi[i] > hi[i]) return false;
    return true;
  }
};

inline RBox to_rbox(const Box& b, int n, const Point& origin = {}) {
  RBox r;
  for (int i = 0; i < n; ++i) {
    r.lo[i] = origin[i] + std::ldexp(double(b.lo[i]), -b.scale);
    r.hi[i] = origin[i] + std::ldexp(double(b.hi[i]), -b.scale);
  }
  return r;
}

// gamma-dilate about the center; exact when gamma is a small power of two.
inline RBox dilate(const Box& b, int n, double gamma, const Point& origin = {}) {
  RBox r;
  for (int i = 0; i < n; ++i) {
    const double c = origin[i] + std::ldexp(double(b.lo[i] + b.hi[i]), -b.scale - 1);
    const double hw = 0.5 * gamma * std::ldexp(double(b.hi[i] - b.lo[i]), -b.scale);
    r.lo[i] = c - hw;
    r.hi[i] = c + hw;
  }
  return r;
}

inline RBox cube_rbox(const DyadicCube& q) { return to_rbox(q.box(), q.grid->n, q.grid->origin_shift); }

inline DyadicCube containing_cube(const DyadicGrid& g, const Point& u, int level) {
  if (level < g.top_level || level > g.bottom_level)
    throw std::out_of_range("level outside enumerated range");
  DyadicCube q{&g, level, {}};
  for (int i = 0; i < g.n; ++i)
    q.idx[i] = std::int64_t(std::floor(std::ldexp(u[i] - g.origin_shift[i], level)));
  return q;
}

// Sorted distinct cubes at `level` containing at least one of the points.
inline std::vector<DyadicCube> enumerate_cubes(const DyadicGrid& g, int level,
                                               const std::vector<Point>& pts) {
  std::vector<DyadicCube> out;
  out.reserve(pts.size());
  for (const Point& p : pts) out.push_back(containing_cube(g, p, level));
  sort_cubes(out);
  return out;
}

// Ordered pairs of distinct adjacent equal-level cubes near the support:
// K' ranges over the 3^n stencil around K, both touching the point set's
// stencil neighbourhood.
inline std::vector<std::pair<DyadicCube, DyadicCube>> neighbour_pairs(
    const DyadicGrid& g, int level, const std::vector<Point>& support) {
  const auto base = enumerate_cubes(g, level, support);
  std::set<IdxVec> occupied;
  for (const auto& q : base) occupied.insert(q.idx);
  std::set<IdxVec> region = occupied;
  for (const auto& q : base) {
    IdxVec d{};
    const int moves = 1, span = 2 * moves + 1;
    int total = 1;
    for (int i = 0; i < g.n; ++i) total *= span;
    for (int m = 0; m < total; ++m) {
      int mm = m;
      IdxVec nb = q.idx;
      for (int i = 0; i < g.n; ++i) {
        nb[i] += (mm % span) - moves;
        mm /= span;
      }
      region.insert(nb);
    }
    (void)d;
  }
  std::vector<std::pair<DyadicCube, DyadicCube>> out;
  for (const IdxVec& a : region) {
    for (const IdxVec& b : region) {
      if (a == b) continue;
      bool adj = true;
      for (int i = 0; i < g.n; ++i)
        if (std::llabs(a[i] - b[i]) > 1) adj = false;
      if (adj) out.emplace_back(DyadicCube{&g, level, a}, DyadicCube{&g, level, b});
    }
  }
  return out;
}

inline std::vector<std::pair<DyadicCube, DyadicCube>> neighbour_pairs(
    const DyadicGrid& g, int level_min, int level_max, const std::vector<Point>& support) {
  std::vector<std::pair<DyadicCube, DyadicCube>> out;
  for (int k = level_min; k <= level_max; ++k) {
    auto v = neighbour_pairs(g, k, support);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// Quasidistance: Euclidean distance between preimages. Cubes from a common
// grid use exact lattice arithmetic.
inline double qdist(const QuasiCube& A, const QuasiCube& B) {
  return box_gap(A.pre.box(), B.pre.box(), A.pre.grid->n);
}
inline double qdist(const DyadicCube& A, const DyadicCube& B) {
  return box_gap(A.box(), B.box(), A.grid->n);
}
inline double qdist_to_boundary(const DyadicCube& J, const DyadicCube& K) {
  return gap_to_boundary(J.box(), K.box(), J.grid->n);
}
// Image-space point vs quasicube.
inline double qdist(const Point& y, const QuasiCube& B) {
  const int n = B.pre.grid->n;
  Point u = B.map ? B.map->inverse(y, n) : y;
  for (int i = 0; i < n; ++i) u[i] -= B.pre.grid->origin_shift[i];
  return point_box_dist(u, B.pre.box(), n);
}
inline double qdist(const std::vector<Point>& A, const std::vector<Point>& B, const QuasiMap& m,
                    int n) {
  double best = kInf;
  for (const Point& a : A) {
    const Point ua = m.inverse(a, n);
    for (const Point& b : B) best = std::min(best, dist(ua, m.inverse(b, n), n));
  }
  return best;
}

inline double deep_threshold(int levelJ, int levelK, double eps) {
  return std::exp2(-1.0 - eps * double(levelJ) - (1.0 - eps) * double(levelK));
}

inline bool is_deeply_embedded_box(const DyadicCube& J, const Box& Kbox, int levelK, int r,
                                   double eps) {
  if (J.level < levelK + r) return false;
  if (!Kbox.contains_box(J.box(), J.grid->n)) return false;
  return gap_to_boundary(J.box(), Kbox, J.grid->n) >= deep_threshold(J.level, levelK, eps);
}

inline bool is_deeply_embedded(const DyadicCube& J, const DyadicCube& K, int r, double eps) {
  return is_deeply_embedded_box(J, K.box(), K.level, r, eps);
}

enum class GoodMode { plain, tau };

inline bool is_good_plain(const DyadicCube& J, const GoodnessParams& p) {
  for (int a = J.level - p.r; a >= J.grid->top_level; --a) {
    if (!is_deeply_embedded(J, J.ancestor(J.level - a), p.r, p.eps)) return false;
  }
  return true;
}

inline bool is_good(const DyadicCube& J, const GoodnessParams& p, GoodMode mode = GoodMode::plain) {
  if (!is_good_plain(J, p)) return false;
  if (mode == GoodMode::plain) return true;
  if (J.level + 1 <= J.grid->bottom_level)
    for (const auto& c : J.children())
      if (!is_good_plain(c, p)) return false;
  for (int ell = 1; ell <= p.tau; ++ell) {
    if (!J.has_ancestor(ell)) break;
    if (!is_good_plain(J.ancestor(ell), p)) return false;
  }
  return true;
}

namespace detail {
inline void m_deep_descend(const DyadicCube& J, const Box& Kbox, int levelK, int r, double eps,
                           std::vector<DyadicCube>& out) {
  if (is_deeply_embedded_box(J, Kbox, levelK, r, eps)) {
    out.push_back(J);
    return;
  }
  if (J.level >= J.grid->bottom_level) return;
  for (const auto& c : J.children()) m_deep_descend(c, Kbox, levelK, r, eps, out);
}

inline std::vector<DyadicCube> cubes_inside_box(const DyadicGrid& g, const Box& b, int level) {
  const Box rb = b.rescaled(level);
  std::vector<DyadicCube> out;
  IdxVec it{};
  for (int i = 0; i < kMaxDim; ++i) it[i] = rb.lo[i];
  while (true) {
    DyadicCube q{&g, level, it};
    out.push_back(q);
    int i = 0;
    for (; i < g.n; ++i) {
      if (++it[i] < rb.hi[i]) break;
      it[i] = rb.lo[i];
    }
    if (i == g.n) break;
  }
  return out;
}
}  // namespace detail

// Maximal subcubes deeply embedded in the (dyadic or alternate) box K.
inline std::vector<DyadicCube> m_deep_box(const DyadicGrid& g, const Box& Kbox, int levelK,
                                          const GoodnessParams& p) {
  std::vector<DyadicCube> out;
  if (levelK + 1 > g.bottom_level) return out;
  for (const auto& root : detail::cubes_inside_box(g, Kbox, levelK + 1))
    detail::m_deep_descend(root, Kbox, levelK, p.r, p.eps, out);
  sort_cubes(out);
  return out;
}

inline std::vector<DyadicCube> m_deep(const DyadicCube& K, const GoodnessParams& p) {
  return m_deep_box(*K.grid, K.box(), K.level, p);
}

// M^ell: members of M_deep of the ell-fold parents of K's children that lie
// inside some member of M_deep(K).
inline std::vector<DyadicCube> m_deep_ell_box(const DyadicGrid& g, const Box& Kbox, int levelK,
                                              const GoodnessParams& p, int ell) {
  const auto base = m_deep_box(g, Kbox, levelK, p);
  auto inside_base = [&](const DyadicCube& J) {
    for (const auto& L : base)
      if (L.contains(J)) return true;
    return false;
  };
  std::vector<DyadicCube> out;
  if (levelK + 1 > g.bottom_level) return out;
  std::vector<DyadicCube> tops;
  for (const auto& Kc : detail::cubes_inside_box(g, Kbox, levelK + 1)) {
    if (!Kc.has_ancestor(ell)) continue;
    tops.push_back(Kc.ancestor(ell));
  }
  sort_cubes(tops);
  for (const auto& A : tops)
    for (const auto& J : m_deep(A, p))
      if (inside_base(J)) out.push_back(J);
  sort_cubes(out);
  return out;
}

inline std::vector<DyadicCube> m_deep_ell(const DyadicCube& K, const GoodnessParams& p, int ell) {
  return m_deep_ell_box(*K.grid, K.box(), K.level, p, ell);
}

// The 2^n alternate boxes of side 2*side(L) containing L; corners on the
// half-step lattice of L's level.
inline std::vector<Box> alternate_containers(const DyadicCube& L) {
  std::vector<Box> out;
  const int n = L.grid->n;
  for (int m = 0; m < (1 << n); ++m) {
    Box b;
    b.scale = L.level;
    for (int i = 0; i < kMaxDim; ++i) {
      b.lo[i] = (i < n) ? L.idx[i] - ((m >> i) & 1) : 0;
      b.hi[i] = b.lo[i] + ((i < n) ? 2 : 1);
    }
    out.push_back(b);
  }
  return out;
}

// Alternate boxes of side 2^-level containing at least one of the points
// (preimage absolute coordinates).
inline std::vector<Box> alternate_cubes(const DyadicGrid& g, int level,
                                        const std::vector<Point>& pts) {
  if (level + 1 > g.bottom_level) throw std::out_of_range("alternate level too fine");
  std::set<IdxVec> los;
  for (const Point& p : pts) {
    IdxVec q{};
    for (int i = 0; i < g.n; ++i)
      q[i] = std::int64_t(std::floor(std::ldexp(p[i] - g.origin_shift[i], level + 1)));
    IdxVec lo{};
    for (int m = 0; m < (1 << g.n); ++m) {
      for (int i = 0; i < g.n; ++i) lo[i] = q[i] - ((m >> i) & 1);
      los.insert(lo);
    }
  }
  std::vector<Box> out;
  for (const IdxVec& lo : los) {
    Box b;
    b.scale = level + 1;
    b.lo = lo;
    for (int i = 0; i < kMaxDim; ++i) b.hi[i] = lo[i] + ((i < g.n) ? 2 : 1);
    out.push_back(b);
  }
  return out;
}

enum class TentMode { full, tau_deep };

// Closed-cone membership over the preimage cube; the upper-half point's
// spatial slot is in image coordinates and is pulled back through the map.
inline bool tent_contains(const QuasiCube& K, const UpperHalfPoint& p, TentMode mode, int tau) {
  const int n = K.pre.grid->n;
  if (p.t <= 0.0) return false;
  const double side = K.side();
  if (p.t > side) return false;
  if (mode == TentMode::tau_deep && p.t > std::ldexp(side, -tau)) return false;
  Point u = K.map ? K.map->inverse(p.x, n) : p.x;
  const Point c = K.pre.rel_center();
  const double half = 0.5 * (side - p.t);
  for (int i = 0; i < n; ++i) {
    const double rel = u[i] - K.pre.grid->origin_shift[i];
    if (std::abs(rel - c[i]) > half) return false;
  }
  return true;
}

inline double overlap_beta(int n, const GoodnessParams& p) {
  const double g = p.gamma, e = p.eps;
  const double cn = std::sqrt(double(n));
  const double cpn = std::exp2(double(n));
  return std::exp2(double(n * p.r + 1)) +
         cpn * std::pow(g, double(n)) *
             ((1.0 / e) * std::log2(1.0 / (2.0 * g) + 2.0 * cn * std::exp2(double(p.r) * e)) +
              (1.0 / (1.0 - e)) * std::log2(4.0 * g));
}

// better-good parameter choice: cubes good at (r-1, delta) are tau-good at
// (r, eps) within the truncated grid.
inline double better_good_delta(const GoodnessParams& p) {
  return (double(p.r) * p.eps - 1.0) / double(p.r + p.tau);
}

// Canonical grid plus k seeded origin shifts; shift coordinates are uniform
// in [0, 2^-top_level).
inline std::vector<DyadicGrid> grid_family(int n, const Point& base, int top_level,
                                           int bottom_level, int k, std::uint64_t seed) {
  std::vector<DyadicGrid> out;
  out.push_back(DyadicGrid{n, base, top_level, bottom_level});
  for (int j = 0; j < k; ++j) {
    std::mt19937_64 rng(mix_seed(seed, std::uint64_t(j)));
    Point o = base;
    for (int i = 0; i < n; ++i) o[i] += std::ldexp(uniform53(rng), -top_level);
    out.push_back(DyadicGrid{n, o, top_level, bottom_level});
  }
  return out;
}

}  // namespace tw
