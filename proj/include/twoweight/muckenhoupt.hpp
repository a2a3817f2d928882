#pragma once

// Muckenhoupt-type constants for a measure pair: offset, one-tailed with
// holes, punctured, energy, plugged energy, and the classical divergence
// diagnostic. Suprema run over the configured grid family (canonical cubes
// plus half-step alternates) down to a separation floor, with analytic
// shrink-to-atom limits appended where they do not vanish.

#include "poisson.hpp"

namespace tw {

enum class Direction { forward, dual };

struct WitnessCube {
  int grid_index = -1;
  Box box{};  // grid-relative lattice box (canonical cube or alternate)
};

struct ConstantWitness {
  enum class Kind { none, cube, pair, shrink };

  double value = 0.0;
  bool infinite = false;
  Kind kind = Kind::none;
  WitnessCube q{};
  WitnessCube q2{};            // second cube of an offset pair
  Point shrink_u{};            // preimage position of a shrink-limit atom
  int ell = 0;                 // refinement layer of a layered supremum
  std::vector<int> floor_levels;  // enumeration floor per grid
};

// Evaluation view of a candidate cube: lattice box plus cached geometry.
struct EvalCube {
  Box box{};
  int n = 1;
  double side = 0.0;
  Point origin{};      // grid origin shift
  Point pre_center{};  // absolute preimage center
};

inline EvalCube eval_cube(const DyadicGrid& g, const Box& b) {
  EvalCube e;
  e.box = b;
  e.n = g.n;
  e.origin = g.origin_shift;
  e.side = std::ldexp(double(b.hi[0] - b.lo[0]), -b.scale);
  for (int i = 0; i < g.n; ++i)
    e.pre_center[i] = g.origin_shift[i] + std::ldexp(double(b.lo[i] + b.hi[i]), -b.scale - 1);
  return e;
}

namespace detail {

inline bool eval_contains(const EvalCube& e, const Point& u) {
  Point rel = u;
  for (int i = 0; i < e.n; ++i) rel[i] -= e.origin[i];
  return e.box.contains_point(rel, e.n);
}

inline double mass_in(const AtomicMeasure& m, const EvalCube& e) {
  double s = 0;
  for (const Atom& a : m.atoms)
    if (eval_contains(e, a.u)) s += a.mass;
  return s;
}

inline double punctured_mass_in(const AtomicMeasure& m, const EvalCube& e,
                                const CommonPointSet& P) {
  double largest = 0;
  for (const Point& p : P.points)
    if (eval_contains(e, p)) largest = std::max(largest, mass_at(m, p));
  return mass_in(m, e) - largest;
}

inline double variance_in(const AtomicMeasure& m, const EvalCube& e) {
  double mass = 0;
  int inside = 0;
  Point s1{}, s2{};
  for (const Atom& a : m.atoms) {
    if (!eval_contains(e, a.u)) continue;
    ++inside;
    mass += a.mass;
    for (int i = 0; i < e.n; ++i) {
      s1[i] += a.mass * a.u[i];
      s2[i] += a.mass * a.u[i] * a.u[i];
    }
  }
  if (inside < 2 || mass <= 0.0) return 0.0;
  double v = 0;
  for (int i = 0; i < e.n; ++i) v += s2[i] - s1[i] * s1[i] / mass;
  return std::max(v, 0.0);
}

// Reproducing-kernel sum against atoms, optionally holed at the cube.
inline double repro_sum(const AtomicMeasure& m, const EvalCube& e, double alpha,
                        const QuasiMap& map, bool hole) {
  const Point c = map.forward(e.pre_center, e.n);
  double s = 0;
  for (const Atom& a : m.atoms) {
    if (hole && eval_contains(e, a.u)) continue;
    const double d = e.side + dist(a.x, c, e.n);
    s += a.mass * std::pow(e.side / (d * d), double(e.n) - alpha);
  }
  return s;
}

}  // namespace detail

inline double offset_candidate(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                               const EvalCube& Q, const EvalCube& Qp) {
  return detail::mass_in(s, Q) * detail::mass_in(w, Qp) /
         std::pow(Q.side, 2.0 * (double(Q.n) - alpha));
}

inline double tailed_candidate(const AtomicMeasure& tail, const AtomicMeasure& plug, double alpha,
                               const EvalCube& Q, const QuasiMap& map = {}) {
  const double mp = detail::mass_in(plug, Q);
  if (mp == 0.0) return 0.0;
  return detail::repro_sum(tail, Q, alpha, map, true) * mp /
         std::pow(Q.side, double(Q.n) - alpha);
}

inline double tailed_shrink_candidate(const AtomicMeasure& tail, const AtomicMeasure& plug,
                                      double alpha, const Point& pu, int n,
                                      const QuasiMap& map = {}) {
  const double mp = mass_at(plug, pu);
  if (mp == 0.0) return 0.0;
  const Point px = map.forward(pu, n);
  double s = 0;
  for (const Atom& a : tail.atoms) {
    if (a.u == pu) continue;
    s += a.mass * std::pow(dist(a.x, px, n), -2.0 * (double(n) - alpha));
  }
  return mp * s;
}

inline double punctured_candidate(const AtomicMeasure& punct, const AtomicMeasure& mass,
                                  const CommonPointSet& P, double alpha, const EvalCube& Q) {
  const double pm = detail::punctured_mass_in(punct, Q, P);
  if (pm <= 0.0) return 0.0;
  return pm * detail::mass_in(mass, Q) / std::pow(Q.side, 2.0 * (double(Q.n) - alpha));
}

inline double energy_candidate(const AtomicMeasure& energy, const AtomicMeasure& mass,
                               double alpha, const EvalCube& Q) {
  const double var = detail::variance_in(energy, Q);
  if (var <= 0.0) return 0.0;
  return (var / (Q.side * Q.side)) * detail::mass_in(mass, Q) /
         std::pow(Q.side, 2.0 * (double(Q.n) - alpha));
}

inline double plugged_candidate(const AtomicMeasure& energy, const AtomicMeasure& full,
                                double alpha, const EvalCube& Q, const QuasiMap& map = {}) {
  const double var = detail::variance_in(energy, Q);
  if (var <= 0.0) return 0.0;
  return (var / (Q.side * Q.side)) * detail::repro_sum(full, Q, alpha, map, false) /
         std::pow(Q.side, double(Q.n) - alpha);
}

inline double classical_candidate(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                  const EvalCube& Q) {
  return detail::mass_in(s, Q) * detail::mass_in(w, Q) /
         std::pow(Q.side, 2.0 * (double(Q.n) - alpha));
}

// Deepens each grid so that enumeration descends two levels past the scale
// separating the distinct support points.
inline std::vector<DyadicGrid> extend_grids(const std::vector<DyadicGrid>& grids,
                                            const AtomicMeasure& s, const AtomicMeasure& w) {
  const auto pts = dedup_points(joint_support_preimage(s, w));
  std::vector<DyadicGrid> out = grids;
  for (auto& g : out)
    if (!pts.empty()) g.bottom_level = std::max(g.bottom_level, separating_level(g, pts) + 2);
  return out;
}

namespace detail {

inline std::vector<int> floors_of(const std::vector<DyadicGrid>& ext) {
  std::vector<int> out;
  out.reserve(ext.size());
  for (const auto& g : ext) out.push_back(g.bottom_level);
  return out;
}

// Supremum of a per-cube functional over canonical cubes and half-step
// alternates of every grid in the (extended) family.
template <class Eval>
inline ConstantWitness sup_over_family(const std::vector<DyadicGrid>& ext,
                                       const std::vector<Point>& support, Eval&& eval) {
  ConstantWitness out;
  out.floor_levels = floors_of(ext);
  for (std::size_t gi = 0; gi < ext.size(); ++gi) {
    const DyadicGrid& g = ext[gi];
    for (int lev = g.top_level; lev <= g.bottom_level; ++lev) {
      for (const auto& Q : enumerate_cubes(g, lev, support)) {
        const double v = eval(eval_cube(g, Q.box()));
        if (v > out.value) {
          out.value = v;
          out.kind = ConstantWitness::Kind::cube;
          out.q = {int(gi), Q.box()};
        }
      }
      if (lev >= g.bottom_level) continue;
      for (const auto& b : alternate_cubes(g, lev, support)) {
        const double v = eval(eval_cube(g, b));
        if (v > out.value) {
          out.value = v;
          out.kind = ConstantWitness::Kind::cube;
          out.q = {int(gi), b};
        }
      }
    }
  }
  return out;
}

}  // namespace detail

inline ConstantWitness offset_a2(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                 const std::vector<DyadicGrid>& grids) {
  const auto ext = extend_grids(grids, s, w);
  ConstantWitness out;
  out.floor_levels = detail::floors_of(ext);
  for (std::size_t gi = 0; gi < ext.size(); ++gi) {
    const DyadicGrid& g = ext[gi];
    for (int lev = g.top_level; lev <= g.bottom_level; ++lev) {
      std::map<IdxVec, std::pair<double, double>> cells;
      for (const Atom& a : s.atoms) cells[containing_cube(g, a.u, lev).idx].first += a.mass;
      for (const Atom& a : w.atoms) cells[containing_cube(g, a.u, lev).idx].second += a.mass;
      const double denom = std::pow(std::ldexp(1.0, -lev), 2.0 * (double(g.n) - alpha));
      const int span = 3;
      int total = 1;
      for (int i = 0; i < g.n; ++i) total *= span;
      for (const auto& [i, ms] : cells) {
        if (ms.first == 0.0) continue;
        for (int m = 0; m < total; ++m) {
          int mm = m;
          IdxVec j = i;
          for (int d = 0; d < g.n; ++d) {
            j[d] += (mm % span) - 1;
            mm /= span;
          }
          if (j == i) continue;
          const auto it = cells.find(j);
          if (it == cells.end() || it->second.second == 0.0) continue;
          const double v = ms.first * it->second.second / denom;
          if (v > out.value) {
            out.value = v;
            out.kind = ConstantWitness::Kind::pair;
            out.q = {int(gi), DyadicCube{&g, lev, i}.box()};
            out.q2 = {int(gi), DyadicCube{&g, lev, j}.box()};
          }
        }
      }
    }
  }
  return out;
}

inline ConstantWitness tailed_a2(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                 Direction dir, const std::vector<DyadicGrid>& grids,
                                 const QuasiMap& map = {}) {
  if (dir == Direction::dual) return tailed_a2(w, s, alpha, Direction::forward, grids, map);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  ConstantWitness out = detail::sup_over_family(
      ext, support, [&](const EvalCube& Q) { return tailed_candidate(s, w, alpha, Q, map); });
  for (const Point& pu : dedup_points(support_preimage(w))) {
    const double v = tailed_shrink_candidate(s, w, alpha, pu, w.n, map);
    if (v > out.value) {
      out.value = v;
      out.kind = ConstantWitness::Kind::shrink;
      out.shrink_u = pu;
    }
  }
  return out;
}

inline ConstantWitness punctured_a2(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                    Direction dir, const std::vector<DyadicGrid>& grids) {
  if (dir == Direction::dual) return punctured_a2(w, s, alpha, Direction::forward, grids);
  const auto P = common_points(s, w);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  // Shrink limits vanish here: the punctured mass at a common atom is zero,
  // and atoms of distinct position never share both measures.
  return detail::sup_over_family(ext, support, [&](const EvalCube& Q) {
    return punctured_candidate(w, s, P, alpha, Q);
  });
}

inline ConstantWitness energy_a2(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                 Direction dir, const std::vector<DyadicGrid>& grids) {
  if (dir == Direction::dual) return energy_a2(w, s, alpha, Direction::forward, grids);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  // Shrink limits vanish: a cube collapsing onto one atom has zero variance.
  return detail::sup_over_family(
      ext, support, [&](const EvalCube& Q) { return energy_candidate(w, s, alpha, Q); });
}

inline ConstantWitness plugged_energy_a2(const AtomicMeasure& s, const AtomicMeasure& w,
                                         double alpha, Direction dir,
                                         const std::vector<DyadicGrid>& grids,
                                         const QuasiMap& map = {}) {
  if (dir == Direction::dual)
    return plugged_energy_a2(w, s, alpha, Direction::forward, grids, map);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  return detail::sup_over_family(
      ext, support, [&](const EvalCube& Q) { return plugged_candidate(w, s, alpha, Q, map); });
}

// Classical two-mass product: diverges exactly when the measures share a
// point mass, in which case the witness marks the shrink atom.
inline ConstantWitness classical_a2_diagnostic(const AtomicMeasure& s, const AtomicMeasure& w,
                                               double alpha,
                                               const std::vector<DyadicGrid>& grids) {
  const auto P = common_points(s, w);
  if (!P.points.empty()) {
    ConstantWitness out;
    out.value = kInf;
    out.infinite = true;
    out.kind = ConstantWitness::Kind::shrink;
    out.shrink_u = P.points.front();
    out.floor_levels = detail::floors_of(extend_grids(grids, s, w));
    return out;
  }
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  return detail::sup_over_family(
      ext, support, [&](const EvalCube& Q) { return classical_candidate(s, w, alpha, Q); });
}

}  // namespace tw
