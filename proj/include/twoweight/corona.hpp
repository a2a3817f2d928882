#pragma once

// Stopping trees and corona decompositions: Calderon-Zygmund and energy
// stopping cubes, iterated trees, shifted coronas with their admissible
// pairs, the bottom-up splitting of the size functional, and the sublinear
// stopping-form bounds assembled from telescoped averages.

#include "energy.hpp"
#include "operator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

namespace tw {

// A stopping tree is the root together with the sorted stopping cubes (the
// root always first), one datum per cube, and the packing constant the tree
// promises to validate against.
struct StoppingTree {
  DyadicCube root{};
  std::vector<DyadicCube> cubes;
  std::vector<double> data;
  double c0 = 4.0;
};

namespace detail {

inline void validate_tree_shape(const StoppingTree& t) {
  if (t.root.grid == nullptr) throw std::invalid_argument("stopping tree has no root");
  if (t.cubes.empty() || !(t.cubes.front() == t.root))
    throw std::invalid_argument("stopping tree must start at its root");
  if (t.data.size() != t.cubes.size())
    throw std::invalid_argument("stopping data do not match the cubes");
  if (!(t.c0 > 0.0)) throw std::invalid_argument("stopping constant must be positive");
  const CubeLess less;
  for (std::size_t i = 0; i < t.cubes.size(); ++i) {
    if (t.cubes[i].grid != t.root.grid)
      throw std::invalid_argument("stopping cubes live on different grids");
    if (!t.root.contains(t.cubes[i]))
      throw std::invalid_argument("stopping cube outside the root");
    if (i > 0 && !less(t.cubes[i - 1], t.cubes[i]))
      throw std::invalid_argument("stopping cubes are not sorted");
  }
}

inline bool pair_less(const std::pair<DyadicCube, DyadicCube>& a,
                      const std::pair<DyadicCube, DyadicCube>& b) {
  const CubeLess less;
  if (!(a.second == b.second)) return less(a.second, b.second);
  return less(a.first, b.first);
}

}  // namespace detail

inline int tree_index(const StoppingTree& t, const DyadicCube& q) {
  for (std::size_t i = 0; i < t.cubes.size(); ++i)
    if (t.cubes[i] == q) return int(i);
  return -1;
}

// Index of the deepest stopping cube containing q, or -1.
inline int corona_home(const StoppingTree& t, const DyadicCube& q) {
  int best = -1;
  for (std::size_t i = 0; i < t.cubes.size(); ++i)
    if (t.cubes[i].contains(q) && (best < 0 || t.cubes[i].level > t.cubes[best].level))
      best = int(i);
  return best;
}

// Maximal stopping cubes strictly inside cubes[i].
inline std::vector<std::size_t> tree_children(const StoppingTree& t, std::size_t i) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < t.cubes.size(); ++j) {
    if (j == i || !t.cubes[i].contains(t.cubes[j])) continue;
    bool maximal = true;
    for (std::size_t k = 0; k < t.cubes.size() && maximal; ++k)
      if (k != i && k != j && t.cubes[i].contains(t.cubes[k]) &&
          t.cubes[k].contains(t.cubes[j]))
        maximal = false;
    if (maximal) out.push_back(j);
  }
  return out;
}

// Massive grid cubes whose deepest stopping ancestor is cubes[i], including
// cubes[i] itself; massless subtrees carry no atoms and are pruned.
inline std::vector<DyadicCube> corona_cubes(const StoppingTree& t, std::size_t i,
                                            const AtomicMeasure& s) {
  const DyadicGrid& g = *t.root.grid;
  std::vector<DyadicCube> out;
  std::vector<DyadicCube> walk{t.cubes[i]};
  while (!walk.empty()) {
    const DyadicCube c = walk.back();
    walk.pop_back();
    if (detail::mass_in(s, eval_cube(g, c.box())) <= 0.0) continue;
    const int ti = tree_index(t, c);
    if (ti >= 0 && ti != int(i)) continue;
    out.push_back(c);
    if (c.level >= g.bottom_level) continue;
    for (const auto& k : c.children()) walk.push_back(k);
  }
  sort_cubes(out);
  return out;
}

// Membership in the tau-shifted corona of cubes[i]: J sits tau-deep inside
// the block and either lives in the block itself or within tau levels of the
// top of a stopping child.
inline bool in_shifted_corona(const StoppingTree& t, std::size_t i, const DyadicCube& J,
                              const GoodnessParams& params) {
  const DyadicCube& B = t.cubes[i];
  if (!B.contains(J)) return false;
  if (!is_deeply_embedded(J, B, params.tau, params.eps)) return false;
  if (corona_home(t, J) == int(i)) return true;
  for (std::size_t j : tree_children(t, i))
    if (t.cubes[j].contains(J) && J.level < t.cubes[j].level + params.tau) return true;
  return false;
}

// Largest ratio, over massive grid cubes, of the total stopping mass inside
// the cube to its own mass.
inline double carleson_constant(const StoppingTree& t, const AtomicMeasure& s) {
  detail::validate_tree_shape(t);
  const DyadicGrid& g = *t.root.grid;
  std::vector<double> tm(t.cubes.size());
  for (std::size_t i = 0; i < t.cubes.size(); ++i)
    tm[i] = detail::mass_in(s, eval_cube(g, t.cubes[i].box()));
  double best = 0.0;
  std::vector<DyadicCube> walk{t.root};
  while (!walk.empty()) {
    const DyadicCube q = walk.back();
    walk.pop_back();
    const double ms = detail::mass_in(s, eval_cube(g, q.box()));
    if (ms <= 0.0) continue;
    double inside = 0.0;
    for (std::size_t i = 0; i < t.cubes.size(); ++i)
      if (q.contains(t.cubes[i])) inside += tm[i];
    best = std::max(best, inside / ms);
    if (q.level >= g.bottom_level) continue;
    for (const auto& c : q.children()) walk.push_back(c);
  }
  return best;
}

// Checks every promise a stopping tree makes for the function f: data are
// monotone along nested cubes, stopping mass packs with constant c0, the
// data are quasi-orthogonal to f, and no corona average of |f| exceeds
// avg_factor times its stopping datum.
inline void validate_stopping(const StoppingTree& t, const AtomicMeasure& s,
                              const std::vector<double>& f, double avg_factor = 1.0) {
  detail::validate_tree_shape(t);
  if (f.size() != s.atoms.size())
    throw std::invalid_argument("one function value per sigma atom");
  if (!(avg_factor >= 1.0)) throw std::invalid_argument("average factor must be at least one");
  const DyadicGrid& g = *t.root.grid;
  const double slack = 1.0 + 1e-12;

  for (std::size_t i = 0; i < t.cubes.size(); ++i)
    for (std::size_t j = i + 1; j < t.cubes.size(); ++j)
      if (t.cubes[i].contains(t.cubes[j]) && t.data[i] > t.data[j] * slack)
        throw std::invalid_argument("stopping data are not monotone along the tree");

  std::vector<double> tm(t.cubes.size());
  for (std::size_t i = 0; i < t.cubes.size(); ++i)
    tm[i] = detail::mass_in(s, eval_cube(g, t.cubes[i].box()));
  for (std::size_t i = 0; i < t.cubes.size(); ++i) {
    double inside = 0.0;
    for (std::size_t j = 0; j < t.cubes.size(); ++j)
      if (t.cubes[i].contains(t.cubes[j])) inside += tm[j];
    if (inside > t.c0 * tm[i] * slack)
      throw std::invalid_argument("stopping cubes overrun the packing constant");
  }

  double qsum = 0.0, f2 = 0.0;
  for (std::size_t i = 0; i < t.cubes.size(); ++i) qsum += t.data[i] * t.data[i] * tm[i];
  for (std::size_t k = 0; k < s.atoms.size(); ++k) f2 += s.atoms[k].mass * f[k] * f[k];
  if (qsum > t.c0 * t.c0 * f2 * slack)
    throw std::invalid_argument("stopping data break quasi-orthogonality");

  std::vector<DyadicCube> walk{t.root};
  while (!walk.empty()) {
    const DyadicCube c = walk.back();
    walk.pop_back();
    const EvalCube e = eval_cube(g, c.box());
    double ms = 0.0, num = 0.0;
    for (std::size_t k = 0; k < s.atoms.size(); ++k)
      if (detail::eval_contains(e, s.atoms[k].u)) {
        ms += s.atoms[k].mass;
        num += s.atoms[k].mass * std::fabs(f[k]);
      }
    if (ms <= 0.0) continue;
    const int h = corona_home(t, c);
    if (h >= 0 && num / ms > avg_factor * t.data[std::size_t(h)] * slack)
      throw std::invalid_argument("corona average exceeds its stopping datum");
    if (c.level >= g.bottom_level) continue;
    for (const auto& k : c.children()) walk.push_back(k);
  }
}

// Calderon-Zygmund stopping cubes for f on sigma below the top cube: maximal
// descendants whose average of |f| strictly exceeds ratio times the average
// on the stopping parent. Each datum is the corona average of |f|.
inline StoppingTree cz_stopping(const AtomicMeasure& s, const std::vector<double>& f,
                                const DyadicCube& top, double ratio) {
  if (top.grid == nullptr) throw std::invalid_argument("stopping construction needs a grid cube");
  if (!(ratio > 1.0)) throw std::invalid_argument("stopping ratio must exceed one");
  if (f.size() != s.atoms.size())
    throw std::invalid_argument("one function value per sigma atom");
  const DyadicGrid& g = *top.grid;
  const auto avg = [&](const DyadicCube& c) -> double {
    const EvalCube e = eval_cube(g, c.box());
    double ms = 0.0, num = 0.0;
    for (std::size_t i = 0; i < s.atoms.size(); ++i)
      if (detail::eval_contains(e, s.atoms[i].u)) {
        ms += s.atoms[i].mass;
        num += s.atoms[i].mass * std::fabs(f[i]);
      }
    return ms > 0.0 ? num / ms : -1.0;
  };
  const double a0 = avg(top);
  if (a0 < 0.0) throw std::invalid_argument("top cube carries no sigma mass");

  std::vector<std::pair<DyadicCube, double>> found{{top, a0}};
  for (std::size_t head = 0; head < found.size(); ++head) {
    const auto [F, aF] = found[head];
    if (F.level >= g.bottom_level) continue;
    std::vector<DyadicCube> walk;
    for (const auto& c : F.children()) walk.push_back(c);
    while (!walk.empty()) {
      const DyadicCube c = walk.back();
      walk.pop_back();
      const double a = avg(c);
      if (a < 0.0) continue;
      if (a > ratio * aF) {
        found.push_back({c, a});
        continue;
      }
      if (c.level >= g.bottom_level) continue;
      for (const auto& k : c.children()) walk.push_back(k);
    }
  }
  std::sort(found.begin(), found.end(),
            [](const auto& x, const auto& y) { return CubeLess{}(x.first, y.first); });

  StoppingTree out;
  out.root = top;
  out.c0 = std::max(4.0, ratio / (ratio - 1.0));
  for (const auto& [c, a] : found) {
    out.cubes.push_back(c);
    out.data.push_back(a);
  }
  validate_stopping(out, s, f, ratio);
  return out;
}

struct EnergyCorona {
  StoppingTree tree;
  double c_energy = 0.0;
  double base = 0.0;
};

// Energy stopping cubes below S0: maximal descendants whose tau-deep energy
// sum reaches c_energy times the base constant (deep energy plus both
// Muckenhoupt terms) times their sigma mass. Without an explicit c_energy
// the constant doubles from one until every generation of stopping cubes at
// most halves the sigma mass of its parent and the stopping energy of every
// block stays below the threshold.
inline EnergyCorona energy_corona(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                  const DyadicCube& S0, const GoodnessParams& params,
                                  const std::vector<DyadicGrid>& grids,
                                  std::optional<double> c_energy = {}, const QuasiMap& map = {}) {
  if (S0.grid == nullptr) throw std::invalid_argument("stopping construction needs a grid cube");
  params.validate();
  const DyadicGrid& g = *S0.grid;

  EnergyCorona out;
  out.base = deep_energy(s, w, alpha, params, {}, grids, map).value +
             offset_a2(s, w, alpha, grids).value +
             punctured_a2(s, w, alpha, Direction::forward, grids).value;
  const auto root_only = [&]() {
    StoppingTree t;
    t.root = S0;
    t.cubes = {S0};
    t.data = {0.0};
    return t;
  };
  if (out.base <= 0.0) {
    out.tree = root_only();
    out.c_energy = c_energy.value_or(1.0);
    return out;
  }

  detail::EnergySums es(g, s, w, alpha, params, EnergyVariant{}, map, params.tau);
  const auto build = [&](double ce) {
    const double gam = ce * out.base;
    std::vector<DyadicCube> ambient{S0};
    for (std::size_t head = 0; head < ambient.size(); ++head) {
      const DyadicCube T = ambient[head];
      if (T.level >= g.bottom_level) continue;
      const std::vector<char> plug = es.atoms_in(eval_cube(g, T.box()));
      std::vector<DyadicCube> walk;
      for (const auto& c : T.children()) walk.push_back(c);
      while (!walk.empty()) {
        const DyadicCube c = walk.back();
        walk.pop_back();
        const double ms = detail::mass_in(s, eval_cube(g, c.box()));
        if (ms <= 0.0) continue;
        if (es.deep_sum(c.box(), c.level, plug) >= gam * ms) {
          ambient.push_back(c);
          continue;
        }
        if (c.level >= g.bottom_level) continue;
        for (const auto& k : c.children()) walk.push_back(k);
      }
    }
    std::sort(ambient.begin(), ambient.end(), [](const auto& a, const auto& b) {
      return CubeLess{}(a, b);
    });
    StoppingTree t;
    t.root = S0;
    t.cubes = std::move(ambient);
    t.data.assign(t.cubes.size(), 0.0);
    return t;
  };

  if (c_energy) {
    out.c_energy = *c_energy;
    out.tree = build(*c_energy);
    return out;
  }
  for (double ce = 1.0;; ce *= 2.0) {
    if (ce > 1e18) throw std::runtime_error("energy corona calibration diverged");
    StoppingTree t = build(ce);
    bool ok = true;
    for (std::size_t i = 0; i < t.cubes.size() && ok; ++i) {
      const double ms = detail::mass_in(s, eval_cube(g, t.cubes[i].box()));
      double kids = 0.0;
      for (std::size_t j : tree_children(t, i))
        kids += detail::mass_in(s, eval_cube(g, t.cubes[j].box()));
      if (kids > 0.5 * ms * (1.0 + 1e-12)) ok = false;
    }
    for (std::size_t i = 0; i < t.cubes.size() && ok; ++i)
      if (stopping_energy(s, w, alpha, t.cubes[i], corona_cubes(t, i, s), params, map) >
          ce * out.base * (1.0 + 1e-12))
        ok = false;
    if (ok) {
      out.c_energy = ce;
      out.tree = std::move(t);
      return out;
    }
  }
}

// Merges an outer stopping tree with one inner tree per outer cube: a kept
// inner cube must stay inside its own outer block and carry at least the
// outer datum; the blocks keep the larger of their two root data. A final
// downward pass makes nested data monotone.
inline StoppingTree iterate_coronas(const StoppingTree& outer,
                                    const std::vector<StoppingTree>& inners) {
  detail::validate_tree_shape(outer);
  for (const auto& t : inners) detail::validate_tree_shape(t);
  if (inners.size() != outer.cubes.size())
    throw std::invalid_argument("one inner tree per stopping cube");
  for (std::size_t i = 0; i < inners.size(); ++i)
    if (!(inners[i].root == outer.cubes[i]))
      throw std::invalid_argument("inner tree root differs from its stopping cube");

  double c0 = outer.c0;
  for (const auto& t : inners) c0 = std::max(c0, t.c0);
  std::vector<std::pair<DyadicCube, double>> keep;
  for (std::size_t i = 0; i < outer.cubes.size(); ++i) {
    keep.push_back({outer.cubes[i], std::max(outer.data[i], inners[i].data[0])});
    for (std::size_t j = 1; j < inners[i].cubes.size(); ++j) {
      const DyadicCube& K = inners[i].cubes[j];
      if (corona_home(outer, K) != int(i)) continue;
      if (!(inners[i].data[j] >= outer.data[i])) continue;
      keep.push_back({K, inners[i].data[j]});
    }
  }
  std::sort(keep.begin(), keep.end(),
            [](const auto& a, const auto& b) { return CubeLess{}(a.first, b.first); });

  StoppingTree out;
  out.root = outer.root;
  out.c0 = 2.0 * c0 * c0;
  for (const auto& [c, d] : keep) {
    out.cubes.push_back(c);
    out.data.push_back(d);
  }
  for (std::size_t k = 0; k < out.cubes.size(); ++k) {
    int up = -1;
    for (std::size_t j = 0; j < k; ++j)
      if (out.cubes[j].contains(out.cubes[k]) &&
          (up < 0 || out.cubes[j].level > out.cubes[up].level))
        up = int(j);
    if (up >= 0) out.data[k] = std::max(out.data[k], out.data[std::size_t(up)]);
  }
  detail::validate_tree_shape(out);
  return out;
}

// Keeps, for every grouped second component, the first components at or
// below its shallowest plain-good one; second components without one drop
// out entirely.
inline AdmissiblePairs reduce_pairs(const AdmissiblePairs& P, const GoodnessParams& params) {
  AdmissiblePairs out;
  out.A = P.A;
  out.reduced = true;
  std::map<DyadicCube, std::vector<DyadicCube>, CubeLess> byj;
  for (const auto& [I, J] : P.pairs) byj[J].push_back(I);
  for (auto& [J, Is] : byj) {
    std::sort(Is.begin(), Is.end(), CubeLess{});
    std::size_t top = Is.size();
    for (std::size_t i = 0; i < Is.size(); ++i)
      if (is_good_plain(Is[i], params)) {
        top = i;
        break;
      }
    for (std::size_t i = top; i < Is.size(); ++i) out.pairs.push_back({Is[i], J});
  }
  std::sort(out.pairs.begin(), out.pairs.end(), detail::pair_less);
  validate_admissible(out, params);
  return out;
}

// All admissible pairs of the shifted corona of A: tau-good cubes J of the
// shift paired with every chain ancestor I inside the block, from the top of
// the block down to the goodness depth above J.
inline AdmissiblePairs admissible_pairs(const StoppingTree& t, const DyadicCube& A,
                                        const GoodnessParams& params, bool reduce) {
  detail::validate_tree_shape(t);
  params.validate();
  const int ai = tree_index(t, A);
  if (ai < 0) throw std::invalid_argument("top cube is not a stopping cube");
  const DyadicGrid& g = *A.grid;

  AdmissiblePairs out;
  out.A = A;
  for (int lev = A.level + params.tau; lev <= g.bottom_level; ++lev)
    for (const auto& J : detail::cubes_inside_box(g, A.box(), lev)) {
      if (!is_good(J, params, GoodMode::tau)) continue;
      if (!in_shifted_corona(t, std::size_t(ai), J, params)) continue;
      for (int l1 = J.level - (params.rho - 1); l1 > A.level; --l1) {
        const DyadicCube I = J.ancestor(J.level - l1);
        if (corona_home(t, I) != ai) continue;
        if (!is_deeply_embedded(J, I, params.rho - 1, params.eps)) continue;
        out.pairs.push_back({I, J});
      }
    }
  std::sort(out.pairs.begin(), out.pairs.end(), detail::pair_less);
  if (reduce) return reduce_pairs(out, params);
  validate_admissible(out, params);
  return out;
}

struct SplitReport {
  double rho = 0.0;
  double size2 = 0.0;
  double small_max2 = 0.0;
  std::vector<std::vector<DyadicCube>> levels;
  std::vector<DyadicCube> tree;
  std::vector<int> depth;
  std::size_t big_pairs = 0;
  std::size_t small_pairs = 0;
};

struct BottomUpSplit {
  AdmissiblePairs big;
  std::vector<AdmissiblePairs> small;
  SplitReport report;
};

// Splits a reduced collection against its own size functional. The ground
// layer collects the minimal testing cubes already meeting eps_split times
// the squared size; each further layer collects minimal cubes whose tent
// weight beats one plus eps_split times the union of the tents selected
// below; the top layer keeps the maximal unselected testing cubes. Pairs
// whose components separate across layers stay big, the rest regroup into
// one small collection per deepest selected cube over the second component.
inline BottomUpSplit bottom_up_split(const AdmissiblePairs& P, double eps_split,
                                     const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                     const GoodnessParams& params, const QuasiMap& map = {}) {
  if (!(eps_split > 0.0 && eps_split < 1.0))
    throw std::invalid_argument("split fraction must lie in (0, 1)");
  if (!P.reduced) throw std::invalid_argument("split needs a reduced collection");
  validate_admissible(P, params);

  BottomUpSplit out;
  out.report.rho = 1.0 + eps_split;
  out.big.A = P.A;
  out.big.reduced = true;
  if (P.pairs.empty()) return out;

  const DyadicGrid& g = *P.A.grid;
  out.report.size2 = size_functional(P, s, w, alpha, params, {}, map).value;
  if (out.report.size2 <= 0.0) {
    out.big = P;
    return out;
  }

  // testing data of the size functional, reproduced cube for cube
  const HaarSystem H(w, g);
  std::vector<DyadicCube> pi2, pi_all;
  for (const auto& [I, J] : P.pairs) {
    pi2.push_back(J);
    pi_all.push_back(I);
    pi_all.push_back(J);
  }
  sort_cubes(pi2);
  sort_cubes(pi_all);
  UpstairsMeasure upstairs;
  for (const auto& J : pi2) {
    const double e = H.delta_energy_x(J);
    if (e <= 0.0) continue;
    UpstairsAtom a;
    a.pre_center = J.center();
    a.p.x = map.forward(a.pre_center, g.n);
    a.p.t = J.side();
    a.weight = e;
    a.J = J;
    upstairs.atoms.push_back(a);
  }
  std::set<std::pair<int, IdxVec>> seen;
  std::vector<DyadicCube> cands;
  for (const auto& J : pi2)
    for (int d = params.tau; J.has_ancestor(d); ++d) {
      const DyadicCube K = J.ancestor(d);
      if (!seen.insert({K.level, K.idx}).second) continue;
      if (!is_good_plain(K, params)) continue;
      for (const auto& c : pi_all)
        if (c.contains(K)) {
          cands.push_back(K);
          break;
        }
    }
  sort_cubes(cands);

  std::vector<std::vector<char>> masks(cands.size());
  std::vector<double> tents(cands.size(), 0.0);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    masks[i].assign(upstairs.atoms.size(), 0);
    const QuasiCube qc{cands[i], &map};
    for (std::size_t a = 0; a < upstairs.atoms.size(); ++a)
      if (upstairs_in_tent(upstairs.atoms[a], qc, TentMode::tau_deep, params.tau)) {
        masks[i][a] = 1;
        tents[i] += upstairs.atoms[a].weight;
      }
  }
  const auto crit = [&](const DyadicCube& K) -> double {
    const double ms = detail::mass_in(s, eval_cube(g, K.box()));
    if (ms <= 0.0) return -1.0;
    AtomicMeasure fm;
    fm.n = s.n;
    for (const Atom& a : s.atoms)
      if (P.A.contains_point(a.u) && !K.contains_point(a.u)) fm.atoms.push_back(a);
    const QuasiCube qc{K, &map};
    const double p = poisson(qc, fm, alpha);
    double tent = 0.0;
    for (const auto& a : upstairs.atoms)
      if (upstairs_in_tent(a, qc, TentMode::tau_deep, params.tau)) tent += a.weight;
    const double q = p / K.side();
    return q * q * tent / ms;
  };

  // ground layer: minimal testing cubes meeting the split fraction
  std::vector<char> chosen(cands.size(), 0);
  std::vector<std::vector<DyadicCube>> layers;
  {
    const double bar = eps_split * out.report.size2;
    std::vector<std::size_t> qual;
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (crit(cands[i]) >= bar) qual.push_back(i);
    std::vector<DyadicCube> layer;
    for (std::size_t i : qual) {
      bool minimal = true;
      for (std::size_t j : qual)
        if (j != i && cands[i].contains(cands[j])) minimal = false;
      if (minimal) {
        chosen[i] = 1;
        layer.push_back(cands[i]);
      }
    }
    sort_cubes(layer);
    layers.push_back(layer);
  }

  // climb: minimal cubes whose tent beats the union of the chosen tents
  while (true) {
    std::vector<std::size_t> qual;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (chosen[i]) continue;
      std::vector<char> u(upstairs.atoms.size(), 0);
      bool over = false;
      for (std::size_t j = 0; j < cands.size(); ++j) {
        if (!chosen[j] || !cands[i].contains(cands[j])) continue;
        over = true;
        for (std::size_t a = 0; a < u.size(); ++a) u[a] = u[a] | masks[j][a];
      }
      if (!over) continue;
      double ut = 0.0;
      for (std::size_t a = 0; a < u.size(); ++a)
        if (u[a]) ut += upstairs.atoms[a].weight;
      if (tents[i] >= (1.0 + eps_split) * ut) qual.push_back(i);
    }
    if (qual.empty()) break;
    std::vector<DyadicCube> layer;
    for (std::size_t i : qual) {
      bool minimal = true;
      for (std::size_t j : qual)
        if (j != i && cands[i].contains(cands[j])) minimal = false;
      if (minimal) {
        chosen[i] = 1;
        layer.push_back(cands[i]);
      }
    }
    sort_cubes(layer);
    layers.push_back(layer);
  }

  // top layer: maximal testing cubes never selected
  std::vector<char> final_layer(cands.size(), 0);
  {
    std::vector<DyadicCube> layer;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (chosen[i]) continue;
      bool maximal = true;
      for (std::size_t j = 0; j < cands.size(); ++j)
        if (j != i && !chosen[j] && cands[j].contains(cands[i])) maximal = false;
      if (maximal) {
        final_layer[i] = 1;
        layer.push_back(cands[i]);
      }
    }
    sort_cubes(layer);
    layers.push_back(layer);
  }

  std::vector<DyadicCube> lcubes;
  std::vector<char> is_final;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (chosen[i] || final_layer[i]) {
      lcubes.push_back(cands[i]);
      is_final.push_back(final_layer[i]);
    }
  std::vector<int> depth(lcubes.size(), 0);
  for (std::size_t i = 0; i < lcubes.size(); ++i)
    for (std::size_t j = 0; j < lcubes.size(); ++j)
      if (j != i && lcubes[j].contains(lcubes[i])) ++depth[i];

  std::map<std::size_t, std::vector<std::pair<DyadicCube, DyadicCube>>> small_map;
  for (const auto& pr : P.pairs) {
    int hi = -1, la = -1;
    for (std::size_t k = 0; k < lcubes.size(); ++k) {
      if (lcubes[k].contains(pr.first) && (hi < 0 || lcubes[k].level > lcubes[hi].level))
        hi = int(k);
      if (lcubes[k].contains(pr.second) && pr.second.level >= lcubes[k].level + params.tau &&
          (la < 0 || lcubes[k].level > lcubes[la].level))
        la = int(k);
    }
    if (hi < 0 || la < 0) throw std::logic_error("pair escaped the corona split");
    if (!lcubes[std::size_t(hi)].contains(lcubes[std::size_t(la)]))
      throw std::logic_error("corona split cubes are not nested");
    const int steps = depth[std::size_t(la)] - depth[std::size_t(hi)];
    const bool big = steps >= 1 || (steps == 0 && pr.first == lcubes[std::size_t(la)] &&
                                    !is_final[std::size_t(la)]);
    if (big)
      out.big.pairs.push_back(pr);
    else
      small_map[std::size_t(la)].push_back(pr);
  }

  std::sort(out.big.pairs.begin(), out.big.pairs.end(), detail::pair_less);
  validate_admissible(out.big, params);
  for (auto& [la, pairs] : small_map) {
    AdmissiblePairs piece;
    piece.A = P.A;
    piece.pairs = std::move(pairs);
    std::sort(piece.pairs.begin(), piece.pairs.end(), detail::pair_less);
    validate_admissible(piece, params);
    out.small.push_back(std::move(piece));
  }

  out.report.levels = std::move(layers);
  out.report.tree = std::move(lcubes);
  out.report.depth = std::move(depth);
  out.report.big_pairs = out.big.pairs.size();
  for (const auto& piece : out.small) {
    out.report.small_pairs += piece.pairs.size();
    out.report.small_max2 = std::max(
        out.report.small_max2, size_functional(piece, s, w, alpha, params, {}, map).value);
  }
  return out;
}

struct SizeLemmaRound {
  std::size_t pieces = 0;
  double max_size2 = 0.0;
};

// Splits repeatedly, feeding the re-reduced small collections back in, until
// a round emits nothing or max_rounds is reached. Each round records how
// many small pieces it emitted and the largest squared size among them.
inline std::vector<SizeLemmaRound> size_lemma_recursion(
    const AdmissiblePairs& P, double eps_split, const AtomicMeasure& s, const AtomicMeasure& w,
    double alpha, const GoodnessParams& params, int max_rounds = 10, const QuasiMap& map = {}) {
  std::vector<SizeLemmaRound> rounds;
  std::vector<AdmissiblePairs> work;
  {
    const AdmissiblePairs first = P.reduced ? P : reduce_pairs(P, params);
    if (!first.pairs.empty()) work.push_back(first);
  }
  for (int r = 0; r < max_rounds; ++r) {
    SizeLemmaRound rec;
    std::vector<AdmissiblePairs> next;
    for (const auto& piece : work) {
      const BottomUpSplit sp = bottom_up_split(piece, eps_split, s, w, alpha, params, map);
      rec.pieces += sp.small.size();
      rec.max_size2 = std::max(rec.max_size2, sp.report.small_max2);
      for (const auto& q : sp.small) {
        const AdmissiblePairs rq = reduce_pairs(q, params);
        if (!rq.pairs.empty()) next.push_back(rq);
      }
    }
    rounds.push_back(rec);
    work = std::move(next);
    if (rec.pieces == 0) break;
  }
  return rounds;
}

// Telescoped multiplier of the stopping form at J: the sum, over the first
// components paired with J that exclude the atom, of the average difference
// of f between the component and its parent.
inline std::vector<double> stop_form_multiplier(const AdmissiblePairs& P, const DyadicCube& J,
                                                const std::vector<double>& f,
                                                const AtomicMeasure& s) {
  if (P.A.grid == nullptr) throw std::invalid_argument("collection has no top cube");
  if (f.size() != s.atoms.size())
    throw std::invalid_argument("one function value per sigma atom");
  const DyadicGrid& g = *P.A.grid;
  std::vector<double> phi(s.atoms.size(), 0.0);
  const auto avg = [&](const DyadicCube& c) -> double {
    const EvalCube e = eval_cube(g, c.box());
    double ms = 0.0, num = 0.0;
    for (std::size_t i = 0; i < s.atoms.size(); ++i)
      if (detail::eval_contains(e, s.atoms[i].u)) {
        ms += s.atoms[i].mass;
        num += s.atoms[i].mass * f[i];
      }
    return ms > 0.0 ? num / ms : 0.0;
  };
  for (const auto& pr : P.pairs) {
    if (!(pr.second == J)) continue;
    const DyadicCube& I = pr.first;
    if (I.level <= g.top_level) continue;
    if (detail::mass_in(s, eval_cube(g, I.box())) <= 0.0) continue;
    const double c = avg(I) - avg(I.parent());
    if (c == 0.0) continue;
    for (std::size_t i = 0; i < s.atoms.size(); ++i)
      if (P.A.contains_point(s.atoms[i].u) && !I.contains_point(s.atoms[i].u)) phi[i] += c;
  }
  return phi;
}

struct StopFormValues {
  double b1 = 0.0;
  double b1_delta = 0.0;
};

// Sublinear bounds on the stopping form: for every second component the
// Poisson integral of sigma weighted by the telescoped multiplier outside
// the deepest first component, against the position and function energies of
// the omega differences. b1 uses the plain kernel and the single difference
// at J; b1_delta uses the smoothed kernel and all difference energies at or
// below J.
inline StopFormValues sublinear_stop_form(const AdmissiblePairs& P, const std::vector<double>& f,
                                          const std::vector<double>& g_vals,
                                          const AtomicMeasure& s, const AtomicMeasure& w,
                                          const KernelSpec& spec, const GoodnessParams& params,
                                          const QuasiMap& map = {}) {
  spec.validate();
  if (spec.n != s.n || spec.n != w.n)
    throw std::invalid_argument("kernel dimension does not match the measures");
  if (f.size() != s.atoms.size())
    throw std::invalid_argument("one function value per sigma atom");
  if (g_vals.size() != w.atoms.size())
    throw std::invalid_argument("one function value per omega atom");
  validate_admissible(P, params);

  StopFormValues out;
  if (P.pairs.empty()) return out;
  const DyadicGrid& g = *P.A.grid;
  const HaarSystem H(w, g);
  std::map<DyadicCube, std::vector<DyadicCube>, CubeLess> byj;
  for (const auto& [I, J] : P.pairs) byj[J].push_back(I);

  for (const auto& [J, Is] : byj) {
    const double dg2 = H.delta_energy(J, g_vals);
    if (dg2 <= 0.0) continue;
    const std::vector<double> phi = stop_form_multiplier(P, J, f, s);
    DyadicCube inner = Is.front();
    for (const auto& I : Is)
      if (I.level > inner.level) inner = I;
    AtomicMeasure fm;
    fm.n = s.n;
    for (std::size_t i = 0; i < s.atoms.size(); ++i) {
      if (phi[i] == 0.0) continue;
      if (!P.A.contains_point(s.atoms[i].u) || inner.contains_point(s.atoms[i].u)) continue;
      Atom a = s.atoms[i];
      a.mass *= std::fabs(phi[i]);
      fm.atoms.push_back(a);
    }
    const QuasiCube qc{J, &map};
    const double dx = H.delta_energy_x(J);
    out.b1 += poisson(qc, fm, spec.alpha) / J.side() * std::sqrt(dx) * std::sqrt(dg2);
    double px2 = 0.0;
    for (const auto& kv : H.bases())
      if (J.contains(kv.first)) px2 += H.delta_energy_x(kv.first);
    out.b1_delta += poisson(qc, fm, spec.alpha, 1.0 + spec.delta_smooth) / J.side() *
                    std::sqrt(px2) * std::sqrt(dg2);
  }
  return out;
}

}  // namespace tw
