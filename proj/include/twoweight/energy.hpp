#pragma once

// Energy-condition constants for a measure pair: the deep constant with its
// partition supremum realized by dynamic programming over the dyadic tree,
// the refined constant over alternate boxes and layered refinements, the
// stopping energy of a corona, the functional-energy left-hand side over
// Carleson collections, and the stopping-form size functional of admissible
// pair collections. Every returned value is the supremum as displayed in
// the defining formula, i.e. the square of the named constant.

#include "muckenhoupt.hpp"

#include <optional>
#include <sstream>

namespace tw {

enum class EnergyHole { gamma_hole, unit_hole, plugged };
enum class EnergyProjection { subgood, good, full };

struct EnergyVariant {
  EnergyHole hole = EnergyHole::gamma_hole;
  EnergyProjection projection = EnergyProjection::subgood;
};

// Pairs (I, J) below a top cube A: J tau-good and (rho-1)-deeply embedded in
// I, I a proper subcube of A, and for each J the first components form a
// contiguous band of ancestors.
struct AdmissiblePairs {
  DyadicCube A{};
  std::vector<std::pair<DyadicCube, DyadicCube>> pairs;
  bool reduced = false;
};

// Localized size variant: testing cubes are restricted to the nearby good
// subcubes of S and the maximal good subcubes whose triples stay inside S,
// and the Poisson hole is cut at S instead of at the testing cube.
struct LocalizedSize {
  DyadicCube S{};
};

namespace detail {

inline std::string cube_label(const DyadicCube& q) {
  std::ostringstream os;
  os << "level " << q.level << " corner (";
  for (int i = 0; i < q.grid->n; ++i) os << (i ? "," : "") << q.idx[i];
  os << ")";
  return os.str();
}

// Per-grid evaluation state shared by the energy sums. Candidate cubes J are
// drawn from the cells holding at least two omega atoms (all other cubes
// carry zero Haar energy below them), tested for maximal deep embedding
// directly, and their per-atom Poisson kernels and hole masks are cached.
class EnergySums {
 public:
  EnergySums(const DyadicGrid& g, const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
             const GoodnessParams& params, EnergyVariant variant, const QuasiMap& map,
             int deep_r)
      : g_(g), sigma_(s), alpha_(alpha), params_(params), variant_(variant), map_(map),
        deep_r_(deep_r), haar_(w, g) {
    for (int lev = g.top_level; lev <= g.bottom_level; ++lev) {
      auto& cells = counts_.emplace_back();
      for (const Atom& a : w.atoms) ++cells[containing_cube(g, a.u, lev).idx];
    }
  }

  const HaarSystem& haar() const { return haar_; }

  bool has_pair(int level, const IdxVec& idx) const {
    const auto& cells = counts_[std::size_t(level - g_.top_level)];
    const auto it = cells.find(idx);
    return it != cells.end() && it->second >= 2;
  }

  std::vector<char> atoms_in(const EvalCube& e) const {
    std::vector<char> out(sigma_.atoms.size(), 0);
    for (std::size_t i = 0; i < sigma_.atoms.size(); ++i)
      out[i] = eval_contains(e, sigma_.atoms[i].u) ? 1 : 0;
    return out;
  }

  // Sum over J in M_deep(node) of the squared Poisson-over-side factor times
  // the projection energy; the plug region is the mask, the hole follows the
  // variant.
  double deep_sum(const Box& node_box, int node_level, const std::vector<char>& plug) {
    double s = 0;
    for (const Term& t : members(node_box, node_level)) {
      double p = 0;
      for (std::size_t i = 0; i < t.kernel.size(); ++i)
        if (plug[i] && !t.hole[i]) p += t.kernel[i];
      if (p == 0.0) continue;
      const double q = p / t.side;
      s += q * q * t.energy;
    }
    return s;
  }

  // Maximum over subpartitions of the node into dyadic subcubes of the sum
  // of their deep contributions: max(own contribution, sum over children).
  double best_partition(const DyadicCube& node, const std::vector<char>& plug) {
    if (!has_pair(node.level, node.idx)) return 0.0;
    const double here = deep_sum(node.box(), node.level, plug);
    if (node.level >= g_.bottom_level) return here;
    double split = 0;
    for (const auto& c : node.children()) split += best_partition(c, plug);
    return std::max(here, split);
  }

  // Sum over the layered refinement M^ell of an (alternate) box: members of
  // M_deep of the ell-fold parents of the box's cells that stay inside some
  // member of M_deep of the box itself.
  double layered_sum(const Box& box, int level, int ell, const std::vector<char>& plug) {
    if (level + 1 > g_.bottom_level) return 0.0;
    std::vector<DyadicCube> tops;
    for (const auto& c : cubes_inside_box(g_, box, level + 1)) {
      if (!c.has_ancestor(ell)) continue;
      tops.push_back(c.ancestor(ell));
    }
    sort_cubes(tops);
    double s = 0;
    for (const auto& top : tops) {
      for (const Term& t : members(top.box(), top.level)) {
        if (!covered(t.cube, box, level)) continue;
        double p = 0;
        for (std::size_t i = 0; i < t.kernel.size(); ++i)
          if (plug[i] && !t.hole[i]) p += t.kernel[i];
        if (p == 0.0) continue;
        const double q = p / t.side;
        s += q * q * t.energy;
      }
    }
    return s;
  }

 private:
  struct Term {
    DyadicCube cube{};
    double side = 0.0;
    double energy = 0.0;
    std::vector<double> kernel;  // per sigma atom
    std::vector<char> hole;      // per sigma atom, excluded by the variant
  };

  // J lies inside some member of M_deep of the box: its ancestor chain down
  // from the box meets a deeply embedded cube.
  bool covered(const DyadicCube& J, const Box& box, int level) const {
    for (DyadicCube a = J; a.level > level; a = a.parent())
      if (is_deeply_embedded_box(a, box, level, params_.r, params_.eps)) return true;
    return false;
  }

  double projection(const DyadicCube& J) {
    const auto key = std::make_pair(J.level, J.idx);
    const auto it = proj_memo_.find(key);
    if (it != proj_memo_.end()) return it->second;
    ProjectionSpec spec;
    spec.J = J;
    spec.params = params_;
    switch (variant_.projection) {
      case EnergyProjection::subgood: spec.family = HaarFamily::subgood; break;
      case EnergyProjection::good: spec.family = HaarFamily::good; break;
      case EnergyProjection::full: spec.family = HaarFamily::all; break;
    }
    const double e = projection_energy(haar_, spec);
    proj_memo_.emplace(key, e);
    return e;
  }

  Term make_term(const DyadicCube& J) {
    Term t;
    t.cube = J;
    t.side = J.side();
    t.energy = projection(J);
    if (t.energy <= 0.0) return t;
    const QuasiCube q{J, &map_};
    const Point c = q.qcenter();
    const RBox dil = dilate(J.box(), g_.n, params_.gamma, g_.origin_shift);
    const EvalCube je = eval_cube(g_, J.box());
    t.kernel.resize(sigma_.atoms.size());
    t.hole.assign(sigma_.atoms.size(), 0);
    for (std::size_t i = 0; i < sigma_.atoms.size(); ++i) {
      const Atom& a = sigma_.atoms[i];
      t.kernel[i] = a.mass * std::pow(t.side, 1.0) /
                    std::pow(t.side + dist(a.x, c, g_.n), double(g_.n) + 1.0 - alpha_);
      if (variant_.hole == EnergyHole::gamma_hole)
        t.hole[i] = dil.contains_point(a.u, g_.n) ? 1 : 0;
      else if (variant_.hole == EnergyHole::unit_hole)
        t.hole[i] = eval_contains(je, a.u) ? 1 : 0;
    }
    return t;
  }

  // Members of M_deep of the box whose projection energy is nonzero: cells
  // with at least two omega atoms that are deeply embedded and have no
  // strictly higher deeply embedded ancestor above the box's level.
  const std::vector<Term>& members(const Box& box, int level) {
    const auto key = std::make_pair(box.scale * 1000000 + level, box.lo);
    const auto it = member_memo_.find(key);
    if (it != member_memo_.end()) return it->second;
    std::vector<Term> out;
    for (int lev = level + deep_r_; lev <= g_.bottom_level; ++lev) {
      for (const auto& [idx, cnt] : counts_[std::size_t(lev - g_.top_level)]) {
        if (cnt < 2) continue;
        const DyadicCube J{&g_, lev, idx};
        if (!is_deeply_embedded_box(J, box, level, deep_r_, params_.eps)) continue;
        bool maximal = true;
        for (DyadicCube a = J.parent(); a.level > level; a = a.parent()) {
          if (is_deeply_embedded_box(a, box, level, deep_r_, params_.eps)) {
            maximal = false;
            break;
          }
        }
        if (!maximal) continue;
        Term t = make_term(J);
        if (t.energy <= 0.0) continue;
        out.push_back(std::move(t));
      }
    }
    return member_memo_.emplace(key, std::move(out)).first->second;
  }

  const DyadicGrid& g_;
  const AtomicMeasure& sigma_;
  double alpha_;
  GoodnessParams params_;
  EnergyVariant variant_;
  QuasiMap map_;
  int deep_r_;
  HaarSystem haar_;
  std::vector<std::map<IdxVec, int>> counts_;
  std::map<std::pair<int, IdxVec>, double> proj_memo_;
  std::map<std::pair<int, IdxVec>, std::vector<Term>> member_memo_;
};

}  // namespace detail

// Squared deep energy constant: supremum over enumerated top cubes with
// sigma mass of the best subpartition sum divided by the cube's sigma mass.
inline ConstantWitness deep_energy(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                   const GoodnessParams& params, EnergyVariant variant,
                                   const std::vector<DyadicGrid>& grids, const QuasiMap& map = {}) {
  const auto ext = extend_grids(grids, s, w);
  ConstantWitness out;
  out.floor_levels = detail::floors_of(ext);
  const auto ssup = dedup_points(support_preimage(s));
  if (ssup.empty() || w.atoms.size() < 2) return out;
  for (std::size_t gi = 0; gi < ext.size(); ++gi) {
    const DyadicGrid& g = ext[gi];
    detail::EnergySums es(g, s, w, alpha, params, variant, map, params.r);
    for (int lev = g.top_level; lev <= g.bottom_level; ++lev) {
      for (const auto& I : enumerate_cubes(g, lev, ssup)) {
        const EvalCube e = eval_cube(g, I.box());
        const double ms = detail::mass_in(s, e);
        if (ms <= 0.0) continue;
        const double v = es.best_partition(I, es.atoms_in(e)) / ms;
        if (v > out.value) {
          out.value = v;
          out.kind = ConstantWitness::Kind::cube;
          out.q = {int(gi), I.box()};
        }
      }
    }
  }
  return out;
}

// Squared refined energy constant: supremum over the grid family, alternate
// boxes holding sigma mass, and refinement layers up to tau; no partition
// maximization.
inline ConstantWitness refined_energy(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                      const GoodnessParams& params, EnergyVariant variant,
                                      const std::vector<DyadicGrid>& grids,
                                      const QuasiMap& map = {}) {
  const auto ext = extend_grids(grids, s, w);
  ConstantWitness out;
  out.floor_levels = detail::floors_of(ext);
  const auto ssup = dedup_points(support_preimage(s));
  if (ssup.empty() || w.atoms.size() < 2) return out;
  for (std::size_t gi = 0; gi < ext.size(); ++gi) {
    const DyadicGrid& g = ext[gi];
    detail::EnergySums es(g, s, w, alpha, params, variant, map, params.r);
    for (int lev = g.top_level; lev < g.bottom_level; ++lev) {
      for (const Box& b : alternate_cubes(g, lev, ssup)) {
        const EvalCube e = eval_cube(g, b);
        const double ms = detail::mass_in(s, e);
        if (ms <= 0.0) continue;
        const auto plug = es.atoms_in(e);
        for (int ell = 0; ell <= params.tau; ++ell) {
          const double v = es.layered_sum(b, lev, ell, plug) / ms;
          if (v > out.value) {
            out.value = v;
            out.kind = ConstantWitness::Kind::cube;
            out.q = {int(gi), b};
            out.ell = ell;
          }
        }
      }
    }
  }
  return out;
}

// Squared strong energy constant: plugged deep plus plugged refined, both
// with the full projection.
inline double strong_energy(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                            const GoodnessParams& params, const std::vector<DyadicGrid>& grids,
                            const QuasiMap& map = {}) {
  const EnergyVariant v{EnergyHole::plugged, EnergyProjection::full};
  return deep_energy(s, w, alpha, params, v, grids, map).value +
         refined_energy(s, w, alpha, params, v, grids, map).value;
}

// Squared stopping energy of a corona: supremum over corona cubes with sigma
// mass of the tau-deep sum with plug region S and gamma holes, normalized by
// the cube's sigma mass. member_depth overrides the embedding depth of the
// maximal-cube decomposition (0 means tau), so the gap between the tau-deep
// and r-deep forms can be measured.
inline double stopping_energy(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                              const DyadicCube& S, const std::vector<DyadicCube>& corona,
                              const GoodnessParams& params, const QuasiMap& map = {},
                              int member_depth = 0) {
  if (corona.empty() || w.atoms.size() < 2) return 0.0;
  const DyadicGrid& g = *S.grid;
  for (const auto& I : corona) {
    if (I.grid != &g) throw std::invalid_argument("corona cube from another grid");
    if (!S.contains(I)) throw std::invalid_argument("corona cube outside its root");
  }
  detail::EnergySums es(g, s, w, alpha, params,
                        {EnergyHole::gamma_hole, EnergyProjection::subgood}, map,
                        member_depth > 0 ? member_depth : params.tau);
  const auto plug = es.atoms_in(eval_cube(g, S.box()));
  double best = 0;
  for (const auto& I : corona) {
    const double ms = detail::mass_in(s, eval_cube(g, I.box()));
    if (ms <= 0.0) continue;
    best = std::max(best, es.deep_sum(I.box(), I.level, plug) / ms);
  }
  return best;
}

// Left-hand side of the functional-energy inequality for a Carleson
// collection F and atom values h: the collection is validated against the
// given Carleson bound first.
inline double functional_energy_lhs(const AtomicMeasure& s, const AtomicMeasure& w, double alpha,
                                    const std::vector<DyadicCube>& F, const std::vector<double>& h,
                                    const GoodnessParams& params, double carleson_bound = 2.0,
                                    const QuasiMap& map = {}) {
  if (F.empty()) return 0.0;
  if (h.size() != s.atoms.size())
    throw std::invalid_argument("h must assign a value to every sigma atom");
  const DyadicGrid& g = *F.front().grid;
  for (const auto& fc : F)
    if (fc.grid != &g) throw std::invalid_argument("collection spans grids");
  for (const auto& fs : F) {
    double inside = 0;
    for (const auto& fc : F)
      if (fs.contains(fc)) inside += detail::mass_in(s, eval_cube(g, fc.box()));
    const double cap = carleson_bound * detail::mass_in(s, eval_cube(g, fs.box()));
    if (inside > cap * (1.0 + 1e-12))
      throw std::invalid_argument("not a Carleson collection at " + detail::cube_label(fs) +
                                  ": contained mass " + std::to_string(inside) + " exceeds " +
                                  std::to_string(cap));
  }
  AtomicMeasure hs;
  hs.n = s.n;
  for (std::size_t i = 0; i < s.atoms.size(); ++i) {
    if (h[i] == 0.0) continue;
    Atom a = s.atoms[i];
    a.mass *= h[i];
    hs.atoms.push_back(a);
  }
  const HaarSystem H(w, g);
  double total = 0;
  for (const auto& fc : F) {
    std::vector<DyadicCube> kids;
    for (const auto& o : F) {
      if (!fc.contains(o) || o == fc) continue;
      bool maximal = true;
      for (const auto& p : F)
        if (p.contains(o) && !(p == o) && fc.contains(p) && !(p == fc)) {
          maximal = false;
          break;
        }
      if (maximal) kids.push_back(o);
    }
    // Good tau-shifted corona of fc: good Haar cubes tau-deep in fc but not
    // tau-deep in any F-child of fc.
    std::vector<DyadicCube> corona;
    for (const auto& [q, b] : H.bases()) {
      if (!is_good_plain(q, params)) continue;
      if (!is_deeply_embedded(q, fc, params.tau, params.eps)) continue;
      bool in_kid = false;
      for (const auto& k : kids)
        if (is_deeply_embedded(q, k, params.tau, params.eps)) {
          in_kid = true;
          break;
        }
      if (!in_kid) corona.push_back(q);
    }
    if (corona.empty()) continue;
    // Candidate members of M_deep(fc): highest deeply embedded ancestor of
    // each corona cube.
    std::vector<DyadicCube> js;
    for (const auto& q : corona) {
      DyadicCube found{};
      bool any = false;
      for (DyadicCube a = q; a.level > fc.level; a = a.parent())
        if (is_deeply_embedded(a, fc, params.r, params.eps)) {
          found = a;
          any = true;
        }
      if (any) js.push_back(found);
    }
    sort_cubes(js);
    for (const auto& J : js) {
      double e = 0;
      for (const auto& q : corona)
        if (J.contains(q)) e += H.delta_energy_x(q);
      if (e <= 0.0) continue;
      const double p = poisson(QuasiCube{J, &map}, hs, alpha);
      const double f = p / J.side();
      total += f * f * e;
    }
  }
  return total;
}

inline void validate_admissible(const AdmissiblePairs& P, const GoodnessParams& params) {
  const DyadicGrid* g = P.A.grid;
  if (g == nullptr) throw std::invalid_argument("admissible collection needs a top cube");
  auto fail = [](const std::pair<DyadicCube, DyadicCube>& pr, const std::string& why) {
    throw std::invalid_argument("pair (" + detail::cube_label(pr.first) + ", " +
                                detail::cube_label(pr.second) + ") " + why);
  };
  std::map<std::pair<int, IdxVec>, std::vector<int>> levels_by_j;
  for (const auto& pr : P.pairs) {
    const auto& [I, J] = pr;
    if (I.grid != g || J.grid != g) fail(pr, "spans grids");
    if (!P.A.contains(I) || I == P.A) fail(pr, "first component is not a proper subcube of the top");
    if (!is_good(J, params, GoodMode::tau)) fail(pr, "second component is not tau-good");
    if (!is_deeply_embedded(J, I, params.rho - 1, params.eps))
      fail(pr, "second component is not deeply embedded in the first");
    levels_by_j[{J.level, J.idx}].push_back(I.level);
  }
  for (const auto& pr : P.pairs) {
    auto& levels = levels_by_j[{pr.second.level, pr.second.idx}];
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    for (std::size_t i = 1; i < levels.size(); ++i)
      if (levels[i] != levels[i - 1] + 1) fail(pr, "first components are not tree-connected");
    if (P.reduced) {
      const DyadicCube top = pr.second.ancestor(pr.second.level - levels.front());
      if (!is_good_plain(top, params)) fail(pr, "maximal first component is not good");
    }
  }
}

// Squared size functional of an admissible collection: supremum over good
// testing cubes of the squared holed Poisson-over-side factor times the
// upstairs energy weight of the tau-deep tent, normalized by sigma mass.
// Cubes without sigma mass are skipped. The upstairs measure charges each
// second component with its Haar energy of the position.
inline ConstantWitness size_functional(const AdmissiblePairs& P, const AtomicMeasure& s,
                                       const AtomicMeasure& w, double alpha,
                                       const GoodnessParams& params,
                                       const std::optional<LocalizedSize>& localized = {},
                                       const QuasiMap& map = {}) {
  validate_admissible(P, params);
  ConstantWitness out;
  if (P.pairs.empty()) return out;
  const DyadicGrid& g = *P.A.grid;
  out.floor_levels = {g.bottom_level};
  const HaarSystem H(w, g);
  std::vector<DyadicCube> pi2;
  std::vector<DyadicCube> pi_all;
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
  std::vector<DyadicCube> tests;
  if (!localized) {
    std::set<std::pair<int, IdxVec>> seen;
    for (const auto& J : pi2) {
      for (int d = params.tau; J.has_ancestor(d); ++d) {
        const DyadicCube K = J.ancestor(d);
        if (!seen.insert({K.level, K.idx}).second) continue;
        if (!is_good_plain(K, params)) continue;
        bool below = false;
        for (const auto& t : pi_all)
          if (t.contains(K)) {
            below = true;
            break;
          }
        if (below) tests.push_back(K);
      }
    }
  } else {
    const DyadicCube& S = localized->S;
    if (S.grid != &g) throw std::invalid_argument("localizing cube from another grid");
    const int near_floor = std::min(S.level + params.rho - params.tau - 1, g.bottom_level);
    for (int lev = S.level; lev <= near_floor; ++lev)
      for (const auto& k : detail::cubes_inside_box(g, S.box(), lev))
        if (is_good_plain(k, params)) tests.push_back(k);
    // Whitney pieces: maximal good subcubes whose triples stay inside S.
    const RBox sbox = cube_rbox(S);
    std::vector<DyadicCube> walk{S};
    while (!walk.empty()) {
      const DyadicCube k = walk.back();
      walk.pop_back();
      if (is_good_plain(k, params) &&
          sbox.contains_rbox(dilate(k.box(), g.n, 3.0, g.origin_shift), g.n)) {
        tests.push_back(k);
        continue;
      }
      if (k.level >= g.bottom_level) continue;
      for (const auto& c : k.children()) walk.push_back(c);
    }
    sort_cubes(tests);
  }
  for (const auto& K : tests) {
    const double ms = detail::mass_in(s, eval_cube(g, K.box()));
    if (ms <= 0.0) continue;
    const DyadicCube& hole = localized ? localized->S : K;
    AtomicMeasure f;
    f.n = s.n;
    for (const Atom& a : s.atoms)
      if (P.A.contains_point(a.u) && !hole.contains_point(a.u)) f.atoms.push_back(a);
    const QuasiCube qc{K, &map};
    const double p = poisson(qc, f, alpha);
    double tent = 0;
    for (const auto& a : upstairs.atoms)
      if (upstairs_in_tent(a, qc, TentMode::tau_deep, params.tau)) tent += a.weight;
    const double q = p / K.side();
    const double v = q * q * tent / ms;
    if (v > out.value) {
      out.value = v;
      out.kind = ConstantWitness::Kind::cube;
      out.q = {-1, K.box()};
    }
  }
  return out;
}

}  // namespace tw
