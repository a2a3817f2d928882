#include <catch2/catch_amalgamated.hpp>

#include "twoweight/corona.hpp"

#include <algorithm>
#include <map>
#include <set>

using namespace tw;

namespace {

AtomicMeasure line_measure(std::initializer_list<std::pair<double, double>> pts) {
  std::vector<Point> us;
  std::vector<double> ms;
  for (auto [u, m] : pts) {
    us.push_back(make_point({u}));
    ms.push_back(m);
  }
  return AtomicMeasure::from_preimage(1, us, ms);
}

GoodnessParams small_params() {
  GoodnessParams p;
  p.r = 3;
  p.eps = 0.4;
  p.tau = 4;
  p.rho = 8;
  p.gamma = 2.0;
  p.validate();
  return p;
}

// Fixture shared by the split and stopping-form tests: a reduced collection
// under a level-2 top with two omega pairs and dyadic sigma masses.
struct CoronaFixture {
  DyadicGrid g{1, {}, 0, 13};
  GoodnessParams p = small_params();
  DyadicCube A;
  StoppingTree tree;
  AtomicMeasure s, w;
  std::vector<double> f, gv;
  AdmissiblePairs P;
  DyadicCube J1, J2;
};

DyadicCube pick_good(const DyadicGrid& g, const GoodnessParams& p, int level, double around) {
  const std::int64_t c = std::int64_t(std::floor(std::ldexp(around, level)));
  for (std::int64_t d = 0; d < 600; ++d)
    for (std::int64_t k : {c + d, c - d}) {
      const DyadicCube J{&g, level, {k, 0, 0}};
      if (is_good(J, p, GoodMode::tau)) return J;
    }
  throw std::runtime_error("no tau-good cube near the request");
}

void build_fixture(CoronaFixture& fx) {
  fx.A = DyadicCube{&fx.g, 2, {1, 0, 0}};
  fx.tree = StoppingTree{fx.A, {fx.A}, {1.0}, 4.0};
  fx.J1 = pick_good(fx.g, fx.p, 10, 0.3);
  fx.J2 = pick_good(fx.g, fx.p, 10, 0.44);

  const Box b1 = fx.J1.box(), b2 = fx.J2.box();
  const double s1 = fx.J1.side(), s2 = fx.J2.side();
  fx.w = line_measure({{b1.lo[0] + 0.25 * s1, 1.0},
                       {b1.lo[0] + 0.75 * s1, 2.0},
                       {b2.lo[0] + 0.25 * s2, 1.0},
                       {b2.lo[0] + 0.75 * s2, 1.0}});
  fx.gv = {1.0, -1.0, 2.0, 0.0};

  DyadicCube sib1 = fx.J1.parent().children()[0];
  if (sib1 == fx.J1) sib1 = fx.J1.parent().children()[1];
  DyadicCube gp = fx.J1.ancestor(2).children()[0];
  if (gp.contains(fx.J1)) gp = fx.J1.ancestor(2).children()[1];
  DyadicCube sib2 = fx.J2.parent().children()[0];
  if (sib2 == fx.J2) sib2 = fx.J2.parent().children()[1];
  fx.s = line_measure({{sib1.center()[0], 0.75},
                       {gp.center()[0], 1.5},
                       {0.48, 0.5},
                       {0.265625, 2.0},
                       {sib2.center()[0], 0.25}});
  fx.f = {2.0, -1.0, 3.0, 0.5, -4.0};

  fx.P = admissible_pairs(fx.tree, fx.A, fx.p, true);
}

}  // namespace

TEST_CASE("calderon zygmund stopping cubes freeze the spike branch") {
  DyadicGrid g{1, {}, 0, 5};
  const AtomicMeasure s = line_measure({{0.1, 1.0}, {0.3, 1.0}, {0.6, 1.0}, {0.9, 1.0}});
  const DyadicCube top{&g, 0, {}};
  const std::vector<double> f{0.0, 0.0, 0.0, 8.0};

  const StoppingTree t = cz_stopping(s, f, top, 2.0);
  REQUIRE(t.cubes.size() == 2);
  REQUIRE(t.cubes[0] == top);
  REQUIRE(t.cubes[1] == DyadicCube{&g, 2, {3, 0, 0}});
  REQUIRE(t.data[0] == 2.0);
  REQUIRE(t.data[1] == 8.0);
  REQUIRE(t.c0 == 4.0);
  REQUIRE(carleson_constant(t, s) == 1.25);
  REQUIRE(corona_home(t, DyadicCube{&g, 3, {7, 0, 0}}) == 1);
  REQUIRE(corona_home(t, DyadicCube{&g, 2, {2, 0, 0}}) == 0);

  // the half [0.5, 1) averages exactly twice the root datum, so factor one fails
  REQUIRE_NOTHROW(validate_stopping(t, s, f, 2.0));
  REQUIRE_THROWS_WITH(validate_stopping(t, s, f, 1.0),
                      Catch::Matchers::ContainsSubstring("corona average"));

  const StoppingTree flat = cz_stopping(s, {3.0, 3.0, 3.0, 3.0}, top, 2.0);
  REQUIRE(flat.cubes.size() == 1);
  REQUIRE(flat.data[0] == 3.0);
  const StoppingTree zero = cz_stopping(s, {0.0, 0.0, 0.0, 0.0}, top, 2.0);
  REQUIRE(zero.cubes.size() == 1);
  REQUIRE(zero.data[0] == 0.0);

  REQUIRE_THROWS_AS(cz_stopping(s, f, top, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(cz_stopping(s, {1.0, 2.0}, top, 2.0), std::invalid_argument);
  REQUIRE_THROWS_WITH(cz_stopping(s, f, DyadicCube{&g, 3, {3, 0, 0}}, 2.0),
                      Catch::Matchers::ContainsSubstring("sigma mass"));

  StoppingTree bad = t;
  bad.data = {10.0, 8.0};
  REQUIRE_THROWS_WITH(validate_stopping(bad, s, f, 2.0),
                      Catch::Matchers::ContainsSubstring("monotone"));
  bad.data = {2.0, 1000.0};
  REQUIRE_THROWS_WITH(validate_stopping(bad, s, f, 2.0),
                      Catch::Matchers::ContainsSubstring("quasi-orthogonality"));
  bad = t;
  bad.cubes.push_back(DyadicCube{&g, 1, {0, 0, 0}});
  bad.data = {2.0, 8.0, 0.0};
  REQUIRE_THROWS_WITH(validate_stopping(bad, s, f, 2.0),
                      Catch::Matchers::ContainsSubstring("sorted"));
  bad = t;
  std::swap(bad.cubes[0], bad.cubes[1]);
  REQUIRE_THROWS_WITH(validate_stopping(bad, s, f, 2.0),
                      Catch::Matchers::ContainsSubstring("root"));
  REQUIRE_THROWS_WITH(validate_stopping(StoppingTree{}, s, f, 2.0),
                      Catch::Matchers::ContainsSubstring("root"));

  // a heavy nested chain of tree cubes overruns the packing constant
  const AtomicMeasure point = line_measure({{0.01, 4.0}});
  StoppingTree chain;
  chain.root = top;
  for (int lev = 0; lev <= 4; ++lev) {
    chain.cubes.push_back(DyadicCube{&g, lev, {0, 0, 0}});
    chain.data.push_back(double(lev + 1));
  }
  REQUIRE_THROWS_WITH(validate_stopping(chain, point, {100.0}, 1000.0),
                      Catch::Matchers::ContainsSubstring("packing"));
}

TEST_CASE("calderon zygmund stopping trees validate on seeded data") {
  DyadicGrid g{1, {}, 0, 8};
  const DyadicCube top{&g, 0, {}};
  const double ratio = 1.5;
  for (std::uint64_t seed : {201, 202, 203}) {
    GenSpec gs;
    gs.count = 8;
    const AtomicMeasure s = generate_measure(seed, gs);
    std::vector<double> f(s.atoms.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = double((i * 7) % 5) - 2.0;

    const StoppingTree t = cz_stopping(s, f, top, ratio);
    REQUIRE(t.c0 == 4.0);
    REQUIRE_NOTHROW(validate_stopping(t, s, f, ratio));
    REQUIRE(carleson_constant(t, s) <= ratio / (ratio - 1.0) * (1.0 + 1e-12));
    for (std::size_t i = 1; i < t.cubes.size(); ++i) {
      const int h = corona_home(t, t.cubes[i].parent());
      REQUIRE(h >= 0);
      REQUIRE(t.data[i] > ratio * t.data[std::size_t(h)]);
    }
  }
}

TEST_CASE("energy stopping trees calibrate until generations halve") {
  DyadicGrid g{1, {}, 0, 10};
  const GoodnessParams p = small_params();
  const DyadicCube top{&g, 0, {}};
  const std::vector<DyadicGrid> grids{g};

  for (std::uint64_t seed : {211, 212}) {
    GenSpec gs;
    gs.count = 8;
    const auto [s, w] = generate_pair(seed, gs);
    for (double alpha : {0.0, 0.5}) {
      const EnergyCorona res = energy_corona(s, w, alpha, top, p, grids);
      const StoppingTree& t = res.tree;
      REQUIRE(res.c_energy >= 1.0);
      const double base = deep_energy(s, w, alpha, p, {}, grids).value +
                          offset_a2(s, w, alpha, grids).value +
                          punctured_a2(s, w, alpha, Direction::forward, grids).value;
      REQUIRE(res.base == base);

      for (std::size_t i = 0; i < t.cubes.size(); ++i) {
        double kids = 0.0;
        for (std::size_t j : tree_children(t, i)) kids += cube_mass(s, t.cubes[j]);
        REQUIRE(kids <= 0.5 * cube_mass(s, t.cubes[i]) * (1.0 + 1e-12));
      }
      REQUIRE(carleson_constant(t, s) <= 2.0);
      for (std::size_t i = 0; i < t.cubes.size(); ++i) {
        const double x =
            stopping_energy(s, w, alpha, t.cubes[i], corona_cubes(t, i, s), p);
        REQUIRE(x <= res.c_energy * res.base * (1.0 + 1e-12));
      }

      // every corona cube failed the stopping criterion in its round, every
      // stopping cube met it inside the round that found it
      detail::EnergySums es(g, s, w, alpha, p, EnergyVariant{}, QuasiMap{}, p.tau);
      const double gam = res.c_energy * res.base;
      for (std::size_t i = 0; i < t.cubes.size(); ++i) {
        const auto plug = es.atoms_in(eval_cube(g, t.cubes[i].box()));
        for (const auto& c : corona_cubes(t, i, s)) {
          if (c == t.cubes[i]) continue;
          REQUIRE(es.deep_sum(c.box(), c.level, plug) <
                  gam * cube_mass(s, c) * (1.0 + 1e-12));
        }
      }
      for (std::size_t i = 1; i < t.cubes.size(); ++i) {
        const int h = corona_home(t, t.cubes[i].parent());
        REQUIRE(h >= 0);
        const auto plug = es.atoms_in(eval_cube(g, t.cubes[std::size_t(h)].box()));
        REQUIRE(es.deep_sum(t.cubes[i].box(), t.cubes[i].level, plug) >=
                gam * cube_mass(s, t.cubes[i]) * (1.0 - 1e-12));
      }

      // rebuilding at the calibrated value reproduces the tree
      const EnergyCorona fixed = energy_corona(s, w, alpha, top, p, grids, res.c_energy);
      REQUIRE(fixed.tree.cubes.size() == t.cubes.size());
      for (std::size_t i = 0; i < t.cubes.size(); ++i)
        REQUIRE(fixed.tree.cubes[i] == t.cubes[i]);

      const EnergyCorona huge = energy_corona(s, w, alpha, top, p, grids, 1e12);
      REQUIRE(huge.tree.cubes.size() == 1);
    }
  }

  // a single omega atom carries no energy at all
  GenSpec gs;
  gs.count = 8;
  const AtomicMeasure s1 = generate_measure(219, gs);
  const AtomicMeasure w1 = line_measure({{0.3, 1.0}});
  const EnergyCorona solo = energy_corona(s1, w1, 0.5, top, p, grids);
  REQUIRE(solo.tree.cubes.size() == 1);
  REQUIRE(solo.c_energy == 1.0);

  // coincident single atoms have no separated pairs and a zero base
  const AtomicMeasure pt = line_measure({{0.5, 1.0}});
  const EnergyCorona flat = energy_corona(pt, pt, 0.0, top, p, grids);
  REQUIRE(flat.base == 0.0);
  REQUIRE(flat.tree.cubes.size() == 1);
}

TEST_CASE("iterated stopping trees merge blocks and drop shadowed cubes") {
  DyadicGrid g{1, {}, 0, 5};
  const DyadicCube T{&g, 0, {}};
  const DyadicCube F1{&g, 1, {1, 0, 0}};
  const DyadicCube K1{&g, 1, {0, 0, 0}};
  const DyadicCube K2{&g, 2, {0, 0, 0}};
  const DyadicCube K3{&g, 2, {2, 0, 0}};
  const DyadicCube K4{&g, 2, {3, 0, 0}};

  const StoppingTree outer{T, {T, F1}, {1.0, 3.0}, 4.0};
  const StoppingTree innerT{T, {T, K1, K2, K3}, {0.2, 0.9, 5.0, 7.0}, 4.0};
  const StoppingTree innerF{F1, {F1, K4}, {2.5, 9.0}, 4.0};

  const StoppingTree merged = iterate_coronas(outer, {innerT, innerF});
  REQUIRE(merged.root == T);
  REQUIRE(merged.cubes.size() == 4);
  REQUIRE(merged.cubes[0] == T);
  REQUIRE(merged.cubes[1] == F1);
  REQUIRE(merged.cubes[2] == K2);
  REQUIRE(merged.cubes[3] == K4);
  REQUIRE(merged.data[0] == 1.0);
  REQUIRE(merged.data[1] == 3.0);
  REQUIRE(merged.data[2] == 5.0);
  REQUIRE(merged.data[3] == 9.0);
  REQUIRE(merged.c0 == 32.0);

  // K1 falls below the outer datum, K3 lives in the F1 block of the outer tree
  REQUIRE(tree_index(merged, K1) == -1);
  REQUIRE(tree_index(merged, K3) == -1);

  const StoppingTree trivT{T, {T}, {0.5}, 4.0};
  const StoppingTree trivF{F1, {F1}, {99.0}, 4.0};
  const StoppingTree easy = iterate_coronas(outer, {trivT, trivF});
  REQUIRE(easy.cubes.size() == 2);
  REQUIRE(easy.data[0] == 1.0);
  REQUIRE(easy.data[1] == 99.0);

  REQUIRE_THROWS_WITH(iterate_coronas(outer, {innerT}),
                      Catch::Matchers::ContainsSubstring("one inner tree"));
  REQUIRE_THROWS_WITH(iterate_coronas(outer, {innerF, innerT}),
                      Catch::Matchers::ContainsSubstring("root"));

  // seeded double corona: outer on f, inner on the corona projections of f
  DyadicGrid gs_grid{1, {}, 0, 8};
  const DyadicCube top{&gs_grid, 0, {}};
  for (std::uint64_t seed : {221, 222}) {
    GenSpec gs;
    gs.count = 8;
    const AtomicMeasure s = generate_measure(seed, gs);
    std::vector<double> f(s.atoms.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = double((i * 3) % 7) - 3.0;
    const StoppingTree out = cz_stopping(s, f, top, 2.0);

    const HaarSystem H(s, gs_grid);
    std::vector<StoppingTree> inners;
    double proj2 = 0.0;
    for (std::size_t i = 0; i < out.cubes.size(); ++i) {
      std::vector<double> pv(s.atoms.size(), 0.0);
      for (const auto& K : corona_cubes(out, i, s)) {
        const std::vector<double> d = H.delta_apply(K, f);
        for (std::size_t k = 0; k < pv.size(); ++k) pv[k] += d[k];
      }
      for (std::size_t k = 0; k < pv.size(); ++k)
        proj2 += s.atoms[k].mass * pv[k] * pv[k];
      inners.push_back(cz_stopping(s, pv, out.cubes[i], 2.0));
    }
    double f2 = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) f2 += s.atoms[k].mass * f[k] * f[k];
    REQUIRE(proj2 <= f2 * (1.0 + 1e-12));

    const StoppingTree two = iterate_coronas(out, inners);
    REQUIRE(two.c0 == 32.0);
    REQUIRE_NOTHROW(validate_stopping(two, s, f, 2.0));
    double qsum = 0.0;
    for (std::size_t i = 0; i < two.cubes.size(); ++i)
      qsum += two.data[i] * two.data[i] * cube_mass(s, two.cubes[i]);
    REQUIRE(qsum <= 2.0 * 16.0 * f2 * (1.0 + 1e-9));
  }
}

TEST_CASE("admissible pair families follow the shifted corona") {
  DyadicGrid g{1, {}, 0, 13};
  const GoodnessParams p = small_params();

  // a deep top cube whose two children split into a good and a bad one
  const DyadicCube A{&g, 5, {6, 0, 0}};
  const DyadicCube c12{&g, 6, {12, 0, 0}};
  const DyadicCube c13{&g, 6, {13, 0, 0}};
  REQUIRE(is_good_plain(c12, p));
  REQUIRE_FALSE(is_good_plain(c13, p));

  const StoppingTree t{A, {A}, {0.5}, 4.0};
  const AdmissiblePairs P = admissible_pairs(t, A, p, false);
  REQUIRE(!P.pairs.empty());
  bool saw12 = false, saw13 = false;
  for (const auto& [I, J] : P.pairs) {
    REQUIRE((I == c12 || I == c13));
    REQUIRE(J.level == 13);
    REQUIRE(is_good(J, p, GoodMode::tau));
    REQUIRE(is_deeply_embedded(J, I, p.rho - 1, p.eps));
    saw12 = saw12 || I == c12;
    saw13 = saw13 || I == c13;
  }
  REQUIRE(saw12);
  REQUIRE(saw13);

  const AdmissiblePairs R = admissible_pairs(t, A, p, true);
  REQUIRE(R.reduced);
  REQUIRE(!R.pairs.empty());
  REQUIRE(R.pairs.size() < P.pairs.size());
  for (const auto& [I, J] : R.pairs) REQUIRE(I == c12);

  REQUIRE_THROWS_WITH(admissible_pairs(t, c12, p, false),
                      Catch::Matchers::ContainsSubstring("stopping"));

  DyadicGrid shallow{1, {}, 0, 7};
  const DyadicCube A2{&shallow, 0, {}};
  const StoppingTree t2{A2, {A2}, {0.0}, 4.0};
  REQUIRE(admissible_pairs(t2, A2, p, false).pairs.empty());
}

TEST_CASE("stopping children pull nearby cubes into the parent shift") {
  DyadicGrid g{1, {}, 0, 14};
  const GoodnessParams p = small_params();
  const DyadicCube A{&g, 0, {}};
  const DyadicCube Jn = pick_good(g, p, 11, 0.3);
  const DyadicCube F = Jn.ancestor(2);
  const StoppingTree t{A, {A, F}, {1.0, 2.0}, 4.0};

  REQUIRE(corona_home(t, Jn) == 1);
  REQUIRE(in_shifted_corona(t, 0, Jn, p));
  const AdmissiblePairs P = admissible_pairs(t, A, p, false);
  std::size_t hits = 0;
  for (const auto& [I, J] : P.pairs)
    if (J == Jn) {
      ++hits;
      REQUIRE(I.contains(F));
      REQUIRE(!(I == F));
    }
  REQUIRE(hits == 4);

  // cubes tau or deeper inside the child belong to the child shift only
  bool found_deep = false;
  for (std::int64_t k = F.idx[0] << 4; k < ((F.idx[0] + 1) << 4) && !found_deep; ++k) {
    const DyadicCube Jd{&g, 13, {k, 0, 0}};
    if (!is_good(Jd, p, GoodMode::tau) || !in_shifted_corona(t, 1, Jd, p)) continue;
    found_deep = true;
    REQUIRE_FALSE(in_shifted_corona(t, 0, Jd, p));
    for (const auto& pr : P.pairs) REQUIRE(!(pr.second == Jd));
  }
  REQUIRE(found_deep);
}

TEST_CASE("shifted coronas along a tree never overlap") {
  DyadicGrid g{1, {}, 0, 14};
  const GoodnessParams p = small_params();
  const DyadicCube A{&g, 0, {}};
  const DyadicCube Jn = pick_good(g, p, 11, 0.3);
  const StoppingTree t{A, {A, Jn.ancestor(2), Jn}, {1.0, 2.0, 3.0}, 4.0};

  for (int lev = 0; lev <= g.bottom_level; ++lev)
    for (std::int64_t k = 0; k < (std::int64_t(1) << lev); ++k) {
      const DyadicCube J{&g, lev, {k, 0, 0}};
      int count = 0;
      for (std::size_t i = 0; i < t.cubes.size(); ++i)
        if (in_shifted_corona(t, i, J, p)) ++count;
      REQUIRE(count <= 1);
      REQUIRE(count <= p.tau);
    }
}

TEST_CASE("bottom up split conserves pairs and shrinks the size functional") {
  CoronaFixture fx;
  build_fixture(fx);
  const DyadicGrid& g = fx.g;
  const GoodnessParams& p = fx.p;
  const AdmissiblePairs& P = fx.P;
  REQUIRE(!P.pairs.empty());

  const double eps = 0.5;
  const BottomUpSplit sp = bottom_up_split(P, eps, fx.s, fx.w, 0.0, p);
  const SplitReport& rep = sp.report;
  REQUIRE(rep.rho == 1.5);
  REQUIRE(rep.size2 == size_functional(P, fx.s, fx.w, 0.0, p).value);
  REQUIRE(rep.size2 > 0.0);
  REQUIRE(!rep.levels.empty());
  REQUIRE(!rep.levels.front().empty());

  // exact multiset conservation of the pairs
  auto key = [](const std::pair<DyadicCube, DyadicCube>& pr) {
    return std::make_tuple(pr.first.level, pr.first.idx, pr.second.level, pr.second.idx);
  };
  auto lt = [&](const auto& a, const auto& b) { return key(a) < key(b); };
  std::vector<std::pair<DyadicCube, DyadicCube>> orig = P.pairs, got = sp.big.pairs;
  for (const auto& piece : sp.small)
    got.insert(got.end(), piece.pairs.begin(), piece.pairs.end());
  std::sort(orig.begin(), orig.end(), lt);
  std::sort(got.begin(), got.end(), lt);
  REQUIRE(orig.size() == got.size());
  for (std::size_t i = 0; i < orig.size(); ++i) REQUIRE(key(orig[i]) == key(got[i]));
  REQUIRE(rep.big_pairs + rep.small_pairs == P.pairs.size());
  REQUIRE(rep.big_pairs == sp.big.pairs.size());

  // every small piece obeys the advertised fraction of the size functional
  REQUIRE(sp.big.reduced);
  REQUIRE_NOTHROW(validate_admissible(sp.big, p));
  double small_max = 0.0;
  for (const auto& piece : sp.small) {
    REQUIRE(!piece.reduced);
    REQUIRE_NOTHROW(validate_admissible(piece, p));
    const double v = size_functional(piece, fx.s, fx.w, 0.0, p).value;
    small_max = std::max(small_max, v);
    REQUIRE(v <= eps * rep.size2 * (1.0 + 1e-12));
  }
  REQUIRE(rep.small_max2 == small_max);

  // the selection tree is consistent with its depth labels
  std::vector<DyadicCube> flat;
  for (const auto& lv : rep.levels) flat.insert(flat.end(), lv.begin(), lv.end());
  sort_cubes(flat);
  REQUIRE(flat.size() == rep.tree.size());
  for (std::size_t i = 0; i < flat.size(); ++i) REQUIRE(flat[i] == rep.tree[i]);
  for (std::size_t i = 0; i < rep.tree.size(); ++i) {
    int d = 0;
    for (std::size_t j = 0; j < rep.tree.size(); ++j)
      if (j != i && rep.tree[j].contains(rep.tree[i])) ++d;
    REQUIRE(rep.depth[i] == d);
  }

  // replay the ground-floor selection against an independent enumeration
  const HaarSystem H(fx.w, g);
  std::vector<DyadicCube> pi2, pi_all;
  for (const auto& [I, J] : P.pairs) {
    pi2.push_back(J);
    pi_all.push_back(I);
    pi_all.push_back(J);
  }
  sort_cubes(pi2);
  sort_cubes(pi_all);
  UpstairsMeasure upstairs;
  const QuasiMap map0{};
  for (const auto& J : pi2) {
    const double e = H.delta_energy_x(J);
    if (e <= 0.0) continue;
    UpstairsAtom a;
    a.pre_center = J.center();
    a.p.x = map0.forward(a.pre_center, g.n);
    a.p.t = J.side();
    a.weight = e;
    a.J = J;
    upstairs.atoms.push_back(a);
  }
  std::set<std::pair<int, IdxVec>> seen;
  std::vector<DyadicCube> cands;
  for (const auto& J : pi2)
    for (int d = p.tau; J.has_ancestor(d); ++d) {
      const DyadicCube K = J.ancestor(d);
      if (!seen.insert({K.level, K.idx}).second) continue;
      if (!is_good_plain(K, p)) continue;
      for (const auto& c : pi_all)
        if (c.contains(K)) {
          cands.push_back(K);
          break;
        }
    }
  sort_cubes(cands);
  auto crit = [&](const DyadicCube& K) -> double {
    const double ms = cube_mass(fx.s, K);
    if (ms <= 0.0) return -1.0;
    AtomicMeasure fm;
    fm.n = fx.s.n;
    for (const Atom& a : fx.s.atoms)
      if (P.A.contains_point(a.u) && !K.contains_point(a.u)) fm.atoms.push_back(a);
    const QuasiCube qc{K, &map0};
    const double pv = poisson(qc, fm, 0.0);
    double tent = 0.0;
    for (const auto& a : upstairs.atoms)
      if (upstairs_in_tent(a, qc, TentMode::tau_deep, p.tau)) tent += a.weight;
    const double q = pv / K.side();
    return q * q * tent / ms;
  };
  const double bar = eps * rep.size2;
  std::vector<DyadicCube> qual;
  for (const auto& K : cands)
    if (crit(K) >= bar) qual.push_back(K);
  std::vector<DyadicCube> minimal;
  for (const auto& K : qual) {
    bool keep = true;
    for (const auto& C : qual)
      if (!(C == K) && K.contains(C)) keep = false;
    if (keep) minimal.push_back(K);
  }
  sort_cubes(minimal);
  REQUIRE(minimal.size() == rep.levels.front().size());
  for (std::size_t i = 0; i < minimal.size(); ++i)
    REQUIRE(minimal[i] == rep.levels.front()[i]);

  REQUIRE_THROWS_AS(bottom_up_split(P, 0.0, fx.s, fx.w, 0.0, p), std::invalid_argument);
  REQUIRE_THROWS_AS(bottom_up_split(P, 1.0, fx.s, fx.w, 0.0, p), std::invalid_argument);
  AdmissiblePairs raw = P;
  raw.reduced = false;
  REQUIRE_THROWS_WITH(bottom_up_split(raw, eps, fx.s, fx.w, 0.0, p),
                      Catch::Matchers::ContainsSubstring("reduced"));

  AdmissiblePairs none;
  none.A = P.A;
  none.reduced = true;
  const BottomUpSplit empty = bottom_up_split(none, eps, fx.s, fx.w, 0.0, p);
  REQUIRE(empty.big.pairs.empty());
  REQUIRE(empty.small.empty());
  REQUIRE(empty.report.size2 == 0.0);

  // a collection with no upstairs energy splits trivially into the big part
  const AtomicMeasure w1 = line_measure({{0.06, 1.0}});
  const BottomUpSplit zero = bottom_up_split(P, eps, fx.s, w1, 0.0, p);
  REQUIRE(zero.report.size2 == 0.0);
  REQUIRE(zero.small.empty());
  REQUIRE(zero.big.pairs.size() == P.pairs.size());

  const auto rounds = size_lemma_recursion(P, eps, fx.s, fx.w, 0.0, p, 10);
  REQUIRE(!rounds.empty());
  REQUIRE(rounds.size() <= 10);
  REQUIRE(rounds.front().max_size2 <= eps * rep.size2 * (1.0 + 1e-12));
  for (std::size_t k = 1; k < rounds.size(); ++k)
    REQUIRE(rounds[k].max_size2 <= eps * rounds[k - 1].max_size2 * (1.0 + 1e-12));
  if (rounds.size() < 10) REQUIRE(rounds.back().pieces == 0);
}

TEST_CASE("stopping form values are assembled from telescoped averages") {
  CoronaFixture fx;
  build_fixture(fx);
  const DyadicGrid& g = fx.g;
  const GoodnessParams& p = fx.p;
  const AdmissiblePairs& P = fx.P;

  KernelSpec ks;
  ks.n = 1;
  ks.alpha = 0.25;
  ks.truncation = Truncation::none;
  ks.delta_smooth = 0.5;

  const StopFormValues vals = sublinear_stop_form(P, fx.f, fx.gv, fx.s, fx.w, ks, p);
  REQUIRE(vals.b1 > 0.0);
  REQUIRE(vals.b1_delta > 0.0);

  // with the only omega pairs sitting inside single cubes, the smoothed
  // Poisson kernel can never beat the plain one
  REQUIRE(vals.b1_delta <= vals.b1 * (1.0 + 1e-12));

  const std::vector<double> gz(fx.w.atoms.size(), 0.0);
  const StopFormValues zg = sublinear_stop_form(P, fx.f, gz, fx.s, fx.w, ks, p);
  REQUIRE(zg.b1 == 0.0);
  REQUIRE(zg.b1_delta == 0.0);

  // constant data telescope away exactly: dyadic masses make the averages exact
  const std::vector<double> fc(fx.s.atoms.size(), 3.0);
  const StopFormValues zc = sublinear_stop_form(P, fc, fx.gv, fx.s, fx.w, ks, p);
  REQUIRE(zc.b1 == 0.0);
  REQUIRE(zc.b1_delta == 0.0);

  // independent reassembly from the published pieces
  const HaarSystem Hw(fx.w, g);
  const HaarSystem Hs(fx.s, g);
  const QuasiMap map0{};
  std::map<DyadicCube, std::vector<DyadicCube>, CubeLess> byj;
  for (const auto& [I, J] : P.pairs) byj[J].push_back(I);
  StopFormValues manual;
  double ahat = 0.0;
  {
    std::vector<DyadicCube> walk{P.A};
    while (!walk.empty()) {
      const DyadicCube c = walk.back();
      walk.pop_back();
      const double ms = cube_mass(fx.s, c);
      if (ms <= 0.0) continue;
      double num = 0.0;
      const EvalCube e = eval_cube(g, c.box());
      for (std::size_t i = 0; i < fx.s.atoms.size(); ++i)
        if (detail::eval_contains(e, fx.s.atoms[i].u))
          num += fx.s.atoms[i].mass * std::fabs(fx.f[i]);
      ahat = std::max(ahat, num / ms);
      if (c.level >= g.bottom_level) continue;
      for (const auto& k : c.children()) walk.push_back(k);
    }
  }
  for (const auto& [J, Is] : byj) {
    const double dg2 = Hw.delta_energy(J, fx.gv);
    if (dg2 <= 0.0) continue;
    const std::vector<double> phi = stop_form_multiplier(P, J, fx.f, fx.s);

    DyadicCube inner = Is.front();
    for (const auto& I : Is)
      if (I.level > inner.level) inner = I;
    for (std::size_t i = 0; i < fx.s.atoms.size(); ++i) {
      REQUIRE(std::fabs(phi[i]) <= 2.0 * ahat * (1.0 + 1e-12));
      if (inner.contains_point(fx.s.atoms[i].u)) REQUIRE(phi[i] == 0.0);
    }

    // the coefficients match the Haar averages of the parent differences
    for (const auto& I : Is) {
      if (cube_mass(fx.s, I) <= 0.0) continue;
      const std::vector<double> dv = Hs.delta_apply(I.parent(), fx.f);
      const double havg = Hs.cube_average(I, dv);
      double ms = 0.0, num = 0.0, msp = 0.0, nump = 0.0;
      const EvalCube e = eval_cube(g, I.box());
      const EvalCube ep = eval_cube(g, I.parent().box());
      for (std::size_t i = 0; i < fx.s.atoms.size(); ++i) {
        if (detail::eval_contains(e, fx.s.atoms[i].u)) {
          ms += fx.s.atoms[i].mass;
          num += fx.s.atoms[i].mass * fx.f[i];
        }
        if (detail::eval_contains(ep, fx.s.atoms[i].u)) {
          msp += fx.s.atoms[i].mass;
          nump += fx.s.atoms[i].mass * fx.f[i];
        }
      }
      REQUIRE(havg == Catch::Approx(num / ms - nump / msp).margin(1e-12));
    }

    AtomicMeasure fm;
    fm.n = 1;
    for (std::size_t i = 0; i < fx.s.atoms.size(); ++i) {
      if (phi[i] == 0.0) continue;
      if (!P.A.contains_point(fx.s.atoms[i].u) || inner.contains_point(fx.s.atoms[i].u))
        continue;
      Atom a = fx.s.atoms[i];
      a.mass *= std::fabs(phi[i]);
      fm.atoms.push_back(a);
    }
    const QuasiCube qc{J, &map0};
    const double dx = Hw.delta_energy_x(J);
    manual.b1 += poisson(qc, fm, ks.alpha) / J.side() * std::sqrt(dx) * std::sqrt(dg2);
    double px2 = 0.0;
    for (const auto& kv : Hw.bases())
      if (J.contains(kv.first)) px2 += Hw.delta_energy_x(kv.first);
    manual.b1_delta += poisson(qc, fm, ks.alpha, 1.0 + ks.delta_smooth) / J.side() *
                       std::sqrt(px2) * std::sqrt(dg2);
  }
  REQUIRE(vals.b1 == Catch::Approx(manual.b1).epsilon(1e-12));
  REQUIRE(vals.b1_delta == Catch::Approx(manual.b1_delta).epsilon(1e-12));

  // the multiplier is sublinear under splitting the collection
  DyadicCube Jsub = P.pairs.front().second;
  for (const auto& [J, Is] : byj)
    if (Is.size() > byj.at(Jsub).size()) Jsub = J;
  REQUIRE(byj.at(Jsub).size() == 4);
  const std::vector<double> whole = stop_form_multiplier(P, Jsub, fx.f, fx.s);
  AdmissiblePairs p1, p2;
  p1.A = P.A;
  p2.A = P.A;
  for (std::size_t i = 0; i < P.pairs.size(); ++i)
    (i % 2 ? p1 : p2).pairs.push_back(P.pairs[i]);
  const std::vector<double> h1 = stop_form_multiplier(p1, Jsub, fx.f, fx.s);
  const std::vector<double> h2 = stop_form_multiplier(p2, Jsub, fx.f, fx.s);
  for (std::size_t i = 0; i < whole.size(); ++i)
    REQUIRE(std::fabs(whole[i]) <=
            std::fabs(h1[i]) + std::fabs(h2[i]) + 1e-12 * (1.0 + std::fabs(whole[i])));

  REQUIRE_THROWS_AS(sublinear_stop_form(P, {1.0}, fx.gv, fx.s, fx.w, ks, p),
                    std::invalid_argument);
  KernelSpec bad = ks;
  bad.n = 2;
  REQUIRE_THROWS_WITH(sublinear_stop_form(P, fx.f, fx.gv, fx.s, fx.w, bad, p),
                      Catch::Matchers::ContainsSubstring("dimension"));
}
