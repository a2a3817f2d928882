#include <catch2/catch_amalgamated.hpp>

#include "twoweight/measures.hpp"

using namespace tw;

namespace {
const DyadicGrid g1{1, {}, -2, 8};

AtomicMeasure meas1(std::initializer_list<std::pair<double, double>> pts) {
  std::vector<Point> us;
  std::vector<double> ms;
  for (auto [u, m] : pts) {
    us.push_back(make_point({u}));
    ms.push_back(m);
  }
  return AtomicMeasure::from_preimage(1, us, ms);
}

DyadicCube cube1(int level, std::int64_t i) { return DyadicCube{&g1, level, {i, 0, 0}}; }
}  // namespace

TEST_CASE("cube_mass uses half-open membership") {
  auto mu = meas1({{0.25, 1.0}, {0.75, 3.0}});
  REQUIRE(cube_mass(mu, cube1(0, 0)) == 4.0);
  REQUIRE(cube_mass(mu, cube1(1, 0)) == 1.0);

  auto edge = meas1({{0.5, 2.0}});
  REQUIRE(cube_mass(edge, cube1(1, 0)) == 0.0);
  REQUIRE(cube_mass(edge, cube1(1, 1)) == 2.0);
}

TEST_CASE("cube_mass is additive over children") {
  GenSpec spec;
  spec.n = 2;
  spec.count = 40;
  spec.map = QuasiMap{QuasiMap::Kind::shear, 0.4};
  DyadicGrid g2{2, make_point({0.05, -0.1}), -1, 8};
  auto mu = generate_measure(99, spec);
  for (int k = -1; k <= 6; ++k) {
    auto cubes = enumerate_cubes(g2, k, support_preimage(mu));
    for (const auto& q : cubes) {
      double kids = 0;
      for (const auto& c : q.children()) kids += cube_mass(mu, c);
      REQUIRE(kids == Catch::Approx(cube_mass(mu, q)).margin(1e-12));
    }
  }
}

TEST_CASE("punctured_mass removes the largest common mass only") {
  auto w = meas1({{0.0, 1.0}, {1.0, 2.0}});
  CommonPointSet P;
  P.points = {make_point({0.0}), make_point({1.0})};
  auto Q = cube1(-1, 0);  // [0,2)
  REQUIRE(punctured_mass(w, Q, P) == 1.0);

  CommonPointSet empty;
  REQUIRE(punctured_mass(w, Q, empty) == cube_mass(w, Q));

  auto tie = meas1({{0.0, 2.0}, {1.0, 2.0}});
  REQUIRE(punctured_mass(tie, Q, P) == 2.0);

  REQUIRE(punctured_mass(w, Q, P) <= cube_mass(w, Q));
  CommonPointSet outside;
  outside.points = {make_point({3.0})};
  REQUIRE(punctured_mass(w, Q, outside) == cube_mass(w, Q));
}

TEST_CASE("common_points uses exact coordinate equality") {
  auto s = meas1({{0.25, 1.0}, {0.5, 1.0}});
  auto w1 = meas1({{0.75, 2.0}});
  REQUIRE(common_points(s, w1).points.empty());

  auto w2 = meas1({{0.5, 5.0}, {0.9, 1.0}});
  auto P = common_points(s, w2);
  REQUIRE(P.points.size() == 1);
  REQUIRE(P.points[0][0] == 0.5);

  auto w3 = meas1({{0.5 + 1e-15, 5.0}});
  REQUIRE(common_points(s, w3).points.empty());
}

TEST_CASE("greedy_split follows the alternating selection") {
  const double p1 = 0.1, p2 = 0.3, p3 = 0.6, p4 = 0.9;
  auto s = meas1({{p1, 4.0}, {p2, 3.0}, {p3, 2.0}, {p4, 1.0}});
  auto w = meas1({{p1, 1.0}, {p2, 2.0}, {p3, 3.0}, {p4, 4.0}});
  auto Q = cube1(0, 0);

  auto split = greedy_split(s, w, Q);
  REQUIRE(split.picks.size() == 4);
  REQUIRE(split.picks[0][0] == p1);
  REQUIRE(split.picks[1][0] == p4);
  REQUIRE(split.picks[2][0] == p2);
  REQUIRE(split.picks[3][0] == p3);
  REQUIRE_FALSE(split.phantom);

  REQUIRE(split.sigma.total_mass() == 7.0);
  REQUIRE(split.omega.total_mass() == 7.0);
  REQUIRE(common_points(split.sigma, split.omega).points.empty());

  const auto P = common_points(s, w);
  REQUIRE(split.sigma.total_mass() >= 0.5 * cube_mass(s, Q));
  REQUIRE(split.omega.total_mass() >= 0.5 * punctured_mass(w, Q, P));
}

TEST_CASE("greedy_split edge cases") {
  auto Q = cube1(0, 0);

  auto s = meas1({{0.2, 1.0}, {0.7, 2.0}});
  auto w = meas1({{0.4, 3.0}});
  auto split = greedy_split(s, w, Q);
  REQUIRE(split.sigma.total_mass() == 3.0);
  REQUIRE(split.omega.total_mass() == 3.0);
  REQUIRE(split.picks.empty());

  // single common point is kept in sigma, dropped from omega
  auto w2 = meas1({{0.2, 3.0}, {0.4, 1.0}});
  auto split2 = greedy_split(s, w2, Q);
  REQUIRE(split2.phantom);
  REQUIRE(split2.sigma.total_mass() == 3.0);
  REQUIRE(split2.omega.total_mass() == 1.0);
  REQUIRE(common_points(split2.sigma, split2.omega).points.empty());
}

TEST_CASE("greedy_split bounds hold on random instances") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    GenSpec spec;
    spec.kind = GenSpec::Kind::pair_with_common;
    spec.n = (seed % 2) ? 1 : 2;
    spec.count = 16;
    spec.common_fraction = 0.5 + 0.5 * double(seed % 3) / 2.0;
    DyadicGrid g{spec.n, {}, 0, 8};
    auto [s, w] = generate_pair(seed, spec);
    DyadicCube Q{&g, 0, {}};

    auto split = greedy_split(s, w, Q);
    const auto P = common_points(s, w);
    REQUIRE(split.sigma.total_mass() >= 0.5 * cube_mass(s, Q) - 1e-15);
    REQUIRE(split.omega.total_mass() >= 0.5 * punctured_mass(w, Q, P) - 1e-15);
    REQUIRE(common_points(split.sigma, split.omega).points.empty());
    for (const Atom& a : split.sigma.atoms) REQUIRE(Q.contains_point(a.u));
    for (const Atom& a : split.omega.atoms) REQUIRE(Q.contains_point(a.u));
  }
}

TEST_CASE("generators are deterministic") {
  GenSpec spec;
  spec.n = 2;
  spec.count = 12;
  auto a = generate_measure(7, spec);
  auto b = generate_measure(7, spec);
  REQUIRE(a.atoms.size() == 12);
  for (std::size_t i = 0; i < a.atoms.size(); ++i) {
    REQUIRE(a.atoms[i].u == b.atoms[i].u);
    REQUIRE(a.atoms[i].mass == b.atoms[i].mass);
  }
  auto c = generate_measure(8, spec);
  REQUIRE_FALSE(a.atoms[0].u == c.atoms[0].u);

  spec.kind = GenSpec::Kind::pair_with_common;
  spec.common_fraction = 0.0;
  auto [s0, w0] = generate_pair(3, spec);
  REQUIRE(common_points(s0, w0).points.empty());

  spec.count = 5;
  spec.common_fraction = 1.0;
  auto [s1, w1] = generate_pair(3, spec);
  REQUIRE(common_points(s1, w1).points.size() == 5);

  spec.kind = GenSpec::Kind::line_supported;
  spec.count = 20;
  auto line = generate_measure(11, spec);
  const Point d0 = line.atoms[0].u;
  const Point d1 = line.atoms[1].u;
  for (const Atom& a2 : line.atoms) {
    const double cross = (a2.u[0] - d0[0]) * (d1[1] - d0[1]) - (a2.u[1] - d0[1]) * (d1[0] - d0[0]);
    REQUIRE(std::abs(cross) < 1e-12);
  }

  for (const Atom& at : line.atoms) {
    Point fwd = spec.map.forward(at.u, 2);
    REQUIRE(fwd == at.x);
  }
}

TEST_CASE("validate rejects degenerate measures") {
  auto ok = meas1({{0.1, 1.0}, {0.2, 2.0}});
  REQUIRE_NOTHROW(ok.validate());
  AtomicMeasure bad = ok;
  bad.atoms[0].mass = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  AtomicMeasure dup = ok;
  dup.atoms[1].u = dup.atoms[0].u;
  REQUIRE_THROWS_AS(dup.validate(), std::invalid_argument);
}
