#pragma once

// Atomic measures carry both image coordinates (where kernels act) and
// cached preimage coordinates (where dyadic membership is decided, exactly).

#include <vector>

#include "geometry.hpp"

namespace tw {

struct Atom {
  Point x{};  // image coordinates
  Point u{};  // preimage coordinates
  double mass = 0.0;
};

struct AtomicMeasure {
  int n = 1;
  std::vector<Atom> atoms;

  double total_mass() const {
    double s = 0;
    for (const Atom& a : atoms) s += a.mass;
    return s;
  }

  void validate() const {
    for (const Atom& a : atoms)
      if (!(a.mass > 0.0)) throw std::invalid_argument("atom masses must be positive");
    for (std::size_t i = 0; i < atoms.size(); ++i)
      for (std::size_t j = i + 1; j < atoms.size(); ++j)
        if (atoms[i].u == atoms[j].u) throw std::invalid_argument("atom points must be distinct");
  }

  static AtomicMeasure from_preimage(int n, const std::vector<Point>& us,
                                     const std::vector<double>& ms, const QuasiMap& map = {}) {
    AtomicMeasure m;
    m.n = n;
    m.atoms.reserve(us.size());
    for (std::size_t i = 0; i < us.size(); ++i)
      m.atoms.push_back(Atom{map.forward(us[i], n), us[i], ms[i]});
    return m;
  }

  static AtomicMeasure from_image(int n, const std::vector<Point>& xs,
                                  const std::vector<double>& ms, const QuasiMap& map = {}) {
    AtomicMeasure m;
    m.n = n;
    m.atoms.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i)
      m.atoms.push_back(Atom{xs[i], map.inverse(xs[i], n), ms[i]});
    return m;
  }
};

inline std::vector<Point> support_preimage(const AtomicMeasure& m) {
  std::vector<Point> out;
  out.reserve(m.atoms.size());
  for (const Atom& a : m.atoms) out.push_back(a.u);
  return out;
}

inline std::vector<Point> joint_support_preimage(const AtomicMeasure& s, const AtomicMeasure& w) {
  std::vector<Point> out = support_preimage(s);
  const auto v = support_preimage(w);
  out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::vector<Point> dedup_points(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

inline double cube_mass(const AtomicMeasure& m, const DyadicCube& Q) {
  double s = 0;
  for (const Atom& a : m.atoms)
    if (Q.contains_point(a.u)) s += a.mass;
  return s;
}

inline double mass_at(const AtomicMeasure& m, const Point& u) {
  double s = 0;
  for (const Atom& a : m.atoms)
    if (a.u == u) s += a.mass;
  return s;
}

inline AtomicMeasure restrict_measure(const AtomicMeasure& m, const DyadicCube& Q) {
  AtomicMeasure out;
  out.n = m.n;
  for (const Atom& a : m.atoms)
    if (Q.contains_point(a.u)) out.atoms.push_back(a);
  return out;
}

inline AtomicMeasure restrict_complement(const AtomicMeasure& m, const DyadicCube& Q) {
  AtomicMeasure out;
  out.n = m.n;
  for (const Atom& a : m.atoms)
    if (!Q.contains_point(a.u)) out.atoms.push_back(a);
  return out;
}

// Restriction by a half-open real box in grid-relative preimage coordinates.
inline AtomicMeasure restrict_rbox(const AtomicMeasure& m, const RBox& b, int n,
                                   const Point& grid_origin, bool inside) {
  AtomicMeasure out;
  out.n = m.n;
  for (const Atom& a : m.atoms) {
    Point rel = a.u;
    for (int i = 0; i < n; ++i) rel[i] -= grid_origin[i];
    if (b.contains_point(rel, n) == inside) out.atoms.push_back(a);
  }
  return out;
}

struct CommonPointSet {
  std::vector<Point> points;  // preimage coordinates, lexicographically sorted
};

inline CommonPointSet common_points(const AtomicMeasure& s, const AtomicMeasure& w) {
  CommonPointSet out;
  for (const Atom& a : s.atoms)
    for (const Atom& b : w.atoms)
      if (a.u == b.u) out.points.push_back(a.u);
  std::sort(out.points.begin(), out.points.end());
  out.points.erase(std::unique(out.points.begin(), out.points.end()), out.points.end());
  return out;
}

inline double punctured_mass(const AtomicMeasure& m, const DyadicCube& Q,
                             const CommonPointSet& P) {
  double total = cube_mass(m, Q);
  double largest = 0;
  for (const Point& p : P.points)
    if (Q.contains_point(p)) largest = std::max(largest, mass_at(m, p));
  return total - largest;
}

struct GreedySplit {
  AtomicMeasure sigma;  // keeps sigma mass at odd-step picks
  AtomicMeasure omega;  // keeps omega mass at even-step picks
  std::vector<Point> picks;
  bool phantom = false;  // odd number of common points in Q
};

// Alternating greedy selection over the common points in Q, as in the proof
// that punctures the pair: odd steps keep the sigma mass (dropping it from
// omega), even steps the reverse. Output measures are restricted to Q and
// share no common point mass.
inline GreedySplit greedy_split(const AtomicMeasure& s, const AtomicMeasure& w,
                                const DyadicCube& Q) {
  const CommonPointSet P = common_points(s, w);
  std::vector<Point> remaining;
  for (const Point& p : P.points)
    if (Q.contains_point(p)) remaining.push_back(p);

  GreedySplit out;
  std::vector<Point> drop_from_sigma, drop_from_omega;
  bool sigma_turn = true;
  while (!remaining.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < remaining.size(); ++i) {
      const double mi = sigma_turn ? mass_at(s, remaining[i]) : mass_at(w, remaining[i]);
      const double mb = sigma_turn ? mass_at(s, remaining[best]) : mass_at(w, remaining[best]);
      if (mi > mb || (mi == mb && remaining[i] < remaining[best])) best = i;
    }
    const Point p = remaining[best];
    remaining.erase(remaining.begin() + std::ptrdiff_t(best));
    out.picks.push_back(p);
    (sigma_turn ? drop_from_omega : drop_from_sigma).push_back(p);
    sigma_turn = !sigma_turn;
  }
  out.phantom = (out.picks.size() % 2) == 1;

  auto keep = [&](const AtomicMeasure& m, const std::vector<Point>& drops) {
    AtomicMeasure r;
    r.n = m.n;
    for (const Atom& a : m.atoms) {
      if (!Q.contains_point(a.u)) continue;
      if (std::find(drops.begin(), drops.end(), a.u) != drops.end()) continue;
      r.atoms.push_back(a);
    }
    return r;
  };
  out.sigma = keep(s, drop_from_sigma);
  out.omega = keep(w, drop_from_omega);
  return out;
}

enum class MassLaw { unit, uniform, dyadic };

struct GenSpec {
  enum class Kind { uniform_box, line_supported, pair_with_common } kind = Kind::uniform_box;
  int n = 1;
  int count = 8;
  MassLaw mass_law = MassLaw::uniform;
  double common_fraction = 0.0;  // pair_with_common only
  Point box_lo{};
  double box_side = 1.0;
  QuasiMap map{};
};

namespace detail {
inline double draw_mass(std::mt19937_64& rng, MassLaw law) {
  switch (law) {
    case MassLaw::unit:
      return 1.0;
    case MassLaw::uniform:
      return 0.5 + uniform53(rng);
    case MassLaw::dyadic:
      return std::ldexp(1.0, int(rng() % 7) - 3);
  }
  return 1.0;
}

inline Point draw_point(std::mt19937_64& rng, const GenSpec& g) {
  Point u = g.box_lo;
  for (int i = 0; i < g.n; ++i) u[i] += g.box_side * uniform53(rng);
  return u;
}
}  // namespace detail

inline AtomicMeasure generate_measure(std::uint64_t seed, const GenSpec& g) {
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::vector<Point> us;
  std::vector<double> ms;
  if (g.kind == GenSpec::Kind::line_supported) {
    const Point a = detail::draw_point(rng, g), b = detail::draw_point(rng, g);
    for (int i = 0; i < g.count; ++i) {
      const double t = uniform53(rng);
      Point u{};
      for (int c = 0; c < g.n; ++c) u[c] = a[c] + t * (b[c] - a[c]);
      us.push_back(u);
      ms.push_back(detail::draw_mass(rng, g.mass_law));
    }
  } else {
    for (int i = 0; i < g.count; ++i) {
      us.push_back(detail::draw_point(rng, g));
      ms.push_back(detail::draw_mass(rng, g.mass_law));
    }
  }
  return AtomicMeasure::from_preimage(g.n, us, ms, g.map);
}

inline std::pair<AtomicMeasure, AtomicMeasure> generate_pair(std::uint64_t seed, const GenSpec& g) {
  std::mt19937_64 rng(mix_seed(seed, 1));
  const int shared = std::min(g.count, int(std::floor(g.common_fraction * g.count)));
  std::vector<Point> us, uw;
  std::vector<double> msk, mwk;
  for (int i = 0; i < shared; ++i) {
    const Point u = detail::draw_point(rng, g);
    us.push_back(u);
    uw.push_back(u);
    msk.push_back(detail::draw_mass(rng, g.mass_law));
    mwk.push_back(detail::draw_mass(rng, g.mass_law));
  }
  for (int i = shared; i < g.count; ++i) {
    us.push_back(detail::draw_point(rng, g));
    msk.push_back(detail::draw_mass(rng, g.mass_law));
  }
  for (int i = shared; i < g.count; ++i) {
    uw.push_back(detail::draw_point(rng, g));
    mwk.push_back(detail::draw_mass(rng, g.mass_law));
  }
  return {AtomicMeasure::from_preimage(g.n, us, msk, g.map),
          AtomicMeasure::from_preimage(g.n, uw, mwk, g.map)};
}

}  // namespace tw
