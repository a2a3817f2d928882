#pragma once

// Fractional Poisson integrals of atomic measures. Kernel distances are in
// image coordinates (atom positions, mapped cube centers); cube membership
// stays in preimage coordinates.

#include "haar.hpp"

namespace tw {

struct PoissonParams {
  double alpha = 0.0;
  double m = 1.0;

  void validate(int n) const {
    if (!(alpha >= 0.0 && alpha < double(n))) throw std::invalid_argument("alpha outside [0,n)");
    if (!(m > 0.0) || !(double(n) + m - alpha > 0.0))
      throw std::invalid_argument("order must satisfy n+m-alpha > 0");
  }
};

inline double poisson(const QuasiCube& Q, const AtomicMeasure& mu, double alpha, double m = 1.0) {
  const int n = Q.pre.grid->n;
  const double l = Q.side();
  const Point c = Q.qcenter();
  double s = 0;
  for (const Atom& a : mu.atoms)
    s += a.mass * std::pow(l, m) / std::pow(l + dist(a.x, c, n), double(n) + m - alpha);
  return s;
}

inline double poisson_repro(const QuasiCube& Q, const AtomicMeasure& mu, double alpha) {
  const int n = Q.pre.grid->n;
  const double l = Q.side();
  const Point c = Q.qcenter();
  double s = 0;
  for (const Atom& a : mu.atoms) {
    const double d = l + dist(a.x, c, n);
    s += a.mass * std::pow(l / (d * d), double(n) - alpha);
  }
  return s;
}

inline double poisson_extension(const AtomicMeasure& mu, double alpha, const UpperHalfPoint& p) {
  double s = 0;
  for (const Atom& a : mu.atoms)
    s += a.mass * p.t / std::pow(p.t * p.t + dist_sq(p.x, a.x, mu.n), 0.5 * (mu.n + 1 - alpha));
  return s;
}

struct UpstairsAtom {
  UpperHalfPoint p;    // image coordinates
  double weight = 0.0;
  DyadicCube J{};      // provenance cube when built from a grid
  Point pre_center{};  // preimage center of J
};

struct UpstairsMeasure {
  enum class Variant { mu, mu_bar };
  Variant variant = Variant::mu;
  std::vector<UpstairsAtom> atoms;

  double total_weight() const {
    double s = 0;
    for (const auto& a : atoms) s += a.weight;
    return s;
  }
};

inline UpstairsMeasure to_mu_bar(UpstairsMeasure nu) {
  if (nu.variant == UpstairsMeasure::Variant::mu_bar) return nu;
  for (auto& a : nu.atoms) a.weight /= a.p.t * a.p.t;
  nu.variant = UpstairsMeasure::Variant::mu_bar;
  return nu;
}

inline double dual_poisson(const UpstairsMeasure& nu, double alpha, const Point& y, int n) {
  double s = 0;
  for (const auto& a : nu.atoms)
    s += a.weight * a.p.t * a.p.t /
         std::pow(a.p.t * a.p.t + dist_sq(a.p.x, y, n), 0.5 * (n + 1 - alpha));
  return s;
}

// Exact tent membership for upstairs atoms carrying a provenance cube from
// the same grid; generic cone test otherwise.
inline bool upstairs_in_tent(const UpstairsAtom& a, const QuasiCube& I, TentMode mode, int tau) {
  if (a.J.grid != nullptr && a.J.grid == I.pre.grid) {
    if (!I.pre.contains(a.J)) return false;
    if (mode == TentMode::tau_deep && a.p.t > std::ldexp(I.side(), -tau)) return false;
    return true;
  }
  return tent_contains(I, a.p, mode, tau);
}

inline UpstairsMeasure restrict_tent(const UpstairsMeasure& nu, const QuasiCube& I, TentMode mode,
                                     int tau) {
  UpstairsMeasure out;
  out.variant = nu.variant;
  for (const auto& a : nu.atoms)
    if (upstairs_in_tent(a, I, mode, tau)) out.atoms.push_back(a);
  return out;
}

inline double tent_t2_integral(const UpstairsMeasure& nu, const QuasiCube& I, TentMode mode,
                               int tau) {
  double s = 0;
  for (const auto& a : nu.atoms)
    if (upstairs_in_tent(a, I, mode, tau)) s += a.weight * a.p.t * a.p.t;
  return s;
}

// Stopping collection paired with the cube list its localized projections
// range over (resolved by the caller; kept acyclic here).
struct StoppingCollection {
  DyadicCube F;
  std::vector<DyadicCube> projection_cubes;
};

// mu = sum over F, J in M_deep(F) of |P_{F;J} x|^2 at (c_J, l(J)).
inline UpstairsMeasure energy_measure(const std::vector<StoppingCollection>& fs,
                                      const HaarSystem& Hw, const GoodnessParams& p,
                                      const QuasiMap& map = {}) {
  UpstairsMeasure out;
  for (const auto& sc : fs) {
    for (const auto& J : m_deep(sc.F, p)) {
      double w = 0;
      for (const auto& H : sc.projection_cubes)
        if (J.contains(H) && Hw.find(H)) w += Hw.delta_energy_x(H);
      if (w <= 0.0) continue;
      UpstairsAtom a;
      a.pre_center = J.center();
      a.p.x = map.forward(a.pre_center, J.grid->n);
      a.p.t = J.side();
      a.weight = w;
      a.J = J;
      out.atoms.push_back(a);
    }
  }
  return out;
}

}  // namespace tw
