#pragma once

// Measure-adapted Haar systems. Bases live on cubes with at least two
// massive children; construction is Gram-Schmidt over centered child
// indicators in lexicographic child order, first nonzero child value
// positive. Position targets ("x") are the preimage coordinate functions,
// keeping every geometric inequality map-independent.

#include <map>

#include "measures.hpp"

namespace tw {

struct HaarBasis {
  DyadicCube Q;
  std::vector<int> atom_idx;
  std::vector<std::int8_t> atom_child;
  std::array<double, 8> child_mass{};
  double total_mass = 0.0;
  std::vector<std::array<double, 8>> funcs;  // funcs[a][child]
};

inline int child_slot(const DyadicCube& Q, const Point& u) {
  const DyadicGrid& g = *Q.grid;
  int slot = 0;
  for (int i = 0; i < g.n; ++i) {
    const double rel = u[i] - g.origin_shift[i];
    const std::int64_t ci = std::int64_t(std::floor(std::ldexp(rel, Q.level + 1)));
    const std::int64_t bit = ci - 2 * Q.idx[i];
    if (bit < 0 || bit > 1) return -1;
    slot |= int(bit) << i;
  }
  return slot;
}

class HaarSystem {
 public:
  HaarSystem(const AtomicMeasure& mu, const DyadicGrid& grid, bool reverse_order = false)
      : mu_(&mu), grid_(&grid) {
    build(reverse_order);
  }

  const AtomicMeasure& measure() const { return *mu_; }
  const DyadicGrid& grid() const { return *grid_; }
  const std::map<DyadicCube, HaarBasis, CubeLess>& bases() const { return bases_; }

  const HaarBasis* find(const DyadicCube& Q) const {
    auto it = bases_.find(Q);
    return it == bases_.end() ? nullptr : &it->second;
  }

  double cube_average(const DyadicCube& Q, const std::vector<double>& f) const {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < mu_->atoms.size(); ++i)
      if (Q.contains_point(mu_->atoms[i].u)) {
        m += mu_->atoms[i].mass;
        s += mu_->atoms[i].mass * f[i];
      }
    if (m <= 0.0) throw std::domain_error("average over a cube of zero mass");
    return s / m;
  }

  std::vector<double> delta_coeffs(const DyadicCube& Q, const std::vector<double>& f) const {
    const HaarBasis* b = find(Q);
    if (!b) return {};
    std::vector<double> out(b->funcs.size(), 0.0);
    for (std::size_t k = 0; k < b->atom_idx.size(); ++k) {
      const int a = b->atom_idx[k];
      const double mf = mu_->atoms[std::size_t(a)].mass * f[std::size_t(a)];
      for (std::size_t j = 0; j < b->funcs.size(); ++j)
        out[j] += mf * b->funcs[j][std::size_t(b->atom_child[k])];
    }
    return out;
  }

  double delta_energy(const DyadicCube& Q, const std::vector<double>& f) const {
    double s = 0;
    for (double c : delta_coeffs(Q, f)) s += c * c;
    return s;
  }

  // Values of Delta_Q f at every atom (zero outside Q).
  std::vector<double> delta_apply(const DyadicCube& Q, const std::vector<double>& f) const {
    std::vector<double> out(mu_->atoms.size(), 0.0);
    const HaarBasis* b = find(Q);
    if (!b) return out;
    const auto coeffs = delta_coeffs(Q, f);
    for (std::size_t k = 0; k < b->atom_idx.size(); ++k)
      for (std::size_t j = 0; j < coeffs.size(); ++j)
        out[std::size_t(b->atom_idx[k])] +=
            coeffs[j] * b->funcs[j][std::size_t(b->atom_child[k])];
    return out;
  }

  // Squared norm of the vector difference: sum over coordinates.
  double delta_energy_x(const DyadicCube& Q) const {
    double s = 0;
    for (int i = 0; i < grid_->n; ++i) s += delta_energy(Q, coordinate_values(i));
    return s;
  }

  std::vector<double> coordinate_values(int i) const {
    std::vector<double> out(mu_->atoms.size());
    for (std::size_t k = 0; k < mu_->atoms.size(); ++k) out[k] = mu_->atoms[k].u[i];
    return out;
  }

 private:
  void build(bool reverse_order) {
    const auto pts = support_preimage(*mu_);
    for (int level = grid_->top_level; level < grid_->bottom_level; ++level) {
      for (const auto& Q : enumerate_cubes(*grid_, level, pts)) {
        HaarBasis b;
        b.Q = Q;
        for (std::size_t a = 0; a < mu_->atoms.size(); ++a) {
          const int slot = child_slot(Q, mu_->atoms[a].u);
          if (slot < 0 || !Q.contains_point(mu_->atoms[a].u)) continue;
          b.atom_idx.push_back(int(a));
          b.atom_child.push_back(std::int8_t(slot));
          b.child_mass[std::size_t(slot)] += mu_->atoms[a].mass;
        }
        const int nc = 1 << grid_->n;
        std::vector<int> massive;
        for (int c = 0; c < nc; ++c) {
          const int cc = reverse_order ? nc - 1 - c : c;
          if (b.child_mass[std::size_t(cc)] > 0.0) massive.push_back(cc);
        }
        if (massive.size() < 2) continue;
        b.total_mass = 0;
        for (int c = 0; c < nc; ++c) b.total_mass += b.child_mass[std::size_t(c)];

        auto dot = [&](const std::array<double, 8>& p, const std::array<double, 8>& q) {
          double s = 0;
          for (int c = 0; c < nc; ++c) s += b.child_mass[std::size_t(c)] * p[std::size_t(c)] * q[std::size_t(c)];
          return s;
        };
        for (std::size_t k = 0; k + 1 < massive.size(); ++k) {
          std::array<double, 8> v{};
          const int c0 = massive[k];
          for (int c = 0; c < nc; ++c)
            v[std::size_t(c)] = (c == c0 ? 1.0 : 0.0) - b.child_mass[std::size_t(c0)] / b.total_mass;
          for (int pass = 0; pass < 2; ++pass)
            for (const auto& h : b.funcs) {
              const double d = dot(v, h);
              for (int c = 0; c < nc; ++c) v[std::size_t(c)] -= d * h[std::size_t(c)];
            }
          const double nrm = std::sqrt(dot(v, v));
          if (!(nrm > 1e-12 * std::sqrt(b.total_mass))) continue;
          for (int c = 0; c < nc; ++c) v[std::size_t(c)] /= nrm;
          for (int c = 0; c < nc; ++c) {
            if (b.child_mass[std::size_t(c)] == 0.0 || v[std::size_t(c)] == 0.0) continue;
            if (v[std::size_t(c)] < 0.0)
              for (int cc = 0; cc < nc; ++cc) v[std::size_t(cc)] = -v[std::size_t(cc)];
            break;
          }
          b.funcs.push_back(v);
        }
        if (!b.funcs.empty()) bases_.emplace(Q, std::move(b));
      }
    }
  }

  const AtomicMeasure* mu_;
  const DyadicGrid* grid_;
  std::map<DyadicCube, HaarBasis, CubeLess> bases_;
};

inline HaarSystem build_haar(const AtomicMeasure& mu, const DyadicGrid& grid) {
  return HaarSystem(mu, grid);
}

// Smallest level at which all distinct points land in distinct cubes.
inline int separating_level(const DyadicGrid& g, const std::vector<Point>& pts, int cap = 60) {
  for (int k = g.top_level;; ++k) {
    if (k >= cap) return cap;
    bool ok = true;
    std::vector<IdxVec> cells;
    cells.reserve(pts.size());
    for (const Point& p : pts) {
      IdxVec c{};
      for (int i = 0; i < g.n; ++i)
        c[i] = std::int64_t(std::floor(std::ldexp(p[i] - g.origin_shift[i], k)));
      cells.push_back(c);
    }
    std::sort(cells.begin(), cells.end());
    for (std::size_t i = 0; i + 1 < cells.size(); ++i)
      if (cells[i] == cells[i + 1]) ok = false;
    if (ok) return k;
  }
}

enum class HaarFamily { all, good, subgood, collection, corona_shift };

struct ProjectionSpec {
  DyadicCube J;
  HaarFamily family = HaarFamily::all;
  GoodnessParams params{};
  const std::vector<DyadicCube>* cubes = nullptr;  // collection / corona_shift
};

inline bool subgood_member(const DyadicCube& Q, const DyadicCube& J, const GoodnessParams& p) {
  for (int lev = Q.level; lev >= J.level; --lev) {
    const DyadicCube A = Q.ancestor(Q.level - lev);
    if (!J.contains(A)) break;
    if (is_good_plain(A, p)) return true;
  }
  return false;
}

inline std::vector<DyadicCube> resolve_family(const HaarSystem& H, const ProjectionSpec& spec) {
  std::vector<DyadicCube> out;
  switch (spec.family) {
    case HaarFamily::all:
      for (const auto& [Q, b] : H.bases())
        if (spec.J.contains(Q)) out.push_back(Q);
      break;
    case HaarFamily::good:
      for (const auto& [Q, b] : H.bases())
        if (spec.J.contains(Q) && is_good_plain(Q, spec.params)) out.push_back(Q);
      break;
    case HaarFamily::subgood:
      for (const auto& [Q, b] : H.bases())
        if (spec.J.contains(Q) && subgood_member(Q, spec.J, spec.params)) out.push_back(Q);
      break;
    case HaarFamily::collection:
    case HaarFamily::corona_shift:
      if (spec.cubes)
        for (const auto& Q : *spec.cubes)
          if (spec.J.contains(Q) && H.find(Q)) out.push_back(Q);
      sort_cubes(out);
      break;
  }
  return out;
}

inline double projection_energy(const HaarSystem& H, const ProjectionSpec& spec,
                                const std::vector<double>& f) {
  double s = 0;
  for (const auto& Q : resolve_family(H, spec)) s += H.delta_energy(Q, f);
  return s;
}

inline double projection_energy(const HaarSystem& H, const ProjectionSpec& spec) {
  double s = 0;
  for (const auto& Q : resolve_family(H, spec)) s += H.delta_energy_x(Q);
  return s;
}

// Variance of the preimage position over J (all coordinates).
inline double variance_energy(const AtomicMeasure& mu, const DyadicCube& J) {
  double m = 0;
  Point mean{};
  for (const Atom& a : mu.atoms)
    if (J.contains_point(a.u)) {
      m += a.mass;
      for (int i = 0; i < mu.n; ++i) mean[i] += a.mass * a.u[i];
    }
  if (m <= 0.0) return 0.0;
  for (int i = 0; i < mu.n; ++i) mean[i] /= m;
  double s = 0;
  for (const Atom& a : mu.atoms)
    if (J.contains_point(a.u)) s += a.mass * dist_sq(a.u, mean, mu.n);
  return s;
}

struct TelescopeResult {
  std::vector<double> averages;  // E_Q f along Q0, Q1, ..., Q2
  double residual = 0.0;
};

inline TelescopeResult average_and_telescope(const HaarSystem& H, const std::vector<double>& f,
                                             const DyadicCube& Q0, const DyadicCube& Q1,
                                             const DyadicCube& Q2) {
  if (!(Q1.contains(Q0) && Q0.level == Q1.level + 1))
    throw std::invalid_argument("Q0 must be a child of Q1");
  if (!Q2.contains(Q1)) throw std::invalid_argument("Q1 must lie inside Q2");

  TelescopeResult out;
  out.averages.push_back(H.cube_average(Q0, f));
  std::vector<double> total(f.size(), 0.0);
  for (int lev = Q1.level; lev >= Q2.level; --lev) {
    const DyadicCube Q = Q0.ancestor(Q0.level - lev);
    out.averages.push_back(H.cube_average(Q, f));
    const auto dv = H.delta_apply(Q, f);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += dv[i];
  }
  const double expected = out.averages.front() - out.averages.back();
  for (std::size_t i = 0; i < H.measure().atoms.size(); ++i)
    if (Q0.contains_point(H.measure().atoms[i].u))
      out.residual = std::max(out.residual, std::abs(total[i] - expected));
  return out;
}

// Tree identity: bottom-level averages recover the root averages plus all
// squared difference coefficients, regardless of atom separation.
inline double tree_identity_defect(const HaarSystem& H, const std::vector<double>& f) {
  const auto& g = H.grid();
  const auto pts = support_preimage(H.measure());
  double mid = 0;
  for (const auto& [Q, b] : H.bases()) mid += H.delta_energy(Q, f);
  double roots = 0;
  for (const auto& R : enumerate_cubes(g, g.top_level, pts)) {
    const double e = H.cube_average(R, f);
    roots += e * e * cube_mass(H.measure(), R);
  }
  double bottom = 0;
  for (const auto& B : enumerate_cubes(g, g.bottom_level, pts)) {
    const double e = H.cube_average(B, f);
    bottom += e * e * cube_mass(H.measure(), B);
  }
  return std::abs(bottom - (mid + roots));
}

// Parseval against the true norm; exact when the bottom level separates atoms.
inline double parseval_defect(const HaarSystem& H, const std::vector<double>& f) {
  const auto& g = H.grid();
  const auto pts = support_preimage(H.measure());
  double norm2 = 0;
  for (std::size_t i = 0; i < H.measure().atoms.size(); ++i)
    norm2 += H.measure().atoms[i].mass * f[i] * f[i];
  double mid = 0;
  for (const auto& [Q, b] : H.bases()) mid += H.delta_energy(Q, f);
  double roots = 0;
  for (const auto& R : enumerate_cubes(g, g.top_level, pts)) {
    const double e = H.cube_average(R, f);
    roots += e * e * cube_mass(H.measure(), R);
  }
  return std::abs(norm2 - (mid + roots));
}

// Largest Gram-matrix deviation from the identity over all pairs of basis
// functions (quadratic in the number of functions; meant for small systems).
inline double gram_defect(const HaarSystem& H) {
  struct Entry {
    const HaarBasis* b;
    std::size_t j;
  };
  std::vector<Entry> fs;
  for (const auto& [Q, b] : H.bases())
    for (std::size_t j = 0; j < b.funcs.size(); ++j) fs.push_back({&b, j});
  const auto& atoms = H.measure().atoms;
  auto value_at = [&](const Entry& e, std::size_t a) -> double {
    for (std::size_t k = 0; k < e.b->atom_idx.size(); ++k)
      if (std::size_t(e.b->atom_idx[k]) == a)
        return e.b->funcs[e.j][std::size_t(e.b->atom_child[k])];
    return 0.0;
  };
  double worst = 0;
  for (std::size_t p = 0; p < fs.size(); ++p)
    for (std::size_t q = p; q < fs.size(); ++q) {
      double dot = 0;
      for (std::size_t a = 0; a < atoms.size(); ++a)
        dot += atoms[a].mass * value_at(fs[p], a) * value_at(fs[q], a);
      worst = std::max(worst, std::abs(dot - (p == q ? 1.0 : 0.0)));
    }
  return worst;
}

}  // namespace tw
