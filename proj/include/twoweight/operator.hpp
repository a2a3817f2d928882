#pragma once

// Fractional Riesz-type kernels with tangent-line or sharp truncations, exact
// operator matrices over an atomic measure pair, operator norms via power
// iteration with a dense fallback, testing and weak boundedness constants over
// the enumerated cube family, and the monotonicity / pivotal ratio
// diagnostics.

#include <Eigen/SVD>

#include <array>
#include <functional>
#include <limits>

#include "muckenhoupt.hpp"

namespace tw {

enum class KernelFamily { riesz_component, riesz_vector, custom };
enum class Truncation { tangent, cutoff, none };

// A zero truncation window means "derive it from the measure pair": half the
// smallest positive cross distance below, twice the joint diameter above.
struct KernelSpec {
  int n = 1;
  double alpha = 0.0;
  KernelFamily family = KernelFamily::riesz_component;
  int component = 1;
  Truncation truncation = Truncation::tangent;
  double delta_trunc = 0.0;
  double R_trunc = 0.0;
  double c_cz = 1.0;          // size-and-smoothness normalization, reported only
  double delta_smooth = 1.0;  // Dini/Hoelder exponent of the smoothness bound
  bool transpose = false;
  std::function<double(const Point&, int)> symbol{};  // custom angular part

  void validate() const {
    if (n < 1 || n > kMaxDim) throw std::invalid_argument("kernel dimension out of range");
    if (!(alpha >= 0.0 && alpha < double(n)))
      throw std::invalid_argument("kernel order alpha must lie in [0, n)");
    if (family == KernelFamily::riesz_component && (component < 1 || component > n))
      throw std::invalid_argument("kernel component out of range");
    if (!(c_cz > 0.0)) throw std::invalid_argument("kernel normalization must be positive");
    if (!(delta_smooth > 0.0 && delta_smooth <= 1.0))
      throw std::invalid_argument("smoothness exponent must lie in (0, 1]");
    if (delta_trunc < 0.0 || R_trunc < 0.0)
      throw std::invalid_argument("truncation radii must be nonnegative");
    if (truncation != Truncation::none && delta_trunc != 0.0 && R_trunc != 0.0 &&
        !(delta_trunc < R_trunc))
      throw std::invalid_argument("truncation window needs delta < R");
  }
};

inline int component_count(const KernelSpec& k) {
  return k.family == KernelFamily::riesz_vector ? k.n : 1;
}

struct TruncationWindow {
  double delta = 0.0;
  double R = 0.0;
};

inline TruncationWindow default_truncation(const AtomicMeasure& s, const AtomicMeasure& w,
                                           int n) {
  double dmin = std::numeric_limits<double>::infinity();
  for (const Atom& a : s.atoms)
    for (const Atom& b : w.atoms) {
      const double d = dist(a.x, b.x, n);
      if (d > 0.0 && d < dmin) dmin = d;
    }
  std::vector<Point> xs;
  xs.reserve(s.atoms.size() + w.atoms.size());
  for (const Atom& a : s.atoms) xs.push_back(a.x);
  for (const Atom& b : w.atoms) xs.push_back(b.x);
  double diam = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = i + 1; j < xs.size(); ++j)
      diam = std::max(diam, dist(xs[i], xs[j], n));
  TruncationWindow t;
  t.delta = std::isfinite(dmin) ? 0.5 * dmin : 0.5;
  t.R = 2.0 * diam;
  if (!(t.R > t.delta)) t.R = 4.0 * t.delta;
  return t;
}

// Fills a zero truncation window from the measure pair and validates.
inline KernelSpec resolved(const KernelSpec& spec, const AtomicMeasure& s,
                           const AtomicMeasure& w) {
  KernelSpec out = spec;
  out.validate();
  if (out.truncation == Truncation::none) return out;
  if (out.delta_trunc == 0.0 || out.R_trunc == 0.0) {
    const TruncationWindow t = default_truncation(s, w, out.n);
    if (out.delta_trunc == 0.0) out.delta_trunc = t.delta;
    if (out.R_trunc == 0.0) out.R_trunc = t.R;
  }
  if (!(out.delta_trunc > 0.0 && out.delta_trunc < out.R_trunc))
    throw std::invalid_argument("resolved truncation window is empty");
  return out;
}

namespace detail {

// Radial profile psi(r): r^{alpha-n} on [delta, R]. The tangent variant
// continues with the tangent lines at both ends, vanishing at zero and beyond
// S = R(n+1-alpha)/(n-alpha); the sharp variant just cuts the window.
inline double radial_profile(const KernelSpec& k, double r) {
  const double p = k.alpha - double(k.n);
  switch (k.truncation) {
    case Truncation::none:
      return std::pow(r, p);
    case Truncation::cutoff:
      return (r >= k.delta_trunc && r <= k.R_trunc) ? std::pow(r, p) : 0.0;
    case Truncation::tangent: {
      if (r < k.delta_trunc)
        return std::pow(k.delta_trunc, p) +
               p * std::pow(k.delta_trunc, p - 1.0) * (r - k.delta_trunc);
      if (r <= k.R_trunc) return std::pow(r, p);
      const double t =
          std::pow(k.R_trunc, p) + p * std::pow(k.R_trunc, p - 1.0) * (r - k.R_trunc);
      return std::max(t, 0.0);
    }
  }
  return 0.0;
}

}  // namespace detail

// Stacked component values of K(y - x). The diagonal vanishes under either
// truncation and is an error for the raw homogeneous kernel.
inline std::array<double, kMaxDim> kernel_components(const KernelSpec& k, Point y, Point x) {
  std::array<double, kMaxDim> out{};
  if (k.transpose) std::swap(y, x);
  const double r = dist(y, x, k.n);
  if (r == 0.0) {
    if (k.truncation == Truncation::none)
      throw std::domain_error("homogeneous kernel evaluated on the diagonal");
    return out;
  }
  if (k.truncation != Truncation::none &&
      !(k.delta_trunc > 0.0 && k.delta_trunc < k.R_trunc))
    throw std::invalid_argument("unresolved truncation window");
  const double psi = detail::radial_profile(k, r);
  if (psi == 0.0) return out;
  switch (k.family) {
    case KernelFamily::riesz_component:
      out[0] = ((y[k.component - 1] - x[k.component - 1]) / r) * psi;
      break;
    case KernelFamily::riesz_vector:
      for (int i = 0; i < k.n; ++i) out[std::size_t(i)] = ((y[i] - x[i]) / r) * psi;
      break;
    case KernelFamily::custom: {
      if (!k.symbol) throw std::invalid_argument("custom kernel needs a symbol");
      Point wv{};
      for (int i = 0; i < k.n; ++i) wv[i] = y[i] - x[i];
      out[0] = k.symbol(wv, k.n) * psi;
      break;
    }
  }
  return out;
}

inline double kernel_eval(const KernelSpec& k, const Point& y, const Point& x) {
  if (k.family == KernelFamily::riesz_vector)
    throw std::invalid_argument("vector kernel has no scalar value; query a component");
  return kernel_components(k, y, x)[0];
}

inline Point kernel_vector(const KernelSpec& k, const Point& y, const Point& x) {
  const auto v = kernel_components(k, y, x);
  Point out{};
  for (int i = 0; i < component_count(k); ++i) out[i] = v[std::size_t(i)];
  return out;
}

// Rows run over the target atoms (component blocks stacked for the vector
// family), columns over the source atoms; entries K(y_i, x_j) sqrt(m_j m_i).
struct OperatorMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  double at(int i, int j) const {
    return a[std::size_t(i) * std::size_t(cols) + std::size_t(j)];
  }
  double& at(int i, int j) {
    return a[std::size_t(i) * std::size_t(cols) + std::size_t(j)];
  }
};

inline OperatorMatrix operator_matrix(const AtomicMeasure& s, const AtomicMeasure& w,
                                      const KernelSpec& spec0) {
  const KernelSpec spec = resolved(spec0, s, w);
  const int nc = component_count(spec);
  const int nw = int(w.atoms.size());
  OperatorMatrix A;
  A.cols = int(s.atoms.size());
  A.rows = nc * nw;
  A.a.assign(std::size_t(A.rows) * std::size_t(A.cols), 0.0);
  for (int i = 0; i < nw; ++i)
    for (int j = 0; j < A.cols; ++j) {
      const auto kv = kernel_components(spec, w.atoms[std::size_t(i)].x,
                                        s.atoms[std::size_t(j)].x);
      const double m =
          std::sqrt(s.atoms[std::size_t(j)].mass * w.atoms[std::size_t(i)].mass);
      for (int c = 0; c < nc; ++c) A.at(c * nw + i, j) = kv[std::size_t(c)] * m;
    }
  return A;
}

inline double dense_norm(const OperatorMatrix& A) {
  if (A.rows == 0 || A.cols == 0) return 0.0;
  Eigen::MatrixXd M(A.rows, A.cols);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < A.cols; ++j) M(i, j) = A.at(i, j);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  return svd.singularValues()(0);
}

struct NormResult {
  double value = 0.0;
  int iterations = 0;
};

// Largest singular value of the operator matrix. Power iteration on the
// normal matrix from the normalized all-ones vector; a single row or column
// is summed in closed form; a stall or missed cap falls back to the dense
// decomposition for small systems.
inline NormResult op_norm(const AtomicMeasure& s, const AtomicMeasure& w,
                          const KernelSpec& spec, double tol = 1e-10) {
  const OperatorMatrix A = operator_matrix(s, w, spec);
  NormResult out;
  if (A.rows == 0 || A.cols == 0) return out;
  if (A.cols == 1 || A.rows == 1) {
    double q = 0.0;
    for (double v : A.a) q += v * v;
    out.value = std::sqrt(q);
    return out;
  }
  constexpr int kCap = 100000;
  std::vector<double> v(std::size_t(A.cols), 1.0 / std::sqrt(double(A.cols)));
  std::vector<double> u(std::size_t(A.rows));
  std::vector<double> z(std::size_t(A.cols));
  double lam = 0.0, prev = -1.0;
  for (int it = 1; it <= kCap; ++it) {
    out.iterations = it;
    for (int i = 0; i < A.rows; ++i) {
      double acc = 0.0;
      for (int j = 0; j < A.cols; ++j) acc += A.at(i, j) * v[std::size_t(j)];
      u[std::size_t(i)] = acc;
    }
    double norm2 = 0.0;
    for (int j = 0; j < A.cols; ++j) {
      double acc = 0.0;
      for (int i = 0; i < A.rows; ++i) acc += A.at(i, j) * u[std::size_t(i)];
      z[std::size_t(j)] = acc;
      norm2 += acc * acc;
    }
    lam = std::sqrt(norm2);
    if (lam == 0.0) break;
    for (int j = 0; j < A.cols; ++j) v[std::size_t(j)] = z[std::size_t(j)] / lam;
    if (std::abs(lam - prev) <= tol * lam) {
      out.value = std::sqrt(lam);
      return out;
    }
    prev = lam;
  }
  if (std::min(A.rows, A.cols) <= 64) {
    out.value = dense_norm(A);
    return out;
  }
  throw std::runtime_error("operator norm iteration did not converge; residual " +
                           std::to_string(std::abs(lam - prev)));
}

struct SweepResult {
  NormResult best{};
  TruncationWindow window{};
  std::vector<double> values;
};

// Norm at the derived default window followed by each requested window; the
// recorded maximum is a lower bound for the supremum over all truncations,
// not claimed to exhaust it.
inline SweepResult op_norm_sweep(const AtomicMeasure& s, const AtomicMeasure& w,
                                 const KernelSpec& spec,
                                 const std::vector<TruncationWindow>& windows,
                                 double tol = 1e-10) {
  SweepResult out;
  const KernelSpec base = resolved(spec, s, w);
  out.best = op_norm(s, w, base, tol);
  out.window = {base.delta_trunc, base.R_trunc};
  out.values.push_back(out.best.value);
  for (const TruncationWindow& win : windows) {
    KernelSpec k = spec;
    k.delta_trunc = win.delta;
    k.R_trunc = win.R;
    const NormResult r = op_norm(s, w, k, tol);
    out.values.push_back(r.value);
    if (r.value > out.best.value) {
      out.best = r;
      out.window = win;
    }
  }
  return out;
}

// sup over enumerated cubes Q with positive source mass of
//   sqrt( (1/|Q|_s) * sum_{atoms of w in (3)Q} |T(1_Q s)|^2 )
// The dual direction swaps the measures and transposes the kernel.
inline ConstantWitness testing_constant(const AtomicMeasure& s, const AtomicMeasure& w,
                                        const KernelSpec& spec0, Direction dir, bool tripled,
                                        const std::vector<DyadicGrid>& grids) {
  if (dir == Direction::dual) {
    KernelSpec t = spec0;
    t.transpose = !t.transpose;
    return testing_constant(w, s, t, Direction::forward, tripled, grids);
  }
  const KernelSpec spec = resolved(spec0, s, w);
  const int nc = component_count(spec);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  return detail::sup_over_family(ext, support, [&](const EvalCube& e) {
    double ms = 0.0;
    for (const Atom& a : s.atoms)
      if (detail::eval_contains(e, a.u)) ms += a.mass;
    if (!(ms > 0.0)) return 0.0;
    const RBox region =
        tripled ? dilate(e.box, e.n, 3.0, e.origin) : to_rbox(e.box, e.n, e.origin);
    double integral = 0.0;
    for (const Atom& b : w.atoms) {
      if (!region.contains_point(b.u, e.n)) continue;
      std::array<double, kMaxDim> f{};
      for (const Atom& a : s.atoms) {
        if (!detail::eval_contains(e, a.u)) continue;
        const auto kv = kernel_components(spec, b.x, a.x);
        for (int c = 0; c < nc; ++c) f[std::size_t(c)] += kv[std::size_t(c)] * a.mass;
      }
      double q = 0.0;
      for (int c = 0; c < nc; ++c) q += f[std::size_t(c)] * f[std::size_t(c)];
      integral += q * b.mass;
    }
    return std::sqrt(integral / ms);
  });
}

namespace detail {

inline bool rbox_disjoint(const RBox& a, const RBox& b, int n) {
  for (int i = 0; i < n; ++i)
    if (a.hi[i] <= b.lo[i] || b.hi[i] <= a.lo[i]) return true;
  return false;
}

}  // namespace detail

// sup over enumerated same-grid cube pairs (Q, Q') with comparable sides and
// one cube inside the tripled annulus of the other of
//   |pairing of 1_Q against T(1_{Q'} s)| / sqrt(|Q|_w |Q'|_s).
inline ConstantWitness wbp_constant(const AtomicMeasure& s, const AtomicMeasure& w,
                                    const KernelSpec& spec0, double c_comp,
                                    const std::vector<DyadicGrid>& grids) {
  if (!(c_comp >= 1.0))
    throw std::invalid_argument("comparability constant must be at least 1");
  const KernelSpec spec = resolved(spec0, s, w);
  const int nc = component_count(spec);
  const auto ext = extend_grids(grids, s, w);
  const auto support = dedup_points(joint_support_preimage(s, w));
  const int band = int(std::log2(c_comp) + 1e-9);
  ConstantWitness out;
  out.floor_levels = detail::floors_of(ext);
  for (std::size_t gi = 0; gi < ext.size(); ++gi) {
    const DyadicGrid& g = ext[gi];
    struct Cand {
      Box box;
      RBox plain, triple;
      double msig = 0.0;
      double momg = 0.0;
    };
    std::vector<std::vector<Cand>> lev(std::size_t(g.bottom_level - g.top_level) + 1);
    for (int l = g.top_level; l <= g.bottom_level; ++l) {
      auto add = [&](const Box& b) {
        const EvalCube e = eval_cube(g, b);
        Cand c;
        c.box = b;
        c.plain = to_rbox(b, g.n, g.origin_shift);
        c.triple = dilate(b, g.n, 3.0, g.origin_shift);
        c.msig = detail::mass_in(s, e);
        c.momg = detail::mass_in(w, e);
        if (c.msig > 0.0 || c.momg > 0.0)
          lev[std::size_t(l - g.top_level)].push_back(c);
      };
      for (const auto& Q : enumerate_cubes(g, l, support)) add(Q.box());
      if (l < g.bottom_level)
        for (const auto& b : alternate_cubes(g, l, support)) add(b);
    }
    for (int lq = g.top_level; lq <= g.bottom_level; ++lq)
      for (int lp = std::max(g.top_level, lq - band);
           lp <= std::min(g.bottom_level, lq + band); ++lp)
        for (const Cand& Q : lev[std::size_t(lq - g.top_level)]) {
          if (!(Q.momg > 0.0)) continue;
          for (const Cand& P : lev[std::size_t(lp - g.top_level)]) {
            if (!(P.msig > 0.0)) continue;
            if (!detail::rbox_disjoint(Q.plain, P.plain, g.n)) continue;
            if (!(P.triple.contains_rbox(Q.plain, g.n) ||
                  Q.triple.contains_rbox(P.plain, g.n)))
              continue;
            std::array<double, kMaxDim> acc{};
            for (const Atom& b : w.atoms) {
              if (!Q.plain.contains_point(b.u, g.n)) continue;
              for (const Atom& a : s.atoms) {
                if (!P.plain.contains_point(a.u, g.n)) continue;
                const auto kv = kernel_components(spec, b.x, a.x);
                for (int c = 0; c < nc; ++c)
                  acc[std::size_t(c)] += kv[std::size_t(c)] * (a.mass * b.mass);
              }
            }
            double q = 0.0;
            for (int c = 0; c < nc; ++c) q += acc[std::size_t(c)] * acc[std::size_t(c)];
            const double v =
                (nc == 1 ? std::abs(acc[0]) : std::sqrt(q)) / std::sqrt(Q.momg * P.msig);
            if (v > out.value) {
              out.value = v;
              out.kind = ConstantWitness::Kind::pair;
              out.q = {int(gi), Q.box};
              out.q2 = {int(gi), P.box};
            }
          }
        }
  }
  return out;
}

// Values of T(source) at the atoms of target, one vector per stacked
// component.
inline std::vector<std::vector<double>> operator_field(const AtomicMeasure& target,
                                                       const AtomicMeasure& source,
                                                       const KernelSpec& spec0) {
  const KernelSpec spec = resolved(spec0, source, target);
  const int nc = component_count(spec);
  std::vector<std::vector<double>> f(std::size_t(nc),
                                     std::vector<double>(target.atoms.size(), 0.0));
  for (std::size_t i = 0; i < target.atoms.size(); ++i)
    for (const Atom& a : source.atoms) {
      const auto kv = kernel_components(spec, target.atoms[i].x, a.x);
      for (int c = 0; c < nc; ++c) f[std::size_t(c)][i] += kv[std::size_t(c)] * a.mass;
    }
  return f;
}

struct MonoResult {
  double lhs = 0.0;
  double phi = 0.0;
  double ratio = 0.0;
};

// Haar-difference energy of the field against the Poisson-energy majorant:
//   lhs = || Delta_J T(mu) ||,  phi^2 = (P_1/l)^2 ||Delta_J x||^2
//                                     + (P_{1+d}/l)^2 || x - m_J ||^2_{J}
// for a source measure supported off the doubled cube.
inline MonoResult mono_ratio(const QuasiCube& J, const AtomicMeasure& w,
                             const AtomicMeasure& mu, const KernelSpec& spec0,
                             const GoodnessParams& params) {
  params.validate();
  const DyadicGrid& g = *J.pre.grid;
  if (g.n != spec0.n)
    throw std::invalid_argument("kernel dimension does not match the cube");
  const RBox two_j = dilate(J.pre.box(), g.n, 2.0, g.origin_shift);
  for (const Atom& a : mu.atoms)
    if (two_j.contains_point(a.u, g.n))
      throw std::invalid_argument(
          "monotonicity hypothesis rejected: source mass inside the doubled cube");
  MonoResult out;
  if (mu.atoms.empty()) return out;
  const KernelSpec spec = resolved(spec0, mu, w);
  HaarSystem H(w, g);
  const auto f = operator_field(w, mu, spec);
  double e = 0.0;
  for (const auto& fc : f) e += H.delta_energy(J.pre, fc);
  out.lhs = std::sqrt(e);
  const double l_j = J.side();
  const double p1 = poisson(J, mu, spec.alpha, 1.0);
  const double p2 = poisson(J, mu, spec.alpha, 1.0 + spec.delta_smooth);
  const double ex = H.delta_energy_x(J.pre);
  const double var = detail::variance_in(w, eval_cube(g, J.pre.box()));
  const double phi2 = (p1 / l_j) * (p1 / l_j) * ex + (p2 / l_j) * (p2 / l_j) * var;
  out.phi = std::sqrt(phi2);
  out.ratio = out.phi > 0.0 ? out.lhs / out.phi : 0.0;
  return out;
}

using HaarCoefficients = std::map<DyadicCube, std::vector<double>, CubeLess>;

// |<T(nu), Psi>_w| / (||Psi|| P(J, nu) sqrt(|J|_w)) for Psi given by its
// coefficients in the orthonormal Haar expansion below J and nu a positive
// measure supported off the gamma-dilated cube.
inline double pivotal_ratio(const QuasiCube& J, const AtomicMeasure& w,
                            const HaarCoefficients& coeffs, const AtomicMeasure& nu,
                            const KernelSpec& spec0, const GoodnessParams& params) {
  params.validate();
  const DyadicGrid& g = *J.pre.grid;
  if (g.n != spec0.n)
    throw std::invalid_argument("kernel dimension does not match the cube");
  const RBox gam_j = dilate(J.pre.box(), g.n, params.gamma, g.origin_shift);
  for (const Atom& a : nu.atoms) {
    if (!(a.mass > 0.0))
      throw std::invalid_argument("pivotal source measure must be positive");
    if (gam_j.contains_point(a.u, g.n))
      throw std::invalid_argument(
          "pivotal hypothesis rejected: source mass inside the dilated cube");
  }
  HaarSystem H(w, g);
  std::vector<double> psi(w.atoms.size(), 0.0);
  double norm2 = 0.0;
  for (const auto& [Q, c] : coeffs) {
    if (Q.grid != &g) throw std::invalid_argument("coefficient cube from another grid");
    if (!J.pre.contains(Q))
      throw std::invalid_argument("coefficient cube outside the base cube");
    const HaarBasis* b = H.find(Q);
    if (!b || c.size() != b->funcs.size())
      throw std::invalid_argument("coefficient block does not match the basis");
    for (std::size_t k = 0; k < b->atom_idx.size(); ++k)
      for (std::size_t j = 0; j < c.size(); ++j)
        psi[std::size_t(b->atom_idx[k])] +=
            c[j] * b->funcs[j][std::size_t(b->atom_child[k])];
    for (double cj : c) norm2 += cj * cj;
  }
  if (nu.atoms.empty() || norm2 <= 0.0) return 0.0;
  const KernelSpec spec = resolved(spec0, nu, w);
  const auto f = operator_field(w, nu, spec);
  double q = 0.0, s0 = 0.0;
  for (std::size_t c = 0; c < f.size(); ++c) {
    double sc = 0.0;
    for (std::size_t i = 0; i < w.atoms.size(); ++i)
      sc += (w.atoms[i].mass * f[c][i]) * psi[i];
    if (c == 0) s0 = sc;
    q += sc * sc;
  }
  const double num = f.size() == 1 ? std::abs(s0) : std::sqrt(q);
  const double den = std::sqrt(norm2) * poisson(J, nu, spec.alpha, 1.0) *
                     std::sqrt(detail::mass_in(w, eval_cube(g, J.pre.box())));
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace tw
