#include "qmc/basis.hpp"

#include <algorithm>
#include <cmath>

namespace qmc::basis {

double radial_envelope(const GaussianShell& shell, double r) {
  const double r2 = r * r;
  double env = 0.0;
  for (const auto& p : shell.primitives)
    env += std::fabs(p.coef) * std::exp(-p.exponent * r2);
  return env;
}

double radial_value(const GaussianShell& shell, const Vec3& r) {
  const double d2 = norm2(r - shell.center);
  double g = 0.0;
  for (const auto& p : shell.primitives) g += p.coef * std::exp(-p.exponent * d2);
  return g;
}

double shell_radius(const GaussianShell& shell, double epsilon) {
  if (radial_envelope(shell, 0.0) <= epsilon) return 0.0;
  double lo = 0.0, hi = 1.0;
  while (radial_envelope(shell, hi) >= epsilon) {
    hi *= 2.0;
    if (hi > 1e6) return hi;  // pathological exponents; effectively unscreened
  }
  while (hi - lo > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    (radial_envelope(shell, mid) < epsilon ? hi : lo) = mid;
  }
  return hi;
}

double compute_atomic_radius(std::span<const GaussianShell> shells_on_nucleus,
                             double epsilon) {
  double radius = 0.0;
  for (const auto& shell : shells_on_nucleus)
    radius = std::max(radius, shell_radius(shell, epsilon));
  return radius;
}

double eval_radial(const GaussianShell& shell, const Vec3& r, double cutoff_radius) {
  if (norm2(r - shell.center) > cutoff_radius * cutoff_radius) return 0.0;
  return radial_value(shell, r);
}

double AtomicBasis::radial(int shell_index, const Vec3& r) const {
  const auto& shell = shells[shell_index];
  return eval_radial(shell, r, nucleus_radius[shell.nucleus]);
}

AtomicBasis make_basis(std::vector<GaussianShell> shells, int n_nuclei,
                       double epsilon) {
  if (epsilon <= 0.0) throw ConfigError("basis: epsilon must be > 0");
  AtomicBasis b;
  b.epsilon = epsilon;
  b.n_nuclei = n_nuclei;
  b.shells = std::move(shells);
  b.ao_offset.reserve(b.shells.size());
  for (const auto& shell : b.shells) {
    if (shell.primitives.empty())
      throw ConfigError("basis: shell has no primitives");
    for (const auto& p : shell.primitives)
      if (!(p.exponent > 0.0)) throw ConfigError("basis: exponent must be > 0");
    if (shell.angulars.empty())
      throw ConfigError("basis: shell has no angular triplets");
    for (const auto& a : shell.angulars) {
      if (a.nx < 0 || a.ny < 0 || a.nz < 0)
        throw ConfigError("basis: negative angular power");
      if (a.total() > kMaxAngularMomentum)
        throw ConfigError("basis: angular momentum above g-type is unsupported");
    }
    if (shell.nucleus < 0 || shell.nucleus >= n_nuclei)
      throw ConfigError("basis: shell references unknown nucleus");
    b.ao_offset.push_back(b.n_basis);
    b.n_basis += static_cast<int>(shell.angulars.size());
  }
  if (b.n_basis < 1) throw ConfigError("basis: empty basis");

  b.nucleus_radius.assign(n_nuclei, 0.0);
  for (const auto& shell : b.shells)
    b.nucleus_radius[shell.nucleus] =
        std::max(b.nucleus_radius[shell.nucleus], shell_radius(shell, epsilon));
  return b;
}

namespace {

inline double ipow(double x, int n) {
  double r = 1.0;
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

}  // namespace

template <class Real>
SparseAoBlock<Real> eval_ao_block(const AtomicBasis& basis, std::span<const double> r) {
  const int n_el = static_cast<int>(r.size() / 3);
  SparseAoBlock<Real> block;
  block.n_basis = basis.n_basis;
  block.n_electrons = n_el;
  block.offsets.assign(n_el + 1, 0);

  std::vector<char> nucleus_out(basis.n_nuclei);
  for (int e = 0; e < n_el; ++e) {
    const Vec3 re{r[3 * e], r[3 * e + 1], r[3 * e + 2]};
    // per-nucleus distance gate, decided lazily at the first shell seen
    for (int a = 0; a < basis.n_nuclei; ++a) nucleus_out[a] = -1;

    const int n_shells = static_cast<int>(basis.shells.size());
    for (int s = 0; s < n_shells; ++s) {
      const GaussianShell& shell = basis.shells[s];
      char& out = nucleus_out[shell.nucleus];
      if (out == -1) {
        const double rad = basis.nucleus_radius[shell.nucleus];
        out = norm2(re - shell.center) > rad * rad ? 1 : 0;
      }
      if (out) continue;

      const Vec3 p = re - shell.center;
      const double d2 = norm2(p);
      double g = 0.0, h = 0.0, u = 0.0;
      for (const auto& prim : shell.primitives) {
        const double t = prim.coef * std::exp(-prim.exponent * d2);
        g += t;
        h += prim.exponent * t;
        u += prim.exponent * prim.exponent * t;
      }
      if (std::fabs(g) < basis.epsilon) continue;

      const double gl[3] = {-2.0 * h * p.x, -2.0 * h * p.y, -2.0 * h * p.z};
      const double lap_g = 4.0 * d2 * u - 6.0 * h;

      const int ao0 = basis.ao_offset[s];
      for (int t = 0; t < static_cast<int>(shell.angulars.size()); ++t) {
        const auto& ang = shell.angulars[t];
        const int n[3] = {ang.nx, ang.ny, ang.nz};
        double mono[3], dmono[3], d2mono[3];
        for (int l = 0; l < 3; ++l) {
          const double pl = p[l];
          mono[l] = ipow(pl, n[l]);
          dmono[l] = n[l] > 0 ? n[l] * ipow(pl, n[l] - 1) : 0.0;
          d2mono[l] = n[l] > 1 ? n[l] * (n[l] - 1) * ipow(pl, n[l] - 2) : 0.0;
        }
        const double poly = mono[0] * mono[1] * mono[2];
        const double dpoly[3] = {dmono[0] * mono[1] * mono[2],
                                 mono[0] * dmono[1] * mono[2],
                                 mono[0] * mono[1] * dmono[2]};
        const double d2poly = d2mono[0] * mono[1] * mono[2] +
                              mono[0] * d2mono[1] * mono[2] +
                              mono[0] * mono[1] * d2mono[2];

        const double val = poly * g;
        const double grad[3] = {dpoly[0] * g + poly * gl[0],
                                dpoly[1] * g + poly * gl[1],
                                dpoly[2] * g + poly * gl[2]};
        const double lap = d2poly * g +
                           2.0 * (dpoly[0] * gl[0] + dpoly[1] * gl[1] + dpoly[2] * gl[2]) +
                           poly * lap_g;

        block.indices.push_back(ao0 + t);
        block.values[0].push_back(static_cast<Real>(val));
        block.values[1].push_back(static_cast<Real>(grad[0]));
        block.values[2].push_back(static_cast<Real>(grad[1]));
        block.values[3].push_back(static_cast<Real>(grad[2]));
        block.values[4].push_back(static_cast<Real>(lap));
      }
    }
    block.offsets[e + 1] = static_cast<int>(block.indices.size());
  }
  return block;
}

template <class Real>
SparsityStats sparsity_stats(const SparseAoBlock<Real>& block) {
  SparsityAccumulator acc;
  acc.add(block);
  return acc.stats();
}

SparsityStats SparsityAccumulator::stats() const {
  SparsityStats s;
  s.max_nnz_per_column = max_nnz;
  s.mean_nnz = columns ? static_cast<double>(nnz_total) / static_cast<double>(columns) : 0.0;
  s.fraction_nonzero = cells ? static_cast<double>(nnz_total) / static_cast<double>(cells) : 0.0;
  return s;
}

template SparseAoBlock<float> eval_ao_block<float>(const AtomicBasis&, std::span<const double>);
template SparseAoBlock<double> eval_ao_block<double>(const AtomicBasis&, std::span<const double>);
template SparsityStats sparsity_stats<float>(const SparseAoBlock<float>&);
template SparsityStats sparsity_stats<double>(const SparseAoBlock<double>&);

}  // namespace qmc::basis
