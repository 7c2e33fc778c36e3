#pragma once

// Shared fixtures and independent oracles for the test suites. Everything in
// here is deliberately written against the public API only, with naive
// reference implementations kept separate from the code paths under test.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qmc/basis.hpp"
#include "qmc/slater.hpp"
#include "qmc/wavefunction.hpp"

namespace testutil {

using qmc::Vec3;

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() /
           ("qmc-test-" + tag + "-" + std::to_string(rng()));
  std::filesystem::create_directories(p);
  return p;
}

inline std::string qmc_bin() {
  const char* p = std::getenv("QMC_BIN");
  return p ? p : "";
}

// --- models ---------------------------------------------------------------------

// Exact harmonic ground state: one electron, s-Gaussian exponent omega/2.
inline qmc::wf::TrialWavefunction harmonic_model(double omega = 1.0) {
  qmc::wf::TrialWavefunction m;
  m.nuclei.push_back({"X", 0.0, {0.0, 0.0, 0.0}});
  qmc::basis::GaussianShell s;
  s.center = {0.0, 0.0, 0.0};
  s.nucleus = 0;
  s.primitives = {{1.0, omega / 2.0}};
  s.angulars = {{0, 0, 0}};
  m.shells.push_back(s);
  m.n_orb = 1;
  m.n_basis = 1;
  m.mo_rows = {1.0};
  m.terms.push_back({1.0, {0}, {}});
  m.jastrow.enabled = false;
  m.hamiltonian.kind = qmc::wf::HamiltonianKind::harmonic_test;
  m.hamiltonian.omega = omega;
  return m;
}

// Hydrogen atom with the standard 3-primitive 1s contraction; primitive
// normalization constants folded into the coefficients.
inline qmc::wf::TrialWavefunction hatom_model() {
  qmc::wf::TrialWavefunction m;
  m.nuclei.push_back({"H", 1.0, {0.0, 0.0, 0.0}});
  qmc::basis::GaussianShell s;
  s.center = {0.0, 0.0, 0.0};
  s.nucleus = 0;
  const double g[3] = {3.42525091, 0.62391373, 0.16885540};
  const double c[3] = {0.15432897, 0.53532814, 0.44463454};
  for (int k = 0; k < 3; ++k) {
    const double norm = std::pow(2.0 * g[k] / M_PI, 0.75);
    s.primitives.push_back({c[k] * norm, g[k]});
  }
  s.angulars = {{0, 0, 0}};
  m.shells.push_back(s);
  m.n_orb = 1;
  m.n_basis = 1;
  m.mo_rows = {1.0};
  m.terms.push_back({1.0, {0}, {}});
  m.jastrow.enabled = false;
  m.hamiltonian.kind = qmc::wf::HamiltonianKind::molecular_coulomb;
  return m;
}

// Small correlated system: 2 nuclei, s/p shells, two determinant terms and a
// Jastrow factor. 2 up + 1 down electrons.
inline qmc::wf::TrialWavefunction correlated_model(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coef(-0.8, 0.8);
  qmc::wf::TrialWavefunction m;
  m.nuclei.push_back({"A", 1.0, {0.0, 0.0, 0.0}});
  m.nuclei.push_back({"B", 2.0, {1.3, 0.2, -0.4}});

  auto add_shell = [&](int nucleus, std::vector<qmc::basis::AngularTriplet> ang,
                       std::vector<qmc::basis::Primitive> prims) {
    qmc::basis::GaussianShell s;
    s.nucleus = nucleus;
    s.center = m.nuclei[nucleus].pos;
    s.angulars = std::move(ang);
    s.primitives = std::move(prims);
    m.shells.push_back(std::move(s));
  };
  add_shell(0, {{0, 0, 0}}, {{1.0, 0.9}, {0.4, 2.5}});
  add_shell(0, {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {{0.7, 0.6}});
  add_shell(1, {{0, 0, 0}}, {{1.0, 1.4}});
  add_shell(1, {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {{0.5, 0.8}});

  m.n_basis = 8;
  m.n_orb = 4;
  m.mo_rows.resize(static_cast<std::size_t>(m.n_orb) * m.n_basis);
  for (auto& v : m.mo_rows) v = coef(rng);
  // keep the leading orbitals dominated by the s functions so determinants
  // stay comfortably away from nodes at typical configurations
  m.mo_rows[0] += 1.5;
  m.mo_rows[1 * m.n_basis + 4] += 1.5;
  m.mo_rows[2 * m.n_basis + 1] += 1.2;
  m.mo_rows[3 * m.n_basis + 5] += 1.2;

  m.terms.push_back({0.93, {0, 1}, {0}});
  m.terms.push_back({-0.31, {0, 2}, {1}});
  m.jastrow.enabled = true;
  m.jastrow.a_ee = 0.5;
  m.jastrow.b_ee = 1.1;
  m.jastrow.en = {{"A", 0.4, 0.9}, {"B", 0.7, 1.3}};
  m.hamiltonian.kind = qmc::wf::HamiltonianKind::molecular_coulomb;
  return m;
}

inline std::vector<double> random_coords(int n_electrons, std::mt19937_64& rng,
                                         double spread = 1.2) {
  std::normal_distribution<double> d(0.0, spread);
  std::vector<double> r(3 * static_cast<std::size_t>(n_electrons));
  for (auto& v : r) v = d(rng);
  return r;
}

// --- oracles --------------------------------------------------------------------

// Dense 64-bit reference for the sparse product path.
template <class Real>
std::vector<double> dense_product_oracle(const qmc::slater::MoCoefficients<Real>& a,
                                         const qmc::basis::SparseAoBlock<Real>& block,
                                         int which) {
  std::vector<double> dense(static_cast<std::size_t>(block.n_basis) * block.n_electrons,
                            0.0);
  for (int e = 0; e < block.n_electrons; ++e)
    for (int k = block.offsets[e]; k < block.offsets[e + 1]; ++k)
      dense[static_cast<std::size_t>(e) * block.n_basis + block.indices[k]] =
          static_cast<double>(block.values[which][k]);
  std::vector<double> c(static_cast<std::size_t>(a.n_orb) * block.n_electrons, 0.0);
  for (int e = 0; e < block.n_electrons; ++e)
    for (int j = 0; j < block.n_basis; ++j) {
      const double b = dense[static_cast<std::size_t>(e) * block.n_basis + j];
      if (b == 0.0) continue;
      for (int i = 0; i < a.n_orb; ++i)
        c[static_cast<std::size_t>(e) * a.n_orb + i] +=
            static_cast<double>(a.at(i, j)) * b;
    }
  return c;
}

// Random sparse block with roughly the requested density.
inline qmc::basis::SparseAoBlock<float> random_block(int n_basis, int n_el,
                                                     double density,
                                                     std::mt19937_64& rng) {
  qmc::basis::SparseAoBlock<float> b;
  b.n_basis = n_basis;
  b.n_electrons = n_el;
  b.offsets.assign(n_el + 1, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<float> v(-1.0f, 1.0f);
  for (int e = 0; e < n_el; ++e) {
    for (int j = 0; j < n_basis; ++j) {
      if (u(rng) >= density) continue;
      b.indices.push_back(j);
      for (int n = 0; n < 5; ++n) b.values[n].push_back(v(rng));
    }
    b.offsets[e + 1] = static_cast<int>(b.indices.size());
  }
  return b;
}

inline qmc::slater::MoCoefficients<float> random_mo(int n_orb, int n_basis,
                                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> v(-1.0, 1.0);
  std::vector<double> rows(static_cast<std::size_t>(n_orb) * n_basis);
  for (auto& x : rows) x = v(rng);
  return qmc::slater::MoCoefficients<float>::from_rows(n_orb, n_basis, rows);
}

// Central finite differences of log|Psi| through a double-precision engine.
inline double fd_gradient(const qmc::wf::Engine& engine, std::vector<double> r,
                          std::size_t coord, double h = 1e-5) {
  r[coord] += h;
  const double up = engine.evaluate(r).log_abs_psi;
  r[coord] -= 2.0 * h;
  const double dn = engine.evaluate(r).log_abs_psi;
  return (up - dn) / (2.0 * h);
}

// Sum over electrons of lap(Psi)/Psi via second differences of log|Psi|.
inline double fd_lap_over_psi(const qmc::wf::Engine& engine, std::vector<double> r,
                              double h = 1e-4) {
  const double f0 = engine.evaluate(r).log_abs_psi;
  double total = 0.0;
  for (std::size_t c = 0; c < r.size(); ++c) {
    r[c] += h;
    const double fp = engine.evaluate(r).log_abs_psi;
    r[c] -= 2.0 * h;
    const double fm = engine.evaluate(r).log_abs_psi;
    r[c] += h;
    const double d2 = (fp - 2.0 * f0 + fm) / (h * h);
    const double d1 = (fp - fm) / (2.0 * h);
    total += d2 + d1 * d1;
  }
  return total;
}

// Closed-form variational energy for an s-Gaussian contraction on a Z/r
// Hamiltonian: <psi|H|psi>/<psi|psi> from standard Gaussian integrals.
inline double hatom_variational_oracle(std::span<const double> coefs,
                                       std::span<const double> exps, double z) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < coefs.size(); ++k)
    for (std::size_t l = 0; l < coefs.size(); ++l) {
      const double p = exps[k] + exps[l];
      const double s = std::pow(M_PI / p, 1.5);
      const double t = 3.0 * exps[k] * exps[l] * std::pow(M_PI, 1.5) / std::pow(p, 2.5);
      const double v = -z * 2.0 * M_PI / p;
      num += coefs[k] * coefs[l] * (t + v);
      den += coefs[k] * coefs[l] * s;
    }
  return num / den;
}

// Kolmogorov-Smirnov distance of a sample against U(0,1).
inline double ks_distance_uniform(std::vector<double> sample) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double cdf = sample[i];  // U(0,1)
    d = std::max(d, std::fabs((i + 1) / n - cdf));
    d = std::max(d, std::fabs(cdf - i / n));
  }
  return d;
}

// Independent weighted block statistics (naive accumulation order).
struct WeightedStats {
  double mean = 0.0;
  double error = std::numeric_limits<double>::quiet_NaN();
};
inline WeightedStats reference_weighted_stats(std::span<const double> block_sw,
                                              std::span<const double> block_swe) {
  long double sw = 0.0L, swe = 0.0L;
  for (std::size_t i = 0; i < block_sw.size(); ++i) {
    sw += block_sw[i];
    swe += block_swe[i];
  }
  WeightedStats out;
  out.mean = static_cast<double>(swe / sw);
  if (block_sw.size() >= 2) {
    long double s2 = 0.0L;
    for (std::size_t i = 0; i < block_sw.size(); ++i) {
      const long double m = static_cast<long double>(block_swe[i]) / block_sw[i];
      s2 += block_sw[i] * (m - out.mean) * (m - out.mean);
    }
    out.error = static_cast<double>(
        std::sqrt(static_cast<double>(s2 / sw / (block_sw.size() - 1))));
  }
  return out;
}

}  // namespace testutil
