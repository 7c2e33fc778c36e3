#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "qmc/common.hpp"

namespace qmc::basis {

struct Primitive {
  double coef;      // contraction coefficient, normalization folded in
  double exponent;  // bohr^-2, > 0
};

struct AngularTriplet {
  int nx = 0, ny = 0, nz = 0;
  int total() const { return nx + ny + nz; }
};

// Supported through g-type shells.
inline constexpr int kMaxAngularMomentum = 4;

// One radial contraction shared by one or more Cartesian angular factors;
// each triplet contributes one atomic orbital.
struct GaussianShell {
  Vec3 center;
  int nucleus = 0;  // owning nucleus index
  std::vector<Primitive> primitives;
  std::vector<AngularTriplet> angulars;
};

struct AtomicBasis {
  std::vector<GaussianShell> shells;   // in AO index order
  std::vector<double> nucleus_radius;  // per nucleus, bohr
  std::vector<int> ao_offset;          // first AO index of each shell
  double epsilon = 1e-8;
  int n_basis = 0;
  int n_nuclei = 0;

  double radial(int shell_index, const Vec3& r) const;
};

// Sum_k |c_k| exp(-gamma_k r^2): strictly decreasing upper bound on |g|.
double radial_envelope(const GaussianShell& shell, double r);

// Unscreened g(r) = sum_k c_k exp(-gamma_k |r-Q|^2).
double radial_value(const GaussianShell& shell, const Vec3& r);

// Radius beyond which the contraction envelope stays below epsilon,
// located by bisection to 1e-3 bohr.
double shell_radius(const GaussianShell& shell, double epsilon);
double compute_atomic_radius(std::span<const GaussianShell> shells_on_nucleus,
                             double epsilon);

// g(r) with the distance screen applied: exactly zero beyond cutoff_radius.
double eval_radial(const GaussianShell& shell, const Vec3& r, double cutoff_radius);

// Validates shells, computes per-nucleus radii and AO offsets.
AtomicBasis make_basis(std::vector<GaussianShell> shells, int n_nuclei,
                       double epsilon = 1e-8);

// Per-electron sparse columns of AO values (B1), Cartesian gradients
// (B2..B4) and Laplacians (B5). All five share one sparsity pattern.
template <class Real>
struct SparseAoBlock {
  int n_basis = 0;
  int n_electrons = 0;
  std::vector<int> offsets;  // size n_electrons + 1
  std::vector<int> indices;  // packed AO indices, strictly increasing per electron
  std::array<aligned_vector<Real>, 5> values;

  int nnz(int electron) const { return offsets[electron + 1] - offsets[electron]; }
  int total_nnz() const { return offsets.empty() ? 0 : offsets.back(); }
};

template <class Real>
SparseAoBlock<Real> eval_ao_block(const AtomicBasis& basis, std::span<const double> r);

struct SparsityStats {
  double fraction_nonzero = 0.0;
  int max_nnz_per_column = 0;
  double mean_nnz = 0.0;
};

template <class Real>
SparsityStats sparsity_stats(const SparseAoBlock<Real>& block);

// Accumulates block-level sparsity over a run.
struct SparsityAccumulator {
  std::uint64_t nnz_total = 0;
  std::uint64_t columns = 0;
  std::uint64_t cells = 0;
  int max_nnz = 0;

  template <class Real>
  void add(const SparseAoBlock<Real>& block) {
    for (int e = 0; e < block.n_electrons; ++e)
      max_nnz = std::max(max_nnz, block.nnz(e));
    nnz_total += static_cast<std::uint64_t>(block.total_nnz());
    columns += static_cast<std::uint64_t>(block.n_electrons);
    cells += static_cast<std::uint64_t>(block.n_electrons) * block.n_basis;
  }
  SparsityStats stats() const;
};

}  // namespace qmc::basis
