#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qmc/basis.hpp"
#include "qmc/common.hpp"

namespace qmc::slater {

struct OpCounters {
  std::uint64_t multiply_adds = 0;
  std::uint64_t elements_stored = 0;
  std::uint64_t columns_processed = 0;

  OpCounters& operator+=(const OpCounters& o) {
    multiply_adds += o.multiply_adds;
    elements_stored += o.elements_stored;
    columns_processed += o.columns_processed;
    return *this;
  }
  OpCounters operator-(const OpCounters& o) const {
    return {multiply_adds - o.multiply_adds, elements_stored - o.elements_stored,
            columns_processed - o.columns_processed};
  }
};

enum class ProductVariant { naive, unroll2_split32, unroll4_split221, blocked };

const char* to_string(ProductVariant v);
ProductVariant parse_variant(const std::string& name);

struct ProductOptions {
  ProductVariant variant = ProductVariant::blocked;
  int k_block = 128;  // blocking depth over the AO index, `blocked` only
};

// Dense MO coefficient matrix, column-major over the AO index, with the
// orbital dimension zero-padded to a multiple of 8 so every column starts
// on a 32/64-byte boundary.
template <class Real>
struct MoCoefficients {
  int n_orb = 0;
  int n_basis = 0;
  int stride = 0;  // padded rows, multiple of 8
  aligned_vector<Real> data;

  static MoCoefficients identity(int n);
  static MoCoefficients from_rows(int n_orb, int n_basis,
                                  std::span<const double> row_major);

  Real* col(int j) { return data.data() + static_cast<std::size_t>(j) * stride; }
  const Real* col(int j) const {
    return data.data() + static_cast<std::size_t>(j) * stride;
  }
  Real at(int orb, int ao) const { return col(ao)[orb]; }
};

// MO values (C1), gradients (C2..C4) and Laplacians (C5) at every electron,
// same padded column-major layout as the coefficient matrix.
template <class Real>
struct MoValueBlock {
  int n_orb = 0;
  int n_electrons = 0;
  int stride = 0;
  std::array<aligned_vector<Real>, 5> c;

  Real* col(int which, int e) {
    return c[which].data() + static_cast<std::size_t>(e) * stride;
  }
  const Real* col(int which, int e) const {
    return c[which].data() + static_cast<std::size_t>(e) * stride;
  }
  Real at(int which, int orb, int e) const { return col(which, e)[orb]; }
};

// C_n = A * B_n for n=1..5 using the per-electron index lists of the sparse
// block. Counts 5 * n_orb * nnz(e) multiply-adds per electron column.
template <class Real>
MoValueBlock<Real> product_sparse(const MoCoefficients<Real>& a,
                                  const basis::SparseAoBlock<Real>& block,
                                  const ProductOptions& opts, OpCounters& counters);

inline constexpr double kSingularPivot = 1e-30;

class SingularSlaterError : public std::runtime_error {
 public:
  SingularSlaterError() : std::runtime_error("slater: singular determinant state") {}
};

// One Slater factor: D_ij = phi_i(r_j) for an orbital subset and a
// contiguous electron range, widened to 64-bit, with its LU inverse.
struct SlaterState {
  Eigen::MatrixXd mat;  // rows: orbitals of the subset, cols: electrons
  Eigen::MatrixXd inv;
  double log_abs_det = 0.0;
  int sign = 0;  // 0 when singular
  bool singular = false;
  std::vector<int> orbitals;  // row indices into the MO value block
  int electron_begin = 0;
  int size = 0;

  double max_inverse_residual() const;  // ||D * Dinv - I||_max
};

template <class Real>
SlaterState build_slater(const MoValueBlock<Real>& cblock,
                         std::span<const int> orbitals, int electron_begin,
                         int count);

// Gradient and Laplacian log-derivative ratios of the factor determinant,
// one triple + one scalar per electron of the factor.
struct DetRatios {
  std::vector<double> grad;  // 3 * size, xyz per electron
  std::vector<double> lap;   // size
};

template <class Real>
DetRatios det_ratios(const SlaterState& state, const MoValueBlock<Real>& cblock);

// (2/3) n^3 flops for an LU-based inverse; kept purely cubic so the
// doubling law is exact.
inline double inversion_flops(int n) {
  const double dn = static_cast<double>(n);
  return 2.0 * dn * dn * dn / 3.0;
}

struct ScalingRow {
  int n = 0;
  std::uint64_t multiply_adds = 0;
  double inversion_flops = 0.0;
  double mean_nnz = 0.0;
};

// Synthetic constant-nnz family (n_orb = N, n_basis = 3N); nnz_per_electron
// <= 0 selects the dense family (nnz = n_basis).
std::vector<ScalingRow> scaling_probe(std::span<const int> sizes,
                                      int nnz_per_electron,
                                      const ProductOptions& opts,
                                      std::uint64_t seed);

// Least-squares slope of log(y) against log(x).
double fit_log_exponent(std::span<const double> x, std::span<const double> y);

}  // namespace qmc::slater
