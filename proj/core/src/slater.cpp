#include "qmc/slater.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace qmc::slater {

const char* to_string(ProductVariant v) {
  switch (v) {
    case ProductVariant::naive: return "naive";
    case ProductVariant::unroll2_split32: return "unroll2_split32";
    case ProductVariant::unroll4_split221: return "unroll4_split221";
    case ProductVariant::blocked: return "blocked";
  }
  return "?";
}

ProductVariant parse_variant(const std::string& name) {
  if (name == "naive") return ProductVariant::naive;
  if (name == "unroll2_split32") return ProductVariant::unroll2_split32;
  if (name == "unroll4_split221") return ProductVariant::unroll4_split221;
  if (name == "blocked") return ProductVariant::blocked;
  throw ConfigError("unknown kernel variant: " + name);
}

template <class Real>
MoCoefficients<Real> MoCoefficients<Real>::identity(int n) {
  MoCoefficients m;
  m.n_orb = n;
  m.n_basis = n;
  m.stride = round_up(n, 8);
  m.data.assign(static_cast<std::size_t>(m.stride) * n, Real(0));
  for (int j = 0; j < n; ++j) m.col(j)[j] = Real(1);
  return m;
}

template <class Real>
MoCoefficients<Real> MoCoefficients<Real>::from_rows(int n_orb, int n_basis,
                                                     std::span<const double> row_major) {
  if (static_cast<std::size_t>(n_orb) * n_basis != row_major.size())
    throw ConfigError("MO matrix size mismatch");
  MoCoefficients m;
  m.n_orb = n_orb;
  m.n_basis = n_basis;
  m.stride = round_up(std::max(n_orb, 1), 8);
  m.data.assign(static_cast<std::size_t>(m.stride) * n_basis, Real(0));
  for (int i = 0; i < n_orb; ++i)
    for (int j = 0; j < n_basis; ++j)
      m.col(j)[i] = static_cast<Real>(row_major[static_cast<std::size_t>(i) * n_basis + j]);
  return m;
}

namespace {

// Inner kernels accumulate one electron column. All run the AO index in
// ascending order so every variant sees the same per-column accumulation
// order up to re-association inside the unrolled pairs/quads.

template <class Real>
void column_naive(const MoCoefficients<Real>& a, const int* idx, const Real* const b[5],
                  int k0, int k1, Real* const c[5], int stride) {
  for (int k = k0; k < k1; ++k) {
    const Real* ac = a.col(idx[k]);
    const Real b1 = b[0][k], b2 = b[1][k], b3 = b[2][k], b4 = b[3][k], b5 = b[4][k];
    for (int j = 0; j < stride; ++j) {
      const Real aj = ac[j];
      c[0][j] += aj * b1;
      c[1][j] += aj * b2;
      c[2][j] += aj * b3;
      c[3][j] += aj * b4;
      c[4][j] += aj * b5;
    }
  }
}

template <class Real>
void column_unroll2(const MoCoefficients<Real>& a, const int* idx, const Real* const b[5],
                    int k0, int k1, Real* const c[5], int stride) {
  int k = k0;
  for (; k + 1 < k1; k += 2) {
    const Real* a0 = a.col(idx[k]);
    const Real* a1 = a.col(idx[k + 1]);
    // first split: C1, C2, C3
    for (int j = 0; j < stride; ++j)
      c[0][j] += a0[j] * b[0][k] + a1[j] * b[0][k + 1];
    for (int j = 0; j < stride; ++j)
      c[1][j] += a0[j] * b[1][k] + a1[j] * b[1][k + 1];
    for (int j = 0; j < stride; ++j)
      c[2][j] += a0[j] * b[2][k] + a1[j] * b[2][k + 1];
    // second split: C4, C5
    for (int j = 0; j < stride; ++j)
      c[3][j] += a0[j] * b[3][k] + a1[j] * b[3][k + 1];
    for (int j = 0; j < stride; ++j)
      c[4][j] += a0[j] * b[4][k] + a1[j] * b[4][k + 1];
  }
  if (k < k1) column_naive(a, idx, b, k, k1, c, stride);
}

template <class Real>
void column_unroll4(const MoCoefficients<Real>& a, const int* idx, const Real* const b[5],
                    int k0, int k1, Real* const c[5], int stride) {
  int k = k0;
  for (; k + 3 < k1; k += 4) {
    const Real* a0 = a.col(idx[k]);
    const Real* a1 = a.col(idx[k + 1]);
    const Real* a2 = a.col(idx[k + 2]);
    const Real* a3 = a.col(idx[k + 3]);
    // splits: {C1,C2}, {C3,C4}, {C5}
    for (int j = 0; j < stride; ++j)
      c[0][j] += a0[j] * b[0][k] + a1[j] * b[0][k + 1] + a2[j] * b[0][k + 2] + a3[j] * b[0][k + 3];
    for (int j = 0; j < stride; ++j)
      c[1][j] += a0[j] * b[1][k] + a1[j] * b[1][k + 1] + a2[j] * b[1][k + 2] + a3[j] * b[1][k + 3];
    for (int j = 0; j < stride; ++j)
      c[2][j] += a0[j] * b[2][k] + a1[j] * b[2][k + 1] + a2[j] * b[2][k + 2] + a3[j] * b[2][k + 3];
    for (int j = 0; j < stride; ++j)
      c[3][j] += a0[j] * b[3][k] + a1[j] * b[3][k + 1] + a2[j] * b[3][k + 2] + a3[j] * b[3][k + 3];
    for (int j = 0; j < stride; ++j)
      c[4][j] += a0[j] * b[4][k] + a1[j] * b[4][k + 1] + a2[j] * b[4][k + 2] + a3[j] * b[4][k + 3];
  }
  if (k < k1) column_unroll2(a, idx, b, k, k1, c, stride);
}

}  // namespace

template <class Real>
MoValueBlock<Real> product_sparse(const MoCoefficients<Real>& a,
                                  const basis::SparseAoBlock<Real>& block,
                                  const ProductOptions& opts, OpCounters& counters) {
  if (a.n_basis != block.n_basis)
    throw ConfigError("product_sparse: MO matrix columns != basis size of block");

  const int ne = block.n_electrons;
  MoValueBlock<Real> out;
  out.n_orb = a.n_orb;
  out.n_electrons = ne;
  out.stride = a.stride;
  for (auto& v : out.c) v.assign(static_cast<std::size_t>(out.stride) * std::max(ne, 1), Real(0));
  if (ne == 0) return out;

  const int* idx = block.indices.data();
  const Real* b[5];
  for (int n = 0; n < 5; ++n) b[n] = block.values[n].data();

  auto run_column = [&](int e, int k0, int k1) {
    Real* c[5];
    for (int n = 0; n < 5; ++n) c[n] = out.col(n, e);
    switch (opts.variant) {
      case ProductVariant::naive:
        column_naive(a, idx, b, k0, k1, c, out.stride);
        break;
      case ProductVariant::unroll2_split32:
        column_unroll2(a, idx, b, k0, k1, c, out.stride);
        break;
      case ProductVariant::unroll4_split221:
      case ProductVariant::blocked:
        column_unroll4(a, idx, b, k0, k1, c, out.stride);
        break;
    }
  };

  if (opts.variant != ProductVariant::blocked) {
    for (int e = 0; e < ne; ++e) run_column(e, block.offsets[e], block.offsets[e + 1]);
  } else {
    const int kb = std::max(opts.k_block, 1);
    int max_nnz = 0;
    for (int e = 0; e < ne; ++e) max_nnz = std::max(max_nnz, block.nnz(e));
    std::vector<int> order(ne);
    for (int depth = 0; depth < max_nnz; depth += kb) {
      // electrons with columns reaching this slab, sorted by their first
      // AO index inside the slab to improve reuse of A columns
      order.clear();
      for (int e = 0; e < ne; ++e)
        if (block.nnz(e) > depth) order.push_back(e);
      std::sort(order.begin(), order.end(), [&](int x, int y) {
        const int ix = idx[block.offsets[x] + depth];
        const int iy = idx[block.offsets[y] + depth];
        return ix != iy ? ix < iy : x < y;
      });
      for (int e : order) {
        const int k0 = block.offsets[e] + depth;
        const int k1 = std::min(k0 + kb, block.offsets[e + 1]);
        run_column(e, k0, k1);
      }
    }
  }

  counters.multiply_adds += 5ull * a.n_orb * static_cast<std::uint64_t>(block.total_nnz());
  counters.elements_stored += 5ull * a.n_orb * static_cast<std::uint64_t>(ne);
  counters.columns_processed += static_cast<std::uint64_t>(ne);
  return out;
}

double SlaterState::max_inverse_residual() const {
  if (singular || size == 0) return std::numeric_limits<double>::infinity();
  return (mat * inv - Eigen::MatrixXd::Identity(size, size)).array().abs().maxCoeff();
}

template <class Real>
SlaterState build_slater(const MoValueBlock<Real>& cblock, std::span<const int> orbitals,
                         int electron_begin, int count) {
  if (static_cast<int>(orbitals.size()) != count)
    throw ConfigError("build_slater: orbital subset size != electron count");
  SlaterState s;
  s.orbitals.assign(orbitals.begin(), orbitals.end());
  s.electron_begin = electron_begin;
  s.size = count;
  s.mat.resize(count, count);
  for (int e = 0; e < count; ++e)
    for (int o = 0; o < count; ++o)
      s.mat(o, e) = static_cast<double>(cblock.at(0, orbitals[o], electron_begin + e));

  Eigen::PartialPivLU<Eigen::MatrixXd> lu(s.mat);
  const auto& lum = lu.matrixLU();
  double log_det = 0.0;
  int diag_sign = 1;
  double min_pivot = std::numeric_limits<double>::infinity();
  for (int i = 0; i < count; ++i) {
    const double d = lum(i, i);
    min_pivot = std::min(min_pivot, std::fabs(d));
    log_det += std::log(std::fabs(d));
    if (d < 0.0) diag_sign = -diag_sign;
  }
  if (!(min_pivot >= kSingularPivot)) {
    s.singular = true;
    s.sign = 0;
    s.log_abs_det = -std::numeric_limits<double>::infinity();
    return s;
  }
  s.inv = lu.inverse();
  s.log_abs_det = log_det;
  s.sign = diag_sign * static_cast<int>(lu.permutationP().determinant());
  return s;
}

template <class Real>
DetRatios det_ratios(const SlaterState& state, const MoValueBlock<Real>& cblock) {
  if (state.singular) throw SingularSlaterError();
  const int n = state.size;
  DetRatios r;
  r.grad.assign(3 * static_cast<std::size_t>(n), 0.0);
  r.lap.assign(n, 0.0);
  for (int e = 0; e < n; ++e) {
    double gx = 0.0, gy = 0.0, gz = 0.0, lp = 0.0;
    const int col = state.electron_begin + e;
    for (int o = 0; o < n; ++o) {
      const double w = state.inv(e, o);
      gx += static_cast<double>(cblock.at(1, state.orbitals[o], col)) * w;
      gy += static_cast<double>(cblock.at(2, state.orbitals[o], col)) * w;
      gz += static_cast<double>(cblock.at(3, state.orbitals[o], col)) * w;
      lp += static_cast<double>(cblock.at(4, state.orbitals[o], col)) * w;
    }
    r.grad[3 * e] = gx;
    r.grad[3 * e + 1] = gy;
    r.grad[3 * e + 2] = gz;
    r.lap[e] = lp;
  }
  return r;
}

std::vector<ScalingRow> scaling_probe(std::span<const int> sizes, int nnz_per_electron,
                                      const ProductOptions& opts, std::uint64_t seed) {
  std::vector<ScalingRow> rows;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  for (int n : sizes) {
    const int n_basis = 3 * n;
    const int nnz = nnz_per_electron > 0 ? std::min(nnz_per_electron, n_basis) : n_basis;

    basis::SparseAoBlock<float> block;
    block.n_basis = n_basis;
    block.n_electrons = n;
    block.offsets.assign(n + 1, 0);
    std::vector<int> pool(n_basis);
    std::iota(pool.begin(), pool.end(), 0);
    for (int e = 0; e < n; ++e) {
      std::vector<int> pick;
      std::sample(pool.begin(), pool.end(), std::back_inserter(pick), nnz, rng);
      std::sort(pick.begin(), pick.end());
      for (int id : pick) {
        block.indices.push_back(id);
        for (int v = 0; v < 5; ++v) block.values[v].push_back(static_cast<float>(val(rng)));
      }
      block.offsets[e + 1] = static_cast<int>(block.indices.size());
    }

    MoCoefficients<float> a;
    a.n_orb = n;
    a.n_basis = n_basis;
    a.stride = round_up(n, 8);
    a.data.resize(static_cast<std::size_t>(a.stride) * n_basis);
    for (int j = 0; j < n_basis; ++j) {
      float* cptr = a.col(j);
      for (int i = 0; i < n; ++i) cptr[i] = static_cast<float>(val(rng));
      for (int i = n; i < a.stride; ++i) cptr[i] = 0.0f;
    }

    OpCounters counters;
    (void)product_sparse(a, block, opts, counters);
    rows.push_back({n, counters.multiply_adds, inversion_flops(n),
                    static_cast<double>(block.total_nnz()) / n});
  }
  return rows;
}

double fit_log_exponent(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw ConfigError("fit_log_exponent: need >= 2 points");
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

template struct MoCoefficients<float>;
template struct MoCoefficients<double>;
template MoValueBlock<float> product_sparse<float>(const MoCoefficients<float>&,
                                                   const basis::SparseAoBlock<float>&,
                                                   const ProductOptions&, OpCounters&);
template MoValueBlock<double> product_sparse<double>(const MoCoefficients<double>&,
                                                     const basis::SparseAoBlock<double>&,
                                                     const ProductOptions&, OpCounters&);
template SlaterState build_slater<float>(const MoValueBlock<float>&, std::span<const int>,
                                         int, int);
template SlaterState build_slater<double>(const MoValueBlock<double>&, std::span<const int>,
                                          int, int);
template DetRatios det_ratios<float>(const SlaterState&, const MoValueBlock<float>&);
template DetRatios det_ratios<double>(const SlaterState&, const MoValueBlock<double>&);

}  // namespace qmc::slater
