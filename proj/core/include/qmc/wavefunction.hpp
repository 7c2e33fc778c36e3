#pragma once

#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmc/basis.hpp"
#include "qmc/common.hpp"
#include "qmc/slater.hpp"

namespace qmc::wf {

struct Nucleus {
  std::string symbol;
  double charge = 0.0;
  Vec3 pos;
};

// One c_K * Det_up * Det_down term; orbital indices are 0-based internally.
struct DetTerm {
  double coef = 1.0;
  std::vector<int> up;
  std::vector<int> down;
};

struct JastrowParams {
  bool enabled = false;
  double a_ee = 0.0, b_ee = 1.0;
  struct SpeciesTerm {
    std::string symbol;
    double a_en = 0.0, b_en = 1.0;
  };
  std::vector<SpeciesTerm> en;
};

enum class HamiltonianKind { molecular_coulomb, harmonic_test };

struct Hamiltonian {
  HamiltonianKind kind = HamiltonianKind::molecular_coulomb;
  double omega = 1.0;  // harmonic kind only
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The full trial-wavefunction input: geometry, Gaussian basis, MO matrix,
// determinant expansion, Jastrow and Hamiltonian. This is the critical
// data of a run.
struct TrialWavefunction {
  std::vector<Nucleus> nuclei;
  std::vector<basis::GaussianShell> shells;
  int n_orb = 0;
  int n_basis = 0;
  std::vector<double> mo_rows;  // row-major n_orb x n_basis
  std::vector<DetTerm> terms;
  JastrowParams jastrow;
  Hamiltonian hamiltonian;

  int n_up() const { return terms.empty() ? 0 : static_cast<int>(terms[0].up.size()); }
  int n_down() const { return terms.empty() ? 0 : static_cast<int>(terms[0].down.size()); }
  int n_electrons() const { return n_up() + n_down(); }

  static TrialWavefunction parse(std::istream& in);
  static TrialWavefunction parse_text(const std::string& text);
  static TrialWavefunction load(const std::string& path);

  // Fixed section order, single spaces, 17 significant digits. Identical
  // models always serialize to identical bytes.
  std::string canonical_text() const;

  // Throws ParseError naming the first violated constraint.
  void validate() const;
};

struct JastrowEval {
  double value = 0.0;
  std::vector<double> grad;  // 3N
  std::vector<double> lap;   // N
};

JastrowEval jastrow_terms(const JastrowParams& params, std::span<const Nucleus> nuclei,
                          std::span<const double> r);

// Coulomb sum (e-e + e-n + n-n) or harmonic well. Returns +inf when an
// electron sits exactly on a nucleus; callers treat that as a rejected step.
double local_potential(const Hamiltonian& h, std::span<const Nucleus> nuclei,
                       std::span<const double> r);

enum class Precision { f32, f64 };
const char* to_string(Precision p);
Precision parse_precision(const std::string& name);

struct PsiState {
  bool node = false;
  int sign = 0;  // sign of the determinant part
  double log_abs_psi = -std::numeric_limits<double>::infinity();
  double jastrow = 0.0;
  std::vector<double> drift;  // 3N
  double e_local = std::numeric_limits<double>::quiet_NaN();
};

struct EngineOptions {
  slater::ProductVariant variant = slater::ProductVariant::blocked;
  int k_block = 128;
  Precision precision = Precision::f32;
};

// Immutable per-run evaluator: safe to share across walkers and threads.
class Engine {
 public:
  explicit Engine(TrialWavefunction model, EngineOptions opts = {});

  const TrialWavefunction& model() const { return model_; }
  const basis::AtomicBasis& ao_basis() const { return basis_; }
  const EngineOptions& options() const { return opts_; }
  int n_electrons() const { return model_.n_electrons(); }

  PsiState evaluate(std::span<const double> r) const;
  PsiState evaluate(std::span<const double> r, slater::OpCounters& counters) const;

 private:
  template <class Real>
  PsiState eval_impl(std::span<const double> r, const slater::MoCoefficients<Real>& a,
                     slater::OpCounters& counters) const;

  TrialWavefunction model_;
  EngineOptions opts_;
  basis::AtomicBasis basis_;
  slater::MoCoefficients<float> a32_;
  slater::MoCoefficients<double> a64_;
};

}  // namespace qmc::wf
