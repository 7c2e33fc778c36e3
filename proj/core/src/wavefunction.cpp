#include "qmc/wavefunction.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace qmc::wf {

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream is(line);
  std::string t;
  while (is >> t) {
    if (t[0] == '#') break;
    toks.push_back(t);
  }
  return toks;
}

double to_double(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("wavefunction file: bad number for ") + what + ": " + s);
  }
}

int to_int(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("wavefunction file: bad integer for ") + what + ": " + s);
  }
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  // next non-empty, non-comment token line
  std::optional<std::vector<std::string>> next() {
    if (peeked_) {
      auto t = std::move(*peeked_);
      peeked_.reset();
      return t;
    }
    std::string line;
    while (std::getline(in_, line)) {
      auto toks = tokenize(line);
      if (!toks.empty()) return toks;
    }
    return std::nullopt;
  }
  std::vector<std::string> require(const char* what) {
    auto t = next();
    if (!t) throw ParseError(std::string("wavefunction file: unexpected end, expected ") + what);
    return *t;
  }
  void push_back(std::vector<std::string> toks) { peeked_ = std::move(toks); }

 private:
  std::istream& in_;
  std::optional<std::vector<std::string>> peeked_;
};

}  // namespace

TrialWavefunction TrialWavefunction::parse(std::istream& in) {
  LineReader rd(in);
  TrialWavefunction m;

  auto header = rd.require("qmcwf header");
  if (header.size() != 2 || header[0] != "qmcwf" || header[1] != "1")
    throw ParseError("wavefunction file: expected header 'qmcwf 1'");

  auto nuc = rd.require("nuclei count");
  if (nuc.size() != 2 || nuc[0] != "nuclei")
    throw ParseError("wavefunction file: expected 'nuclei <count>'");
  const int n_nuc = to_int(nuc[1], "nuclei count");
  for (int i = 0; i < n_nuc; ++i) {
    auto t = rd.require("nucleus line");
    if (t.size() != 5) throw ParseError("wavefunction file: nucleus line needs 'symbol Z x y z'");
    Nucleus n;
    n.symbol = t[0];
    n.charge = to_double(t[1], "nuclear charge");
    n.pos = {to_double(t[2], "x"), to_double(t[3], "y"), to_double(t[4], "z")};
    m.nuclei.push_back(std::move(n));
  }

  auto sh = rd.require("shells count");
  if (sh.size() != 2 || sh[0] != "shells")
    throw ParseError("wavefunction file: expected 'shells <count>'");
  const int n_shells = to_int(sh[1], "shells count");
  for (int s = 0; s < n_shells; ++s) {
    auto t = rd.require("shell line");
    if (t.size() != 4 || t[0] != "shell")
      throw ParseError("wavefunction file: expected 'shell <nucleus> <triplets> <primitives>'");
    basis::GaussianShell shell;
    const int nucleus_1b = to_int(t[1], "shell nucleus");
    if (nucleus_1b < 1 || nucleus_1b > n_nuc)
      throw ParseError("wavefunction file: shell references nucleus out of range");
    shell.nucleus = nucleus_1b - 1;
    shell.center = m.nuclei[shell.nucleus].pos;
    const int n_trip = to_int(t[2], "triplet count");
    const int n_prim = to_int(t[3], "primitive count");
    for (int i = 0; i < n_trip; ++i) {
      auto a = rd.require("angular triplet");
      if (a.size() != 3) throw ParseError("wavefunction file: triplet line needs 'nx ny nz'");
      shell.angulars.push_back({to_int(a[0], "nx"), to_int(a[1], "ny"), to_int(a[2], "nz")});
    }
    for (int i = 0; i < n_prim; ++i) {
      auto p = rd.require("primitive");
      if (p.size() != 2) throw ParseError("wavefunction file: primitive line needs 'coef exponent'");
      shell.primitives.push_back({to_double(p[0], "coef"), to_double(p[1], "exponent")});
    }
    m.shells.push_back(std::move(shell));
  }

  auto mo = rd.require("mos header");
  if (mo.size() != 3 || mo[0] != "mos")
    throw ParseError("wavefunction file: expected 'mos <n_orb> <n_basis>'");
  m.n_orb = to_int(mo[1], "n_orb");
  m.n_basis = to_int(mo[2], "n_basis");
  if (m.n_orb < 1 || m.n_basis < 1)
    throw ParseError("wavefunction file: mos dimensions must be >= 1");
  m.mo_rows.reserve(static_cast<std::size_t>(m.n_orb) * m.n_basis);
  for (int i = 0; i < m.n_orb; ++i) {
    auto row = rd.require("MO row");
    if (static_cast<int>(row.size()) != m.n_basis)
      throw ParseError("wavefunction file: MO row has wrong length");
    for (const auto& v : row) m.mo_rows.push_back(to_double(v, "MO coefficient"));
  }

  auto det = rd.require("determinants header");
  if (det.size() != 2 || det[0] != "determinants")
    throw ParseError("wavefunction file: expected 'determinants <count>'");
  const int n_terms = to_int(det[1], "determinant count");
  for (int k = 0; k < n_terms; ++k) {
    auto t = rd.require("determinant line");
    if (t.size() < 3 || t[0] != "det")
      throw ParseError("wavefunction file: expected 'det <coef> u <i...> d <j...>'");
    DetTerm term;
    term.coef = to_double(t[1], "determinant coefficient");
    std::size_t p = 2;
    if (p >= t.size() || t[p] != "u")
      throw ParseError("wavefunction file: determinant line missing 'u' marker");
    ++p;
    while (p < t.size() && t[p] != "d") term.up.push_back(to_int(t[p++], "up orbital") - 1);
    if (p >= t.size() || t[p] != "d")
      throw ParseError("wavefunction file: determinant line missing 'd' marker");
    ++p;
    while (p < t.size()) term.down.push_back(to_int(t[p++], "down orbital") - 1);
    m.terms.push_back(std::move(term));
  }

  auto jt = rd.require("jastrow header");
  if (jt.size() != 2 || jt[0] != "jastrow" || (jt[1] != "on" && jt[1] != "off"))
    throw ParseError("wavefunction file: expected 'jastrow on|off'");
  m.jastrow.enabled = jt[1] == "on";
  if (m.jastrow.enabled) {
    while (auto t = rd.next()) {
      if ((*t)[0] == "ee") {
        if (t->size() != 3) throw ParseError("wavefunction file: 'ee <a> <b>'");
        m.jastrow.a_ee = to_double((*t)[1], "a_ee");
        m.jastrow.b_ee = to_double((*t)[2], "b_ee");
      } else if ((*t)[0] == "en") {
        if (t->size() != 4) throw ParseError("wavefunction file: 'en <symbol> <a> <b>'");
        m.jastrow.en.push_back(
            {(*t)[1], to_double((*t)[2], "a_en"), to_double((*t)[3], "b_en")});
      } else {
        rd.push_back(std::move(*t));
        break;
      }
    }
  }

  auto ham = rd.require("hamiltonian");
  if (ham[0] != "hamiltonian" || ham.size() < 2)
    throw ParseError("wavefunction file: expected 'hamiltonian molecular|harmonic ...'");
  if (ham[1] == "molecular" && ham.size() == 2) {
    m.hamiltonian.kind = HamiltonianKind::molecular_coulomb;
  } else if (ham[1] == "harmonic" && ham.size() == 3) {
    m.hamiltonian.kind = HamiltonianKind::harmonic_test;
    m.hamiltonian.omega = to_double(ham[2], "omega");
  } else {
    throw ParseError("wavefunction file: hamiltonian must be 'molecular' or 'harmonic <omega>'");
  }

  auto endl_ = rd.require("end marker");
  if (endl_.size() != 1 || endl_[0] != "end")
    throw ParseError("wavefunction file: expected trailing 'end'");
  return m;
}

TrialWavefunction TrialWavefunction::parse_text(const std::string& text) {
  std::istringstream is(text);
  return parse(is);
}

TrialWavefunction TrialWavefunction::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open wavefunction file: " + path);
  return parse(f);
}

std::string TrialWavefunction::canonical_text() const {
  std::ostringstream os;
  os << "qmcwf 1\n";
  os << "nuclei " << nuclei.size() << "\n";
  for (const auto& n : nuclei)
    os << n.symbol << ' ' << format_g17(n.charge) << ' ' << format_g17(n.pos.x) << ' '
       << format_g17(n.pos.y) << ' ' << format_g17(n.pos.z) << "\n";
  os << "shells " << shells.size() << "\n";
  for (const auto& s : shells) {
    os << "shell " << s.nucleus + 1 << ' ' << s.angulars.size() << ' '
       << s.primitives.size() << "\n";
    for (const auto& a : s.angulars) os << a.nx << ' ' << a.ny << ' ' << a.nz << "\n";
    for (const auto& p : s.primitives)
      os << format_g17(p.coef) << ' ' << format_g17(p.exponent) << "\n";
  }
  os << "mos " << n_orb << ' ' << n_basis << "\n";
  for (int i = 0; i < n_orb; ++i) {
    for (int j = 0; j < n_basis; ++j) {
      if (j) os << ' ';
      os << format_g17(mo_rows[static_cast<std::size_t>(i) * n_basis + j]);
    }
    os << "\n";
  }
  os << "determinants " << terms.size() << "\n";
  for (const auto& t : terms) {
    os << "det " << format_g17(t.coef) << " u";
    for (int i : t.up) os << ' ' << i + 1;
    os << " d";
    for (int i : t.down) os << ' ' << i + 1;
    os << "\n";
  }
  if (jastrow.enabled) {
    os << "jastrow on\n";
    os << "ee " << format_g17(jastrow.a_ee) << ' ' << format_g17(jastrow.b_ee) << "\n";
    for (const auto& e : jastrow.en)
      os << "en " << e.symbol << ' ' << format_g17(e.a_en) << ' ' << format_g17(e.b_en)
         << "\n";
  } else {
    os << "jastrow off\n";
  }
  if (hamiltonian.kind == HamiltonianKind::molecular_coulomb)
    os << "hamiltonian molecular\n";
  else
    os << "hamiltonian harmonic " << format_g17(hamiltonian.omega) << "\n";
  os << "end\n";
  return os.str();
}

void TrialWavefunction::validate() const {
  if (nuclei.empty()) throw ParseError("constraint failed: at least one nucleus required");
  for (const auto& n : nuclei)
    if (!std::isfinite(n.charge) || !std::isfinite(n.pos.x) || !std::isfinite(n.pos.y) ||
        !std::isfinite(n.pos.z))
      throw ParseError("constraint failed: non-finite nucleus data");
  if (shells.empty()) throw ParseError("constraint failed: basis has no shells");
  int ao_count = 0;
  for (const auto& s : shells) {
    if (s.primitives.empty())
      throw ParseError("constraint failed: shell without primitives");
    for (const auto& p : s.primitives) {
      if (!(p.exponent > 0.0))
        throw ParseError("constraint failed: Gaussian exponent must be > 0");
      if (!std::isfinite(p.coef))
        throw ParseError("constraint failed: non-finite contraction coefficient");
    }
    if (s.angulars.empty()) throw ParseError("constraint failed: shell without triplets");
    for (const auto& a : s.angulars) {
      if (a.nx < 0 || a.ny < 0 || a.nz < 0)
        throw ParseError("constraint failed: negative angular power");
      if (a.total() > basis::kMaxAngularMomentum)
        throw ParseError("constraint failed: angular momentum above g-type");
    }
    ao_count += static_cast<int>(s.angulars.size());
  }
  if (ao_count != n_basis)
    throw ParseError("constraint failed: mos n_basis does not match shell AO count");
  if (static_cast<std::size_t>(n_orb) * n_basis != mo_rows.size())
    throw ParseError("constraint failed: MO matrix size mismatch");
  for (double v : mo_rows)
    if (!std::isfinite(v)) throw ParseError("constraint failed: non-finite MO coefficient");
  if (terms.empty()) throw ParseError("constraint failed: at least one determinant term");
  bool any_nonzero = false;
  for (const auto& t : terms) {
    if (t.up.size() != terms[0].up.size() || t.down.size() != terms[0].down.size())
      throw ParseError("constraint failed: determinant spin sizes differ between terms");
    for (int i : t.up)
      if (i < 0 || i >= n_orb)
        throw ParseError("constraint failed: determinant references orbital beyond n_orb");
    for (int i : t.down)
      if (i < 0 || i >= n_orb)
        throw ParseError("constraint failed: determinant references orbital beyond n_orb");
    if (std::set<int>(t.up.begin(), t.up.end()).size() != t.up.size() ||
        std::set<int>(t.down.begin(), t.down.end()).size() != t.down.size())
      throw ParseError("constraint failed: duplicate orbital inside one determinant");
    if (t.coef != 0.0) any_nonzero = true;
  }
  if (!any_nonzero)
    throw ParseError("constraint failed: all determinant coefficients are zero");
  if (n_electrons() < 1) throw ParseError("constraint failed: no electrons");
  if (jastrow.enabled) {
    if (!(jastrow.b_ee > 0.0))
      throw ParseError("constraint failed: jastrow b_ee must be > 0 when enabled");
    for (const auto& e : jastrow.en)
      if (!(e.b_en > 0.0))
        throw ParseError("constraint failed: jastrow b_en must be > 0 when enabled");
  }
  if (hamiltonian.kind == HamiltonianKind::harmonic_test && !(hamiltonian.omega > 0.0))
    throw ParseError("constraint failed: harmonic omega must be > 0");
}

JastrowEval jastrow_terms(const JastrowParams& params, std::span<const Nucleus> nuclei,
                          std::span<const double> r) {
  const int n = static_cast<int>(r.size() / 3);
  JastrowEval out;
  out.grad.assign(3 * static_cast<std::size_t>(n), 0.0);
  out.lap.assign(n, 0.0);
  if (!params.enabled) return out;

  constexpr double tiny = 1e-12;

  // electron-nucleus, per species: U = -a r / (1 + b r)
  for (const auto& sp : params.en) {
    for (const auto& nuc : nuclei) {
      if (nuc.symbol != sp.symbol) continue;
      for (int i = 0; i < n; ++i) {
        const Vec3 ri{r[3 * i], r[3 * i + 1], r[3 * i + 2]};
        const Vec3 d = ri - nuc.pos;
        const double dist = norm(d);
        if (dist < tiny) continue;
        const double denom = 1.0 + sp.b_en * dist;
        out.value += -sp.a_en * dist / denom;
        const double fp = -sp.a_en / (denom * denom);
        const double fpp = 2.0 * sp.a_en * sp.b_en / (denom * denom * denom);
        for (int l = 0; l < 3; ++l) out.grad[3 * i + l] += fp * d[l] / dist;
        out.lap[i] += fpp + 2.0 * fp / dist;
      }
    }
  }

  // electron-electron pairs: U = a r / (1 + b r)
  for (int i = 0; i < n; ++i) {
    const Vec3 ri{r[3 * i], r[3 * i + 1], r[3 * i + 2]};
    for (int j = i + 1; j < n; ++j) {
      const Vec3 rj{r[3 * j], r[3 * j + 1], r[3 * j + 2]};
      const Vec3 d = ri - rj;
      const double dist = norm(d);
      if (dist < tiny) continue;
      const double denom = 1.0 + params.b_ee * dist;
      out.value += params.a_ee * dist / denom;
      const double fp = params.a_ee / (denom * denom);
      const double fpp = -2.0 * params.a_ee * params.b_ee / (denom * denom * denom);
      for (int l = 0; l < 3; ++l) {
        out.grad[3 * i + l] += fp * d[l] / dist;
        out.grad[3 * j + l] -= fp * d[l] / dist;
      }
      const double lap_pair = fpp + 2.0 * fp / dist;
      out.lap[i] += lap_pair;
      out.lap[j] += lap_pair;
    }
  }
  return out;
}

double local_potential(const Hamiltonian& h, std::span<const Nucleus> nuclei,
                       std::span<const double> r) {
  const int n = static_cast<int>(r.size() / 3);
  if (h.kind == HamiltonianKind::harmonic_test) {
    double r2 = 0.0;
    for (double v : r) r2 += v * v;
    return 0.5 * h.omega * h.omega * r2;
  }
  double v = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec3 ri{r[3 * i], r[3 * i + 1], r[3 * i + 2]};
    for (int j = i + 1; j < n; ++j) {
      const Vec3 rj{r[3 * j], r[3 * j + 1], r[3 * j + 2]};
      v += 1.0 / norm(ri - rj);
    }
    for (const auto& nuc : nuclei) {
      const double d = norm(ri - nuc.pos);
      if (d == 0.0) return std::numeric_limits<double>::infinity();
      v -= nuc.charge / d;
    }
  }
  for (std::size_t a = 0; a < nuclei.size(); ++a)
    for (std::size_t b = a + 1; b < nuclei.size(); ++b)
      v += nuclei[a].charge * nuclei[b].charge / norm(nuclei[a].pos - nuclei[b].pos);
  return v;
}

const char* to_string(Precision p) { return p == Precision::f32 ? "single" : "double"; }

Precision parse_precision(const std::string& name) {
  if (name == "single") return Precision::f32;
  if (name == "double") return Precision::f64;
  throw ConfigError("unknown precision: " + name);
}

Engine::Engine(TrialWavefunction model, EngineOptions opts)
    : model_(std::move(model)), opts_(opts) {
  model_.validate();
  basis_ = basis::make_basis(model_.shells, static_cast<int>(model_.nuclei.size()));
  if (basis_.n_basis != model_.n_basis)
    throw ConfigError("engine: basis AO count mismatch");
  if (opts_.precision == Precision::f32)
    a32_ = slater::MoCoefficients<float>::from_rows(model_.n_orb, model_.n_basis,
                                                    model_.mo_rows);
  else
    a64_ = slater::MoCoefficients<double>::from_rows(model_.n_orb, model_.n_basis,
                                                     model_.mo_rows);
}

PsiState Engine::evaluate(std::span<const double> r) const {
  slater::OpCounters scratch;
  return evaluate(r, scratch);
}

PsiState Engine::evaluate(std::span<const double> r, slater::OpCounters& counters) const {
  if (static_cast<int>(r.size()) != 3 * n_electrons())
    throw ConfigError("evaluate: coordinate vector has wrong length");
  if (opts_.precision == Precision::f32) return eval_impl(r, a32_, counters);
  return eval_impl(r, a64_, counters);
}

template <class Real>
PsiState Engine::eval_impl(std::span<const double> r,
                           const slater::MoCoefficients<Real>& a,
                           slater::OpCounters& counters) const {
  const int n = n_electrons();
  const int nup = model_.n_up();
  PsiState st;
  st.drift.assign(3 * static_cast<std::size_t>(n), 0.0);

  const auto block = basis::eval_ao_block<Real>(basis_, r);
  const auto c = slater::product_sparse<Real>(a, block, {opts_.variant, opts_.k_block},
                                              counters);

  struct Factor {
    slater::SlaterState state;
    slater::DetRatios ratios;
  };
  const std::size_t n_terms = model_.terms.size();
  std::vector<Factor> up(n_terms), down(n_terms);
  std::vector<char> live(n_terms, 0);
  std::vector<double> log_term(n_terms, 0.0);
  std::vector<int> sign_term(n_terms, 0);

  for (std::size_t k = 0; k < n_terms; ++k) {
    const auto& term = model_.terms[k];
    if (term.coef == 0.0) continue;
    up[k].state = slater::build_slater(c, term.up, 0, nup);
    down[k].state = slater::build_slater(c, term.down, nup, n - nup);
    if (up[k].state.singular || down[k].state.singular) continue;
    live[k] = 1;
    log_term[k] = std::log(std::fabs(term.coef)) + up[k].state.log_abs_det +
                  down[k].state.log_abs_det;
    sign_term[k] = (term.coef < 0.0 ? -1 : 1) * up[k].state.sign * down[k].state.sign;
    up[k].ratios = slater::det_ratios(up[k].state, c);
    down[k].ratios = slater::det_ratios(down[k].state, c);
  }

  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n_terms; ++k)
    if (live[k]) max_log = std::max(max_log, log_term[k]);
  if (!std::isfinite(max_log)) {
    st.node = true;
    return st;
  }
  double shifted_sum = 0.0;
  for (std::size_t k = 0; k < n_terms; ++k)
    if (live[k]) shifted_sum += sign_term[k] * std::exp(log_term[k] - max_log);
  if (shifted_sum == 0.0 || !std::isfinite(shifted_sum)) {
    st.node = true;
    return st;
  }

  const double log_abs_det_sum = max_log + std::log(std::fabs(shifted_sum));
  const int det_sign = shifted_sum < 0.0 ? -1 : 1;

  // signed term weights w_K = T_K / sum(T); they sum to one
  std::vector<double> weight(n_terms, 0.0);
  for (std::size_t k = 0; k < n_terms; ++k)
    if (live[k])
      weight[k] = sign_term[k] * std::exp(log_term[k] - max_log) / shifted_sum;

  std::vector<double> det_grad(3 * static_cast<std::size_t>(n), 0.0);
  std::vector<double> det_lap(n, 0.0);
  for (std::size_t k = 0; k < n_terms; ++k) {
    if (!live[k]) continue;
    const double w = weight[k];
    for (int e = 0; e < nup; ++e) {
      for (int l = 0; l < 3; ++l) det_grad[3 * e + l] += w * up[k].ratios.grad[3 * e + l];
      det_lap[e] += w * up[k].ratios.lap[e];
    }
    for (int e = 0; e < n - nup; ++e) {
      const int ge = nup + e;
      for (int l = 0; l < 3; ++l)
        det_grad[3 * ge + l] += w * down[k].ratios.grad[3 * e + l];
      det_lap[ge] += w * down[k].ratios.lap[e];
    }
  }

  const auto jas = jastrow_terms(model_.jastrow, model_.nuclei, r);

  double lap_psi_over_psi = 0.0;
  for (int e = 0; e < n; ++e) {
    double jg2 = 0.0, jdotd = 0.0;
    for (int l = 0; l < 3; ++l) {
      const double jg = jas.grad[3 * e + l];
      jg2 += jg * jg;
      jdotd += jg * det_grad[3 * e + l];
      st.drift[3 * e + l] = jg + det_grad[3 * e + l];
    }
    lap_psi_over_psi += jas.lap[e] + jg2 + 2.0 * jdotd + det_lap[e];
  }

  st.sign = det_sign;
  st.jastrow = jas.value;
  st.log_abs_psi = jas.value + log_abs_det_sum;
  st.e_local = -0.5 * lap_psi_over_psi +
               local_potential(model_.hamiltonian, model_.nuclei, r);
  if (!std::isfinite(st.e_local)) {
    // an exact electron-nucleus hit or overflow: treat as a rejected step
    st.node = true;
  }
  return st;
}

template PsiState Engine::eval_impl<float>(std::span<const double>,
                                           const slater::MoCoefficients<float>&,
                                           slater::OpCounters&) const;
template PsiState Engine::eval_impl<double>(std::span<const double>,
                                            const slater::MoCoefficients<double>&,
                                            slater::OpCounters&) const;

}  // namespace qmc::wf
