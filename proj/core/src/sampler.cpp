#include "qmc/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>

namespace qmc::sampler {

const char* to_string(Mode m) { return m == Mode::vmc ? "vmc" : "dmc"; }

Mode parse_mode(const std::string& name) {
  if (name == "vmc") return Mode::vmc;
  if (name == "dmc") return Mode::dmc;
  throw ConfigError("unknown sampler mode: " + name);
}

void Population::push_generation(double log_gen_weight) {
  window_log_weights.push_back(log_gen_weight);
  window_log_sum += log_gen_weight;
  while (static_cast<int>(window_log_weights.size()) > window_len) {
    window_log_sum -= window_log_weights.front();
    window_log_weights.pop_front();
  }
}

namespace {

double process_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

Walker fresh_walker(const wf::Engine& engine, std::mt19937_64& rng) {
  const auto& nuclei = engine.model().nuclei;
  const int n = engine.n_electrons();
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Walker w;
    w.r.resize(3 * static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
      const auto& nuc = nuclei[e % nuclei.size()];
      w.r[3 * e] = nuc.pos.x + jitter(rng);
      w.r[3 * e + 1] = nuc.pos.y + jitter(rng);
      w.r[3 * e + 2] = nuc.pos.z + jitter(rng);
    }
    w.psi = engine.evaluate(w.r);
    if (!w.psi.node) return w;
  }
  throw PopulationCollapse("could not place an initial walker off the nodal surface");
}

void seed_e_trial(const wf::Engine&, Population& pop) {
  double s = 0.0;
  for (const auto& w : pop.walkers) s += w.psi.e_local;
  pop.e_trial = pop.walkers.empty() ? 0.0 : s / static_cast<double>(pop.walkers.size());
}

}  // namespace

Population make_population(const wf::Engine& engine, int m, std::mt19937_64& rng,
                           int window_len) {
  if (m < 1) throw ConfigError("population size must be >= 1");
  Population pop;
  pop.window_len = window_len;
  pop.walkers.reserve(m);
  for (int i = 0; i < m; ++i) pop.walkers.push_back(fresh_walker(engine, rng));
  seed_e_trial(engine, pop);
  return pop;
}

Population make_population(const wf::Engine& engine, int m,
                           std::span<const PoolSample> pool, std::mt19937_64& rng,
                           int window_len) {
  if (pool.empty()) return make_population(engine, m, rng, window_len);
  if (m < 1) throw ConfigError("population size must be >= 1");
  Population pop;
  pop.window_len = window_len;
  pop.walkers.reserve(m);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const std::size_t want = 3 * static_cast<std::size_t>(engine.n_electrons());
  int placed = 0;
  for (int tries = 0; placed < m && tries < 100 * m; ++tries) {
    const auto& s = pool[pick(rng)];
    if (s.coords.size() != want) continue;
    Walker w;
    w.r = s.coords;
    w.psi = engine.evaluate(w.r);
    if (w.psi.node) continue;
    pop.walkers.push_back(std::move(w));
    ++placed;
  }
  while (placed < m) {
    pop.walkers.push_back(fresh_walker(engine, rng));
    ++placed;
  }
  seed_e_trial(engine, pop);
  return pop;
}

std::vector<double> drift_diffuse(std::span<const double> r, std::span<const double> drift,
                                  double tau, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sqrt_tau = std::sqrt(tau);
  std::vector<double> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i)
    out[i] = r[i] + tau * drift[i] + sqrt_tau * normal(rng);
  return out;
}

double branching_weight(double e_old, double e_new, double e_trial, double tau,
                        bool* clamped) {
  double x = -0.5 * tau * ((e_new - e_trial) + (e_old - e_trial));
  bool clamp = false;
  if (x > kLogWeightClamp) {
    x = kLogWeightClamp;
    clamp = true;
  } else if (x < -kLogWeightClamp) {
    x = -kLogWeightClamp;
    clamp = true;
  }
  if (clamped) *clamped = clamp;
  return std::exp(x);
}

StepWeights step_weights(std::span<const double> e_old, std::span<const double> e_new,
                         double tau, double e_trial) {
  const std::size_t m = e_old.size();
  if (e_new.size() != m) throw ConfigError("step_weights: size mismatch");
  StepWeights out;
  out.w.resize(m);
  out.p.resize(m);
  double sum_w = 0.0;
  std::vector<double> xi(m);
  double xi_max = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m; ++k) {
    bool clamped = false;
    out.w[k] = branching_weight(e_old[k], e_new[k], e_trial, tau, &clamped);
    if (clamped) ++out.clamp_events;
    sum_w += out.w[k];
    xi[k] = -0.5 * tau * (e_new[k] + e_old[k]);
    xi_max = std::max(xi_max, xi[k]);
  }
  if (!std::isfinite(xi_max))
    throw PopulationCollapse("non-finite local energies across the whole population");
  double sum_p = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    out.p[k] = std::exp(xi[k] - xi_max);
    sum_p += out.p[k];
  }
  for (auto& p : out.p) p /= sum_p;
  out.generation_weight = sum_w / static_cast<double>(m);
  return out;
}

std::vector<int> multinomial_copies(std::span<const double> p, int draws,
                                    std::mt19937_64& rng) {
  std::vector<double> cdf(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    cdf[i] = acc;
  }
  std::uniform_real_distribution<double> uni(0.0, acc);
  std::vector<int> copies(p.size(), 0);
  for (int d = 0; d < draws; ++d) {
    const double u = uni(rng);
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
    if (idx >= p.size()) idx = p.size() - 1;
    ++copies[idx];
  }
  return copies;
}

ReconfigResult reconfigure(std::span<const double> weights, std::mt19937_64& rng) {
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw PopulationCollapse("negative or non-finite reconfiguration weight");
    sum += w;
  }
  if (!(sum > 0.0))
    throw PopulationCollapse("all reconfiguration weights are zero");
  ReconfigResult res;
  std::vector<double> p(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) p[i] = weights[i] / sum;
  res.copies = multinomial_copies(p, static_cast<int>(weights.size()), rng);
  res.normalization = sum / static_cast<double>(weights.size());
  return res;
}

void vmc_step(const wf::Engine& engine, Population& pop, double tau, std::mt19937_64& rng,
              BlockAccumulator& acc) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (auto& w : pop.walkers) {
    auto proposal = drift_diffuse(w.r, w.psi.drift, tau, rng);
    const auto psi_new = engine.evaluate(proposal, acc.ops);
    ++acc.proposed;
    bool accept = false;
    if (!psi_new.node) {
      // |Psi'|^2 T(R'->R) / |Psi|^2 T(R->R')
      double log_fwd = 0.0, log_bwd = 0.0;
      for (std::size_t i = 0; i < proposal.size(); ++i) {
        const double df = proposal[i] - w.r[i] - tau * w.psi.drift[i];
        const double db = w.r[i] - proposal[i] - tau * psi_new.drift[i];
        log_fwd -= df * df;
        log_bwd -= db * db;
      }
      const double log_ratio = 2.0 * (psi_new.log_abs_psi - w.psi.log_abs_psi) +
                               (log_bwd - log_fwd) / (2.0 * tau);
      accept = log_ratio >= 0.0 || uni(rng) < std::exp(log_ratio);
    } else {
      ++acc.node_rejections;
    }
    if (accept) {
      w.r = std::move(proposal);
      w.psi = psi_new;
      w.age = 0;
      ++acc.accepted;
    } else {
      ++w.age;
    }
    acc.add_sample(1.0, w.psi.e_local);
  }
  ++acc.steps;
  acc.walkers = pop.size();
}

void dmc_step(const wf::Engine& engine, Population& pop, double tau, std::mt19937_64& rng,
              BlockAccumulator& acc) {
  const int m = pop.size();
  std::vector<double> e_old(m), e_new(m);
  for (int k = 0; k < m; ++k) {
    auto& w = pop.walkers[k];
    e_old[k] = w.psi.e_local;
    auto proposal = drift_diffuse(w.r, w.psi.drift, tau, rng);
    const auto psi_new = engine.evaluate(proposal, acc.ops);
    ++acc.proposed;
    // nodes act as hard barriers: a sign flip or node hit keeps the walker
    // at its old point, with the weight computed there
    if (psi_new.node || psi_new.sign != w.psi.sign) {
      ++acc.node_rejections;
      e_new[k] = e_old[k];
    } else {
      w.r = std::move(proposal);
      w.psi = psi_new;
      ++acc.accepted;
      e_new[k] = w.psi.e_local;
    }
  }

  const auto sw = step_weights(e_old, e_new, tau, pop.e_trial);
  acc.clamp_events += sw.clamp_events;
  if (!(sw.generation_weight > 0.0))
    throw PopulationCollapse("population weight vanished");
  const auto copies = multinomial_copies(sw.p, m, rng);

  std::vector<Walker> next;
  next.reserve(m);
  for (int k = 0; k < m; ++k)
    for (int c = 0; c < copies[k]; ++c) next.push_back(pop.walkers[k]);
  pop.walkers = std::move(next);

  pop.push_generation(std::log(sw.generation_weight));
  const double gw = pop.global_weight();
  for (const auto& w : pop.walkers) acc.add_sample(gw, w.psi.e_local);
  ++acc.steps;
  acc.walkers = pop.size();
}

BlockResult run_block(const wf::Engine& engine, Population& pop, const BlockParams& params,
                      std::mt19937_64& rng, const StopFlag* stop) {
  if (params.steps < 1) throw ConfigError("run_block: steps must be >= 1");
  BlockAccumulator acc;
  const double cpu0 = process_cpu_seconds();
  BlockResult res;
  for (int s = 0; s < params.steps; ++s) {
    if (stop && stop->requested()) {
      res.truncated = true;
      break;
    }
    if (params.mode == Mode::vmc)
      vmc_step(engine, pop, params.tau, rng, acc);
    else
      dmc_step(engine, pop, params.tau, rng, acc);
  }
  res.steps = acc.steps;
  res.sum_w = acc.sum_w;
  res.sum_we = acc.sum_we;
  res.sum_we2 = acc.sum_we2;
  res.acceptance = acc.acceptance();
  res.clamp_events = acc.clamp_events;
  res.node_rejections = acc.node_rejections;
  res.walkers = acc.walkers;
  res.ops = acc.ops;
  res.cpu_seconds = process_cpu_seconds() - cpu0;
  if (params.update_e_trial && params.mode == Mode::dmc && acc.sum_w > 0.0)
    pop.e_trial = acc.sum_we / acc.sum_w;
  return res;
}

}  // namespace qmc::sampler
