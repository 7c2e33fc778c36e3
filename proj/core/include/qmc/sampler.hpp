#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmc/slater.hpp"
#include "qmc/wavefunction.hpp"

namespace qmc::sampler {

enum class Mode { vmc, dmc };
const char* to_string(Mode m);
Mode parse_mode(const std::string& name);

class PopulationCollapse : public std::runtime_error {
 public:
  explicit PopulationCollapse(const std::string& what) : std::runtime_error(what) {}
};

struct Walker {
  std::vector<double> r;  // 3N
  wf::PsiState psi;
  int age = 0;  // steps since the last accepted VMC move
};

struct Population {
  std::vector<Walker> walkers;
  int window_len = 10;
  std::deque<double> window_log_weights;  // log(sum w / M) of recent generations
  double window_log_sum = 0.0;
  double e_trial = 0.0;

  int size() const { return static_cast<int>(walkers.size()); }
  void push_generation(double log_gen_weight);
  double global_weight() const { return std::exp(window_log_sum); }
};

// Fresh population: electrons scattered around the nuclei, skipping nodes.
Population make_population(const wf::Engine& engine, int m, std::mt19937_64& rng,
                           int window_len = 10);
// Population drawn from a restart pool of (E_L, R) samples.
struct PoolSample {
  double e_local = 0.0;
  std::vector<double> coords;
};
Population make_population(const wf::Engine& engine, int m,
                           std::span<const PoolSample> pool, std::mt19937_64& rng,
                           int window_len = 10);

struct BlockAccumulator {
  double sum_w = 0.0, sum_we = 0.0, sum_we2 = 0.0;
  std::uint64_t steps = 0;
  std::uint64_t proposed = 0, accepted = 0;
  std::uint64_t node_rejections = 0, clamp_events = 0;
  int walkers = 0;
  slater::OpCounters ops;

  void add_sample(double w, double e) {
    sum_w += w;
    sum_we += w * e;
    sum_we2 += w * e * e;
  }
  double acceptance() const {
    return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  }
};

// R' = R + tau * drift + sqrt(tau) * eta
std::vector<double> drift_diffuse(std::span<const double> r, std::span<const double> drift,
                                  double tau, std::mt19937_64& rng);

inline constexpr double kLogWeightClamp = 10.0;

// Symmetric branching weight, clamped to [e^-10, e^10]. `clamped` reports a
// clamp event when non-null.
double branching_weight(double e_old, double e_new, double e_trial, double tau,
                        bool* clamped = nullptr);

// Per-step weights and reconfiguration probabilities. The reference energy
// enters every weight through the same exp(tau * E_T) factor, so it cancels
// exactly in the normalized probabilities; they are computed from the
// shifted exponents directly.
struct StepWeights {
  std::vector<double> w;  // clamped branching weights
  std::vector<double> p;  // reconfiguration probabilities, sum to 1
  double generation_weight = 0.0;  // sum(w) / M
  std::uint64_t clamp_events = 0;
};
StepWeights step_weights(std::span<const double> e_old, std::span<const double> e_new,
                         double tau, double e_trial);

// Multinomial reconfiguration: M draws with p_k = w_k / sum(w).
struct ReconfigResult {
  std::vector<int> copies;  // per source walker, sums to M
  double normalization = 0.0;  // sum(w) / M
};
ReconfigResult reconfigure(std::span<const double> weights, std::mt19937_64& rng);

std::vector<int> multinomial_copies(std::span<const double> p, int draws,
                                    std::mt19937_64& rng);

void vmc_step(const wf::Engine& engine, Population& pop, double tau,
              std::mt19937_64& rng, BlockAccumulator& acc);
void dmc_step(const wf::Engine& engine, Population& pop, double tau,
              std::mt19937_64& rng, BlockAccumulator& acc);

// Cooperative stop flag; safe to set from a signal handler.
class StopFlag {
 public:
  void request() { flag_.store(true, std::memory_order_relaxed); }
  bool requested() const { return flag_.load(std::memory_order_relaxed); }
  void reset() { flag_.store(false, std::memory_order_relaxed); }

 private:
  std::atomic<bool> flag_{false};
};

struct BlockParams {
  int steps = 100;
  double tau = 0.01;
  Mode mode = Mode::dmc;
  bool update_e_trial = true;  // set E_T to the block average afterwards
};

struct BlockResult {
  std::uint64_t steps = 0;
  double sum_w = 0.0, sum_we = 0.0, sum_we2 = 0.0;
  double acceptance = 0.0;
  std::uint64_t clamp_events = 0;
  std::uint64_t node_rejections = 0;
  int walkers = 0;
  slater::OpCounters ops;
  double cpu_seconds = 0.0;
  bool truncated = false;

  double energy() const { return sum_w > 0.0 ? sum_we / sum_w : 0.0; }
};

// Runs up to params.steps Monte Carlo steps, honoring the stop flag at step
// boundaries: a truncated block reports exactly the steps it completed.
BlockResult run_block(const wf::Engine& engine, Population& pop, const BlockParams& params,
                      std::mt19937_64& rng, const StopFlag* stop = nullptr);

}  // namespace qmc::sampler
