#pragma once

#include <sys/types.h>

#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qmc/net.hpp"
#include "qmc/protocol.hpp"
#include "qmc/store.hpp"

namespace qmc::runtime {

// Parent chain of a binary-tree node: (i-1)/2, ..., 0.
std::vector<int> ancestor_chain(int node_id);

// Stratified pool merge: concatenate, sort by ascending local energy, keep
// the 1-based indices floor(eta + i * L / n_kept), i = 1..n_kept. Keeps
// everything when the combined list fits.
std::vector<sampler::PoolSample> merge_walker_pool(
    std::vector<sampler::PoolSample> pool, std::span<const sampler::PoolSample> incoming,
    int n_kept, double eta);
std::vector<sampler::PoolSample> merge_walker_pool(
    std::vector<sampler::PoolSample> pool, std::span<const sampler::PoolSample> incoming,
    int n_kept, std::mt19937_64& rng);

std::string make_nonce();

// run-critical parameters embedded in the critical bytes
struct CriticalParams {
  double tau = 0.0;
  sampler::Mode mode = sampler::Mode::dmc;
};
std::optional<CriticalParams> parse_critical_params(const std::string& critical_bytes);

// --- child process handling -------------------------------------------------

class Child {
 public:
  Child() = default;
  Child(pid_t pid, int stdout_fd, std::string name);
  Child(Child&&) noexcept;
  Child& operator=(Child&&) noexcept;
  ~Child();

  pid_t pid() const { return pid_; }
  int stdout_fd() const { return stdout_fd_; }
  const std::string& name() const { return name_; }

  void pump();  // drain available stdout into the line queue
  std::optional<std::string> next_line();
  // waits for a line starting with `prefix`, pumping until the deadline
  std::optional<std::string> await_line(const std::string& prefix, double timeout_s);

  bool alive();                       // non-blocking reap
  std::optional<int> exit_code();     // set once reaped
  void kill_hard();
  void signal(int sig);

 private:
  pid_t pid_ = -1;
  int stdout_fd_ = -1;
  std::string name_;
  std::string partial_;
  std::deque<std::string> lines_;
  std::optional<int> exit_code_;
  bool eof_ = false;
};

// fork+exec with stdout piped back; optionally delivers SIGTERM on parent
// death so orphaned workers shut down by themselves.
Child spawn_child(const std::vector<std::string>& argv, bool deathsig);

// --- roles -------------------------------------------------------------------

struct ServerOptions {
  std::filesystem::path store_dir;
  net::Endpoint bind{"127.0.0.1", 0};
  std::string run_id;                       // empty: generate
  std::map<std::string, std::string> bundle_params;
  int n_kept = 1000;
  double idle_checkpoint_s = 2.0;
  double shutdown_timeout_s = 20.0;
  int expected_workers = 0;  // recorded in the run summary
};
int run_data_server(const ServerOptions& opts);

struct ForwarderOptions {
  int node_id = 0;
  net::Endpoint server;
  std::vector<net::Endpoint> ancestors;  // parent first; the server is the final fallback
  int workers = 1;
  std::string exe_path;
  std::string scratch_dir;  // empty: $QMC_SCRATCH, /dev/shm, /tmp
  int n_kept = 1000;
  double pool_flush_min_s = 5.0, pool_flush_max_s = 15.0;
  double send_interval_s = 0.3;
  double ack_timeout_s = 5.0;
  double retry_backoff_s = 1.0;
  double shutdown_timeout_s = 30.0;
  // stop on our own if the data server stays unreachable this long; long
  // enough to ride out a short network disruption
  double orphan_timeout_s = 45.0;
  bool restart_workers = false;
  std::uint64_t seed = 0;
};
int run_forwarder(const ForwarderOptions& opts);

struct WorkerOptions {
  net::Endpoint forwarder;
  std::filesystem::path input_file;
  int worker_id = 0;
  int node_id = 0;
  int generation = 0;  // bumped on supervisor restarts to fork the rng stream
};
int run_worker(const WorkerOptions& opts);

struct StopConditions {
  double wall_seconds = 0.0;   // 0: unset
  double target_error = 0.0;   // 0: unset
  int max_blocks = 0;          // 0: unset
};

struct ManagerOptions {
  std::filesystem::path store_dir;
  std::string exe_path;
  net::Endpoint bind{"127.0.0.1", 0};
  int forwarders = 1;
  int workers_per_forwarder = 1;
  StopConditions stop;
  double poll_s = 5.0;
  int max_poll_failures = 5;
  std::map<std::string, std::string> bundle_params;
  int n_kept = 1000;
  std::uint64_t seed = 0;
  bool seed_fixed = false;
  bool restart_workers = false;
  bool quiet = false;
};

struct ManagerOutcome {
  int exit_code = 0;
  store::RunningAverage stats;
  std::optional<store::RunSummary> summary;
};
ManagerOutcome run_manager(const ManagerOptions& opts);

// --- reporting ----------------------------------------------------------------

struct SpeedupRow {
  std::string run_id;
  int workers = 0;
  double t_cpu = 0.0, t_wall = 0.0;
  double speedup = 0.0;           // (cpu/wall) / (cpu_ref/wall_ref)
  double forwarder_cpu_pct = 0.0; // forwarder CPU as % of worker CPU
};
std::vector<SpeedupRow> speedup_report(std::span<const store::RunSummary> runs);

}  // namespace qmc::runtime
