// qmc: desk-scale quantum Monte Carlo engine.
//
// Subcommands: init, run, report, merge, probe, serve, forward, work.
// The last three are the building blocks `run` orchestrates; they are exposed
// so a deployment can be assembled by hand across hosts.

#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "qmc/runtime.hpp"
#include "qmc/slater.hpp"
#include "qmc/store.hpp"
#include "qmc/wavefunction.hpp"

namespace fs = std::filesystem;
using namespace qmc;

namespace {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kKeyMismatch = 3,
  kCollapse = 4,
  kNoRecords = 5,
};

std::string self_exe_path() {
  char buf[4096];
  const ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
  if (n <= 0) return "qmc";
  buf[n] = '\0';
  return buf;
}

// run configuration: key=value file, overridable from the command line
struct RunConfig {
  std::map<std::string, std::string> kv;

  std::string get(const std::string& k, const std::string& fallback) const {
    auto it = kv.find(k);
    return it == kv.end() ? fallback : it->second;
  }
  double get_d(const std::string& k, double fallback) const {
    auto it = kv.find(k);
    return it == kv.end() ? fallback : std::stod(it->second);
  }
  int get_i(const std::string& k, int fallback) const {
    auto it = kv.find(k);
    return it == kv.end() ? fallback : std::stoi(it->second);
  }

  static RunConfig load(const std::string& path) {
    RunConfig c;
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      auto last = line.find_last_not_of(" \t\r");
      line = line.substr(first, last - first + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
      c.kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return c;
  }
  void apply_overrides(const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value: " + s);
      kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
  }
};

int cmd_init(const std::string& wf_path, const std::string& store_path, double tau,
             const std::string& mode_name) {
  wf::TrialWavefunction model;
  try {
    model = wf::TrialWavefunction::load(wf_path);
    model.validate();
    // constructing the evaluation engine re-checks basis/MO consistency
    wf::Engine probe(model, {});
  } catch (const std::exception& e) {
    std::fprintf(stderr, "init: %s\n", e.what());
    return kConfigError;
  }
  if (!(tau > 0.0)) {
    std::fprintf(stderr, "init: tau must be > 0\n");
    return kConfigError;
  }
  sampler::Mode mode;
  try {
    mode = sampler::parse_mode(mode_name);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "init: %s\n", e.what());
    return kConfigError;
  }

  const std::string canonical = model.canonical_text();
  const auto key = store::critical_key(canonical, tau, mode);
  const std::string critical = store::critical_bytes(canonical, tau, mode);

  if (store::Store::exists(store_path)) {
    auto existing = store::Store::open(store_path);
    if (existing.key() == key) {
      std::printf("%s\n", key.hex().c_str());
      return kOk;  // re-init over identical critical data is a no-op
    }
    std::fprintf(stderr, "init: store %s already holds key %s (new data hashes to %s)\n",
                 store_path.c_str(), existing.key().hex().c_str(), key.hex().c_str());
    return kKeyMismatch;
  }
  store::Store::create(store_path, critical, key);
  std::printf("%s\n", key.hex().c_str());
  return kOk;
}

int cmd_run(RunConfig cfg) {
  const std::string store_path = cfg.get("store", "");
  if (store_path.empty()) throw ConfigError("run: config needs store=<path>");
  if (!store::Store::exists(store_path))
    throw ConfigError("run: no store at " + store_path + " (run `qmc init` first)");
  auto st = store::Store::open(store_path);

  const double tau = cfg.get_d("tau", 0.0);
  const std::string mode = cfg.get("mode", "");
  if (!(tau > 0.0) || mode.empty())
    throw ConfigError("run: config needs tau=<t> and mode=vmc|dmc");
  auto crit = runtime::parse_critical_params(st.critical_text());
  if (!crit) throw ConfigError("run: store has malformed critical data");
  if (sampler::parse_mode(mode) != crit->mode ||
      format_g17(tau) != format_g17(crit->tau)) {
    std::fprintf(stderr,
                 "run: tau/mode in config do not match the store's critical data "
                 "(store: tau=%s mode=%s)\n",
                 format_g17(crit->tau).c_str(), sampler::to_string(crit->mode));
    return kKeyMismatch;
  }

  const int m = cfg.get_i("walkers", 100);
  const int steps = cfg.get_i("steps_per_block", 300);
  if (m < 1 || steps < 1) throw ConfigError("run: walkers and steps_per_block must be >= 1");
  (void)slater::parse_variant(cfg.get("variant", "blocked"));
  (void)wf::parse_precision(cfg.get("precision", "single"));

  runtime::ManagerOptions mo;
  mo.store_dir = store_path;
  mo.exe_path = self_exe_path();
  if (auto ep = net::Endpoint::parse(cfg.get("bind", "127.0.0.1:0")))
    mo.bind = *ep;
  else
    throw ConfigError("run: bad bind endpoint");
  mo.forwarders = cfg.get_i("forwarders", 1);
  mo.workers_per_forwarder = cfg.get_i("workers_per_forwarder", 1);
  if (mo.forwarders < 1 || mo.workers_per_forwarder < 1)
    throw ConfigError("run: topology needs at least one forwarder and one worker");
  mo.stop.wall_seconds = cfg.get_d("wall_seconds", 0.0);
  mo.stop.target_error = cfg.get_d("target_error", 0.0);
  mo.stop.max_blocks = cfg.get_i("max_blocks", 0);
  if (mo.stop.wall_seconds <= 0.0 && mo.stop.target_error <= 0.0 && mo.stop.max_blocks <= 0)
    throw ConfigError("run: set at least one stop condition "
                      "(wall_seconds, target_error or max_blocks)");
  mo.poll_s = cfg.get_d("poll_seconds", 5.0);
  mo.n_kept = cfg.get_i("nkept", 1000);
  mo.restart_workers = cfg.get_i("restart_workers", 0) != 0;
  if (cfg.kv.count("seed")) {
    mo.seed = std::stoull(cfg.get("seed", "0"));
    mo.seed_fixed = true;
  } else {
    mo.seed = std::random_device{}();
  }

  mo.bundle_params["walkers"] = std::to_string(m);
  mo.bundle_params["steps"] = std::to_string(steps);
  mo.bundle_params["window"] = cfg.get("window", "10");
  mo.bundle_params["variant"] = cfg.get("variant", "blocked");
  mo.bundle_params["kblock"] = cfg.get("kblock", "128");
  mo.bundle_params["precision"] = cfg.get("precision", "single");
  mo.bundle_params["warmup"] = cfg.get("warmup", "0");

  const auto outcome = runtime::run_manager(mo);
  return outcome.exit_code;
}

int cmd_report(const std::string& store_path, const std::string& level) {
  if (!store::Store::exists(store_path)) {
    std::fprintf(stderr, "report: no store at %s\n", store_path.c_str());
    return kConfigError;
  }
  auto st = store::Store::open(store_path);
  const auto recs = st.all_records();
  const auto stats = store::weighted_stats(recs);

  std::printf("store %s key %s\n", store_path.c_str(), st.key().hex().c_str());
  std::printf("%d blocks\n", stats.n_blocks);
  if (stats.n_blocks > 0) {
    std::printf("energy %s +/- %s\n", format_g17(stats.energy).c_str(),
                std::isfinite(stats.error) ? format_g17(stats.error).c_str()
                                           : "n/a (single block)");
    std::printf("sum_w %s steps %llu cpu %.3f s\n", format_g17(stats.sum_w).c_str(),
                static_cast<unsigned long long>(stats.steps), stats.cpu_seconds);
  }

  const auto runs = st.run_summaries();
  if (!runs.empty()) {
    const auto rows = runtime::speedup_report(runs);
    std::printf("runs:\n");
    std::printf("  %-18s %8s %12s %12s %9s %8s\n", "run", "workers", "t_cpu", "t_wall",
                "speedup", "fwd%%");
    for (const auto& r : rows)
      std::printf("  %-18s %8d %12.3f %12.3f %9.2f %8.3f\n", r.run_id.c_str(), r.workers,
                  r.t_cpu, r.t_wall, r.speedup, r.forwarder_cpu_pct);
  }

  if (level == "blocks" || level == "full") {
    std::printf("blocks:\n");
    for (const auto& r : recs) std::printf("  %s\n", r.to_line().c_str());
  }
  if (level == "full") {
    if (auto cp = st.load_checkpoint())
      std::printf("checkpoint: %zu walkers at ts %s\n", cp->entries.size(),
                  format_g17(cp->timestamp).c_str());
    else
      std::printf("checkpoint: none\n");
    std::uint64_t ma = 0, stored = 0, cols = 0, clamps = 0;
    for (const auto& r : recs) {
      ma += r.multiply_adds;
      stored += r.elements_stored;
      cols += r.columns_processed;
      clamps += r.clamp_events;
    }
    std::printf("counters: multiply_adds %llu elements_stored %llu columns %llu "
                "clamp_events %llu\n",
                static_cast<unsigned long long>(ma),
                static_cast<unsigned long long>(stored),
                static_cast<unsigned long long>(cols),
                static_cast<unsigned long long>(clamps));
  }
  return kOk;
}

int cmd_merge(const std::string& a_path, const std::string& b_path,
              const std::string& out_path) {
  try {
    auto a = store::Store::open(a_path);
    auto b = store::Store::open(b_path);
    auto merged = store::merge_stores(a, b, out_path);
    std::printf("merged %d blocks into %s (key %s)\n",
                merged.running_average().n_blocks, out_path.c_str(),
                merged.key().hex().c_str());
    return kOk;
  } catch (const store::KeyMismatch& e) {
    std::fprintf(stderr, "merge: %s\n", e.what());
    return kKeyMismatch;
  }
}

int cmd_probe(const std::vector<int>& sizes, const std::string& variant_name, int nnz,
              std::uint64_t seed) {
  slater::ProductOptions opts;
  opts.variant = slater::parse_variant(variant_name);
  const auto rows = slater::scaling_probe(sizes, nnz, opts, seed);
  std::printf("N\tmultiply_adds\tinversion_flops\n");
  std::vector<double> xs, ma, inv;
  for (const auto& r : rows) {
    std::printf("%d\t%llu\t%.0f\n", r.n, static_cast<unsigned long long>(r.multiply_adds),
                r.inversion_flops);
    xs.push_back(r.n);
    ma.push_back(static_cast<double>(r.multiply_adds));
    inv.push_back(r.inversion_flops);
  }
  if (rows.size() >= 2) {
    std::printf("product exponent %.4f\n", slater::fit_log_exponent(xs, ma));
    std::printf("inversion exponent %.4f\n", slater::fit_log_exponent(xs, inv));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale quantum Monte Carlo engine"};
  app.require_subcommand(1);

  // init
  auto* init = app.add_subcommand("init", "validate a wavefunction file and create a store");
  std::string wf_path, store_path, mode_name = "dmc";
  double tau = 0.01;
  init->add_option("wavefunction", wf_path)->required();
  init->add_option("store", store_path)->required();
  init->add_option("--tau", tau, "time step (critical data)")->required();
  init->add_option("--mode", mode_name, "vmc|dmc (critical data)")->required();

  // run
  auto* run = app.add_subcommand("run", "launch a local server/forwarder/worker run");
  std::string cfg_path;
  std::vector<std::string> overrides;
  run->add_option("--config", cfg_path, "key=value config file");
  run->add_option("--set", overrides, "override config entries (key=value)");

  // report
  auto* report = app.add_subcommand("report", "render store contents on demand");
  std::string rep_store, rep_level = "summary";
  report->add_option("store", rep_store)->required();
  report->add_option("--level", rep_level)->check(CLI::IsMember({"summary", "blocks", "full"}));

  // merge
  auto* merge = app.add_subcommand("merge", "merge two stores with equal critical keys");
  std::string merge_a, merge_b, merge_out;
  merge->add_option("a", merge_a)->required();
  merge->add_option("b", merge_b)->required();
  merge->add_option("out", merge_out)->required();

  // probe
  auto* probe = app.add_subcommand("probe", "kernel scaling counters and fitted exponents");
  std::vector<int> probe_sizes{64, 128, 256, 512};
  std::string probe_variant = "blocked";
  int probe_nnz = 16;
  std::uint64_t probe_seed = 7;
  probe->add_option("--sizes", probe_sizes, "electron counts");
  probe->add_option("--variant", probe_variant);
  probe->add_option("--nnz", probe_nnz, "per-electron nonzeros (<=0: dense)");
  probe->add_option("--seed", probe_seed);

  // serve
  auto* serve = app.add_subcommand("serve", "run the data server for a store");
  runtime::ServerOptions so;
  std::string serve_store, serve_bind = "127.0.0.1:0";
  std::vector<std::string> serve_params;
  serve->add_option("--store", serve_store)->required();
  serve->add_option("--bind", serve_bind);
  serve->add_option("--run-id", so.run_id);
  serve->add_option("--nkept", so.n_kept);
  serve->add_option("--idle-checkpoint", so.idle_checkpoint_s);
  serve->add_option("--shutdown-timeout", so.shutdown_timeout_s);
  serve->add_option("--expected-workers", so.expected_workers);
  serve->add_option("--param", serve_params, "bundle parameter key=value");

  // forward
  auto* forward = app.add_subcommand("forward", "run a forwarder node");
  runtime::ForwarderOptions fo;
  std::string fwd_server;
  std::vector<std::string> fwd_ancestors;
  forward->add_option("--node", fo.node_id)->required();
  forward->add_option("--server", fwd_server)->required();
  forward->add_option("--ancestor", fwd_ancestors, "ancestor endpoints, parent first");
  forward->add_option("--workers", fo.workers);
  forward->add_option("--scratch", fo.scratch_dir);
  forward->add_option("--nkept", fo.n_kept);
  forward->add_option("--pool-flush-min", fo.pool_flush_min_s);
  forward->add_option("--pool-flush-max", fo.pool_flush_max_s);
  forward->add_option("--send-interval", fo.send_interval_s);
  forward->add_option("--ack-timeout", fo.ack_timeout_s);
  forward->add_option("--retry-backoff", fo.retry_backoff_s);
  forward->add_option("--shutdown-timeout", fo.shutdown_timeout_s);
  forward->add_option("--orphan-timeout", fo.orphan_timeout_s);
  forward->add_option("--seed", fo.seed);
  forward->add_flag("--restart-workers", fo.restart_workers);

  // work
  auto* work = app.add_subcommand("work", "run a single-core worker");
  runtime::WorkerOptions wo;
  std::string work_fwd, work_input;
  work->add_option("--forwarder", work_fwd)->required();
  work->add_option("--input", work_input)->required();
  work->add_option("--worker-id", wo.worker_id)->required();
  work->add_option("--node-id", wo.node_id);
  work->add_option("--generation", wo.generation);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (init->parsed()) return cmd_init(wf_path, store_path, tau, mode_name);
    if (run->parsed()) {
      RunConfig cfg = cfg_path.empty() ? RunConfig{} : RunConfig::load(cfg_path);
      cfg.apply_overrides(overrides);
      return cmd_run(std::move(cfg));
    }
    if (report->parsed()) return cmd_report(rep_store, rep_level);
    if (merge->parsed()) return cmd_merge(merge_a, merge_b, merge_out);
    if (probe->parsed()) return cmd_probe(probe_sizes, probe_variant, probe_nnz, probe_seed);
    if (serve->parsed()) {
      so.store_dir = serve_store;
      if (auto ep = net::Endpoint::parse(serve_bind))
        so.bind = *ep;
      else
        throw ConfigError("serve: bad bind endpoint");
      for (const auto& p : serve_params) {
        const auto eq = p.find('=');
        if (eq == std::string::npos) throw ConfigError("--param expects key=value");
        so.bundle_params[p.substr(0, eq)] = p.substr(eq + 1);
      }
      return runtime::run_data_server(so);
    }
    if (forward->parsed()) {
      if (auto ep = net::Endpoint::parse(fwd_server))
        fo.server = *ep;
      else
        throw ConfigError("forward: bad server endpoint");
      for (const auto& a : fwd_ancestors) {
        auto ep = net::Endpoint::parse(a);
        if (!ep) throw ConfigError("forward: bad ancestor endpoint " + a);
        fo.ancestors.push_back(*ep);
      }
      fo.exe_path = self_exe_path();
      return runtime::run_forwarder(fo);
    }
    if (work->parsed()) {
      if (auto ep = net::Endpoint::parse(work_fwd))
        wo.forwarder = *ep;
      else
        throw ConfigError("work: bad forwarder endpoint");
      wo.input_file = work_input;
      return runtime::run_worker(wo);
    }
  } catch (const store::KeyMismatch& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kKeyMismatch;
  } catch (const sampler::PopulationCollapse& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kCollapse;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kConfigError;
  }
  return kOk;
}
