#include "qmc/runtime.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "qmc/wavefunction.hpp"

namespace qmc::runtime {

namespace fs = std::filesystem;

std::vector<int> ancestor_chain(int node_id) {
  std::vector<int> chain;
  while (node_id > 0) {
    node_id = (node_id - 1) / 2;
    chain.push_back(node_id);
  }
  return chain;
}

std::vector<sampler::PoolSample> merge_walker_pool(
    std::vector<sampler::PoolSample> pool, std::span<const sampler::PoolSample> incoming,
    int n_kept, double eta) {
  pool.insert(pool.end(), incoming.begin(), incoming.end());
  std::stable_sort(pool.begin(), pool.end(),
                   [](const auto& a, const auto& b) { return a.e_local < b.e_local; });
  const int total = static_cast<int>(pool.size());
  if (total <= n_kept) return pool;
  std::vector<sampler::PoolSample> kept;
  kept.reserve(n_kept);
  const double step = static_cast<double>(total) / static_cast<double>(n_kept);
  for (int i = 1; i <= n_kept; ++i) {
    const int idx_1b = static_cast<int>(std::floor(eta + i * step));
    kept.push_back(pool[std::clamp(idx_1b, 1, total) - 1]);
  }
  return kept;
}

std::vector<sampler::PoolSample> merge_walker_pool(
    std::vector<sampler::PoolSample> pool, std::span<const sampler::PoolSample> incoming,
    int n_kept, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  return merge_walker_pool(std::move(pool), incoming, n_kept, uni(rng));
}

std::string make_nonce() {
  static std::atomic<std::uint64_t> counter{0};
  const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
  std::uint64_t v = static_cast<std::uint64_t>(now) ^
                    (static_cast<std::uint64_t>(::getpid()) << 40) ^
                    (counter.fetch_add(1) << 56) ^ std::random_device{}();
  char buf[24];
  std::snprintf(buf, sizeof(buf), "x%015llx", static_cast<unsigned long long>(v & 0xfffffffffffffffull));
  return buf;
}

std::optional<CriticalParams> parse_critical_params(const std::string& critical_bytes) {
  std::istringstream is(critical_bytes);
  std::string line;
  CriticalParams out;
  bool have_tau = false, have_mode = false;
  bool past_end = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      past_end = true;
      continue;
    }
    if (!past_end) continue;
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k == "tau") {
      if (!(ls >> out.tau)) return std::nullopt;
      have_tau = true;
    } else if (k == "mode") {
      std::string mode_name;
      if (!(ls >> mode_name)) return std::nullopt;
      try {
        out.mode = sampler::parse_mode(mode_name);
      } catch (const std::exception&) {
        return std::nullopt;
      }
      have_mode = true;
    }
  }
  if (!have_tau || !have_mode) return std::nullopt;
  return out;
}

// --- small helpers -------------------------------------------------------------

namespace {

double now_mono() {
  timespec ts{};
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

double now_wall() {
  timespec ts{};
  clock_gettime(CLOCK_REALTIME, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

double self_cpu_seconds() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<double>(ru.ru_utime.tv_sec) + 1e-6 * ru.ru_utime.tv_usec +
         static_cast<double>(ru.ru_stime.tv_sec) + 1e-6 * ru.ru_stime.tv_usec;
}

volatile sig_atomic_t g_stop_signal = 0;
void stop_handler(int) { g_stop_signal = 1; }

void install_stop_handlers() {
  g_stop_signal = 0;
  struct sigaction sa {};
  sa.sa_handler = stop_handler;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGTERM, &sa, nullptr);
  ::sigaction(SIGUSR2, &sa, nullptr);
  ::sigaction(SIGINT, &sa, nullptr);
  ::signal(SIGPIPE, SIG_IGN);
}

std::string choose_scratch(const std::string& preferred) {
  if (!preferred.empty()) return preferred;
  if (const char* env = ::getenv("QMC_SCRATCH"); env && *env) return env;
  std::error_code ec;
  if (fs::is_directory("/dev/shm", ec)) return "/dev/shm";
  return "/tmp";
}

// drains available bytes into the reader; false when the peer is gone
bool pump_frames(net::Socket& sock, proto::FrameReader& reader) {
  unsigned char buf[16384];
  for (;;) {
    const long n = sock.recv_some(buf, sizeof(buf), 0);
    if (n == 0) return true;
    if (n < 0) return false;
    reader.feed(buf, static_cast<std::size_t>(n));
  }
}

std::string pool_frame_body(const std::string& id,
                            std::span<const sampler::PoolSample> entries) {
  proto::WalkerListBody wl;
  wl.entries.assign(entries.begin(), entries.end());
  return "pool " + id + "\n" + wl.encode();
}

std::optional<std::pair<std::string, proto::WalkerListBody>> parse_pool_frame(
    const std::string& body) {
  const auto nl = body.find('\n');
  if (nl == std::string::npos) return std::nullopt;
  std::istringstream hd(body.substr(0, nl));
  std::string tag, id;
  if (!(hd >> tag >> id) || tag != "pool") return std::nullopt;
  auto wl = proto::WalkerListBody::parse(body.substr(nl + 1));
  if (!wl) return std::nullopt;
  return std::make_pair(id, std::move(*wl));
}

}  // namespace

// --- Child ----------------------------------------------------------------------

Child::Child(pid_t pid, int stdout_fd, std::string name)
    : pid_(pid), stdout_fd_(stdout_fd), name_(std::move(name)) {}

Child::Child(Child&& o) noexcept { *this = std::move(o); }

Child& Child::operator=(Child&& o) noexcept {
  if (this != &o) {
    if (stdout_fd_ >= 0) ::close(stdout_fd_);
    pid_ = o.pid_;
    stdout_fd_ = o.stdout_fd_;
    name_ = std::move(o.name_);
    partial_ = std::move(o.partial_);
    lines_ = std::move(o.lines_);
    exit_code_ = o.exit_code_;
    eof_ = o.eof_;
    o.pid_ = -1;
    o.stdout_fd_ = -1;
  }
  return *this;
}

Child::~Child() {
  if (stdout_fd_ >= 0) ::close(stdout_fd_);
}

void Child::pump() {
  if (stdout_fd_ < 0 || eof_) return;
  char buf[4096];
  for (;;) {
    const ssize_t n = ::read(stdout_fd_, buf, sizeof(buf));
    if (n > 0) {
      partial_.append(buf, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = partial_.find('\n')) != std::string::npos) {
        lines_.push_back(partial_.substr(0, pos));
        partial_.erase(0, pos + 1);
      }
      continue;
    }
    if (n == 0) {
      eof_ = true;
      return;
    }
    if (errno == EAGAIN || errno == EWOULDBLOCK) return;
    if (errno == EINTR) continue;
    eof_ = true;
    return;
  }
}

std::optional<std::string> Child::next_line() {
  pump();
  if (lines_.empty()) return std::nullopt;
  auto line = std::move(lines_.front());
  lines_.pop_front();
  return line;
}

std::optional<std::string> Child::await_line(const std::string& prefix, double timeout_s) {
  const double deadline = now_mono() + timeout_s;
  std::deque<std::string> skipped;
  for (;;) {
    pump();
    while (!lines_.empty()) {
      auto line = std::move(lines_.front());
      lines_.pop_front();
      if (line.rfind(prefix, 0) == 0) {
        while (!skipped.empty()) {
          lines_.push_front(std::move(skipped.back()));
          skipped.pop_back();
        }
        return line;
      }
      skipped.push_back(std::move(line));
    }
    if (eof_ || now_mono() > deadline) {
      while (!skipped.empty()) {
        lines_.push_front(std::move(skipped.back()));
        skipped.pop_back();
      }
      return std::nullopt;
    }
    pollfd p{stdout_fd_, POLLIN, 0};
    ::poll(&p, 1, 50);
  }
}

bool Child::alive() {
  if (pid_ < 0) return false;
  if (exit_code_) return false;
  int status = 0;
  const pid_t r = ::waitpid(pid_, &status, WNOHANG);
  if (r == pid_) {
    exit_code_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
    return false;
  }
  return r == 0;
}

std::optional<int> Child::exit_code() {
  alive();
  return exit_code_;
}

void Child::kill_hard() {
  if (pid_ > 0 && !exit_code_) ::kill(pid_, SIGKILL);
}

void Child::signal(int sig) {
  if (pid_ > 0 && !exit_code_) ::kill(pid_, sig);
}

Child spawn_child(const std::vector<std::string>& argv, bool deathsig) {
  int pipefd[2];
  if (::pipe2(pipefd, O_CLOEXEC) != 0) throw std::runtime_error("pipe2 failed");
  const pid_t pid = ::fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    ::dup2(pipefd[1], STDOUT_FILENO);
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    if (deathsig) ::prctl(PR_SET_PDEATHSIG, SIGTERM);
    std::vector<char*> args;
    args.reserve(argv.size() + 1);
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execv(argv[0].c_str(), args.data());
    ::_exit(127);
  }
  ::close(pipefd[1]);
  const int flags = ::fcntl(pipefd[0], F_GETFL, 0);
  ::fcntl(pipefd[0], F_SETFL, flags | O_NONBLOCK);
  return Child(pid, pipefd[0], argv.empty() ? "?" : argv[0]);
}

// --- worker ---------------------------------------------------------------------

namespace {

sampler::StopFlag g_worker_stop;
void worker_signal(int) { g_worker_stop.request(); }

struct WorkerInput {
  proto::InputBundleBody bundle;
  CriticalParams critical;
  wf::TrialWavefunction model;

  std::string param(const std::string& k, const std::string& fallback) const {
    auto it = bundle.params.find(k);
    return it == bundle.params.end() ? fallback : it->second;
  }
};

WorkerInput load_worker_input(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("worker: cannot open input " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  auto bundle = proto::InputBundleBody::parse(os.str());
  if (!bundle) throw ConfigError("worker: malformed input bundle file");
  auto crit = parse_critical_params(bundle->critical_text);
  if (!crit) throw ConfigError("worker: input bundle lacks tau/mode");
  WorkerInput in;
  in.bundle = std::move(*bundle);
  in.critical = *crit;
  in.model = wf::TrialWavefunction::parse_text(in.bundle.critical_text);
  return in;
}

// scans already-received frames and pumps the socket; Stop frames set the
// worker stop flag; returns false when the link is dead
bool worker_poll_frames(net::Socket& sock, proto::FrameReader& reader,
                        const std::string& want_ack, bool* got_ack) {
  if (!pump_frames(sock, reader)) return false;
  while (auto f = reader.next()) {
    if (f->type == proto::MsgType::stop) {
      g_worker_stop.request();
    } else if (f->type == proto::MsgType::ping && got_ack) {
      auto ack = proto::AckBody::parse(f->body);
      if (ack && ack->batch_id == want_ack) *got_ack = true;
    }
  }
  return !reader.corrupt();
}

bool worker_await_ack(net::Socket& sock, proto::FrameReader& reader,
                      const std::string& batch_id, double timeout_s) {
  const double deadline = now_mono() + timeout_s;
  bool got = false;
  for (;;) {
    if (!worker_poll_frames(sock, reader, batch_id, &got)) return false;
    if (got) return true;
    if (now_mono() > deadline) return false;
    pollfd p{sock.fd(), POLLIN, 0};
    ::poll(&p, 1, 100);
  }
}

}  // namespace

int run_worker(const WorkerOptions& opts) {
  {
    struct sigaction sa {};
    sa.sa_handler = worker_signal;
    sigemptyset(&sa.sa_mask);
    ::sigaction(SIGTERM, &sa, nullptr);
    ::sigaction(SIGUSR2, &sa, nullptr);
    ::sigaction(SIGINT, &sa, nullptr);
    ::signal(SIGPIPE, SIG_IGN);
  }
  g_worker_stop.reset();

  WorkerInput in = load_worker_input(opts.input_file);
  const std::uint32_t key = store::crc32(store::critical_bytes(
      in.model.canonical_text(), in.critical.tau, in.critical.mode));

  wf::EngineOptions eopts;
  eopts.variant = slater::parse_variant(in.param("variant", "blocked"));
  eopts.k_block = std::stoi(in.param("kblock", "128"));
  eopts.precision = wf::parse_precision(in.param("precision", "single"));
  const wf::Engine engine(in.model, eopts);

  const std::uint64_t run_seed = std::stoull(in.param("seed", "1"));
  const auto generation = static_cast<std::uint64_t>(opts.generation);
  std::mt19937_64 rng(run_seed ^ static_cast<std::uint64_t>(opts.worker_id) ^
                      (generation << 32));

  const int m = std::stoi(in.param("walkers", "100"));
  const int window = std::stoi(in.param("window", "10"));
  const int steps = std::stoi(in.param("steps", "300"));
  const int warmup = std::stoi(in.param("warmup", "0"));
  const std::string nonce = in.param("nonce", "run");

  auto pop = sampler::make_population(engine, m, in.bundle.walkers, rng, window);

  std::optional<net::Socket> sock;
  for (int retry = 0; retry < 10 && !sock; ++retry) {
    sock = net::connect_to(opts.forwarder, 2000);
    if (!sock) ::usleep(300 * 1000);
  }
  if (!sock) {
    std::fprintf(stderr, "worker %d: forwarder unreachable\n", opts.worker_id);
    return 1;
  }
  proto::FrameReader reader;

  sampler::BlockParams bp;
  bp.tau = in.critical.tau;
  bp.mode = in.critical.mode;
  bp.steps = steps;
  bp.update_e_trial = false;

  std::uint64_t blocks = 0, total_steps = 0, seq = 0;
  double run_sw = 0.0, run_swe = 0.0;
  int rc = 0;

  try {
    if (warmup > 0 && !g_worker_stop.requested()) {
      sampler::BlockParams wp = bp;
      wp.steps = warmup;
      (void)sampler::run_block(engine, pop, wp, rng, &g_worker_stop);
    }
    while (!g_worker_stop.requested()) {
      if (!worker_poll_frames(*sock, reader, "", nullptr)) {
        rc = 1;
        break;
      }
      if (g_worker_stop.requested()) break;

      auto res = sampler::run_block(engine, pop, bp, rng, &g_worker_stop);
      if (res.steps < 1) break;

      store::BlockRecord rec;
      rec.record_id = nonce + "-n" + std::to_string(opts.node_id) + "-w" +
                      std::to_string(opts.worker_id) +
                      (generation ? "-g" + std::to_string(generation) : "") + "-" +
                      std::to_string(seq++);
      rec.key = key;
      rec.worker_id = opts.worker_id;
      rec.node_id = opts.node_id;
      rec.steps = res.steps;
      rec.walkers = res.walkers;
      rec.sum_w = res.sum_w;
      rec.sum_we = res.sum_we;
      rec.sum_we2 = res.sum_we2;
      rec.acceptance = res.acceptance;
      rec.clamp_events = res.clamp_events;
      rec.cpu_seconds = res.cpu_seconds;
      rec.wall_ts = now_wall();
      rec.multiply_adds = res.ops.multiply_adds;
      rec.elements_stored = res.ops.elements_stored;
      rec.columns_processed = res.ops.columns_processed;
      rec.mode = sampler::to_string(bp.mode);

      proto::ResultBatchBody batch;
      batch.batch_id = rec.record_id;
      batch.record_lines.push_back(rec.to_line());
      if (!sock->send_frame({proto::MsgType::result_batch, key, batch.encode()}, 5000) ||
          !worker_await_ack(*sock, reader, batch.batch_id, 15.0)) {
        std::fprintf(stderr, "worker %d: lost forwarder, exiting\n", opts.worker_id);
        rc = 1;
        break;
      }
      ++blocks;
      total_steps += res.steps;
      run_sw += res.sum_w;
      run_swe += res.sum_we;
      if (bp.mode == sampler::Mode::dmc && run_sw > 0.0) pop.e_trial = run_swe / run_sw;

      proto::WalkerListBody wl;
      wl.entries.reserve(pop.walkers.size());
      for (const auto& w : pop.walkers) wl.entries.push_back({w.psi.e_local, w.r});
      const std::string pool_id = rec.record_id + "-pool";
      if (sock->send_frame({proto::MsgType::walker_list, key,
                            pool_frame_body(pool_id, wl.entries)}, 5000))
        (void)worker_await_ack(*sock, reader, pool_id, 5.0);

      if (res.truncated) break;
    }
  } catch (const sampler::PopulationCollapse& e) {
    std::fprintf(stderr, "worker %d: population collapse: %s\n", opts.worker_id,
                 e.what());
    rc = 4;
  }

  std::printf("worker done id=%d blocks=%llu steps=%llu\n", opts.worker_id,
              static_cast<unsigned long long>(blocks),
              static_cast<unsigned long long>(total_steps));
  std::fflush(stdout);
  return rc;
}

// --- forwarder -------------------------------------------------------------------

namespace {

struct PeerConn {
  net::Socket sock;
  proto::FrameReader reader;
};

struct RelayEntry {
  std::string downstream_batch;
  int peer_fd = -1;  // -1 once the child vanished
  std::vector<std::string> lines;
};

struct UpstreamTxn {
  enum class Kind { batch, pool } kind = Kind::batch;
  std::string batch_id;
  std::size_t own_count = 0;
  std::vector<RelayEntry> relays;
  std::vector<sampler::PoolSample> pool;
  double deadline = 0.0;  // ack deadline once sent
  bool sent = false;
};

}  // namespace

int run_forwarder(const ForwarderOptions& opts) {
  install_stop_handlers();

  auto listener = net::Listener::bind({"127.0.0.1", 0});
  if (!listener) {
    std::fprintf(stderr, "forwarder %d: cannot bind\n", opts.node_id);
    return 1;
  }
  std::printf("listening %s\n", listener->local_endpoint().str().c_str());
  std::fflush(stdout);

  auto connect_control = [&]() -> std::optional<net::Socket> {
    auto s = net::connect_to(opts.server, 3000);
    if (!s) return std::nullopt;
    proto::RegisterBody reg{opts.node_id, opts.workers};
    if (!s->send_frame({proto::MsgType::ping, 0, reg.encode()}, 3000))
      return std::nullopt;
    return s;
  };

  std::optional<net::Socket> control;
  proto::FrameReader control_reader;
  const double boot_deadline = now_mono() + 30.0;
  while (!control && now_mono() < boot_deadline && !g_stop_signal) {
    control = connect_control();
    if (!control) ::usleep(300 * 1000);
  }
  if (!control) {
    std::fprintf(stderr, "forwarder %d: data server unreachable\n", opts.node_id);
    return 1;
  }

  // fetch the input once; the CRC key guards the transfer
  std::string bundle_body;
  std::uint32_t key = 0;
  {
    if (!control->send_frame({proto::MsgType::input_request, 0, ""}, 3000)) return 1;
    auto f = control->recv_frame(20000);
    if (!f || f->type != proto::MsgType::input_bundle) {
      std::fprintf(stderr, "forwarder %d: no input bundle\n", opts.node_id);
      return 1;
    }
    auto bundle = proto::InputBundleBody::parse(f->body);
    std::optional<CriticalParams> crit;
    std::uint32_t crc = 0;
    if (bundle && (crit = parse_critical_params(bundle->critical_text))) {
      try {
        const auto model = wf::TrialWavefunction::parse_text(bundle->critical_text);
        crc = store::crc32(
            store::critical_bytes(model.canonical_text(), crit->tau, crit->mode));
      } catch (const std::exception&) {
        crc = 0;
      }
    }
    if (!bundle || !crit || crc != f->key) {
      std::fprintf(stderr, "forwarder %d: input bundle failed its CRC check\n",
                   opts.node_id);
      return 3;
    }
    key = f->key;
    bundle_body = f->body;
  }

  const fs::path scratch = fs::path(choose_scratch(opts.scratch_dir)) /
                           ("qmc-n" + std::to_string(opts.node_id) + "-" +
                            std::to_string(::getpid()));
  fs::create_directories(scratch);
  const fs::path input_path = scratch / "input.txt";
  {
    std::ofstream f(input_path, std::ios::binary | std::ios::trunc);
    f << bundle_body;
  }

  const std::string my_ep = listener->local_endpoint().str();
  std::vector<Child> workers;
  std::vector<int> worker_slot;
  std::vector<int> worker_generation(opts.workers, 0);
  auto spawn_worker = [&](int slot) {
    const int wid = opts.node_id * 1000 + slot;
    std::vector<std::string> argv = {opts.exe_path,
                                     "work",
                                     "--forwarder",
                                     my_ep,
                                     "--input",
                                     input_path.string(),
                                     "--worker-id",
                                     std::to_string(wid),
                                     "--node-id",
                                     std::to_string(opts.node_id),
                                     "--generation",
                                     std::to_string(worker_generation[slot])};
    workers.push_back(spawn_child(argv, true));
    worker_slot.push_back(slot);
    std::printf("worker pid=%d id=%d slot=%d\n", workers.back().pid(), wid, slot);
    std::fflush(stdout);
  };
  for (int i = 0; i < opts.workers; ++i) spawn_worker(i);

  std::vector<net::Endpoint> uplinks = opts.ancestors;
  uplinks.push_back(opts.server);
  std::size_t uplink_idx = 0;
  std::optional<net::Socket> upstream;
  proto::FrameReader upstream_reader;
  double next_send_attempt = 0.0;
  double next_control_retry = 0.0;

  std::map<int, PeerConn> peers;
  std::deque<std::string> own_lines;
  std::vector<RelayEntry> relay_pending;
  std::optional<UpstreamTxn> inflight;
  std::vector<sampler::PoolSample> pool;
  std::mt19937_64 rng(opts.seed ? opts.seed : std::random_device{}());
  std::uniform_real_distribution<double> flush_draw(opts.pool_flush_min_s,
                                                    opts.pool_flush_max_s);
  double pool_flush_at = now_mono() + flush_draw(rng);

  bool stopping = false;
  bool collapse_seen = false;
  double stop_deadline = 0.0;
  double control_lost_at = 0.0;  // 0: control link healthy
  std::uint64_t relayed_batches = 0;

  auto begin_stop = [&]() {
    if (stopping) return;
    stopping = true;
    stop_deadline = now_mono() + opts.shutdown_timeout_s;
    for (auto& w : workers) w.signal(SIGTERM);
  };

  auto open_upstream = [&]() -> bool {
    for (std::size_t attempt = 0; attempt < uplinks.size(); ++attempt) {
      const auto& ep = uplinks[uplink_idx % uplinks.size()];
      auto s = net::connect_to(ep, 1500);
      if (s) {
        upstream = std::move(s);
        upstream_reader = proto::FrameReader();
        return true;
      }
      ++uplink_idx;
    }
    return false;
  };

  auto drop_upstream = [&]() {
    upstream.reset();
    ++uplink_idx;
    next_send_attempt = now_mono() + opts.retry_backoff_s;
    if (inflight) {
      inflight->sent = false;
      inflight->deadline = 0.0;
    }
  };

  auto send_inflight = [&]() {
    if (!inflight || inflight->sent) return;
    if (!upstream && !open_upstream()) {
      next_send_attempt = now_mono() + opts.retry_backoff_s;
      return;
    }
    proto::Frame f;
    if (inflight->kind == UpstreamTxn::Kind::batch) {
      proto::ResultBatchBody body;
      body.batch_id = inflight->batch_id;
      body.relay = true;
      for (std::size_t i = 0; i < inflight->own_count; ++i)
        body.record_lines.push_back(own_lines[i]);
      for (const auto& r : inflight->relays)
        for (const auto& l : r.lines) body.record_lines.push_back(l);
      f = {proto::MsgType::result_batch, key, body.encode()};
    } else {
      f = {proto::MsgType::walker_list, key,
           pool_frame_body(inflight->batch_id, inflight->pool)};
    }
    if (!upstream->send_frame(f, 2000)) {
      drop_upstream();
      return;
    }
    inflight->sent = true;
    inflight->deadline = now_mono() + opts.ack_timeout_s;
  };

  auto complete_inflight = [&]() {
    if (inflight->kind == UpstreamTxn::Kind::batch) {
      for (std::size_t i = 0; i < inflight->own_count; ++i) own_lines.pop_front();
      for (auto& r : inflight->relays) {
        auto it = r.peer_fd >= 0 ? peers.find(r.peer_fd) : peers.end();
        if (it != peers.end()) {
          proto::AckBody ack{r.downstream_batch,
                             static_cast<std::uint64_t>(r.lines.size()), 0};
          it->second.sock.send_frame({proto::MsgType::ping, key, ack.encode()}, 1000);
        }
      }
    } else {
      pool_flush_at = now_mono() + flush_draw(rng);
    }
    inflight.reset();
    // batch small trickles; a backlog or a shutdown flushes immediately
    next_send_attempt = now_mono() + opts.send_interval_s;
    if (stopping || own_lines.size() + relay_pending.size() >= 512)
      next_send_attempt = now_mono();
  };

  while (true) {
    const double now = now_mono();
    if (g_stop_signal) begin_stop();
    if (!control) {
      if (control_lost_at == 0.0) control_lost_at = now;
      if (now - control_lost_at > opts.orphan_timeout_s) begin_stop();
    } else {
      control_lost_at = 0.0;
    }

    bool workers_running = false;
    for (std::size_t i = 0; i < workers.size(); ++i) {
      if (workers[i].pid() < 0) continue;
      if (workers[i].alive()) {
        workers_running = true;
        continue;
      }
      if (auto code = workers[i].exit_code()) {
        if (*code == 4) collapse_seen = true;
        const int slot = worker_slot[i];
        workers[i] = Child();
        if (!stopping && opts.restart_workers) {
          ++worker_generation[slot];
          spawn_worker(slot);
          workers_running = true;
        }
      }
    }

    const bool backlog = own_lines.size() + relay_pending.size() >= 512;
    if (!inflight && (now >= next_send_attempt || backlog || stopping)) {
      if (!own_lines.empty() || !relay_pending.empty()) {
        UpstreamTxn t;
        t.kind = UpstreamTxn::Kind::batch;
        t.batch_id = make_nonce();
        t.own_count = std::min<std::size_t>(own_lines.size(), 20000);
        t.relays = std::move(relay_pending);
        relay_pending.clear();
        inflight = std::move(t);
      } else if (!pool.empty() && (now >= pool_flush_at || stopping)) {
        UpstreamTxn t;
        t.kind = UpstreamTxn::Kind::pool;
        t.batch_id = make_nonce();
        t.pool = std::move(pool);
        pool.clear();
        inflight = std::move(t);
      }
    }
    if (inflight && !inflight->sent && (now >= next_send_attempt || stopping))
      send_inflight();
    if (inflight && inflight->sent && now > inflight->deadline) {
      drop_upstream();
      send_inflight();
    }

    if (stopping) {
      const bool drained =
          own_lines.empty() && relay_pending.empty() && !inflight && pool.empty();
      if ((!workers_running && drained) || now > stop_deadline) {
        if (now > stop_deadline)
          for (auto& w : workers) w.kill_hard();
        proto::TerminatedBody tb{opts.node_id, self_cpu_seconds()};
        const proto::Frame tf{proto::MsgType::terminated, key, tb.encode()};
        bool told = control && control->send_frame(tf, 2000);
        if (!told) {
          if (auto c2 = connect_control()) c2->send_frame(tf, 2000);
        }
        break;
      }
    }

    std::vector<pollfd> fds;
    fds.push_back({listener->fd(), POLLIN, 0});
    fds.push_back({control ? control->fd() : -1, POLLIN, 0});
    fds.push_back({upstream ? upstream->fd() : -1, POLLIN, 0});
    const std::size_t peers_at = fds.size();
    for (auto& [fd, pc] : peers) fds.push_back({fd, POLLIN, 0});
    ::poll(fds.data(), static_cast<nfds_t>(fds.size()), 100);

    if (fds[0].revents & POLLIN) {
      while (auto s = listener->accept(0)) {
        PeerConn pc;
        pc.sock = std::move(*s);
        const int fd = pc.sock.fd();
        peers.emplace(fd, std::move(pc));
      }
    }

    if (control && (fds[1].revents & (POLLIN | POLLHUP | POLLERR))) {
      if (!pump_frames(*control, control_reader)) {
        control.reset();
        control_reader = proto::FrameReader();
      } else {
        while (auto f = control_reader.next())
          if (f->type == proto::MsgType::stop) begin_stop();
        if (control_reader.corrupt()) {
          control.reset();
          control_reader = proto::FrameReader();
        }
      }
    }
    if (!control && now >= next_control_retry) {
      control = connect_control();
      control_reader = proto::FrameReader();
      if (!control) next_control_retry = now + 1.0;
    }

    if (upstream && (fds[2].revents & (POLLIN | POLLHUP | POLLERR))) {
      if (!pump_frames(*upstream, upstream_reader)) {
        drop_upstream();
      } else {
        while (auto f = upstream_reader.next()) {
          if (f->type != proto::MsgType::ping) continue;
          auto ack = proto::AckBody::parse(f->body);
          if (ack && inflight && inflight->sent && ack->batch_id == inflight->batch_id)
            complete_inflight();
        }
        if (upstream && upstream_reader.corrupt()) drop_upstream();
      }
    }

    std::vector<int> dead_peers;
    for (std::size_t pi = peers_at; pi < fds.size(); ++pi) {
      if (!(fds[pi].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const int fd = fds[pi].fd;
      auto it = peers.find(fd);
      if (it == peers.end()) continue;
      PeerConn& pc = it->second;
      if (!pump_frames(pc.sock, pc.reader)) {
        dead_peers.push_back(fd);
        continue;
      }
      while (auto f = pc.reader.next()) {
        if (f->type == proto::MsgType::result_batch) {
          if (f->key != key) continue;  // wrong simulation: drop silently
          auto body = proto::ResultBatchBody::parse(f->body);
          if (!body) continue;
          if (body->relay) {
            RelayEntry re;
            re.downstream_batch = body->batch_id;
            re.peer_fd = fd;
            re.lines = std::move(body->record_lines);
            relay_pending.push_back(std::move(re));
            ++relayed_batches;
          } else {
            const auto n = static_cast<std::uint64_t>(body->record_lines.size());
            for (auto& l : body->record_lines) own_lines.push_back(std::move(l));
            proto::AckBody ack{body->batch_id, n, 0};
            pc.sock.send_frame({proto::MsgType::ping, key, ack.encode()}, 1000);
          }
        } else if (f->type == proto::MsgType::walker_list) {
          if (f->key != key) continue;
          auto parsed = parse_pool_frame(f->body);
          if (!parsed) continue;
          pool = merge_walker_pool(std::move(pool), parsed->second.entries, opts.n_kept,
                                   rng);
          proto::AckBody ack{parsed->first,
                             static_cast<std::uint64_t>(parsed->second.entries.size()),
                             0};
          pc.sock.send_frame({proto::MsgType::ping, key, ack.encode()}, 1000);
        } else if (f->type == proto::MsgType::terminated) {
          // best-effort relay for a child whose control link is gone
          if (control) control->send_frame(*f, 1000);
        } else if (f->type == proto::MsgType::stop) {
          begin_stop();
        }
      }
      if (pc.reader.corrupt()) dead_peers.push_back(fd);
    }
    for (int fd : dead_peers) {
      for (auto& r : relay_pending)
        if (r.peer_fd == fd) r.peer_fd = -1;
      if (inflight)
        for (auto& r : inflight->relays)
          if (r.peer_fd == fd) r.peer_fd = -1;
      peers.erase(fd);
    }
  }

  std::error_code ec;
  fs::remove_all(scratch, ec);
  std::printf("forwarder done node=%d relayed=%llu\n", opts.node_id,
              static_cast<unsigned long long>(relayed_batches));
  std::fflush(stdout);
  return collapse_seen ? 4 : 0;
}

// --- data server -----------------------------------------------------------------

namespace {

struct NodeInfo {
  int control_fd = -1;
  int workers = 0;
  bool alive = true;
  bool terminated = false;
  bool stop_sent = false;
  double cpu = 0.0;
};

}  // namespace

int run_data_server(const ServerOptions& opts) {
  install_stop_handlers();

  auto st = store::Store::open(opts.store_dir);
  const std::string run_id = opts.run_id.empty() ? make_nonce() : opts.run_id;
  st.open_segment("server-" + run_id + "-" + std::to_string(::getpid()));

  std::set<std::string> seen_ids;
  for (const auto& r : st.all_records()) seen_ids.insert(r.record_id);

  std::vector<sampler::PoolSample> pool;
  if (auto cp = st.load_checkpoint()) pool = std::move(cp->entries);

  auto listener = net::Listener::bind(opts.bind);
  if (!listener) {
    std::fprintf(stderr, "server: cannot bind %s\n", opts.bind.str().c_str());
    return 1;
  }
  std::printf("listening %s\n", listener->local_endpoint().str().c_str());
  std::fflush(stdout);

  std::map<int, PeerConn> conns;
  std::map<int, NodeInfo> registry;
  std::mt19937_64 rng(std::random_device{}());

  std::uint64_t records_ingested = 0, rejected_frames = 0, rejected_records = 0;
  double cpu_sum = 0.0, fwd_cpu = 0.0;
  std::set<int> workers_seen;
  const double t_start = now_mono();
  double last_data = now_mono();
  bool pool_dirty = false;
  bool stopping = false;
  double stop_deadline = 0.0;

  auto children_done = [&](int node) {
    for (int c : {2 * node + 1, 2 * node + 2}) {
      auto it = registry.find(c);
      if (it != registry.end() && it->second.alive && !it->second.terminated)
        return false;
    }
    return true;
  };

  auto advance_shutdown = [&]() {
    if (!stopping) return;
    for (auto& [node, info] : registry) {
      if (!info.alive || info.terminated || info.stop_sent) continue;
      if (!children_done(node)) continue;
      auto it = conns.find(info.control_fd);
      if (it == conns.end()) {
        info.alive = false;
        continue;
      }
      it->second.sock.send_frame({proto::MsgType::stop, st.key().value, ""}, 1000);
      info.stop_sent = true;
    }
    // the timeout guards progress, not the whole recursion
    stop_deadline = now_mono() + opts.shutdown_timeout_s;
  };

  auto begin_shutdown = [&]() {
    if (stopping) return;
    stopping = true;
    advance_shutdown();
  };

  auto mark_conn_dead = [&](int fd) {
    for (auto& [node, info] : registry)
      if (info.control_fd == fd) info.alive = false;
    conns.erase(fd);
    advance_shutdown();
  };

  while (true) {
    const double now = now_mono();
    if (g_stop_signal) begin_shutdown();

    if (stopping) {
      bool all_done = true;
      for (const auto& [node, info] : registry)
        if (info.alive && !info.terminated) all_done = false;
      if (all_done || now > stop_deadline) break;  // stalled nodes: timeout path
    }

    if (pool_dirty && now - last_data > opts.idle_checkpoint_s) {
      st.save_checkpoint(pool, now_wall());
      pool_dirty = false;
    }

    std::vector<pollfd> fds;
    fds.push_back({listener->fd(), POLLIN, 0});
    const std::size_t conns_at = fds.size();
    for (auto& [fd, pc] : conns) fds.push_back({fd, POLLIN, 0});
    ::poll(fds.data(), static_cast<nfds_t>(fds.size()), 100);

    if (fds[0].revents & POLLIN) {
      while (auto s = listener->accept(0)) {
        PeerConn pc;
        pc.sock = std::move(*s);
        const int fd = pc.sock.fd();
        conns.emplace(fd, std::move(pc));
      }
    }

    std::vector<int> dead;
    for (std::size_t ci = conns_at; ci < fds.size(); ++ci) {
      if (!(fds[ci].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const int fd = fds[ci].fd;
      auto it = conns.find(fd);
      if (it == conns.end()) continue;
      PeerConn& pc = it->second;
      if (!pump_frames(pc.sock, pc.reader)) {
        dead.push_back(fd);
        continue;
      }
      while (auto f = pc.reader.next()) {
        switch (f->type) {
          case proto::MsgType::input_request: {
            proto::InputBundleBody bundle;
            bundle.critical_text = st.critical_text();
            bundle.params = opts.bundle_params;
            bundle.walkers = pool;
            pc.sock.send_frame(
                {proto::MsgType::input_bundle, st.key().value, bundle.encode()}, 10000);
            break;
          }
          case proto::MsgType::ping: {
            if (auto reg = proto::RegisterBody::parse(f->body)) {
              auto& info = registry[reg->node_id];
              info.control_fd = fd;
              info.workers = reg->workers;
              info.alive = true;
              info.terminated = false;
              info.stop_sent = false;
              if (stopping) {
                pc.sock.send_frame({proto::MsgType::stop, st.key().value, ""}, 1000);
                registry[reg->node_id].stop_sent = true;
              }
            }
            break;
          }
          case proto::MsgType::result_batch: {
            auto body = proto::ResultBatchBody::parse(f->body);
            if (!body) {
              ++rejected_frames;
              break;
            }
            std::uint64_t accepted = 0, rejected = 0;
            if (f->key != st.key().value) {
              ++rejected_frames;
              rejected = body->record_lines.size();
            } else {
              for (const auto& line : body->record_lines) {
                auto rec = store::BlockRecord::parse(line);
                if (!rec || rec->key != st.key().value) {
                  ++rejected_records;
                  ++rejected;
                  continue;
                }
                if (!seen_ids.insert(rec->record_id).second) {
                  ++accepted;  // duplicate delivery: already persisted
                  continue;
                }
                st.append_block(*rec);
                ++records_ingested;
                ++accepted;
                cpu_sum += rec->cpu_seconds;
                workers_seen.insert(rec->worker_id);
              }
              last_data = now_mono();
            }
            proto::AckBody ack{body->batch_id, accepted, rejected};
            pc.sock.send_frame({proto::MsgType::ping, st.key().value, ack.encode()},
                               2000);
            break;
          }
          case proto::MsgType::walker_list: {
            auto parsed = parse_pool_frame(f->body);
            if (!parsed) {
              ++rejected_frames;
              break;
            }
            std::uint64_t accepted = 0, rejected = 0;
            if (f->key != st.key().value) {
              ++rejected_frames;
              rejected = parsed->second.entries.size();
            } else {
              pool = merge_walker_pool(std::move(pool), parsed->second.entries,
                                       opts.n_kept, rng);
              pool_dirty = true;
              last_data = now_mono();
              accepted = parsed->second.entries.size();
            }
            proto::AckBody ack{parsed->first, accepted, rejected};
            pc.sock.send_frame({proto::MsgType::ping, st.key().value, ack.encode()},
                               2000);
            break;
          }
          case proto::MsgType::terminated: {
            if (auto tb = proto::TerminatedBody::parse(f->body)) {
              auto& info = registry[tb->node_id];
              info.terminated = true;
              fwd_cpu += tb->cpu_seconds;
              advance_shutdown();
            }
            break;
          }
          case proto::MsgType::stop:
            begin_shutdown();
            break;
          default:
            break;
        }
      }
      if (pc.reader.corrupt()) dead.push_back(fd);  // malformed stream: drop it
    }
    for (int fd : dead) mark_conn_dead(fd);
  }

  if (pool_dirty || !pool.empty()) st.save_checkpoint(pool, now_wall());

  int terminated_count = 0;
  for (const auto& [node, info] : registry)
    if (info.terminated) ++terminated_count;

  store::RunSummary summary;
  summary.run_id = run_id;
  summary.workers = opts.expected_workers > 0
                        ? opts.expected_workers
                        : static_cast<int>(workers_seen.size());
  summary.t_cpu = cpu_sum;
  summary.t_wall = now_mono() - t_start;
  summary.forwarder_cpu = fwd_cpu;
  summary.blocks = static_cast<int>(records_ingested);
  st.append_run_summary(summary);

  std::printf(
      "server done records=%llu rejected_frames=%llu rejected_records=%llu "
      "terminated=%d/%zu fwdcpu=%.3f\n",
      static_cast<unsigned long long>(records_ingested),
      static_cast<unsigned long long>(rejected_frames),
      static_cast<unsigned long long>(rejected_records), terminated_count,
      registry.size(), fwd_cpu);
  std::fflush(stdout);
  return 0;
}

// --- manager --------------------------------------------------------------------

ManagerOutcome run_manager(const ManagerOptions& opts) {
  install_stop_handlers();
  ManagerOutcome out;

  auto st = store::Store::open(opts.store_dir);
  const std::uint32_t key = st.key().value;

  std::string run_id;
  if (opts.seed_fixed) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "s%016llx",
                  static_cast<unsigned long long>(opts.seed));
    run_id = buf;
  } else {
    run_id = make_nonce();
  }

  auto params = opts.bundle_params;
  params["nonce"] = run_id;
  params["seed"] = std::to_string(opts.seed);

  const int total_workers = opts.forwarders * opts.workers_per_forwarder;
  std::vector<std::string> srv_argv = {
      opts.exe_path, "serve",
      "--store", opts.store_dir.string(),
      "--bind", opts.bind.str(),
      "--run-id", run_id,
      "--nkept", std::to_string(opts.n_kept),
      "--expected-workers", std::to_string(total_workers)};
  for (const auto& [k, v] : params) {
    srv_argv.push_back("--param");
    srv_argv.push_back(k + "=" + v);
  }
  std::vector<Child> children;
  children.push_back(spawn_child(srv_argv, true));
  auto srv_line = children[0].await_line("listening ", 20.0);
  if (!srv_line) {
    children[0].kill_hard();
    throw std::runtime_error("manager: data server did not come up");
  }
  const auto server_ep = net::Endpoint::parse(srv_line->substr(10));
  if (!server_ep) throw std::runtime_error("manager: bad server endpoint");

  std::vector<net::Endpoint> fwd_eps(opts.forwarders);
  for (int node = 0; node < opts.forwarders; ++node) {
    std::vector<std::string> argv = {
        opts.exe_path, "forward",
        "--node", std::to_string(node),
        "--server", server_ep->str(),
        "--workers", std::to_string(opts.workers_per_forwarder),
        "--seed", std::to_string(opts.seed + 1000003ull * (node + 1))};
    for (int anc : ancestor_chain(node)) {
      argv.push_back("--ancestor");
      argv.push_back(fwd_eps[anc].str());
    }
    if (opts.restart_workers) argv.push_back("--restart-workers");
    children.push_back(spawn_child(argv, true));
    auto line = children.back().await_line("listening ", 20.0);
    if (!line) {
      for (auto& c : children) c.kill_hard();
      throw std::runtime_error("manager: forwarder did not come up");
    }
    fwd_eps[node] = *net::Endpoint::parse(line->substr(10));
  }

  const double t0 = now_mono();
  int poll_failures = 0;
  bool stop_sent = false;
  std::string stop_reason;

  auto send_stop = [&]() {
    if (stop_sent) return;
    if (auto s = net::connect_to(*server_ep, 2000))
      s->send_frame({proto::MsgType::stop, key, ""}, 2000);
    stop_sent = true;
  };

  while (!stop_sent) {
    // nap one poll interval, staying responsive to signals and child output
    const double nap_until = now_mono() + opts.poll_s;
    while (now_mono() < nap_until && !g_stop_signal) {
      for (auto& c : children) c.pump();
      ::usleep(100 * 1000);
    }
    if (g_stop_signal) {
      stop_reason = "signal";
      send_stop();
      break;
    }
    store::RunningAverage stats;
    try {
      stats = store::Store::open(opts.store_dir).running_average();
      poll_failures = 0;
    } catch (const std::exception& e) {
      if (++poll_failures > opts.max_poll_failures) {
        for (auto& c : children) c.kill_hard();
        throw std::runtime_error(std::string("manager: store unreadable: ") + e.what());
      }
      continue;
    }
    const double elapsed = now_mono() - t0;
    if (opts.stop.wall_seconds > 0.0 && elapsed >= opts.stop.wall_seconds) {
      stop_reason = "wall clock";
      send_stop();
    } else if (opts.stop.target_error > 0.0 && stats.n_blocks >= 2 &&
               std::isfinite(stats.error) && stats.error <= opts.stop.target_error) {
      stop_reason = "error bar";
      send_stop();
    } else if (opts.stop.max_blocks > 0 && stats.n_blocks >= opts.stop.max_blocks) {
      stop_reason = "block count";
      send_stop();
    } else if (!children[0].alive()) {
      // server died under us: give up cleanly
      stop_reason = "server exit";
      break;
    }
  }

  // allow the shutdown protocol to finish, then escalate
  const double grace = now_mono() + 120.0;
  bool escalated = false;
  for (;;) {
    bool any_alive = false;
    for (auto& c : children) {
      c.pump();
      if (c.alive()) any_alive = true;
    }
    if (!any_alive) break;
    if (now_mono() > grace) {
      if (!escalated) {
        std::fprintf(stderr, "manager: shutdown grace expired, escalating\n");
        escalated = true;
      }
      for (auto& c : children) c.signal(SIGTERM);
      ::usleep(500 * 1000);
      for (auto& c : children) c.kill_hard();
    }
    ::usleep(100 * 1000);
  }

  int worst_child = 0;
  for (auto& c : children)
    if (auto code = c.exit_code(); code && *code == 4) worst_child = 4;

  out.stats = store::Store::open(opts.store_dir).running_average();
  for (const auto& s : store::Store::open(opts.store_dir).run_summaries())
    if (s.run_id == run_id) out.summary = s;

  if (!opts.quiet) {
    std::printf("run %s finished (%s)\n", run_id.c_str(),
                stop_reason.empty() ? "?" : stop_reason.c_str());
    if (out.stats.n_blocks > 0) {
      std::printf("energy %s +/- %s over %d blocks (sum_w %.6g, steps %llu)\n",
                  format_g17(out.stats.energy).c_str(),
                  std::isfinite(out.stats.error) ? format_g17(out.stats.error).c_str()
                                                 : "n/a",
                  out.stats.n_blocks, out.stats.sum_w,
                  static_cast<unsigned long long>(out.stats.steps));
    } else {
      std::printf("no blocks recorded\n");
    }
    if (out.summary)
      std::printf("t_cpu %.3f s  t_wall %.3f s  workers %d  forwarder_cpu %.3f s\n",
                  out.summary->t_cpu, out.summary->t_wall, out.summary->workers,
                  out.summary->forwarder_cpu);
    std::fflush(stdout);
  }

  if (worst_child == 4)
    out.exit_code = 4;
  else if (out.stats.n_blocks == 0)
    out.exit_code = 5;
  else
    out.exit_code = 0;
  return out;
}

std::vector<SpeedupRow> speedup_report(std::span<const store::RunSummary> runs) {
  std::vector<SpeedupRow> rows;
  if (runs.empty()) return rows;
  const double ref_rate = runs[0].t_wall > 0.0 ? runs[0].t_cpu / runs[0].t_wall : 0.0;
  for (const auto& r : runs) {
    SpeedupRow row;
    row.run_id = r.run_id;
    row.workers = r.workers;
    row.t_cpu = r.t_cpu;
    row.t_wall = r.t_wall;
    const double rate = r.t_wall > 0.0 ? r.t_cpu / r.t_wall : 0.0;
    row.speedup = ref_rate > 0.0 ? rate / ref_rate : 0.0;
    row.forwarder_cpu_pct = r.t_cpu > 0.0 ? 100.0 * r.forwarder_cpu / r.t_cpu : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace qmc::runtime
