#include "qmc/store.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace qmc::store {

namespace fs = std::filesystem;

std::uint32_t crc32(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

std::string CriticalKey::hex() const {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", value);
  return buf;
}

std::string critical_bytes(const std::string& canonical_wavefunction, double tau,
                           sampler::Mode mode) {
  std::string s = canonical_wavefunction;
  s += "tau ";
  s += format_g17(tau);
  s += "\nmode ";
  s += sampler::to_string(mode);
  s += "\n";
  return s;
}

CriticalKey critical_key(const std::string& canonical_wavefunction, double tau,
                         sampler::Mode mode) {
  return {crc32(critical_bytes(canonical_wavefunction, tau, mode))};
}

namespace {

std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream is{std::string(line)};
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

std::map<std::string, std::string> kv_fields(std::span<const std::string> toks,
                                             std::size_t from) {
  std::map<std::string, std::string> kv;
  for (std::size_t i = from; i < toks.size(); ++i) {
    const auto eq = toks[i].find('=');
    if (eq == std::string::npos) continue;
    kv[toks[i].substr(0, eq)] = toks[i].substr(eq + 1);
  }
  return kv;
}

// read a whole file; missing file -> empty
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file_atomic(const fs::path& p, const std::string& content) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("store: failed writing " + tmp.string());
  }
  fs::rename(tmp, p);
}

}  // namespace

std::string BlockRecord::to_line() const {
  std::ostringstream os;
  os << "rec1 id=" << record_id << " key=" << CriticalKey{key}.hex()
     << " worker=" << worker_id << " node=" << node_id << " steps=" << steps
     << " walkers=" << walkers << " sw=" << format_g17(sum_w)
     << " swe=" << format_g17(sum_we) << " swe2=" << format_g17(sum_we2)
     << " acc=" << format_g17(acceptance) << " clamps=" << clamp_events
     << " cpu=" << format_g17(cpu_seconds) << " ts=" << format_g17(wall_ts)
     << " ma=" << multiply_adds << " stored=" << elements_stored
     << " cols=" << columns_processed << " mode=" << mode;
  return os.str();
}

std::optional<BlockRecord> BlockRecord::parse(std::string_view line) {
  const auto toks = split_ws(line);
  if (toks.empty() || toks[0] != "rec1") return std::nullopt;
  const auto kv = kv_fields(toks, 1);
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  try {
    BlockRecord r;
    const std::string* v;
    if (!(v = get("id"))) return std::nullopt;
    r.record_id = *v;
    if (!(v = get("key"))) return std::nullopt;
    r.key = static_cast<std::uint32_t>(std::stoul(*v, nullptr, 16));
    if (!(v = get("worker"))) return std::nullopt;
    r.worker_id = std::stoi(*v);
    if (!(v = get("node"))) return std::nullopt;
    r.node_id = std::stoi(*v);
    if (!(v = get("steps"))) return std::nullopt;
    r.steps = std::stoull(*v);
    if (!(v = get("walkers"))) return std::nullopt;
    r.walkers = std::stoi(*v);
    if (!(v = get("sw"))) return std::nullopt;
    r.sum_w = std::stod(*v);
    if (!(v = get("swe"))) return std::nullopt;
    r.sum_we = std::stod(*v);
    if (!(v = get("swe2"))) return std::nullopt;
    r.sum_we2 = std::stod(*v);
    if ((v = get("acc"))) r.acceptance = std::stod(*v);
    if ((v = get("clamps"))) r.clamp_events = std::stoull(*v);
    if ((v = get("cpu"))) r.cpu_seconds = std::stod(*v);
    if ((v = get("ts"))) r.wall_ts = std::stod(*v);
    if ((v = get("ma"))) r.multiply_adds = std::stoull(*v);
    if ((v = get("stored"))) r.elements_stored = std::stoull(*v);
    if ((v = get("cols"))) r.columns_processed = std::stoull(*v);
    if ((v = get("mode"))) r.mode = *v;
    if (r.steps < 1 || !(r.sum_w > 0.0)) return std::nullopt;
    return r;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

RunningAverage weighted_stats(std::span<const BlockRecord> records) {
  RunningAverage out;
  out.n_blocks = static_cast<int>(records.size());
  if (records.empty()) return out;
  double sw = 0.0, swe = 0.0;
  for (const auto& r : records) {
    sw += r.sum_w;
    swe += r.sum_we;
    out.steps += r.steps;
    out.cpu_seconds += r.cpu_seconds;
  }
  out.sum_w = sw;
  out.energy = swe / sw;
  if (records.size() >= 2) {
    // weighted variance of the block means around the global mean
    double s2 = 0.0;
    for (const auto& r : records) {
      const double m = r.sum_we / r.sum_w;
      s2 += r.sum_w * (m - out.energy) * (m - out.energy);
    }
    out.error = std::sqrt(s2 / sw / static_cast<double>(records.size() - 1));
  }
  return out;
}

std::string RunSummary::to_line() const {
  std::ostringstream os;
  os << "run1 id=" << run_id << " workers=" << workers << " tcpu=" << format_g17(t_cpu)
     << " twall=" << format_g17(t_wall) << " fwdcpu=" << format_g17(forwarder_cpu)
     << " blocks=" << blocks;
  return os.str();
}

std::optional<RunSummary> RunSummary::parse(std::string_view line) {
  const auto toks = split_ws(line);
  if (toks.empty() || toks[0] != "run1") return std::nullopt;
  const auto kv = kv_fields(toks, 1);
  try {
    RunSummary s;
    s.run_id = kv.at("id");
    s.workers = std::stoi(kv.at("workers"));
    s.t_cpu = std::stod(kv.at("tcpu"));
    s.t_wall = std::stod(kv.at("twall"));
    if (kv.count("fwdcpu")) s.forwarder_cpu = std::stod(kv.at("fwdcpu"));
    if (kv.count("blocks")) s.blocks = std::stoi(kv.at("blocks"));
    return s;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

bool Store::exists(const fs::path& dir) { return fs::exists(dir / "meta.txt"); }

Store Store::create(const fs::path& dir, const std::string& critical_text,
                    CriticalKey key) {
  fs::create_directories(dir / "records");
  fs::create_directories(dir / "checkpoint");
  std::ostringstream meta;
  meta << "qmcstore 1\nkey " << key.hex() << "\ncritical " << critical_text.size() << "\n"
       << critical_text;
  write_file_atomic(dir / "meta.txt", meta.str());
  Store s;
  s.dir_ = dir;
  s.key_ = key;
  s.critical_text_ = critical_text;
  return s;
}

Store Store::open(const fs::path& dir) {
  const std::string meta = slurp(dir / "meta.txt");
  if (meta.empty()) throw std::runtime_error("store: no store at " + dir.string());
  std::istringstream is(meta);
  std::string line;
  std::getline(is, line);
  if (line != "qmcstore 1") throw std::runtime_error("store: unrecognized meta header");
  std::getline(is, line);
  if (line.rfind("key ", 0) != 0) throw std::runtime_error("store: missing key line");
  Store s;
  s.dir_ = dir;
  s.key_.value = static_cast<std::uint32_t>(std::stoul(line.substr(4), nullptr, 16));
  std::getline(is, line);
  if (line.rfind("critical ", 0) != 0)
    throw std::runtime_error("store: missing critical length");
  const std::size_t len = std::stoul(line.substr(9));
  std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (rest.size() < len) throw std::runtime_error("store: truncated critical text");
  s.critical_text_ = rest.substr(0, len);
  return s;
}

void Store::open_segment(const std::string& writer_tag) {
  const fs::path seg = dir_ / "records" / (writer_tag + ".log");
  segment_fd_ = ::open(seg.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (segment_fd_ < 0)
    throw std::runtime_error("store: cannot open segment " + seg.string());
}

bool Store::append_block(const BlockRecord& rec) {
  if (rec.key != key_.value) {
    ++rejected_;
    return false;
  }
  if (segment_fd_ < 0) open_segment("local-" + std::to_string(::getpid()));
  const std::string line = rec.to_line() + "\n";
  const ssize_t n = ::write(segment_fd_, line.data(), line.size());
  if (n != static_cast<ssize_t>(line.size()))
    throw std::runtime_error("store: short write to record segment");
  return true;
}

std::vector<BlockRecord> Store::all_records() const {
  std::vector<BlockRecord> out;
  std::set<std::string> seen;
  const fs::path recdir = dir_ / "records";
  if (!fs::exists(recdir)) return out;
  std::vector<fs::path> segments;
  for (const auto& e : fs::directory_iterator(recdir))
    if (e.is_regular_file()) segments.push_back(e.path());
  std::sort(segments.begin(), segments.end());
  for (const auto& seg : segments) {
    const std::string text = slurp(seg);
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) break;  // torn tail: ignore unterminated line
      const std::string_view line(text.data() + pos, nl - pos);
      pos = nl + 1;
      auto rec = BlockRecord::parse(line);
      if (!rec) continue;
      if (rec->key != key_.value) continue;
      if (!seen.insert(rec->record_id).second) continue;
      out.push_back(std::move(*rec));
    }
  }
  return out;
}

RunningAverage Store::running_average() const {
  const auto recs = all_records();
  return weighted_stats(recs);
}

void Store::save_checkpoint(std::span<const sampler::PoolSample> pool, double timestamp) {
  std::ostringstream os;
  os << "walkers 1 key " << key_.hex() << " ts " << format_g17(timestamp) << " count "
     << pool.size() << "\n";
  for (const auto& p : pool) {
    os << format_g17(p.e_local);
    for (double c : p.coords) os << ' ' << format_g17(c);
    os << "\n";
  }
  write_file_atomic(dir_ / "checkpoint" / "walkers.txt", os.str());
}

std::optional<WalkerCheckpoint> Store::load_checkpoint() const {
  const std::string text = slurp(dir_ / "checkpoint" / "walkers.txt");
  if (text.empty()) return std::nullopt;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) return std::nullopt;
  const auto toks = split_ws(line);
  if (toks.size() != 8 || toks[0] != "walkers" || toks[1] != "1" || toks[2] != "key" ||
      toks[4] != "ts" || toks[6] != "count")
    return std::nullopt;
  WalkerCheckpoint cp;
  try {
    cp.key = static_cast<std::uint32_t>(std::stoul(toks[3], nullptr, 16));
    cp.timestamp = std::stod(toks[5]);
    const std::size_t count = std::stoul(toks[7]);
    while (std::getline(is, line)) {
      const auto vals = split_ws(line);
      if (vals.empty()) continue;
      sampler::PoolSample s;
      s.e_local = std::stod(vals[0]);
      s.coords.reserve(vals.size() - 1);
      for (std::size_t i = 1; i < vals.size(); ++i) s.coords.push_back(std::stod(vals[i]));
      cp.entries.push_back(std::move(s));
    }
    if (cp.entries.size() != count) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (cp.key != key_.value) return std::nullopt;
  return cp;
}

void Store::append_run_summary(const RunSummary& s) {
  std::ofstream f(dir_ / "runs.log", std::ios::app);
  f << s.to_line() << "\n";
}

std::vector<RunSummary> Store::run_summaries() const {
  std::vector<RunSummary> out;
  std::istringstream is(slurp(dir_ / "runs.log"));
  std::string line;
  while (std::getline(is, line))
    if (auto s = RunSummary::parse(line)) out.push_back(std::move(*s));
  return out;
}

Store merge_stores(const Store& a, const Store& b, const fs::path& out) {
  if (!(a.key() == b.key()))
    throw KeyMismatch("merge: stores have different critical keys: " + a.key().hex() +
                      " vs " + b.key().hex());
  Store merged = Store::create(out, a.critical_text(), a.key());
  merged.open_segment("merged");
  std::set<std::string> seen;
  for (const Store* s : {&a, &b}) {
    for (const auto& rec : s->all_records()) {
      if (!seen.insert(rec.record_id).second) continue;
      merged.append_block(rec);
    }
  }
  // keep the newer of the two checkpoints
  auto ca = a.load_checkpoint();
  auto cb = b.load_checkpoint();
  const std::optional<WalkerCheckpoint>* pick = nullptr;
  if (ca && cb)
    pick = ca->timestamp >= cb->timestamp ? &ca : &cb;
  else if (ca)
    pick = &ca;
  else if (cb)
    pick = &cb;
  if (pick) merged.save_checkpoint((*pick)->entries, (*pick)->timestamp);
  return merged;
}

}  // namespace qmc::store
