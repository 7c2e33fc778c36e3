#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qmc/common.hpp"
#include "qmc/sampler.hpp"

namespace qmc::store {

std::uint32_t crc32(std::string_view bytes);

struct CriticalKey {
  std::uint32_t value = 0;
  std::string hex() const;
  bool operator==(const CriticalKey&) const = default;
};

// Canonical critical bytes: the canonical wavefunction text plus the
// run-defining parameters (time step and sampler mode). Walker counts,
// block lengths and topology are deliberately excluded.
std::string critical_bytes(const std::string& canonical_wavefunction, double tau,
                           sampler::Mode mode);
CriticalKey critical_key(const std::string& canonical_wavefunction, double tau,
                         sampler::Mode mode);

class KeyMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BlockRecord {
  std::string record_id;
  std::uint32_t key = 0;
  int worker_id = 0;
  int node_id = 0;
  std::uint64_t steps = 0;
  int walkers = 0;
  double sum_w = 0.0, sum_we = 0.0, sum_we2 = 0.0;
  double acceptance = 0.0;
  std::uint64_t clamp_events = 0;
  double cpu_seconds = 0.0;
  double wall_ts = 0.0;  // unix seconds
  std::uint64_t multiply_adds = 0, elements_stored = 0, columns_processed = 0;
  std::string mode = "dmc";

  std::string to_line() const;
  static std::optional<BlockRecord> parse(std::string_view line);
};

struct RunningAverage {
  double energy = 0.0;
  double error = std::numeric_limits<double>::quiet_NaN();  // NaN until >= 2 blocks
  int n_blocks = 0;
  double sum_w = 0.0;
  std::uint64_t steps = 0;
  double cpu_seconds = 0.0;
};

// Weighted mean and block-variance error bar over block records.
RunningAverage weighted_stats(std::span<const BlockRecord> records);

struct WalkerCheckpoint {
  std::vector<sampler::PoolSample> entries;
  std::uint32_t key = 0;
  double timestamp = 0.0;
};

struct RunSummary {
  std::string run_id;
  int workers = 0;
  double t_cpu = 0.0;       // summed worker CPU seconds
  double t_wall = 0.0;      // run wall-clock seconds
  double forwarder_cpu = 0.0;
  int blocks = 0;

  std::string to_line() const;
  static std::optional<RunSummary> parse(std::string_view line);
};

// Directory-backed results database. Append-only per-writer record
// segments unioned at read time; merging two stores is a record union.
class Store {
 public:
  static Store create(const std::filesystem::path& dir, const std::string& critical_text,
                      CriticalKey key);
  static Store open(const std::filesystem::path& dir);
  static bool exists(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const CriticalKey& key() const { return key_; }
  const std::string& critical_text() const { return critical_text_; }

  // Appends through this writer's segment; returns false (and counts) on a
  // key mismatch. A record line is written with a single write call so a
  // torn write never yields a half-record on reopen.
  bool append_block(const BlockRecord& rec);
  void open_segment(const std::string& writer_tag);
  std::uint64_t rejected_appends() const { return rejected_; }

  std::vector<BlockRecord> all_records() const;  // deduped by record_id
  RunningAverage running_average() const;

  void save_checkpoint(std::span<const sampler::PoolSample> pool, double timestamp);
  std::optional<WalkerCheckpoint> load_checkpoint() const;

  void append_run_summary(const RunSummary& s);
  std::vector<RunSummary> run_summaries() const;

 private:
  std::filesystem::path dir_;
  CriticalKey key_;
  std::string critical_text_;
  int segment_fd_ = -1;
  std::uint64_t rejected_ = 0;
};

Store merge_stores(const Store& a, const Store& b, const std::filesystem::path& out);

}  // namespace qmc::store
