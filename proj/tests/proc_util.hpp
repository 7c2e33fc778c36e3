#pragma once

// Helpers for process-level tests: spawn the CLI binary, capture output,
// enforce deadlines.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qmc/runtime.hpp"
#include "test_util.hpp"

namespace procutil {

struct RunResult {
  int exit_code = -1;
  std::string out;
};

inline std::vector<std::string> cli_argv(std::vector<std::string> args) {
  std::vector<std::string> argv{testutil::qmc_bin()};
  for (auto& a : args) argv.push_back(std::move(a));
  return argv;
}

// run to completion with a deadline; SIGKILL on overrun. Drains stdout
// continuously so the child can never block on a full pipe.
inline RunResult run_cli(std::vector<std::string> args, double timeout_s = 180.0) {
  auto child = qmc::runtime::spawn_child(cli_argv(std::move(args)), true);
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::milliseconds(static_cast<long>(timeout_s * 1000));
  RunResult res;
  std::ostringstream os;
  auto drain = [&] {
    child.pump();
    while (auto line = child.next_line()) os << *line << "\n";
  };
  while (child.alive()) {
    drain();
    if (std::chrono::steady_clock::now() > deadline) {
      child.kill_hard();
      break;
    }
    usleep(20 * 1000);
  }
  drain();
  res.out = os.str();
  for (int i = 0; i < 50 && !child.exit_code(); ++i) usleep(10 * 1000);
  res.exit_code = child.exit_code().value_or(-1);
  return res;
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << content;
}

// collect every record line of a store (via the library, not the CLI)
inline std::vector<qmc::store::BlockRecord> store_records(const std::filesystem::path& p) {
  return qmc::store::Store::open(p).all_records();
}

inline std::optional<std::string> line_field(const std::string& line,
                                             const std::string& key) {
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    if (tok.rfind(key + "=", 0) == 0) return tok.substr(key.size() + 1);
  }
  return std::nullopt;
}

// basic run config writer
inline std::string run_config(const std::filesystem::path& store, double tau,
                              const std::string& mode,
                              const std::vector<std::string>& extra = {}) {
  std::ostringstream os;
  os << "store=" << store.string() << "\n";
  os << "tau=" << qmc::format_g17(tau) << "\n";
  os << "mode=" << mode << "\n";
  for (const auto& e : extra) os << e << "\n";
  return os.str();
}

}  // namespace procutil
