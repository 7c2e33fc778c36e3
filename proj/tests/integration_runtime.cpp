#include <doctest.h>

#include <filesystem>
#include <set>

#include "proc_util.hpp"
#include "qmc/store.hpp"

using namespace qmc;
namespace fs = std::filesystem;
using procutil::run_cli;

namespace {

// init a harmonic store; returns (dir, key hex)
std::pair<fs::path, std::string> init_harmonic_store(const std::string& tag,
                                                     double tau = 0.05,
                                                     const std::string& mode = "dmc") {
  auto dir = testutil::temp_dir(tag);
  const auto wf_path = dir / "wf.txt";
  procutil::write_file(wf_path, testutil::harmonic_model().canonical_text());
  const auto store_dir = dir / "store";
  auto res = run_cli({"init", wf_path.string(), store_dir.string(), "--tau",
                      format_g17(tau), "--mode", mode});
  REQUIRE(res.exit_code == 0);
  std::string key = res.out.substr(0, res.out.find('\n'));
  REQUIRE(key.size() == 8);
  return {store_dir, key};
}

}  // namespace

TEST_CASE("init validates, prints the key, and is idempotent") {
  auto dir = testutil::temp_dir("cli-init");
  const auto wf_path = dir / "wf.txt";
  procutil::write_file(wf_path, testutil::harmonic_model().canonical_text());
  const auto store_dir = dir / "store";

  auto first = run_cli({"init", wf_path.string(), store_dir.string(), "--tau", "0.05",
                        "--mode", "dmc"});
  CHECK(first.exit_code == 0);
  auto second = run_cli({"init", wf_path.string(), store_dir.string(), "--tau", "0.05",
                         "--mode", "dmc"});
  CHECK(second.exit_code == 0);
  CHECK(first.out == second.out);

  // different tau hashes to a different key: refused on the same store
  auto third = run_cli({"init", wf_path.string(), store_dir.string(), "--tau", "0.06",
                        "--mode", "dmc"});
  CHECK(third.exit_code == 3);
  fs::remove_all(dir);
}

TEST_CASE("init rejects a determinant referencing a missing orbital") {
  auto dir = testutil::temp_dir("cli-badwf");
  auto model = testutil::harmonic_model();
  std::string text = model.canonical_text();
  // orbital index 2 with n_orb = 1
  const std::string from = "det 1 u 1 d";
  const auto pos = text.find(from);
  REQUIRE(pos != std::string::npos);
  text.replace(pos, from.size(), "det 1 u 2 d");
  const auto wf_path = dir / "wf.txt";
  procutil::write_file(wf_path, text);
  auto res = run_cli({"init", wf_path.string(), (dir / "store").string(), "--tau", "0.05",
                      "--mode", "dmc"});
  CHECK(res.exit_code == 2);
  fs::remove_all(dir);
}

TEST_CASE("run refuses a config whose tau disagrees with the store") {
  auto [store_dir, key] = init_harmonic_store("cli-taucheck");
  const auto cfg = store_dir.parent_path() / "run.cfg";
  procutil::write_file(cfg, procutil::run_config(store_dir, 0.99, "dmc",
                                                 {"max_blocks=1", "seed=1"}));
  auto res = run_cli({"run", "--config", cfg.string()});
  CHECK(res.exit_code == 3);
  fs::remove_all(store_dir.parent_path());
}

TEST_CASE("zero-variance local run end to end") {
  auto [store_dir, key] = init_harmonic_store("cli-zerovar");
  const auto cfg = store_dir.parent_path() / "run.cfg";
  procutil::write_file(
      cfg, procutil::run_config(store_dir, 0.05, "dmc",
                                {"walkers=10", "steps_per_block=50", "max_blocks=4",
                                 "workers_per_forwarder=2", "poll_seconds=0.3",
                                 "precision=double", "seed=7"}));
  auto res = run_cli({"run", "--config", cfg.string()}, 120.0);
  CHECK(res.exit_code == 0);

  auto st = store::Store::open(store_dir);
  const auto avg = st.running_average();
  CHECK(avg.n_blocks >= 4);
  CHECK(avg.energy == doctest::Approx(1.5).epsilon(1e-10));
  // every record carries the store key and the run produced a summary line
  for (const auto& r : st.all_records()) CHECK(store::CriticalKey{r.key}.hex() == key);
  CHECK(!st.run_summaries().empty());

  auto rep = run_cli({"report", store_dir.string(), "--level", "full"});
  CHECK(rep.exit_code == 0);
  CHECK(rep.out.find("blocks") != std::string::npos);
  fs::remove_all(store_dir.parent_path());
}

TEST_CASE("report on an empty store says 0 blocks and exits 0") {
  auto [store_dir, key] = init_harmonic_store("cli-empty");
  auto res = run_cli({"report", store_dir.string()});
  CHECK(res.exit_code == 0);
  CHECK(res.out.find("0 blocks") != std::string::npos);
  fs::remove_all(store_dir.parent_path());
}

TEST_CASE("fixed seed single-worker rerun reproduces the physics fields bit for bit") {
  auto [store_a, key_a] = init_harmonic_store("cli-det-a");
  auto [store_b, key_b] = init_harmonic_store("cli-det-b");
  REQUIRE(key_a == key_b);

  for (const auto& store_dir : {store_a, store_b}) {
    const auto cfg = store_dir.parent_path() / "run.cfg";
    procutil::write_file(
        cfg, procutil::run_config(store_dir, 0.05, "dmc",
                                  {"walkers=8", "steps_per_block=40", "max_blocks=3",
                                   "poll_seconds=0.3", "seed=12345",
                                   "precision=double"}));
    auto res = run_cli({"run", "--config", cfg.string()}, 120.0);
    REQUIRE(res.exit_code == 0);
  }

  auto recs_a = procutil::store_records(store_a);
  auto recs_b = procutil::store_records(store_b);
  auto strip_volatile = [](std::vector<store::BlockRecord> recs) {
    std::set<std::string> lines;
    for (auto& r : recs) {
      r.cpu_seconds = 0.0;
      r.wall_ts = 0.0;
      lines.insert(r.to_line());
    }
    return lines;
  };
  // compare the shared deterministic prefix (block counts can differ by the
  // asynchronous stop, the records that exist in both must be identical)
  auto la = strip_volatile(recs_a);
  auto lb = strip_volatile(recs_b);
  std::vector<std::string> common;
  std::set_intersection(la.begin(), la.end(), lb.begin(), lb.end(),
                        std::back_inserter(common));
  CHECK(common.size() >= 3);
  fs::remove_all(store_a.parent_path());
  fs::remove_all(store_b.parent_path());
}

TEST_CASE("server rejects result batches with a foreign critical key") {
  auto [store_dir, key] = init_harmonic_store("cli-reject");
  auto server = runtime::spawn_child(
      procutil::cli_argv({"serve", "--store", store_dir.string(), "--shutdown-timeout",
                          "5"}),
      true);
  auto line = server.await_line("listening ", 10.0);
  REQUIRE(line);
  auto ep = net::Endpoint::parse(line->substr(10));
  REQUIRE(ep);

  auto st = store::Store::open(store_dir);
  const std::uint32_t good_key = st.key().value;

  auto sock = net::connect_to(*ep, 2000);
  REQUIRE(sock);
  store::BlockRecord rec;
  rec.record_id = "foreign-1";
  rec.key = good_key ^ 1;
  rec.steps = 10;
  rec.walkers = 1;
  rec.sum_w = 1.0;
  rec.sum_we = 1.5;
  rec.sum_we2 = 2.25;
  proto::ResultBatchBody body;
  body.batch_id = "b1";
  body.record_lines = {rec.to_line()};
  REQUIRE(sock->send_frame({proto::MsgType::result_batch, good_key ^ 1, body.encode()},
                           2000));
  auto ack = sock->recv_frame(5000);
  REQUIRE(ack);
  auto parsed = proto::AckBody::parse(ack->body);
  REQUIRE(parsed);
  CHECK(parsed->accepted == 0);
  CHECK(parsed->rejected == 1);

  // matching frame key but corrupted record key inside: also rejected
  rec.record_id = "foreign-2";
  body.batch_id = "b2";
  body.record_lines = {rec.to_line()};
  REQUIRE(sock->send_frame({proto::MsgType::result_batch, good_key, body.encode()}, 2000));
  ack = sock->recv_frame(5000);
  REQUIRE(ack);
  parsed = proto::AckBody::parse(ack->body);
  REQUIRE(parsed);
  CHECK(parsed->accepted == 0);
  CHECK(parsed->rejected == 1);

  // stop the server via a Stop frame
  sock->send_frame({proto::MsgType::stop, good_key, ""}, 2000);
  const double deadline = 10.0;
  auto done = server.await_line("server done", deadline);
  REQUIRE(done);
  CHECK(done->find("records=0") != std::string::npos);
  CHECK(procutil::store_records(store_dir).empty());
  fs::remove_all(store_dir.parent_path());
}

TEST_CASE("seven forwarders and 28 workers: records equal blocks produced") {
  auto [store_dir, key] = init_harmonic_store("cli-tree", 0.05, "vmc");
  const auto cfg = store_dir.parent_path() / "run.cfg";
  procutil::write_file(
      cfg, procutil::run_config(store_dir, 0.05, "vmc",
                                {"walkers=20", "steps_per_block=400", "max_blocks=56",
                                 "forwarders=7", "workers_per_forwarder=4",
                                 "poll_seconds=1.0", "seed=3"}));
  auto res = run_cli({"run", "--config", cfg.string()}, 300.0);
  CHECK(res.exit_code == 0);

  auto recs = procutil::store_records(store_dir);
  CHECK(recs.size() >= 56);
  std::set<int> nodes, workers;
  for (const auto& r : recs) {
    nodes.insert(r.node_id);
    workers.insert(r.worker_id);
  }
  CHECK(nodes.size() == 7);
  CHECK(workers.size() == 28);

  // one server handled everything: exactly one run summary with every worker
  auto runs = store::Store::open(store_dir).run_summaries();
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].workers == 28);
  CHECK(runs[0].blocks == static_cast<int>(recs.size()));
  fs::remove_all(store_dir.parent_path());
}

TEST_CASE("merge via the CLI refuses mismatched stores") {
  auto [store_a, key_a] = init_harmonic_store("cli-merge-a", 0.05);
  auto [store_b, key_b] = init_harmonic_store("cli-merge-b", 0.07);
  auto out = testutil::temp_dir("cli-merge-out");
  fs::remove_all(out);
  auto res = run_cli({"merge", store_a.string(), store_b.string(), out.string()});
  CHECK(res.exit_code == 3);
  fs::remove_all(store_a.parent_path());
  fs::remove_all(store_b.parent_path());
}

TEST_CASE("probe subcommand prints the table and fitted exponents") {
  auto res = run_cli({"probe", "--sizes", "64", "128", "256", "--nnz", "12"});
  CHECK(res.exit_code == 0);
  CHECK(res.out.find("multiply_adds") != std::string::npos);
  CHECK(res.out.find("product exponent 2.0") != std::string::npos);
  CHECK(res.out.find("inversion exponent 3.0") != std::string::npos);
}
