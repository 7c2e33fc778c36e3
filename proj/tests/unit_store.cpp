#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "qmc/store.hpp"
#include "test_util.hpp"

using namespace qmc;
using namespace qmc::store;
namespace fs = std::filesystem;

namespace {

BlockRecord make_record(std::uint32_t key, int seq, double sw, double swe) {
  BlockRecord r;
  r.record_id = "t-" + std::to_string(seq);
  r.key = key;
  r.worker_id = seq % 3;
  r.node_id = 0;
  r.steps = 100;
  r.walkers = 10;
  r.sum_w = sw;
  r.sum_we = swe;
  r.sum_we2 = swe * swe / sw;
  r.cpu_seconds = 0.01;
  r.wall_ts = 1700000000.0 + seq;
  r.mode = "dmc";
  return r;
}

Store fresh_store(const fs::path& dir, std::uint32_t key_val = 0xdeadbeef) {
  return Store::create(dir, "fake critical data\nend\ntau 0.01\nmode dmc\n",
                       CriticalKey{key_val});
}

}  // namespace

TEST_CASE("crc32 standard check value") {
  CHECK(crc32("123456789") == 0xCBF43926u);
}

TEST_CASE("identical serialization gives identical keys; any digit flips it") {
  auto model = testutil::correlated_model(1);
  const auto k1 = critical_key(model.canonical_text(), 0.005, sampler::Mode::dmc);
  const auto k2 = critical_key(model.canonical_text(), 0.005, sampler::Mode::dmc);
  CHECK(k1 == k2);

  auto nudged = model;
  nudged.nuclei[0].pos.x += 1e-14;  // 15th digit
  const auto k3 = critical_key(nudged.canonical_text(), 0.005, sampler::Mode::dmc);
  CHECK(!(k1 == k3));

  // non-critical knobs do not enter the key, tau and mode do
  const auto k4 = critical_key(model.canonical_text(), 0.006, sampler::Mode::dmc);
  const auto k5 = critical_key(model.canonical_text(), 0.005, sampler::Mode::vmc);
  CHECK(!(k1 == k4));
  CHECK(!(k1 == k5));
}

TEST_CASE("block record round-trips through its line form") {
  auto r = make_record(0x12345678u, 7, 2.5, -1.2);
  r.multiply_adds = 123456;
  r.clamp_events = 3;
  auto parsed = BlockRecord::parse(r.to_line());
  REQUIRE(parsed);
  CHECK(parsed->record_id == r.record_id);
  CHECK(parsed->key == r.key);
  CHECK(parsed->sum_w == r.sum_w);
  CHECK(parsed->sum_we == r.sum_we);
  CHECK(parsed->multiply_adds == r.multiply_adds);
  CHECK(parsed->clamp_events == r.clamp_events);
  CHECK(parsed->mode == "dmc");

  CHECK(!BlockRecord::parse("garbage line"));
  CHECK(!BlockRecord::parse("rec1 id=x key=zz"));
}

TEST_CASE("append and running average with equal weights") {
  auto dir = testutil::temp_dir("store1");
  auto st = fresh_store(dir);
  st.open_segment("w1");
  CHECK(st.append_block(make_record(0xdeadbeef, 0, 1.0, 2.0)));
  CHECK(st.append_block(make_record(0xdeadbeef, 1, 1.0, 4.0)));
  auto avg = st.running_average();
  CHECK(avg.n_blocks == 2);
  CHECK(avg.energy == doctest::Approx(3.0));

  // key mismatch: rejected and counted
  CHECK(!st.append_block(make_record(0xdeadbeef ^ 1, 2, 1.0, 9.0)));
  CHECK(st.rejected_appends() == 1);
  CHECK(st.running_average().n_blocks == 2);
  fs::remove_all(dir);
}

TEST_CASE("single block: error undefined") {
  auto dir = testutil::temp_dir("store2");
  auto st = fresh_store(dir);
  st.append_block(make_record(0xdeadbeef, 0, 2.0, 1.0));
  auto avg = st.running_average();
  CHECK(avg.n_blocks == 1);
  CHECK(!std::isfinite(avg.error));
  fs::remove_all(dir);
}

TEST_CASE("running average matches an independent recomputation to 1e-12") {
  auto dir = testutil::temp_dir("store3");
  auto st = fresh_store(dir);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> wdist(0.5, 4.0), edist(-2.0, -1.0);
  std::vector<double> sw, swe;
  for (int i = 0; i < 100; ++i) {
    const double w = wdist(rng);
    const double e = edist(rng);
    sw.push_back(w);
    swe.push_back(w * e);
    st.append_block(make_record(0xdeadbeef, i, w, w * e));
  }
  const auto avg = st.running_average();
  const auto ref = testutil::reference_weighted_stats(sw, swe);
  CHECK(std::fabs(avg.energy - ref.mean) < 1e-12);
  CHECK(std::fabs(avg.error - ref.error) < 1e-12);

  // permutation invariance: read back shuffled records through weighted_stats
  auto recs = st.all_records();
  std::shuffle(recs.begin(), recs.end(), rng);
  const auto shuffled = weighted_stats(recs);
  CHECK(shuffled.energy == doctest::Approx(avg.energy).epsilon(1e-13));
  CHECK(shuffled.error == doctest::Approx(avg.error).epsilon(1e-13));
  fs::remove_all(dir);
}

TEST_CASE("torn trailing line is ignored on read; records never rewritten") {
  auto dir = testutil::temp_dir("store4");
  auto st = fresh_store(dir);
  st.open_segment("w1");
  st.append_block(make_record(0xdeadbeef, 0, 1.0, 2.0));
  st.append_block(make_record(0xdeadbeef, 1, 1.0, 4.0));

  // simulate a torn write: a final record missing its newline
  const auto seg = dir / "records" / "w1.log";
  std::ofstream f(seg, std::ios::app | std::ios::binary);
  auto torn = make_record(0xdeadbeef, 2, 1.0, 99.0).to_line();
  f << torn.substr(0, torn.size() / 2);
  f.close();

  auto st2 = Store::open(dir);
  CHECK(st2.running_average().n_blocks == 2);
  CHECK(st2.running_average().energy == doctest::Approx(3.0));
  fs::remove_all(dir);
}

TEST_CASE("merge: identity, idempotence, union, key refusal") {
  auto da = testutil::temp_dir("merge-a");
  auto db = testutil::temp_dir("merge-b");
  auto dempty = testutil::temp_dir("merge-empty");
  auto a = fresh_store(da);
  auto b = fresh_store(db);
  auto empty = fresh_store(dempty);
  for (int i = 0; i < 5; ++i) a.append_block(make_record(0xdeadbeef, i, 1.0, i));
  for (int i = 5; i < 9; ++i) b.append_block(make_record(0xdeadbeef, i, 1.0, i));

  auto out1 = testutil::temp_dir("merge-out1");
  fs::remove_all(out1);
  auto m1 = merge_stores(a, empty, out1);
  CHECK(m1.running_average().n_blocks == 5);
  CHECK(m1.running_average().energy == doctest::Approx(a.running_average().energy));

  auto out2 = testutil::temp_dir("merge-out2");
  fs::remove_all(out2);
  auto m2 = merge_stores(a, a, out2);
  CHECK(m2.running_average().n_blocks == 5);

  auto out3 = testutil::temp_dir("merge-out3");
  fs::remove_all(out3);
  auto m3 = merge_stores(a, b, out3);
  CHECK(m3.running_average().n_blocks == 9);

  auto dc = testutil::temp_dir("merge-c");
  auto c = fresh_store(dc, 0x11111111);
  auto out4 = testutil::temp_dir("merge-out4");
  fs::remove_all(out4);
  CHECK_THROWS_AS((void)merge_stores(a, c, out4), KeyMismatch);

  for (auto& d : {da, db, dempty, out1, out2, out3, dc}) fs::remove_all(d);
}

TEST_CASE("merge equals the running average of any partition") {
  auto da = testutil::temp_dir("part-a");
  auto db = testutil::temp_dir("part-b");
  auto a = fresh_store(da);
  auto b = fresh_store(db);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> w(0.5, 2.0), e(-3.0, 1.0);
  std::vector<double> sw, swe;
  for (int i = 0; i < 40; ++i) {
    const double wi = w(rng), ei = e(rng);
    sw.push_back(wi);
    swe.push_back(wi * ei);
    (i % 2 ? a : b).append_block(make_record(0xdeadbeef, i, wi, wi * ei));
  }
  auto out = testutil::temp_dir("part-out");
  fs::remove_all(out);
  auto m = merge_stores(a, b, out);
  const auto ref = testutil::reference_weighted_stats(sw, swe);
  CHECK(std::fabs(m.running_average().energy - ref.mean) < 1e-12);
  for (auto& d : {da, db, out}) fs::remove_all(d);
}

TEST_CASE("checkpoint save/load round trip and crash-safe replace") {
  auto dir = testutil::temp_dir("ckpt");
  auto st = fresh_store(dir);

  CHECK(!st.load_checkpoint());  // fresh-start signal

  std::vector<sampler::PoolSample> pool;
  for (int i = 0; i < 7; ++i)
    pool.push_back({static_cast<double>(i) * 0.1, {0.1 * i, 0.2 * i, 0.3 * i}});
  st.save_checkpoint(pool, 123.0);
  auto cp = st.load_checkpoint();
  REQUIRE(cp);
  CHECK(cp->entries.size() == 7);
  CHECK(cp->timestamp == doctest::Approx(123.0));
  CHECK(cp->entries[3].e_local == doctest::Approx(0.3));
  CHECK(cp->entries[3].coords[1] == doctest::Approx(0.6));

  // simulated crash between tmp write and rename: previous checkpoint survives
  std::ofstream tmp(dir / "checkpoint" / "walkers.txt.tmp");
  tmp << "half-written garbage";
  tmp.close();
  auto cp2 = Store::open(dir).load_checkpoint();
  REQUIRE(cp2);
  CHECK(cp2->entries.size() == 7);
  fs::remove_all(dir);
}

TEST_CASE("run summaries round trip") {
  auto dir = testutil::temp_dir("runs");
  auto st = fresh_store(dir);
  RunSummary s;
  s.run_id = "abc";
  s.workers = 8;
  s.t_cpu = 4000.0;
  s.t_wall = 600.0;
  s.forwarder_cpu = 12.0;
  s.blocks = 42;
  st.append_run_summary(s);
  auto back = st.run_summaries();
  REQUIRE(back.size() == 1);
  CHECK(back[0].workers == 8);
  CHECK(back[0].t_cpu == doctest::Approx(4000.0));
  CHECK(back[0].blocks == 42);
  fs::remove_all(dir);
}

TEST_CASE("concurrent writer segments are unioned at read time") {
  auto dir = testutil::temp_dir("segments");
  {
    auto w1 = fresh_store(dir);
    w1.open_segment("writer-a");
    w1.append_block(make_record(0xdeadbeef, 0, 1.0, 1.0));
  }
  {
    auto w2 = Store::open(dir);
    w2.open_segment("writer-b");
    w2.append_block(make_record(0xdeadbeef, 1, 1.0, 3.0));
  }
  auto reader = Store::open(dir);
  CHECK(reader.running_average().n_blocks == 2);
  CHECK(reader.running_average().energy == doctest::Approx(2.0));
  fs::remove_all(dir);
}
