#include <doctest.h>

#include <random>

#include "qmc/runtime.hpp"
#include "test_util.hpp"

using namespace qmc;
using namespace qmc::runtime;

namespace {

std::vector<sampler::PoolSample> uniform_pool(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<sampler::PoolSample> pool;
  pool.reserve(n);
  for (int i = 0; i < n; ++i) pool.push_back({u(rng), {0.0, 0.0, 0.0}});
  std::sort(pool.begin(), pool.end(),
            [](const auto& a, const auto& b) { return a.e_local < b.e_local; });
  return pool;
}

}  // namespace

TEST_CASE("ancestor chain follows the binary tree") {
  CHECK(ancestor_chain(0).empty());
  CHECK(ancestor_chain(1) == std::vector<int>{0});
  CHECK(ancestor_chain(2) == std::vector<int>{0});
  CHECK(ancestor_chain(5) == std::vector<int>{2, 0});
  CHECK(ancestor_chain(12) == std::vector<int>{5, 2, 0});
}

TEST_CASE("pool merge reproduces the worked index example") {
  // N_kept=3 entries + 3 incoming, eta=0.5: kept 1-based indices {2,4,6}
  std::vector<sampler::PoolSample> pool{{1.0, {0}}, {2.0, {0}}, {3.0, {0}}};
  std::vector<sampler::PoolSample> incoming{{1.5, {0}}, {2.5, {0}}, {3.5, {0}}};
  auto kept = merge_walker_pool(pool, incoming, 3, 0.5);
  // combined sorted: 1.0 1.5 2.0 2.5 3.0 3.5 -> keep 1.5, 2.5, 3.5
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].e_local == doctest::Approx(1.5));
  CHECK(kept[1].e_local == doctest::Approx(2.5));
  CHECK(kept[2].e_local == doctest::Approx(3.5));
}

TEST_CASE("empty incoming list keeps the pool unchanged") {
  std::vector<sampler::PoolSample> pool{{1.0, {0}}, {2.0, {0}}, {3.0, {0}}};
  for (double eta : {0.0, 0.3, 0.99}) {
    auto kept = merge_walker_pool(pool, {}, 3, eta);
    REQUIRE(kept.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(kept[i].e_local == doctest::Approx(pool[i].e_local));
  }
}

TEST_CASE("pool merge output is always sorted and exactly n_kept") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto pool = uniform_pool(20, rng);
    auto incoming = uniform_pool(1 + trial % 40, rng);
    auto kept = merge_walker_pool(pool, incoming, 20, rng);
    REQUIRE(kept.size() == 20);
    for (std::size_t i = 1; i < kept.size(); ++i)
      CHECK(kept[i].e_local >= kept[i - 1].e_local);
  }
}

TEST_CASE("a partially filled pool grows until n_kept") {
  std::mt19937_64 rng(2);
  std::vector<sampler::PoolSample> pool;
  auto incoming = uniform_pool(6, rng);
  auto kept = merge_walker_pool(pool, incoming, 20, 0.5);
  CHECK(kept.size() == 6);
}

TEST_CASE("stratified merge tracks the combined distribution (KS)") {
  std::mt19937_64 rng(3);
  std::vector<double> kept_values;
  kept_values.reserve(200000);
  for (int trial = 0; trial < 10000; ++trial) {
    auto pool = uniform_pool(20, rng);
    auto incoming = uniform_pool(20, rng);
    auto kept = merge_walker_pool(pool, incoming, 20, rng);
    for (const auto& s : kept) kept_values.push_back(s.e_local);
  }
  CHECK(testutil::ks_distance_uniform(std::move(kept_values)) < 0.02);
}

TEST_CASE("critical parameter tail parses back") {
  auto model = testutil::harmonic_model();
  const auto bytes = store::critical_bytes(model.canonical_text(), 0.025,
                                           sampler::Mode::vmc);
  auto crit = parse_critical_params(bytes);
  REQUIRE(crit);
  CHECK(crit->tau == doctest::Approx(0.025));
  CHECK(crit->mode == sampler::Mode::vmc);
  CHECK(!parse_critical_params("no end marker here\n"));
}

TEST_CASE("speedup metric reproduces the reference table row") {
  // 1 node: CPU 9627 s / Wall 625 s; 10 nodes: CPU 95721 s / Wall 627 s -> 9.9
  std::vector<store::RunSummary> runs(2);
  runs[0].run_id = "one";
  runs[0].workers = 16;
  runs[0].t_cpu = 9627.0;
  runs[0].t_wall = 625.0;
  runs[1].run_id = "ten";
  runs[1].workers = 160;
  runs[1].t_cpu = 95721.0;
  runs[1].t_wall = 627.0;
  auto rows = speedup_report(runs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].speedup == doctest::Approx(1.0));
  CHECK(rows[1].speedup == doctest::Approx(9.9).epsilon(0.005));
}

TEST_CASE("identical rates give speedup 1.0") {
  std::vector<store::RunSummary> runs(2);
  runs[0].t_cpu = 100.0;
  runs[0].t_wall = 100.0;
  runs[1].t_cpu = 100.0;
  runs[1].t_wall = 100.0;
  auto rows = speedup_report(runs);
  CHECK(rows[1].speedup == doctest::Approx(1.0));
}

TEST_CASE("forwarder overhead percentage") {
  std::vector<store::RunSummary> runs(1);
  runs[0].t_cpu = 1000.0;
  runs[0].t_wall = 500.0;
  runs[0].forwarder_cpu = 5.0;
  auto rows = speedup_report(runs);
  CHECK(rows[0].forwarder_cpu_pct == doctest::Approx(0.5));
}
