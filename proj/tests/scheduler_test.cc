// Copyright 2026 The MoeFlow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "gtest/gtest.h"
#include "moeflow/queues.hpp"
#include "moeflow/sim.hpp"
#include "test_util.h"

namespace moeflow {
namespace {

using testing_util::decision_from_lists;

constexpr Picoseconds kSecond = 1'000'000'000'000;

CostModel unit_cost() {
  CostModel c;
  c.expert_weight_bytes = 1.0;
  c.dram_bandwidth = 1.0;
  c.mac_throughput = 1.0;
  c.base_onchip_bytes = 10.0;
  c.chip_capacity = 1e9;
  c.power = 2.0;
  c.cache_capacity_experts = 1;
  return c;
}

// Decision whose per-expert queue lengths equal `lengths` (K = 1).
GatingDecision decision_with_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<std::vector<std::size_t>> picks;
  for (std::size_t e = 0; e < lengths.size(); ++e)
    for (std::size_t i = 0; i < lengths[e]; ++i) picks.push_back({e});
  return decision_from_lists(picks, lengths.size());
}

// Event-driven model of the two-buffer pipeline: buffers, one memory channel,
// one compute unit. Written independently of the closed-form scheduler.
Picoseconds double_buffer_oracle(const std::vector<std::size_t>& lengths, Picoseconds load,
                                 Picoseconds per_token) {
  std::vector<Picoseconds> work;
  for (std::size_t n : lengths)
    if (n > 0) work.push_back(static_cast<Picoseconds>(n) * per_token);
  if (work.empty()) return 0;
  std::vector<Picoseconds> buffer_free(2, 0);  // when each buffer may be refilled
  Picoseconds channel_free = 0, compute_free = 0;
  for (std::size_t i = 0; i < work.size(); ++i) {
    auto& buf = buffer_free[i % 2];
    const Picoseconds load_start = std::max(channel_free, buf);
    const Picoseconds loaded = load_start + load;
    channel_free = loaded;
    const Picoseconds begin = std::max(loaded, compute_free);
    compute_free = begin + work[i];
    buf = compute_free;  // the buffer holds these weights until compute ends
  }
  return compute_free;
}

// ---- queues ----------------------------------------------------------------

TEST(BuildQueuesTest, OneTokenTwoExperts) {
  const ExpertQueues q = build_queues(decision_from_lists({{0, 3}}, 8), 8);
  EXPECT_EQ(q.lengths(), (std::vector<std::size_t>{1, 0, 0, 1, 0, 0, 0, 0}));
}

TEST(BuildQueuesTest, ConservationTimesK) {
  std::mt19937_64 gen(50);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = gen() % 40, n = 1 + gen() % 20, k = 1 + gen() % n;
    const GatingDecision d = top_k_gate(testing_util::random_matrix(gen, t, n, 3.0f), k);
    ASSERT_EQ(build_queues(d, n).total_entries(), t * k);
  }
}

TEST(BuildQueuesTest, AllTokensOnOneExpert) {
  std::vector<std::vector<std::size_t>> picks(12, std::vector<std::size_t>{7});
  const ExpertQueues q = build_queues(decision_from_lists(picks, 16), 16);
  for (std::size_t e = 0; e < 16; ++e) EXPECT_EQ(q.queues[e].size(), e == 7 ? 12u : 0u);
}

TEST(BuildQueuesTest, CarriesGatesInTokenOrder) {
  const GatingDecision d = decision_from_lists({{1, 0}, {0, 2}, {1, 2}}, 3);
  const ExpertQueues q = build_queues(d, 3);
  ASSERT_EQ(q.queues[0].size(), 2u);
  EXPECT_EQ(q.queues[0][0].token, 0u);
  EXPECT_EQ(q.queues[0][1].token, 1u);
  EXPECT_EQ(q.queues[0][0].gate, d.gates(0)[1]);
  EXPECT_EQ(q.queues[2][1].token, 2u);
}

TEST(BuildQueuesTest, IndexOutOfBoundsThrows) {
  EXPECT_THROW(build_queues(decision_from_lists({{5}}, 8), 4), std::exception);
}

// ---- execute_reordered -----------------------------------------------------

TEST(ExecuteReorderedTest, EqualsReferenceBitwise) {
  std::mt19937_64 gen(51);
  for (int trial = 0; trial < 60; ++trial) {
    const auto kind = static_cast<RoutingKind>(trial % 3);
    const MoeLayerParams layer = testing_util::random_layer(gen, 16, 8, 16, 4, kind, 2, 0.3f);
    const Matrix x = testing_util::random_matrix(gen, 1 + gen() % 32, 16, 1.0f);
    const GatingDecision d = select_experts(layer, x, trial % 2);
    ASSERT_TRUE(bitwise_equal(execute_reordered(layer, x, d), moe_forward_reference(layer, x, d)));
  }
}

TEST(ExecuteReorderedTest, EmptyInputGivesEmptyOutput) {
  std::mt19937_64 gen(52);
  const MoeLayerParams layer = testing_util::random_layer(gen, 8, 4, 4, 2, RoutingKind::kSingle, 1, 0.3f);
  const Matrix x(0, 8);
  const Matrix y = execute_reordered(layer, x, select_single(layer, x));
  EXPECT_EQ(y.rows(), 0u);
}

TEST(ExecuteReorderedTest, AllExpertsEqualsDenseSum) {
  std::mt19937_64 gen(53);
  MoeLayerParams layer = testing_util::random_layer(gen, 8, 4, 4, 4, RoutingKind::kSingle, 1, 0.3f);
  auto& r = std::get<SingleGate>(layer.routing).router;
  r.wg = Matrix(8, 4);
  std::fill(r.bg.begin(), r.bg.end(), 0.0f);
  const Matrix x = testing_util::random_matrix(gen, 3, 8, 1.0f);
  const Matrix y = execute_reordered(layer, x, select_single(layer, x));
  Matrix expect(3, 8);
  for (std::size_t e = 0; e < 4; ++e) {
    const Matrix f = expert_forward(layer.experts[e], x);
    for (std::size_t t = 0; t < 3; ++t) accumulate_scaled(expect.row(t), 0.25f, f.row(t));
  }
  EXPECT_TRUE(bitwise_equal(y, expect));
}

TEST(ExecuteReorderedTest, DescendingOrderIsDetectablyDifferent) {
  // Negative control: flipping the combine order must change some bits.
  std::mt19937_64 gen(54);
  bool any_diff = false;
  for (int trial = 0; trial < 20 && !any_diff; ++trial) {
    const MoeLayerParams layer = testing_util::random_layer(gen, 16, 8, 16, 4, RoutingKind::kMultiGate, 2, 0.3f);
    const Matrix x = testing_util::random_matrix(gen, 16, 16, 1.0f);
    const GatingDecision d = select_experts(layer, x, 0);
    any_diff = !bitwise_equal(execute_reordered(layer, x, d, ExpertOrder::kDescending),
                              moe_forward_reference(layer, x, d));
  }
  EXPECT_TRUE(any_diff);
}

// ---- simulate_reordered ----------------------------------------------------

TEST(SimulateReorderedTest, WorkedExample) {
  const ExpertQueues q = build_queues(decision_with_lengths({3, 2, 0, 1}), 4);
  const ExpertTiming timing{5 * kSecond, 2 * kSecond};
  const std::vector<ExpertQueues> layers = {q};
  const SimReport r = simulate_reordered(layers, unit_cost(), timing);
  EXPECT_EQ(r.latency_ps, 18 * kSecond);
  EXPECT_EQ(double_buffer_oracle({3, 2, 0, 1}, 5 * kSecond, 2 * kSecond), 18 * kSecond);
  EXPECT_EQ(r.load_events, 3u);
  EXPECT_DOUBLE_EQ(r.latency, 18.0);
  EXPECT_DOUBLE_EQ(r.energy, 36.0);
}

TEST(SimulateReorderedTest, MatchesEventOracleProperty) {
  std::mt19937_64 gen(55);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::size_t> lengths(1 + gen() % 20);
    for (auto& n : lengths) n = gen() % 3 == 0 ? 0 : gen() % 30;
    const Picoseconds load = static_cast<Picoseconds>(gen() % 1000);
    const Picoseconds per_token = static_cast<Picoseconds>(gen() % 100);
    const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths(lengths), lengths.size())};
    const SimReport r = simulate_reordered(layers, unit_cost(), {load, per_token});
    ASSERT_EQ(r.latency_ps, double_buffer_oracle(lengths, load, per_token));

    // Closed form and bounds.
    Picoseconds total = 0, closed = 0;
    std::vector<Picoseconds> c;
    for (std::size_t n : lengths)
      if (n > 0) c.push_back(static_cast<Picoseconds>(n) * per_token);
    for (Picoseconds v : c) total += v;
    const auto m = static_cast<Picoseconds>(c.size());
    if (!c.empty()) {
      closed = load + c.back();
      for (std::size_t i = 0; i + 1 < c.size(); ++i) closed += std::max(c[i], load);
    }
    ASSERT_EQ(r.latency_ps, closed);
    ASSERT_GE(r.latency_ps, std::max(total, m * load));
    ASSERT_LE(r.latency_ps, total + m * load);
    ASSERT_EQ(r.load_events, c.size());
  }
}

TEST(SimulateReorderedTest, FreeMemoryChannelGivesTotalCompute) {
  const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths({4, 0, 1, 7}), 4)};
  EXPECT_EQ(simulate_reordered(layers, unit_cost(), {0, 3}).latency_ps, 12 * 3);
}

TEST(SimulateReorderedTest, SaturatedComputeHidesAllButFirstLoad) {
  const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths({5, 6, 0, 5}), 4)};
  const SimReport r = simulate_reordered(layers, unit_cost(), {10, 2});
  EXPECT_EQ(r.latency_ps, 10 + 16 * 2);
}

TEST(SimulateReorderedTest, EmptyQueuesCostNothing) {
  const std::vector<ExpertQueues> layers = {build_queues(top_k_gate(Matrix(0, 4), 1), 4)};
  const SimReport r = simulate_reordered(layers, unit_cost(), {10, 2});
  EXPECT_EQ(r.latency_ps, 0);
  EXPECT_EQ(r.load_events, 0u);
}

TEST(SimulateReorderedTest, TraceOverlapsNextLoadWithCompute) {
  const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths({3, 2, 0, 1}), 4)};
  const SimReport r = simulate_reordered(layers, unit_cost(), {5, 2});
  std::map<std::int64_t, TraceEvent> load, compute;
  for (const auto& e : r.trace) {
    if (e.phase == Phase::kLoad) load[e.expert] = e;
    if (e.phase == Phase::kCompute) compute[e.expert] = e;
  }
  // load(e1) runs during compute(e0); load(e3) during compute(e1).
  EXPECT_LT(load[1].start, compute[0].end);
  EXPECT_GE(load[1].start, compute[0].start);
  EXPECT_LT(load[3].start, compute[1].end);
}

// ---- simulate_naive / simulate_cached ---------------------------------------

TEST(SimulateNaiveTest, InfeasibleWhenOverCapacity) {
  CostModel c = unit_cost();
  c.expert_weight_bytes = 0.5 * kMiB;
  c.base_onchip_bytes = 1.0 * kMiB;
  c.chip_capacity = 4.0 * kMiB;
  const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths(std::vector<std::size_t>(16, 1)), 16)};
  const SimReport naive = simulate_naive(layers, c, {1, 1});
  EXPECT_FALSE(naive.feasible);
  EXPECT_DOUBLE_EQ(naive.peak_onchip_bytes, 9.0 * kMiB);
  EXPECT_TRUE(simulate_reordered(layers, c, {1, 1}).feasible);
}

TEST(SimulateNaiveTest, NeverSlowerThanReordered) {
  std::mt19937_64 gen(56);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> lengths(1 + gen() % 16);
    for (auto& n : lengths) n = gen() % 10;
    const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths(lengths), lengths.size())};
    const ExpertTiming t{static_cast<Picoseconds>(gen() % 500), static_cast<Picoseconds>(gen() % 50)};
    const SimReport naive = simulate_naive(layers, unit_cost(), t);
    ASSERT_LE(naive.latency_ps, simulate_reordered(layers, unit_cost(), t).latency_ps);
    ASSERT_EQ(naive.latency_ps, static_cast<Picoseconds>(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0})) * t.per_token);
  }
}

TEST(SimulateNaiveTest, StartupLoadTracedSeparately) {
  const std::vector<ExpertQueues> layers = {build_queues(decision_with_lengths({1, 1, 1}), 3)};
  const SimReport r = simulate_naive(layers, unit_cost(), {7, 1});
  EXPECT_EQ(r.startup_ps, 21);
  EXPECT_EQ(r.latency_ps, 3);
  EXPECT_EQ(std::count_if(r.trace.begin(), r.trace.end(), [](const TraceEvent& e) { return e.frame == -1; }), 3);
}

TEST(SimulateNaiveTest, MemoryLinearInN) {
  CostModel c = unit_cost();
  c.expert_weight_bytes = 3.0;
  const double m8 = peak_onchip_bytes(Strategy::kNaive, 8, c) - c.base_onchip_bytes;
  const double m16 = peak_onchip_bytes(Strategy::kNaive, 16, c) - c.base_onchip_bytes;
  EXPECT_DOUBLE_EQ(m16, 2.0 * m8);
}

TEST(SimulateCachedTest, CapacityAtLeastNGivesColdMissesOnly) {
  std::mt19937_64 gen(57);
  CostModel c = unit_cost();
  c.cache_capacity_experts = 16;
  const GatingDecision d = top_k_gate(testing_util::random_matrix(gen, 30, 16, 3.0f), 4);
  const std::set<std::size_t> distinct(d.expert_ids.begin(), d.expert_ids.end());
  const std::vector<GatingDecision> layers = {d};
  const SimReport r = simulate_cached(layers, c, {3, 1});
  EXPECT_EQ(r.cache->misses, distinct.size());
  EXPECT_EQ(r.cache->hits, 30u * 4u - distinct.size());
}

TEST(SimulateCachedTest, AlternatingWithCapacityOneAlwaysMisses) {
  const GatingDecision d = decision_from_lists({{0}, {1}, {0}, {1}, {0}, {1}}, 2);
  const std::vector<GatingDecision> layers = {d};
  const SimReport r = simulate_cached(layers, unit_cost(), {5, 1});
  EXPECT_EQ(r.cache->misses, 6u);
  EXPECT_EQ(r.cache->hits, 0u);
  EXPECT_EQ(r.latency_ps, 6 * (5 + 1));
}

TEST(SimulateCachedTest, SingleTokenColdCacheMissesK) {
  CostModel c = unit_cost();
  c.cache_capacity_experts = 2;
  const std::vector<GatingDecision> layers = {decision_from_lists({{3, 1, 7, 0}}, 8)};
  EXPECT_EQ(simulate_cached(layers, c, {5, 1}).cache->misses, 4u);
}

TEST(SimulateCachedTest, SaturatedReorderedDominatesColdCache) {
  std::mt19937_64 gen(58);
  for (int trial = 0; trial < 300; ++trial) {
    CostModel c = unit_cost();
    c.cache_capacity_experts = 1 + gen() % 4;
    const GatingDecision d = top_k_gate(testing_util::random_matrix(gen, 1 + gen() % 30, 16, 3.0f), 4);
    const Picoseconds load = 1 + static_cast<Picoseconds>(gen() % 100);
    const Picoseconds per_token = load;  // every nonempty queue: C >= L
    const std::vector<GatingDecision> dl = {d};
    const std::vector<ExpertQueues> ql = {build_queues(d, 16)};
    ASSERT_LE(simulate_reordered(ql, c, {load, per_token}).latency_ps,
              simulate_cached(dl, c, {load, per_token}).latency_ps);
  }
}

TEST(LruCacheTest, EvictsLeastRecentlyUsed) {
  LruCache cache(2);
  EXPECT_FALSE(cache.access(1));
  EXPECT_FALSE(cache.access(2));
  EXPECT_TRUE(cache.access(1));
  EXPECT_FALSE(cache.access(3));  // evicts 2
  EXPECT_FALSE(cache.contains(2));
  EXPECT_EQ(cache.contents(), (std::vector<std::size_t>{3, 1}));
}

// ---- memory_account --------------------------------------------------------

TEST(MemoryAccountTest, CalibratedFootprints) {
  const MemoryAccount m = memory_account(ModelConfig::vit_small(), calibrated_cost_model());
  EXPECT_NEAR(m.naive / kMiB, 11.610, 1e-9);
  EXPECT_NEAR(m.reordered / kMiB, 4.840, 1e-9);
  EXPECT_NEAR(m.naive / m.reordered, 2.3987603305785123, 1e-12);
  EXPECT_NEAR(calibrated_cost_model().expert_weight_bytes / kMiB, 0.48357142857142854, 1e-12);
  EXPECT_NEAR(calibrated_cost_model().base_onchip_bytes / kMiB, 3.8728571428571428, 1e-12);
}

TEST(MemoryAccountTest, TwoExpertsNaiveEqualsReordered) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.expert_count = 2;
  cfg.top_k = 2;
  const MemoryAccount m = memory_account(cfg, calibrated_cost_model());
  EXPECT_EQ(m.naive, m.reordered);
}

TEST(MemoryAccountTest, ZeroExpertSizeCollapsesToBase) {
  CostModel c = calibrated_cost_model();
  c.expert_weight_bytes = 0.0;
  const MemoryAccount m = memory_account(ModelConfig::desk(), c);
  EXPECT_EQ(m.naive, c.base_onchip_bytes);
  EXPECT_EQ(m.cached, c.base_onchip_bytes);
  EXPECT_EQ(m.reordered, c.base_onchip_bytes);
}

// ---- simulate_model ---------------------------------------------------------

// Frame of the desk config whose two MoE layers route per `picks`.
Frame make_frame(std::size_t task, const std::vector<std::vector<std::size_t>>& picks) {
  Frame f;
  f.task = task;
  f.decisions = {decision_from_lists(picks, 16), decision_from_lists(picks, 16)};
  return f;
}

std::vector<std::vector<std::size_t>> task_picks(std::size_t offset) {
  std::vector<std::vector<std::size_t>> picks;
  for (std::size_t t = 0; t < 16; ++t) {
    picks.push_back({offset + t % 8, offset + (t + 1) % 8, offset + (t + 2) % 8, offset + (t + 3) % 8});
  }
  return picks;
}

// Every token of the task picks the same four experts.
std::vector<std::vector<std::size_t>> fixed_picks(std::size_t offset) {
  return std::vector<std::vector<std::size_t>>(16, {offset, offset + 1, offset + 2, offset + 3});
}

TEST(SimulateModelTest, ReorderedSwitchingIsFree) {
  const ModelConfig cfg = ModelConfig::desk();
  CostModel c = calibrated_cost_model();
  c.cache_capacity_experts = 4;
  Workload same{{make_frame(0, fixed_picks(0)), make_frame(0, fixed_picks(0)), make_frame(0, fixed_picks(0))}};
  Workload alt{{make_frame(0, fixed_picks(0)), make_frame(1, fixed_picks(8)), make_frame(0, fixed_picks(0))}};
  const SimReport a = simulate_model(cfg, same, Strategy::kReordered, c);
  const SimReport b = simulate_model(cfg, alt, Strategy::kReordered, c);
  EXPECT_EQ(a.latency_ps, b.latency_ps);
  EXPECT_EQ(a.frame_latencies, b.frame_latencies);

  const SimReport ca = simulate_model(cfg, same, Strategy::kCached, c);
  const SimReport cb = simulate_model(cfg, alt, Strategy::kCached, c);
  EXPECT_GT(cb.cache->misses, ca.cache->misses);
  EXPECT_GT(cb.latency_ps, ca.latency_ps);
}

TEST(SimulateModelTest, NaiveVersusReorderedMemoryGap) {
  const ModelConfig cfg = ModelConfig::desk();
  const CostModel c = calibrated_cost_model();
  Workload w{{make_frame(0, task_picks(0))}};
  const SimReport n = simulate_model(cfg, w, Strategy::kNaive, c);
  const SimReport r = simulate_model(cfg, w, Strategy::kReordered, c);
  EXPECT_NEAR(n.peak_onchip_bytes - r.peak_onchip_bytes, 14.0 * c.expert_weight_bytes, 1e-6);
  EXPECT_EQ(n.frame_latencies.size(), r.frame_latencies.size());
  EXPECT_EQ(n.breakdown.expert_compute, r.breakdown.expert_compute);
}

TEST(SimulateModelTest, EnergyIsLatencyTimesPower) {
  const ModelConfig cfg = ModelConfig::desk();
  const CostModel c = calibrated_cost_model();
  Workload w{{make_frame(0, task_picks(0)), make_frame(1, task_picks(3))}};
  for (auto s : {Strategy::kNaive, Strategy::kCached, Strategy::kReordered}) {
    const SimReport r = simulate_model(cfg, w, s, c);
    EXPECT_DOUBLE_EQ(r.energy, r.latency * c.power);
    Picoseconds sum = 0;
    for (auto f : r.frame_latencies) sum += f;
    EXPECT_EQ(sum, r.latency_ps);
  }
}

TEST(SimulateModelTest, TraceResourcesNeverDoubleBooked) {
  const ModelConfig cfg = ModelConfig::desk();
  const CostModel c = calibrated_cost_model();
  Workload w{{make_frame(0, task_picks(0)), make_frame(1, task_picks(5))}};
  for (auto s : {Strategy::kNaive, Strategy::kCached, Strategy::kReordered}) {
    const SimReport r = simulate_model(cfg, w, s, c);
    for (auto res : {Resource::kMemory, Resource::kCompute}) {
      std::vector<std::pair<Picoseconds, Picoseconds>> iv;
      for (const auto& e : r.trace)
        if (e.resource == res) iv.emplace_back(e.start, e.end);
      std::sort(iv.begin(), iv.end());
      for (std::size_t i = 1; i < iv.size(); ++i) ASSERT_LE(iv[i - 1].second, iv[i].first);
    }
  }
}

TEST(SimulateModelTest, RejectsMismatchedWorkload) {
  const ModelConfig cfg = ModelConfig::desk();
  Frame f = make_frame(0, task_picks(0));
  f.decisions.pop_back();
  EXPECT_THROW(simulate_model(cfg, Workload{{f}}, Strategy::kReordered, calibrated_cost_model()),
               std::invalid_argument);
}

}  // namespace
}  // namespace moeflow
