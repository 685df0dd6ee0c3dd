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

// Accelerator cost simulation for three ways of serving MoE expert weights:
//
//   naive      every expert of every MoE layer resident on chip; loaded once at
//              startup, never again.
//   cached     tokens processed in input order through an LRU cache of expert
//              weights; a miss stalls compute for one full load.
//   reordered  tokens queued per expert, experts processed in ascending id
//              with two weight buffers: the next active expert loads while the
//              current one computes its whole queue.
//
// The machine has one memory channel and one compute engine. Time is kept in
// integer picoseconds; each primitive duration (one expert load, one
// expert-token, one dense phase) is rounded once, and everything after that is
// exact integer arithmetic.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moeflow/moe.hpp"
#include "moeflow/queues.hpp"
#include "moeflow/vit.hpp"

namespace moeflow {

using Picoseconds = std::int64_t;

inline constexpr double kMiB = 1024.0 * 1024.0;

inline Picoseconds to_picoseconds(double seconds) {
  return static_cast<Picoseconds>(std::llround(seconds * 1e12));
}

inline double to_seconds(Picoseconds ps) { return static_cast<double>(ps) / 1e12; }

struct CostModel {
  double expert_weight_bytes = 0.0;     // one expert's weights + biases
  double dram_bandwidth = 0.0;          // bytes / s
  double mac_throughput = 0.0;          // MAC / s
  double base_onchip_bytes = 0.0;       // resident non-expert footprint
  double chip_capacity = 0.0;           // bytes
  double power = 0.0;                   // W
  std::size_t cache_capacity_experts = 1;

  void validate() const {
    const auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument(std::string("cost.") + name + " must be a positive finite number");
      }
    };
    positive(expert_weight_bytes, "expert_weight_bytes");
    positive(dram_bandwidth, "dram_bandwidth");
    positive(mac_throughput, "mac_throughput");
    positive(base_onchip_bytes, "base_onchip_bytes");
    positive(chip_capacity, "chip_capacity");
    positive(power, "power");
    if (cache_capacity_experts < 1) {
      throw std::invalid_argument("cost.cache_capacity_experts must be >= 1");
    }
  }

  Picoseconds load_time() const { return to_picoseconds(expert_weight_bytes / dram_bandwidth); }

  Picoseconds compute_time(std::uint64_t macs) const {
    return to_picoseconds(static_cast<double>(macs) / mac_throughput);
  }
};

// Calibration used by the bundled hardware configs. Expert size and resident
// base are solved from two target on-chip footprints of a 16-expert
// ViT-small (11.610 MiB all-resident, 4.840 MiB double-buffered):
//   M0 + 16 E = 11.610 MiB,  M0 + 2 E = 4.840 MiB.
// Clock and power follow the 300 MHz / 10 W board; 1536 MACs per cycle and a
// 64-bit DDR4-2400 channel (19.2 GB/s) are assumed values.
// Chip capacity sits between the two footprints.
inline CostModel calibrated_cost_model() {
  CostModel c;
  c.expert_weight_bytes = (11.610 - 4.840) / 14.0 * kMiB;
  c.base_onchip_bytes = 4.840 * kMiB - 2.0 * c.expert_weight_bytes;
  c.dram_bandwidth = 19.2e9;
  c.mac_throughput = 300e6 * 1536.0;
  c.chip_capacity = 5.5 * kMiB;
  c.power = 10.0;
  c.cache_capacity_experts = 2;
  return c;
}

struct ExpertTiming {
  Picoseconds load = 0;       // one expert's weights over the memory channel
  Picoseconds per_token = 0;  // one token through one expert
};

inline ExpertTiming expert_timing(const CostModel& cost, std::uint64_t expert_macs_per_token) {
  return {cost.load_time(), cost.compute_time(expert_macs_per_token)};
}

enum class Phase { kLoad, kCompute, kStall };
enum class Resource { kMemory, kCompute };
enum class Strategy { kNaive, kCached, kReordered };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::kLoad: return "load";
    case Phase::kCompute: return "compute";
    case Phase::kStall: return "stall";
  }
  return "?";
}

inline std::string_view to_string(Resource r) {
  return r == Resource::kMemory ? "memory" : "compute";
}

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kNaive: return "naive";
    case Strategy::kCached: return "cached";
    case Strategy::kReordered: return "reordered";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  if (s == "naive") return Strategy::kNaive;
  if (s == "cached") return Strategy::kCached;
  if (s == "reordered") return Strategy::kReordered;
  return std::nullopt;
}

// frame -1 marks the one-time startup load of the naive strategy; layer is
// the 0-based block index, -1 for patch embedding; expert -1 for non-expert work.
struct TraceEvent {
  std::int64_t frame = 0;
  std::int64_t layer = 0;
  Phase phase = Phase::kCompute;
  Resource resource = Resource::kCompute;
  Picoseconds start = 0;
  Picoseconds end = 0;
  std::int64_t expert = -1;
};

struct LatencyBreakdown {
  Picoseconds patch_embed = 0;
  Picoseconds attention = 0;
  Picoseconds dense_mlp = 0;
  Picoseconds router = 0;
  Picoseconds expert_compute = 0;
  Picoseconds load_stall = 0;
};

struct CacheStats {
  std::size_t capacity = 0;
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
};

struct SimReport {
  Strategy strategy = Strategy::kReordered;
  Picoseconds latency_ps = 0;
  double latency = 0.0;  // s
  double energy = 0.0;   // J, latency * power
  double peak_onchip_bytes = 0.0;
  std::uint64_t load_events = 0;
  bool feasible = true;
  Picoseconds startup_ps = 0;  // naive only; not part of latency
  std::vector<Picoseconds> frame_latencies;
  LatencyBreakdown breakdown;
  std::optional<CacheStats> cache;
  std::vector<TraceEvent> trace;
};

// Fully associative LRU set of expert ids.
class LruCache {
 public:
  explicit LruCache(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("LruCache capacity must be >= 1");
  }

  // True on hit. A miss inserts `key`, evicting the least recently used entry if full.
  bool access(std::size_t key) {
    const auto it = where_.find(key);
    if (it != where_.end()) {
      order_.splice(order_.begin(), order_, it->second);
      return true;
    }
    if (order_.size() == capacity_) {
      where_.erase(order_.back());
      order_.pop_back();
    }
    order_.push_front(key);
    where_[key] = order_.begin();
    return false;
  }

  bool contains(std::size_t key) const { return where_.count(key) != 0; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return order_.size(); }

  // Most recently used first.
  std::vector<std::size_t> contents() const { return {order_.begin(), order_.end()}; }

 private:
  std::size_t capacity_;
  std::list<std::size_t> order_;
  std::unordered_map<std::size_t, std::list<std::size_t>::iterator> where_;
};

class TraceRecorder {
 public:
  std::int64_t frame = 0;
  std::int64_t layer = 0;

  void add(Phase phase, Resource resource, Picoseconds start, Picoseconds end,
           std::int64_t expert = -1) {
    if (end > start) events_.push_back({frame, layer, phase, resource, start, end, expert});
  }

  // Appends a compute phase starting at `now`; returns its end.
  Picoseconds compute(Picoseconds now, Picoseconds duration, std::int64_t expert = -1) {
    add(Phase::kCompute, Resource::kCompute, now, now + duration, expert);
    return now + duration;
  }

  std::vector<TraceEvent> take() { return std::move(events_); }

 private:
  std::vector<TraceEvent> events_;
};

struct LayerOutcome {
  Picoseconds end = 0;
  std::uint64_t loads = 0;
  Picoseconds compute = 0;
  Picoseconds stall = 0;
  std::uint64_t hits = 0;
};

namespace detail {

// Double-buffered expert-by-expert pipeline over the active (nonempty)
// experts e_1..e_m in ascending id. Compute of e_i starts once its weights are
// loaded and e_{i-1} has finished; that same instant frees e_{i-1}'s buffer
// and the channel, so the load of e_{i+1} starts with it. Latency:
//   L + sum_{i<m} max(C_i, L) + C_m.
inline LayerOutcome reordered_layer(std::span<const std::size_t> queue_lengths,
                                    const ExpertTiming& timing, Picoseconds start,
                                    TraceRecorder& rec) {
  LayerOutcome out{start, 0, 0, 0, 0};
  std::vector<std::size_t> active;
  for (std::size_t e = 0; e < queue_lengths.size(); ++e) {
    if (queue_lengths[e] > 0) active.push_back(e);
  }
  if (active.empty()) return out;

  const Picoseconds load = timing.load;
  Picoseconds load_end = start + load;
  rec.add(Phase::kLoad, Resource::kMemory, start, load_end, static_cast<std::int64_t>(active[0]));
  Picoseconds compute_free = start;
  for (std::size_t i = 0; i < active.size(); ++i) {
    const Picoseconds begin = std::max(load_end, compute_free);
    if (i + 1 < active.size()) {
      rec.add(Phase::kLoad, Resource::kMemory, begin, begin + load,
              static_cast<std::int64_t>(active[i + 1]));
    }
    rec.add(Phase::kStall, Resource::kCompute, compute_free, begin, static_cast<std::int64_t>(active[i]));
    const Picoseconds c = static_cast<Picoseconds>(queue_lengths[active[i]]) * timing.per_token;
    out.stall += begin - compute_free;
    rec.add(Phase::kCompute, Resource::kCompute, begin, begin + c, static_cast<std::int64_t>(active[i]));
    out.compute += c;
    compute_free = begin + c;
    load_end = begin + load;
  }
  out.loads = active.size();
  out.end = compute_free;
  return out;
}

// Token order, experts in gate order, on-demand loading through `cache`.
inline LayerOutcome cached_layer(const GatingDecision& decision, const ExpertTiming& timing,
                                 LruCache& cache, Picoseconds start, TraceRecorder& rec) {
  LayerOutcome out{start, 0, 0, 0, 0};
  Picoseconds now = start;
  for (std::size_t t = 0; t < decision.token_count(); ++t) {
    for (std::size_t e : decision.experts(t)) {
      const auto id = static_cast<std::int64_t>(e);
      if (cache.access(e)) {
        ++out.hits;
      } else {
        rec.add(Phase::kLoad, Resource::kMemory, now, now + timing.load, id);
        rec.add(Phase::kStall, Resource::kCompute, now, now + timing.load, id);
        now += timing.load;
        out.stall += timing.load;
        ++out.loads;
      }
      now = rec.compute(now, timing.per_token, id);
      out.compute += timing.per_token;
    }
  }
  out.end = now;
  return out;
}

// All weights resident: token order, no memory traffic.
inline LayerOutcome naive_layer(const ExpertQueues& queues, const ExpertTiming& timing,
                                Picoseconds start, TraceRecorder& rec) {
  std::size_t tokens = 0;
  for (const auto& q : queues.queues) {
    if (!q.empty()) tokens = std::max(tokens, q.back().token + 1);
  }
  std::vector<std::vector<std::size_t>> per_token(tokens);
  for (std::size_t e = 0; e < queues.expert_count(); ++e) {
    for (const auto& entry : queues.queues[e]) per_token[entry.token].push_back(e);
  }
  LayerOutcome out{start, 0, 0, 0, 0};
  Picoseconds now = start;
  for (const auto& experts : per_token) {
    for (std::size_t e : experts) {
      now = rec.compute(now, timing.per_token, static_cast<std::int64_t>(e));
      out.compute += timing.per_token;
    }
  }
  out.end = now;
  return out;
}

inline Picoseconds naive_startup(std::size_t n_layers, std::size_t n_experts,
                                 const std::vector<std::int64_t>& layer_ids,
                                 const ExpertTiming& timing, TraceRecorder& rec) {
  Picoseconds now = 0;
  rec.frame = -1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    rec.layer = layer_ids.empty() ? static_cast<std::int64_t>(l) : layer_ids[l];
    for (std::size_t e = 0; e < n_experts; ++e) {
      rec.add(Phase::kLoad, Resource::kMemory, now, now + timing.load, static_cast<std::int64_t>(e));
      now += timing.load;
    }
  }
  return now;
}

inline void finalize(SimReport& r, const CostModel& cost) {
  r.latency = to_seconds(r.latency_ps);
  r.energy = r.latency * cost.power;
  r.feasible = r.peak_onchip_bytes <= cost.chip_capacity;
}

}  // namespace detail

struct MemoryAccount {
  double naive = 0.0;
  double cached = 0.0;
  double reordered = 0.0;
};

// naive: M0 + N E; cached: M0 + capacity E; reordered: M0 + 2 E (ping-pong pair).
inline double peak_onchip_bytes(Strategy s, std::size_t n_experts, const CostModel& cost) {
  switch (s) {
    case Strategy::kNaive:
      return cost.base_onchip_bytes + static_cast<double>(n_experts) * cost.expert_weight_bytes;
    case Strategy::kCached:
      return cost.base_onchip_bytes +
             static_cast<double>(cost.cache_capacity_experts) * cost.expert_weight_bytes;
    case Strategy::kReordered:
      return cost.base_onchip_bytes + 2.0 * cost.expert_weight_bytes;
  }
  return 0.0;
}

inline MemoryAccount memory_account(const ModelConfig& config, const CostModel& cost) {
  return {peak_onchip_bytes(Strategy::kNaive, config.expert_count, cost),
          peak_onchip_bytes(Strategy::kCached, config.expert_count, cost),
          peak_onchip_bytes(Strategy::kReordered, config.expert_count, cost)};
}

// One frame, MoE layers back to back, expert work only.
inline SimReport simulate_reordered(std::span<const ExpertQueues> layers, const CostModel& cost,
                                    const ExpertTiming& timing) {
  SimReport r;
  r.strategy = Strategy::kReordered;
  TraceRecorder rec;
  Picoseconds now = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    rec.layer = static_cast<std::int64_t>(l);
    const auto lengths = layers[l].lengths();
    const LayerOutcome o = detail::reordered_layer(lengths, timing, now, rec);
    now = o.end;
    r.load_events += o.loads;
    r.breakdown.expert_compute += o.compute;
    r.breakdown.load_stall += o.stall;
  }
  r.latency_ps = now;
  r.frame_latencies = {now};
  r.peak_onchip_bytes = peak_onchip_bytes(Strategy::kReordered, 0, cost);
  r.trace = rec.take();
  detail::finalize(r, cost);
  return r;
}

// The startup load of all N experts per layer is traced as frame -1 and
// reported in startup_ps; latency is the steady-state compute time.
inline SimReport simulate_naive(std::span<const ExpertQueues> layers, const CostModel& cost,
                                const ExpertTiming& timing) {
  SimReport r;
  r.strategy = Strategy::kNaive;
  const std::size_t n = layers.empty() ? 0 : layers.front().expert_count();
  TraceRecorder rec;
  r.startup_ps = detail::naive_startup(layers.size(), n, {}, timing, rec);
  r.load_events = layers.size() * n;
  rec.frame = 0;
  Picoseconds now = r.startup_ps;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    rec.layer = static_cast<std::int64_t>(l);
    const LayerOutcome o = detail::naive_layer(layers[l], timing, now, rec);
    now = o.end;
    r.breakdown.expert_compute += o.compute;
  }
  r.latency_ps = now - r.startup_ps;
  r.frame_latencies = {r.latency_ps};
  r.peak_onchip_bytes = peak_onchip_bytes(Strategy::kNaive, n, cost);
  r.trace = rec.take();
  detail::finalize(r, cost);
  return r;
}

// Cold LRU cache per layer.
inline SimReport simulate_cached(std::span<const GatingDecision> layers, const CostModel& cost,
                                 const ExpertTiming& timing) {
  cost.validate();
  SimReport r;
  r.strategy = Strategy::kCached;
  CacheStats stats{cost.cache_capacity_experts, 0, 0};
  TraceRecorder rec;
  Picoseconds now = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    rec.layer = static_cast<std::int64_t>(l);
    LruCache cache(cost.cache_capacity_experts);
    const LayerOutcome o = detail::cached_layer(layers[l], timing, cache, now, rec);
    now = o.end;
    r.load_events += o.loads;
    stats.hits += o.hits;
    stats.misses += o.loads;
    r.breakdown.expert_compute += o.compute;
    r.breakdown.load_stall += o.stall;
  }
  r.latency_ps = now;
  r.frame_latencies = {now};
  r.cache = stats;
  r.peak_onchip_bytes = peak_onchip_bytes(Strategy::kCached, 0, cost);
  r.trace = rec.take();
  detail::finalize(r, cost);
  return r;
}

// One inference of one task: a gating decision for every MoE layer, in block order.
struct Frame {
  std::size_t task = 0;
  std::vector<GatingDecision> decisions;
};

struct Workload {
  std::vector<Frame> frames;

  void validate(const ModelConfig& config) const {
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const Frame& frame = frames[f];
      const std::string where = "frame " + std::to_string(f) + ": ";
      if (frame.task >= config.n_tasks) throw std::invalid_argument(where + "task out of range");
      if (frame.decisions.size() != config.moe_layer_count()) {
        throw std::invalid_argument(where + "expected " + std::to_string(config.moe_layer_count()) +
                                    " MoE decisions, got " + std::to_string(frame.decisions.size()));
      }
      for (const auto& d : frame.decisions) {
        d.validate(config.expert_count);
        if (d.k != config.top_k) throw std::invalid_argument(where + "decision top_k != model top_k");
        if (d.token_count() != config.token_count()) {
          throw std::invalid_argument(where + "decision token count != model token count");
        }
      }
    }
  }
};

// Fixed per-frame dense costs derived from the FLOP breakdown.
struct PhaseTimes {
  Picoseconds patch_embed = 0;
  Picoseconds attention = 0;  // per block
  Picoseconds dense_mlp = 0;  // per dense block
  Picoseconds router = 0;     // per MoE block
  ExpertTiming expert;
};

inline PhaseTimes phase_times(const ModelConfig& config, const CostModel& cost) {
  const FlopBreakdown f = flop_count(config);
  return {cost.compute_time(f.patch_embed_macs), cost.compute_time(f.attention_macs()),
          cost.compute_time(f.dense_mlp_macs), cost.compute_time(f.moe_router_macs),
          expert_timing(cost, f.expert_macs_per_token)};
}

// Per-frame latency of the same backbone with every block dense.
inline Picoseconds dense_vit_frame_latency(const ModelConfig& config, const CostModel& cost) {
  const PhaseTimes p = phase_times(config, cost);
  return p.patch_embed +
         static_cast<Picoseconds>(config.num_blocks) * (p.attention + p.dense_mlp);
}

// End-to-end simulation of a frame sequence: patch embedding, then per block
// attention and either the dense MLP or router + MoE expert phase under
// `strategy`. For the cached strategy each MoE layer keeps its own LRU state
// across frames; the other strategies carry no state between frames.
inline SimReport simulate_model(const ModelConfig& config, const Workload& workload,
                                Strategy strategy, const CostModel& cost) {
  config.validate();
  cost.validate();
  workload.validate(config);
  const PhaseTimes times = phase_times(config, cost);

  SimReport r;
  r.strategy = strategy;
  r.peak_onchip_bytes = peak_onchip_bytes(strategy, config.expert_count, cost);
  TraceRecorder rec;

  std::vector<std::int64_t> moe_blocks;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    if (config.is_moe_block(b)) moe_blocks.push_back(static_cast<std::int64_t>(b));
  }

  Picoseconds now = 0;
  if (strategy == Strategy::kNaive) {
    r.startup_ps = detail::naive_startup(moe_blocks.size(), config.expert_count, moe_blocks,
                                         times.expert, rec);
    r.load_events = moe_blocks.size() * config.expert_count;
    now = r.startup_ps;
  }

  std::vector<LruCache> caches;
  if (strategy == Strategy::kCached) {
    caches.assign(moe_blocks.size(), LruCache(cost.cache_capacity_experts));
    r.cache = CacheStats{cost.cache_capacity_experts, 0, 0};
  }

  for (std::size_t f = 0; f < workload.frames.size(); ++f) {
    const Frame& frame = workload.frames[f];
    const Picoseconds frame_start = now;
    rec.frame = static_cast<std::int64_t>(f);
    rec.layer = -1;
    now = rec.compute(now, times.patch_embed);
    r.breakdown.patch_embed += times.patch_embed;
    std::size_t moe_index = 0;
    for (std::size_t b = 0; b < config.num_blocks; ++b) {
      rec.layer = static_cast<std::int64_t>(b);
      now = rec.compute(now, times.attention);
      r.breakdown.attention += times.attention;
      if (!config.is_moe_block(b)) {
        now = rec.compute(now, times.dense_mlp);
        r.breakdown.dense_mlp += times.dense_mlp;
        continue;
      }
      now = rec.compute(now, times.router);
      r.breakdown.router += times.router;
      const GatingDecision& decision = frame.decisions[moe_index];
      LayerOutcome o;
      switch (strategy) {
        case Strategy::kReordered: {
          const auto lengths = build_queues(decision, config.expert_count).lengths();
          o = detail::reordered_layer(lengths, times.expert, now, rec);
          break;
        }
        case Strategy::kNaive:
          o = detail::naive_layer(build_queues(decision, config.expert_count), times.expert, now, rec);
          break;
        case Strategy::kCached:
          o = detail::cached_layer(decision, times.expert, caches[moe_index], now, rec);
          r.cache->hits += o.hits;
          r.cache->misses += o.loads;
          break;
      }
      now = o.end;
      if (strategy != Strategy::kNaive) r.load_events += o.loads;
      r.breakdown.expert_compute += o.compute;
      r.breakdown.load_stall += o.stall;
      ++moe_index;
    }
    r.frame_latencies.push_back(now - frame_start);
  }
  r.latency_ps = now - r.startup_ps;
  r.trace = rec.take();
  detail::finalize(r, cost);
  return r;
}

}  // namespace moeflow
