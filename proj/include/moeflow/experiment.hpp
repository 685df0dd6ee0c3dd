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

// Experiment orchestration behind the command-line tool: workload
// construction (numeric forward passes or synthetic routing), strategy
// simulation, report and trace emission, and the equivalence check between
// token-order and expert-order MoE execution.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "moeflow/config.hpp"
#include "moeflow/init.hpp"
#include "moeflow/moe.hpp"
#include "moeflow/param_archive.hpp"
#include "moeflow/queues.hpp"
#include "moeflow/rng.hpp"
#include "moeflow/sim.hpp"
#include "moeflow/vit.hpp"

namespace moeflow {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Workloads

// Routing drawn without running the network. Each task ranks the experts of
// each layer by a seeded permutation; the logit of the expert at rank r
// (1-based) is -alpha * ln(r) plus Gumbel noise, so the top-K set is a draw
// without replacement from Zipf(alpha) weights (alpha = 0: uniform). Gates come
// from the same top-K softmax as the numeric path.
inline GatingDecision synthetic_decision(const ModelConfig& config, const SyntheticRouting& routing,
                                         std::uint64_t seed, std::size_t frame, std::size_t layer,
                                         std::size_t task) {
  const std::size_t n = config.expert_count;
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  CounterRng perm(seed, "synthetic.perm.task" + std::to_string(task) + ".layer" + std::to_string(layer));
  for (std::size_t i = n; i > 1; --i) std::swap(rank[i - 1], rank[perm.below(i)]);
  const double alpha =
      routing.distribution == SyntheticRouting::Distribution::kUniform ? 0.0 : routing.alpha;

  CounterRng noise(seed, "synthetic.frame" + std::to_string(frame) + ".layer" + std::to_string(layer));
  Matrix logits(config.token_count(), n);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    for (std::size_t r = 0; r < n; ++r) {
      const double bias = -alpha * std::log(static_cast<double>(r + 1));
      logits(t, rank[r]) = static_cast<float>(bias + noise.gumbel());
    }
  }
  return top_k_gate(logits, config.top_k);
}

inline ModelParams load_or_init_params(const ExperimentConfig& cfg) {
  if (cfg.params_path.empty()) return seeded_init(cfg.model, cfg.workload.seed);
  try {
    return from_archive(cfg.model, TensorArchive::load(cfg.params_path));
  } catch (const ArchiveError& e) {
    throw IoError(e.what());
  }
}

inline Workload build_workload(const ExperimentConfig& cfg) {
  Workload w;
  const auto tasks = cfg.frame_tasks();
  const std::uint64_t seed = cfg.workload.seed;
  if (cfg.workload.synthetic) {
    for (std::size_t f = 0; f < tasks.size(); ++f) {
      Frame frame{tasks[f], {}};
      for (std::size_t l = 0; l < cfg.model.moe_layer_count(); ++l) {
        frame.decisions.push_back(synthetic_decision(cfg.model, *cfg.workload.synthetic, seed, f, l, tasks[f]));
      }
      w.frames.push_back(std::move(frame));
    }
    return w;
  }
  const ModelParams params = load_or_init_params(cfg);
  for (std::size_t f = 0; f < tasks.size(); ++f) {
    ForwardResult fr = model_forward(cfg.model, params, seeded_image(cfg.model, seed, f), tasks[f]);
    Frame frame{tasks[f], {}};
    for (auto& rec : fr.moe_layers) frame.decisions.push_back(std::move(rec.decision));
    w.frames.push_back(std::move(frame));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Serialization of simulator output

inline json to_json(const LatencyBreakdown& b) {
  return {{"patch_embed_s", to_seconds(b.patch_embed)},
          {"attention_s", to_seconds(b.attention)},
          {"dense_mlp_s", to_seconds(b.dense_mlp)},
          {"moe_router_s", to_seconds(b.router)},
          {"moe_expert_compute_s", to_seconds(b.expert_compute)},
          {"moe_load_stall_s", to_seconds(b.load_stall)}};
}

// Trace is written separately as CSV.
inline json to_json(const SimReport& r) {
  json j;
  j["strategy"] = std::string(to_string(r.strategy));
  j["latency_ps"] = r.latency_ps;
  j["latency_s"] = r.latency;
  j["latency_ms"] = r.latency * 1e3;
  j["energy_j"] = r.energy;
  j["peak_onchip_bytes"] = r.peak_onchip_bytes;
  j["peak_onchip_mib"] = r.peak_onchip_bytes / kMiB;
  j["load_events"] = r.load_events;
  j["feasible"] = r.feasible;
  json frames = json::array();
  for (Picoseconds p : r.frame_latencies) frames.push_back(to_seconds(p));
  j["frame_latencies_s"] = frames;
  j["breakdown"] = to_json(r.breakdown);
  if (r.strategy == Strategy::kNaive) j["startup_load_s"] = to_seconds(r.startup_ps);
  if (r.cache) {
    j["cache"] = {{"policy", "lru"},
                  {"capacity_experts", r.cache->capacity},
                  {"hits", r.cache->hits},
                  {"misses", r.cache->misses}};
  }
  return j;
}

inline std::string format_ns(Picoseconds ps) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%lld.%03lld", static_cast<long long>(ps / 1000),
                static_cast<long long>(ps % 1000));
  return buf;
}

// Columns: frame,layer,phase_kind,resource,start_ns,end_ns,expert_id
inline void write_trace_csv(std::ostream& out, const std::vector<TraceEvent>& trace) {
  out << "frame,layer,phase_kind,resource,start_ns,end_ns,expert_id\n";
  for (const auto& e : trace) {
    out << e.frame << ',' << e.layer << ',' << to_string(e.phase) << ',' << to_string(e.resource) << ','
        << format_ns(e.start) << ',' << format_ns(e.end) << ',' << e.expert << '\n';
  }
}

// "out/trace.csv" -> "out/trace.reordered.csv"
inline std::string trace_path_for(const std::string& base, Strategy s) {
  std::filesystem::path p(base);
  const std::string ext = p.has_extension() ? p.extension().string() : ".csv";
  p.replace_extension();
  return p.string() + "." + std::string(to_string(s)) + ext;
}

// ---------------------------------------------------------------------------
// run

inline json config_echo(const ExperimentConfig& cfg) {
  const ModelConfig& m = cfg.model;
  json model = {{"image_h", m.image_h},         {"image_w", m.image_w},
                {"channels", m.channels},       {"patch_size", m.patch_size},
                {"hidden_dim", m.hidden_dim},   {"num_blocks", m.num_blocks},
                {"num_heads", m.num_heads},     {"mlp_ratio", m.mlp_ratio},
                {"moe_every", m.moe_every},     {"expert_count", m.expert_count},
                {"top_k", m.top_k},             {"n_tasks", m.n_tasks},
                {"routing_kind", routing_kind_name(m.routing_kind)},
                {"flop_matched", m.flop_matched}, {"expert_hidden", m.expert_hidden()},
                {"tokens", m.token_count()}};
  const CostModel& c = cfg.cost;
  json cost = {{"expert_weight_bytes", c.expert_weight_bytes},
               {"dram_bandwidth", c.dram_bandwidth},
               {"mac_throughput", c.mac_throughput},
               {"base_onchip_bytes", c.base_onchip_bytes},
               {"chip_capacity", c.chip_capacity},
               {"power", c.power},
               {"cache_capacity_experts", c.cache_capacity_experts},
               {"expert_load_time_s", to_seconds(c.load_time())}};
  json workload = {{"num_frames", cfg.workload.num_frames},
                   {"tasks", cfg.frame_tasks()},
                   {"seed", cfg.workload.seed}};
  if (cfg.workload.synthetic) {
    const bool skewed = cfg.workload.synthetic->distribution == SyntheticRouting::Distribution::kSkewed;
    workload["routing_source"] = skewed ? "synthetic_skewed" : "synthetic_uniform";
    if (skewed) workload["alpha"] = cfg.workload.synthetic->alpha;
  } else {
    workload["routing_source"] = cfg.params_path.empty() ? "forward_seeded" : "forward_archive";
  }
  return {{"model", model}, {"cost", cost}, {"workload", workload}};
}

inline json flops_json(const FlopBreakdown& f) {
  return {{"tokens", f.tokens},
          {"dense_blocks", f.dense_blocks},
          {"moe_blocks", f.moe_blocks},
          {"patch_embed_macs", f.patch_embed_macs},
          {"attention_macs_per_block",
           {{"qkv", f.attn_qkv_macs}, {"scores", f.attn_scores_macs}, {"av", f.attn_av_macs},
            {"out_proj", f.attn_out_macs}}},
          {"dense_mlp_macs_per_block", f.dense_mlp_macs},
          {"moe_expert_macs_per_block", f.moe_expert_macs},
          {"moe_router_macs_per_block", f.moe_router_macs},
          {"dense_mlp_macs_per_token", f.dense_mlp_macs_per_token},
          {"moe_expert_macs_per_token", f.moe_expert_macs_per_token},
          {"total_macs", f.total_macs()},
          {"total_flops", f.total_flops()},
          {"dense_variant_total_macs", f.dense_variant_total_macs()}};
}

struct RunResult {
  json report;
  std::map<Strategy, SimReport> sims;
};

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Workload workload = build_workload(cfg);

  RunResult out;
  json& r = out.report;
  r = config_echo(cfg);
  r["flops"] = flops_json(flop_count(cfg.model));
  const MemoryAccount mem = memory_account(cfg.model, cfg.cost);
  r["memory_account_bytes"] = {{"naive", mem.naive}, {"cached", mem.cached}, {"reordered", mem.reordered}};
  r["dense_vit_frame_latency_s"] = to_seconds(dense_vit_frame_latency(cfg.model, cfg.cost));

  json strategies = json::object();
  for (Strategy s : cfg.strategies) {
    SimReport sim = simulate_model(cfg.model, workload, s, cfg.cost);
    strategies[std::string(to_string(s))] = to_json(sim);
    out.sims.emplace(s, std::move(sim));
  }
  r["strategies"] = strategies;
  json order = json::array();
  for (Strategy s : cfg.strategies) order.push_back(std::string(to_string(s)));
  r["strategy_order"] = order;

  // Balancing loss and routing histograms per MoE layer.
  std::vector<double> losses;
  json per_frame = json::array();
  const std::size_t moe_layers = cfg.model.moe_layer_count();
  const std::size_t n = cfg.model.expert_count;
  std::vector<std::vector<std::vector<std::uint64_t>>> hist(
      moe_layers, std::vector<std::vector<std::uint64_t>>(cfg.model.n_tasks, std::vector<std::uint64_t>(n, 0)));
  for (const Frame& frame : workload.frames) {
    json row = json::array();
    for (std::size_t l = 0; l < frame.decisions.size(); ++l) {
      const GatingDecision& d = frame.decisions[l];
      const double loss = d.token_count() > 0 ? balancing_loss(d, kBalancingLossWeight) : 0.0;
      losses.push_back(loss);
      row.push_back(loss);
      for (std::size_t id : d.expert_ids) ++hist[l][frame.task][id];
    }
    per_frame.push_back(row);
  }
  json bl = {{"weight", kBalancingLossWeight}, {"per_frame_layer", per_frame}};
  if (!losses.empty()) {
    bl["mean"] = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    bl["min"] = *std::min_element(losses.begin(), losses.end());
    bl["max"] = *std::max_element(losses.begin(), losses.end());
  }
  r["balancing_loss"] = bl;
  json hj = json::array();
  std::size_t l = 0;
  for (std::size_t b = 0; b < cfg.model.num_blocks; ++b) {
    if (!cfg.model.is_moe_block(b)) continue;
    for (std::size_t t = 0; t < cfg.model.n_tasks; ++t) {
      hj.push_back({{"block", b}, {"task", t}, {"counts", hist[l][t]}});
    }
    ++l;
  }
  r["routing_histograms"] = hj;
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

// Timestamps and host details go to a sidecar so the report itself is a pure
// function of the configuration.
inline json run_metadata(const std::string& config_path) {
  char host[256] = {0};
  if (gethostname(host, sizeof host - 1) != 0) host[0] = '\0';
  char stamp[64] = {0};
  const std::time_t now = std::time(nullptr);
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  return {{"generated_at", stamp}, {"host", host}, {"config_path", config_path}, {"tool", "moeflow"}};
}

inline std::string report_text(const json& report) { return report.dump(2) + "\n"; }

// Writes the report, one trace CSV per strategy and the metadata sidecar.
inline RunResult run_and_write(const ExperimentConfig& cfg, const std::string& config_path = "") {
  RunResult result = run_experiment(cfg);
  write_text(cfg.output.report_path, report_text(result.report));
  for (const auto& [strategy, sim] : result.sims) {
    std::ostringstream csv;
    write_trace_csv(csv, sim.trace);
    write_text(trace_path_for(cfg.output.trace_path, strategy), csv.str());
  }
  write_text(cfg.output.report_path + ".meta.json", run_metadata(config_path).dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// verify-equivalence

struct LayerCheck {
  bool equal = true;
  float max_abs_diff = 0.0f;
};

inline LayerCheck verify_layer(const MoeLayerParams& layer, const Matrix& tokens,
                               const GatingDecision& decision,
                               ExpertOrder order = ExpertOrder::kAscending) {
  const Matrix ref = moe_forward_reference(layer, tokens, decision);
  const Matrix reo = execute_reordered(layer, tokens, decision, order);
  return {bitwise_equal(ref, reo), max_abs_diff(ref, reo)};
}

struct VerifyResult {
  bool ok = true;
  std::size_t layers_checked = 0;
  std::size_t mismatched_layers = 0;
  float max_abs_diff = 0.0f;
};

// Every MoE layer of every frame, fed the inputs a real forward pass produced.
inline VerifyResult verify_equivalence(const ExperimentConfig& cfg,
                                       ExpertOrder order = ExpertOrder::kAscending) {
  cfg.validate();
  const ModelParams params = load_or_init_params(cfg);
  const auto tasks = cfg.frame_tasks();
  VerifyResult v;
  for (std::size_t f = 0; f < tasks.size(); ++f) {
    const ForwardResult fr = model_forward(cfg.model, params, seeded_image(cfg.model, cfg.workload.seed, f),
                                           tasks[f], MoeExecution::kReference);
    for (const auto& rec : fr.moe_layers) {
      const auto& layer = std::get<MoeLayerParams>(params.blocks[rec.block].ffn);
      const LayerCheck c = verify_layer(layer, rec.input, rec.decision, order);
      ++v.layers_checked;
      if (!c.equal) {
        v.ok = false;
        ++v.mismatched_layers;
      }
      v.max_abs_diff = std::max(v.max_abs_diff, c.max_abs_diff);
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string ratio(double num, double den) {
  if (den == 0.0) return "-";
  return fixed(num / den, 2) + "\u00d7";
}

// Pads to `w` display columns, counting UTF-8 code points.
inline std::string pad(const std::string& s, std::size_t w) {
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80 ? 1 : 0;
  return cols >= w ? s : s + std::string(w - cols, ' ');
}

// Strategy | Memory (MiB) | Latency (ms) | Energy (W·s) | Load events | Feasible,
// then memory/latency/energy ratios against the reordered strategy (or the
// first strategy when reordered was not run).
inline std::string report_table(const json& report) {
  if (!report.contains("strategies") || !report.at("strategies").is_object() ||
      report.at("strategies").empty()) {
    throw IoError("report has no strategies section");
  }
  const json& strategies = report.at("strategies");
  std::vector<std::string> order;
  if (report.contains("strategy_order")) {
    for (const auto& s : report.at("strategy_order")) order.push_back(s.get<std::string>());
  } else {
    for (const auto& [k, v] : strategies.items()) order.push_back(k);
  }
  const std::string base = strategies.contains("reordered") ? "reordered" : order.front();
  const json& b = strategies.at(base);

  std::ostringstream out;
  const std::vector<std::size_t> w = {11, 14, 14, 14, 13, 10, 10, 10, 10};
  const std::vector<std::string> head = {"Strategy",    "Memory (MiB)", "Latency (ms)", "Energy (W·s)",
                                         "Load events", "Feasible",     "Mem ×",        "Lat ×",
                                         "Energy ×"};
  for (std::size_t i = 0; i < head.size(); ++i) out << pad(head[i], w[i]);
  out << "\n";
  try {
    for (const auto& name : order) {
      const json& s = strategies.at(name);
      const double mem = s.at("peak_onchip_mib").get<double>();
      const double lat = s.at("latency_ms").get<double>();
      const double energy = s.at("energy_j").get<double>();
      const std::vector<std::string> cells = {
          name,
          fixed(mem, 3),
          fixed(lat, 3),
          fixed(energy, 3),
          std::to_string(s.at("load_events").get<std::uint64_t>()),
          s.at("feasible").get<bool>() ? "yes" : "no",
          ratio(mem, b.at("peak_onchip_mib").get<double>()),
          ratio(lat, b.at("latency_ms").get<double>()),
          ratio(energy, b.at("energy_j").get<double>())};
      for (std::size_t i = 0; i < cells.size(); ++i) out << pad(cells[i], w[i]);
      out << "\n";
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt report: ") + e.what());
  }
  out << "ratios relative to " << base << "\n";
  return out.str();
}

inline json load_report(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError("corrupt report " + path + ": " + e.what());
  }
}

inline std::string flops_table(const ModelConfig& config) {
  const FlopBreakdown f = flop_count(config);
  std::ostringstream out;
  const auto line = [&](const std::string& name, std::uint64_t macs) {
    out << pad(name, 34) << pad(std::to_string(macs), 16) << fixed(2.0 * static_cast<double>(macs) / 1e9, 4)
        << "\n";
  };
  out << pad("component", 34) << pad("MACs", 16) << "GFLOPs\n";
  line("patch embedding", f.patch_embed_macs);
  line("attention (x" + std::to_string(f.dense_blocks + f.moe_blocks) + " blocks)",
       (f.dense_blocks + f.moe_blocks) * f.attention_macs());
  line("dense MLP (x" + std::to_string(f.dense_blocks) + " blocks)", f.dense_blocks * f.dense_mlp_macs);
  line("MoE experts, K active (x" + std::to_string(f.moe_blocks) + ")", f.moe_blocks * f.moe_expert_macs);
  line("MoE routers (x" + std::to_string(f.moe_blocks) + ")", f.moe_blocks * f.moe_router_macs);
  line("total", f.total_macs());
  line("all-dense variant", f.dense_variant_total_macs());
  out << "per-token MACs: dense MLP " << f.dense_mlp_macs_per_token << ", MoE (K="
      << config.top_k << ") " << f.moe_expert_macs_per_token
      << (f.dense_mlp_macs_per_token == f.moe_expert_macs_per_token ? "  [FLOP-matched]" : "") << "\n";
  return out.str();
}

}  // namespace moeflow
