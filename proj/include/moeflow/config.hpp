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

// Experiment configuration: a JSON document with sections model, cost,
// workload, strategies, output (schema in docs/config.schema.json). Unknown
// keys are rejected. Every missing key takes the documented default; model
// defaults are the desk-scale geometry with N = 16 experts, top-4 routing and
// an MoE feed-forward in every second block.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "moeflow/moe.hpp"
#include "moeflow/sim.hpp"
#include "moeflow/vit.hpp"

namespace moeflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SyntheticRouting {
  enum class Distribution { kUniform, kSkewed };
  Distribution distribution = Distribution::kUniform;
  double alpha = 0.0;  // Zipf exponent for kSkewed
};

struct WorkloadConfig {
  std::size_t num_frames = 2;
  bool round_robin = true;
  std::vector<std::size_t> task_sequence;  // cycled when shorter than num_frames
  std::uint64_t seed = 0;
  std::optional<SyntheticRouting> synthetic;
};

struct OutputConfig {
  std::string report_path = "report.json";
  std::string trace_path = "trace.csv";
};

struct ExperimentConfig {
  ModelConfig model;
  CostModel cost = calibrated_cost_model();
  WorkloadConfig workload;
  std::vector<Strategy> strategies = {Strategy::kNaive, Strategy::kCached, Strategy::kReordered};
  OutputConfig output;
  std::string params_path;  // optional parameter archive; seeded init when empty

  std::vector<std::size_t> frame_tasks() const {
    std::vector<std::size_t> tasks(workload.num_frames);
    for (std::size_t f = 0; f < tasks.size(); ++f) {
      tasks[f] = workload.round_robin ? f % model.n_tasks
                                      : workload.task_sequence[f % workload.task_sequence.size()];
    }
    return tasks;
  }

  void validate() const {
    try {
      model.validate();
      cost.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!workload.round_robin) {
      if (workload.task_sequence.empty()) {
        throw ConfigError("workload.task_sequence must not be empty");
      }
      for (std::size_t t : workload.task_sequence) {
        if (t >= model.n_tasks) {
          throw ConfigError("workload.task_sequence: task " + std::to_string(t) +
                            " >= model.n_tasks " + std::to_string(model.n_tasks));
        }
      }
    }
    if (workload.synthetic && workload.synthetic->alpha < 0.0) {
      throw ConfigError("workload.synthetic_routing.alpha must be >= 0");
    }
    if (strategies.empty()) throw ConfigError("strategies must name at least one strategy");
  }
};

inline std::string routing_kind_name(RoutingKind k) {
  switch (k) {
    case RoutingKind::kSingle: return "single";
    case RoutingKind::kMultiGate: return "multi_gate";
    case RoutingKind::kTaskConditioned: return "task_conditioned";
  }
  return "?";
}

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& section,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (keys.count(key) == 0) throw ConfigError(section + "." + key + ": unknown key");
  }
}

template <typename T>
void read(const json& obj, const std::string& section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

inline void read_count(const json& obj, const std::string& section, const char* key, std::size_t& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(section + "." + key + ": expected a non-negative integer");
  }
  out = v.get<std::size_t>();
}

inline void parse_model(const json& j, ModelConfig& m) {
  reject_unknown(j, "model",
                 {"preset", "image_h", "image_w", "channels", "patch_size", "hidden_dim", "num_blocks",
                  "num_heads", "mlp_ratio", "moe_every", "expert_count", "top_k", "n_tasks",
                  "routing_kind", "flop_matched", "expert_hidden", "ln_eps"});
  if (j.contains("preset")) {
    std::string preset;
    read(j, "model", "preset", preset);
    if (preset == "desk") {
      m = ModelConfig::desk();
    } else if (preset == "vit-small") {
      m = ModelConfig::vit_small();
    } else {
      throw ConfigError("model.preset: expected \"desk\" or \"vit-small\"");
    }
  }
  read_count(j, "model", "image_h", m.image_h);
  read_count(j, "model", "image_w", m.image_w);
  read_count(j, "model", "channels", m.channels);
  read_count(j, "model", "patch_size", m.patch_size);
  read_count(j, "model", "hidden_dim", m.hidden_dim);
  read_count(j, "model", "num_blocks", m.num_blocks);
  read_count(j, "model", "num_heads", m.num_heads);
  read(j, "model", "mlp_ratio", m.mlp_ratio);
  read_count(j, "model", "moe_every", m.moe_every);
  read_count(j, "model", "expert_count", m.expert_count);
  read_count(j, "model", "top_k", m.top_k);
  read_count(j, "model", "n_tasks", m.n_tasks);
  read(j, "model", "flop_matched", m.flop_matched);
  read_count(j, "model", "expert_hidden", m.expert_hidden_override);
  if (j.contains("expert_hidden") && !j.contains("flop_matched")) m.flop_matched = false;
  read(j, "model", "ln_eps", m.ln_eps);
  if (j.contains("routing_kind")) {
    std::string kind;
    read(j, "model", "routing_kind", kind);
    if (kind == "single") {
      m.routing_kind = RoutingKind::kSingle;
    } else if (kind == "multi_gate") {
      m.routing_kind = RoutingKind::kMultiGate;
    } else if (kind == "task_conditioned") {
      m.routing_kind = RoutingKind::kTaskConditioned;
    } else {
      throw ConfigError("model.routing_kind: expected single, multi_gate or task_conditioned");
    }
  }
}

inline void parse_cost(const json& j, const ModelConfig& model, CostModel& c) {
  reject_unknown(j, "cost",
                 {"expert_weight_bytes", "expert_weight_mib", "bytes_per_weight", "dram_bandwidth",
                  "mac_throughput", "clock_hz", "macs_per_cycle", "base_onchip_bytes",
                  "base_onchip_mib", "chip_capacity", "chip_capacity_mib", "power",
                  "cache_capacity_experts"});
  const auto mib = [&](const char* bytes_key, const char* mib_key, double& out) {
    if (j.contains(bytes_key) && j.contains(mib_key)) {
      throw ConfigError(std::string("cost: give only one of ") + bytes_key + " / " + mib_key);
    }
    read(j, "cost", bytes_key, out);
    if (j.contains(mib_key)) {
      double v = 0.0;
      read(j, "cost", mib_key, v);
      out = v * kMiB;
    }
  };
  mib("expert_weight_bytes", "expert_weight_mib", c.expert_weight_bytes);
  if (j.contains("bytes_per_weight")) {
    if (j.contains("expert_weight_bytes") || j.contains("expert_weight_mib")) {
      throw ConfigError("cost: bytes_per_weight conflicts with an explicit expert weight size");
    }
    double bpw = 0.0;
    read(j, "cost", "bytes_per_weight", bpw);
    const double c_dim = static_cast<double>(model.hidden_dim);
    const double h_dim = static_cast<double>(model.expert_hidden());
    c.expert_weight_bytes = (2.0 * c_dim * h_dim + h_dim + c_dim) * bpw;
  }
  mib("base_onchip_bytes", "base_onchip_mib", c.base_onchip_bytes);
  mib("chip_capacity", "chip_capacity_mib", c.chip_capacity);
  read(j, "cost", "dram_bandwidth", c.dram_bandwidth);
  if (j.contains("mac_throughput") && (j.contains("clock_hz") || j.contains("macs_per_cycle"))) {
    throw ConfigError("cost: give mac_throughput or clock_hz + macs_per_cycle, not both");
  }
  read(j, "cost", "mac_throughput", c.mac_throughput);
  if (j.contains("clock_hz") || j.contains("macs_per_cycle")) {
    double clock = 300e6;
    double per_cycle = 1536.0;
    read(j, "cost", "clock_hz", clock);
    read(j, "cost", "macs_per_cycle", per_cycle);
    c.mac_throughput = clock * per_cycle;
  }
  read(j, "cost", "power", c.power);
  read_count(j, "cost", "cache_capacity_experts", c.cache_capacity_experts);
}

inline void parse_workload(const json& j, WorkloadConfig& w) {
  reject_unknown(j, "workload", {"num_frames", "task_sequence", "seed", "synthetic_routing"});
  const bool explicit_frames = j.contains("num_frames");
  read_count(j, "workload", "num_frames", w.num_frames);
  if (j.contains("task_sequence")) {
    const json& seq = j.at("task_sequence");
    if (seq.is_string()) {
      if (seq.get<std::string>() != "round_robin") {
        throw ConfigError("workload.task_sequence: expected \"round_robin\" or a list of task ids");
      }
      w.round_robin = true;
    } else if (seq.is_array()) {
      w.round_robin = false;
      w.task_sequence.clear();
      for (const auto& t : seq) {
        if (!t.is_number_integer() || t.get<std::int64_t>() < 0) {
          throw ConfigError("workload.task_sequence: task ids must be non-negative integers");
        }
        w.task_sequence.push_back(t.get<std::size_t>());
      }
      if (!explicit_frames) w.num_frames = w.task_sequence.size();
    } else {
      throw ConfigError("workload.task_sequence: wrong type");
    }
  }
  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0)) {
      throw ConfigError("workload.seed: expected an unsigned 64-bit integer");
    }
    w.seed = s.get<std::uint64_t>();
  }
  if (j.contains("synthetic_routing")) {
    const json& s = j.at("synthetic_routing");
    if (s.is_null()) {
      w.synthetic.reset();
    } else {
      reject_unknown(s, "workload.synthetic_routing", {"distribution", "alpha"});
      SyntheticRouting sr;
      std::string dist = "uniform";
      read(s, "workload.synthetic_routing", "distribution", dist);
      if (dist == "uniform") {
        sr.distribution = SyntheticRouting::Distribution::kUniform;
      } else if (dist == "skewed") {
        sr.distribution = SyntheticRouting::Distribution::kSkewed;
        sr.alpha = 1.0;
        read(s, "workload.synthetic_routing", "alpha", sr.alpha);
      } else {
        throw ConfigError("workload.synthetic_routing.distribution: expected uniform or skewed");
      }
      w.synthetic = sr;
    }
  }
}

inline std::string locate(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline std::vector<Strategy> parse_strategy_list(const std::vector<std::string>& names) {
  std::vector<Strategy> out;
  for (const auto& name : names) {
    const auto s = parse_strategy(name);
    if (!s) throw ConfigError("strategies: unknown strategy \"" + name + "\"");
    if (std::find(out.begin(), out.end(), *s) == out.end()) out.push_back(*s);
  }
  return out;
}

inline ExperimentConfig parse_config(const std::string& text) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::parse_error& e) {
    throw ConfigError("parse error at " + detail::locate(text, e.byte) + ": " + e.what());
  }
  detail::reject_unknown(j, "config", {"model", "cost", "workload", "strategies", "output", "params_path"});
  ExperimentConfig cfg;
  if (j.contains("model")) detail::parse_model(j.at("model"), cfg.model);
  if (j.contains("cost")) detail::parse_cost(j.at("cost"), cfg.model, cfg.cost);
  if (j.contains("workload")) detail::parse_workload(j.at("workload"), cfg.workload);
  if (j.contains("strategies")) {
    std::vector<std::string> names;
    detail::read(j, "config", "strategies", names);
    cfg.strategies = parse_strategy_list(names);
  }
  if (j.contains("output")) {
    detail::reject_unknown(j.at("output"), "output", {"report_path", "trace_path"});
    detail::read(j.at("output"), "output", "report_path", cfg.output.report_path);
    detail::read(j.at("output"), "output", "trace_path", cfg.output.trace_path);
  }
  detail::read(j, "config", "params_path", cfg.params_path);
  cfg.validate();
  return cfg;
}

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ExperimentConfig load_config(const std::string& path) {
  return parse_config(read_text_file(path));
}

}  // namespace moeflow
