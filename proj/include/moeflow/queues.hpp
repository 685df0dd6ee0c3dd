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

// Expert-major execution of an MoE layer.
//
// Instead of walking tokens and touching whichever experts each token picked,
// every token is first appended to the queue of each expert it selected. The
// layer is then evaluated one expert at a time over that expert's whole
// queue, so each expert's weights are needed exactly once per layer.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeflow/moe.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

struct QueueEntry {
  std::size_t token;
  float gate;
};

struct ExpertQueues {
  std::vector<std::vector<QueueEntry>> queues;  // one per expert

  std::size_t expert_count() const { return queues.size(); }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& q : queues) n += q.size();
    return n;
  }

  std::vector<std::size_t> lengths() const {
    std::vector<std::size_t> out;
    out.reserve(queues.size());
    for (const auto& q : queues) out.push_back(q.size());
    return out;
  }

  std::size_t active_count() const {
    std::size_t n = 0;
    for (const auto& q : queues) n += q.empty() ? 0 : 1;
    return n;
  }
};

// Tokens are visited in input order, so every queue is sorted by token index.
inline ExpertQueues build_queues(const GatingDecision& decision, std::size_t n_experts) {
  ExpertQueues out;
  out.queues.resize(n_experts);
  for (std::size_t t = 0; t < decision.token_count(); ++t) {
    const auto ids = decision.experts(t);
    const auto gates = decision.gates(t);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] >= n_experts) {
        throw std::out_of_range("build_queues: expert " + std::to_string(ids[j]) + " >= " +
                                std::to_string(n_experts));
      }
      out.queues[ids[j]].push_back({t, gates[j]});
    }
  }
  return out;
}

// kDescending exists only so verification tooling can prove it detects a
// broken combine order.
enum class ExpertOrder { kAscending, kDescending };

inline Matrix execute_reordered(const MoeLayerParams& layer, const Matrix& tokens,
                                const GatingDecision& decision,
                                ExpertOrder order = ExpertOrder::kAscending) {
  decision.validate(layer.expert_count());
  if (decision.token_count() != tokens.rows()) {
    throw std::invalid_argument("decision has " + std::to_string(decision.token_count()) +
                                " tokens, input has " + std::to_string(tokens.rows()));
  }
  if (tokens.cols() != layer.model_dim()) throw ShapeError("execute_reordered: token dim");

  const ExpertQueues q = build_queues(decision, layer.expert_count());
  Matrix out(tokens.rows(), tokens.cols());
  const std::size_t n = q.expert_count();
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t e = order == ExpertOrder::kAscending ? step : n - 1 - step;
    const auto& queue = q.queues[e];
    if (queue.empty()) continue;
    std::vector<std::size_t> rows;
    rows.reserve(queue.size());
    for (const auto& entry : queue) rows.push_back(entry.token);
    const Matrix y = expert_forward(layer.experts[e], gather_rows(tokens, rows));
    for (std::size_t i = 0; i < queue.size(); ++i) {
      accumulate_scaled(out.row(queue[i].token), queue[i].gate, y.row(i));
    }
  }
  return out;
}

}  // namespace moeflow
