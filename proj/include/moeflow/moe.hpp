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

// Mixture-of-experts layer: experts, top-K softmax gating, the three routing
// variants (one shared gate, one gate per task, one gate fed a task
// embedding), and the importance/load balancing loss.

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "moeflow/tensor.hpp"

namespace moeflow {

inline constexpr std::size_t kTaskEmbedDim = 64;
inline constexpr double kBalancingLossWeight = 0.01;

// Two-layer MLP expert: w2 * gelu(w1 * x + b1) + b2 in row-vector form.
struct ExpertParams {
  Matrix w1;  // C x H
  Vector b1;  // H
  Matrix w2;  // H x C
  Vector b2;  // C

  std::size_t model_dim() const { return w1.rows(); }
  std::size_t hidden_dim() const { return w1.cols(); }

  void validate() const {
    if (b1.size() != w1.cols() || w2.rows() != w1.cols() || w2.cols() != w1.rows() ||
        b2.size() != w2.cols()) {
      throw ShapeError("expert shapes inconsistent: w1 " + shape_str(w1) + ", w2 " + shape_str(w2));
    }
  }
};

// Single-layer router producing one logit per expert.
struct RouterParams {
  Matrix wg;  // input_dim x N
  Vector bg;  // N

  std::size_t input_dim() const { return wg.rows(); }
  std::size_t expert_count() const { return wg.cols(); }

  void validate() const {
    if (bg.size() != wg.cols()) throw ShapeError("router bias length != expert count");
  }
};

// One-hot task vector -> 64-d task embedding.
struct TaskEmbedderParams {
  Matrix w_a;  // n_tasks x 64
  Vector b_a;  // 64
  Matrix w_b;  // 64 x 64
  Vector b_b;  // 64

  std::size_t n_tasks() const { return w_a.rows(); }

  void validate() const {
    if (w_a.cols() != kTaskEmbedDim || b_a.size() != kTaskEmbedDim || w_b.rows() != kTaskEmbedDim ||
        w_b.cols() != kTaskEmbedDim || b_b.size() != kTaskEmbedDim) {
      throw ShapeError("task embedder must be n_tasks x 64 -> 64 x 64");
    }
  }
};

struct SingleGate {
  RouterParams router;
};

struct MultiGate {
  std::vector<RouterParams> routers;  // one per task
};

struct TaskConditioned {
  RouterParams router;  // input_dim == C + 64
  TaskEmbedderParams embedder;
};

using Routing = std::variant<SingleGate, MultiGate, TaskConditioned>;

enum class RoutingKind { kSingle, kMultiGate, kTaskConditioned };

inline RoutingKind routing_kind(const Routing& r) {
  return static_cast<RoutingKind>(r.index());
}

struct MoeLayerParams {
  std::vector<ExpertParams> experts;
  Routing routing;
  std::size_t top_k = 4;

  std::size_t expert_count() const { return experts.size(); }
  std::size_t model_dim() const { return experts.empty() ? 0 : experts.front().model_dim(); }

  void validate() const {
    if (experts.empty()) throw ShapeError("MoE layer has no experts");
    if (top_k < 1 || top_k > experts.size()) {
      throw std::out_of_range("top_k=" + std::to_string(top_k) + " outside [1, " +
                              std::to_string(experts.size()) + "]");
    }
    const std::size_t c = model_dim();
    for (const auto& e : experts) {
      e.validate();
      if (e.model_dim() != c) throw ShapeError("experts disagree on model dimension");
    }
    const auto check_router = [&](const RouterParams& r, std::size_t input_dim) {
      r.validate();
      if (r.expert_count() != experts.size()) throw ShapeError("router width != expert count");
      if (r.input_dim() != input_dim) {
        throw ShapeError("router input dim " + std::to_string(r.input_dim()) + ", expected " +
                         std::to_string(input_dim));
      }
    };
    if (const auto* s = std::get_if<SingleGate>(&routing)) {
      check_router(s->router, c);
    } else if (const auto* m = std::get_if<MultiGate>(&routing)) {
      if (m->routers.empty()) throw ShapeError("multi-gate routing needs at least one router");
      for (const auto& r : m->routers) check_router(r, c);
    } else {
      const auto& tc = std::get<TaskConditioned>(routing);
      tc.embedder.validate();
      check_router(tc.router, c + kTaskEmbedDim);
    }
  }
};

// Materialized top-K gating for a batch of tokens. Per token the selected
// experts are listed by descending gate (ties: ascending expert id).
struct GatingDecision {
  std::size_t k = 0;
  std::vector<std::size_t> expert_ids;  // token-major, k per token
  std::vector<float> gate_weights;      // same layout
  Matrix full_softmax;                  // T x N

  std::size_t token_count() const { return full_softmax.rows(); }
  std::size_t expert_count() const { return full_softmax.cols(); }

  std::span<const std::size_t> experts(std::size_t token) const {
    return {expert_ids.data() + token * k, k};
  }
  std::span<const float> gates(std::size_t token) const {
    return {gate_weights.data() + token * k, k};
  }

  void validate(std::size_t n_experts) const {
    if (expert_count() != n_experts) {
      throw std::invalid_argument("decision covers " + std::to_string(expert_count()) +
                                  " experts, layer has " + std::to_string(n_experts));
    }
    if (expert_ids.size() != token_count() * k || gate_weights.size() != expert_ids.size()) {
      throw std::invalid_argument("decision arrays inconsistent with token count");
    }
    for (std::size_t id : expert_ids) {
      if (id >= n_experts) {
        throw std::out_of_range("expert id " + std::to_string(id) + " >= " + std::to_string(n_experts));
      }
    }
  }
};

inline Matrix gate_logits(const RouterParams& router, const Matrix& inputs) {
  router.validate();
  if (inputs.cols() != router.input_dim()) {
    throw ShapeError("gate_logits: input dim " + std::to_string(inputs.cols()) + " vs router " +
                     std::to_string(router.input_dim()));
  }
  return affine(inputs, router.wg, router.bg);
}

// Softmax over all N logits, then keep the k largest probabilities verbatim
// (no renormalization) and zero the rest.
inline GatingDecision top_k_gate(const Matrix& logits, std::size_t k) {
  if (k < 1 || k > logits.cols()) {
    throw std::out_of_range("top_k_gate: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(logits.cols()) + "]");
  }
  GatingDecision d;
  d.k = k;
  d.full_softmax = softmax_rows(logits);
  d.expert_ids.reserve(logits.rows() * k);
  d.gate_weights.reserve(logits.rows() * k);
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto probs = d.full_softmax.row(t);
    for (std::size_t e : top_k_indices(probs, k)) {
      d.expert_ids.push_back(e);
      d.gate_weights.push_back(probs[e]);
    }
  }
  return d;
}

// Dense per-token gate vector (zeros for unselected experts).
inline Vector dense_gates(const GatingDecision& d, std::size_t token) {
  Vector g(d.expert_count(), 0.0f);
  const auto ids = d.experts(token);
  const auto w = d.gates(token);
  for (std::size_t j = 0; j < ids.size(); ++j) g[ids[j]] = w[j];
  return g;
}

inline Matrix expert_forward(const ExpertParams& expert, const Matrix& tokens) {
  expert.validate();
  if (tokens.cols() != expert.model_dim()) {
    throw ShapeError("expert_forward: token dim " + std::to_string(tokens.cols()) + " vs " +
                     std::to_string(expert.model_dim()));
  }
  return affine(gelu(affine(tokens, expert.w1, expert.b1)), expert.w2, expert.b2);
}

// (expert id, gate) pairs of one token sorted by ascending expert id; the
// combine order every MoE execution path must follow.
inline std::vector<std::pair<std::size_t, float>> ascending_selection(const GatingDecision& d,
                                                                      std::size_t token) {
  std::vector<std::pair<std::size_t, float>> sel;
  const auto ids = d.experts(token);
  const auto w = d.gates(token);
  sel.reserve(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) sel.emplace_back(ids[j], w[j]);
  std::sort(sel.begin(), sel.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return sel;
}

// Token-by-token evaluation: each token runs through its selected experts
// and the gate-weighted outputs are summed in ascending expert id.
inline Matrix moe_forward_reference(const MoeLayerParams& layer, const Matrix& tokens,
                                    const GatingDecision& decision) {
  decision.validate(layer.expert_count());
  if (decision.token_count() != tokens.rows()) {
    throw std::invalid_argument("decision has " + std::to_string(decision.token_count()) +
                                " tokens, input has " + std::to_string(tokens.rows()));
  }
  if (tokens.cols() != layer.model_dim()) throw ShapeError("moe_forward_reference: token dim");
  Matrix out(tokens.rows(), tokens.cols());
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    const Matrix x = Matrix::row_vector(tokens.row(t));
    for (const auto& [e, g] : ascending_selection(decision, t)) {
      const Matrix y = expert_forward(layer.experts[e], x);
      accumulate_scaled(out.row(t), g, y.row(0));
    }
  }
  return out;
}

inline Vector task_embed(const TaskEmbedderParams& embedder, std::size_t task, std::size_t n_tasks) {
  embedder.validate();
  if (embedder.n_tasks() != n_tasks) {
    throw ShapeError("task embedder built for " + std::to_string(embedder.n_tasks()) +
                     " tasks, asked for " + std::to_string(n_tasks));
  }
  if (task >= n_tasks) {
    throw std::out_of_range("task " + std::to_string(task) + " >= n_tasks " + std::to_string(n_tasks));
  }
  Matrix one_hot(1, n_tasks);
  one_hot(0, task) = 1.0f;
  const Matrix hidden = relu(affine(one_hot, embedder.w_a, embedder.b_a));
  const Matrix out = relu(affine(hidden, embedder.w_b, embedder.b_b));
  return Vector(out.row(0).begin(), out.row(0).end());
}

inline GatingDecision select_single(const MoeLayerParams& layer, const Matrix& tokens) {
  const auto* s = std::get_if<SingleGate>(&layer.routing);
  if (s == nullptr) throw std::invalid_argument("select_single: layer routing is not single-gate");
  return top_k_gate(gate_logits(s->router, tokens), layer.top_k);
}

inline GatingDecision select_multi_gate(const MoeLayerParams& layer, const Matrix& tokens,
                                        std::size_t task) {
  const auto* m = std::get_if<MultiGate>(&layer.routing);
  if (m == nullptr) throw std::invalid_argument("select_multi_gate: layer routing is not multi-gate");
  if (task >= m->routers.size()) {
    throw std::out_of_range("task " + std::to_string(task) + " >= " +
                            std::to_string(m->routers.size()) + " routers");
  }
  return top_k_gate(gate_logits(m->routers[task], tokens), layer.top_k);
}

inline GatingDecision select_task_conditioned(const MoeLayerParams& layer, const Matrix& tokens,
                                              std::size_t task) {
  const auto* tc = std::get_if<TaskConditioned>(&layer.routing);
  if (tc == nullptr) {
    throw std::invalid_argument("select_task_conditioned: layer routing is not task-conditioned");
  }
  const Vector t = task_embed(tc->embedder, task, tc->embedder.n_tasks());
  Matrix task_cols(tokens.rows(), kTaskEmbedDim);
  for (std::size_t i = 0; i < tokens.rows(); ++i) {
    std::copy(t.begin(), t.end(), task_cols.row(i).begin());
  }
  return top_k_gate(gate_logits(tc->router, concat_cols(tokens, task_cols)), layer.top_k);
}

// Routes with whatever variant the layer carries. Single-gate layers ignore `task`.
inline GatingDecision select_experts(const MoeLayerParams& layer, const Matrix& tokens,
                                     std::size_t task) {
  switch (routing_kind(layer.routing)) {
    case RoutingKind::kSingle:
      return select_single(layer, tokens);
    case RoutingKind::kMultiGate:
      return select_multi_gate(layer, tokens, task);
    case RoutingKind::kTaskConditioned:
      return select_task_conditioned(layer, tokens, task);
  }
  throw std::logic_error("unreachable routing kind");
}

inline std::vector<double> expert_importance(const GatingDecision& d) {
  std::vector<double> importance(d.expert_count(), 0.0);
  for (std::size_t t = 0; t < d.token_count(); ++t) {
    const auto row = d.full_softmax.row(t);
    for (std::size_t e = 0; e < row.size(); ++e) importance[e] += row[e];
  }
  return importance;
}

inline std::vector<double> expert_load(const GatingDecision& d) {
  std::vector<double> load(d.expert_count(), 0.0);
  for (std::size_t id : d.expert_ids) load[id] += 1.0;
  return load;
}

// Squared coefficient of variation: population variance / mean^2.
inline double cv_squared(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return var / (mean * mean);
}

// weight * (CV^2(importance) + CV^2(load)), with load counted from the hard
// top-K selection.
inline double balancing_loss(const GatingDecision& d, double weight = kBalancingLossWeight) {
  if (d.token_count() == 0) throw std::invalid_argument("balancing_loss needs at least one token");
  const auto importance = expert_importance(d);
  const auto load = expert_load(d);
  return weight * (cv_squared(importance) + cv_squared(load));
}

}  // namespace moeflow
