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

// Random generators shared by the unit and acceptance suites.

#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "moeflow/moe.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow::testing_util {

inline float uniform(std::mt19937_64& gen, float range) {
  // 24-bit mantissa draw; std::uniform_real_distribution is not portable.
  const float u = static_cast<float>(gen() >> 40) * 0x1.0p-24f;
  return -range + 2.0f * range * u;
}

inline Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols, float range) {
  Matrix m(rows, cols);
  for (float& v : m.data()) v = uniform(gen, range);
  return m;
}

inline Vector random_vector(std::mt19937_64& gen, std::size_t n, float range) {
  Vector v(n);
  for (float& x : v) x = uniform(gen, range);
  return v;
}

inline ExpertParams random_expert(std::mt19937_64& gen, std::size_t c, std::size_t h, float range) {
  return {random_matrix(gen, c, h, range), random_vector(gen, h, range), random_matrix(gen, h, c, range),
          random_vector(gen, c, range)};
}

inline RouterParams random_router(std::mt19937_64& gen, std::size_t in, std::size_t n, float range) {
  return {random_matrix(gen, in, n, range), random_vector(gen, n, range)};
}

inline MoeLayerParams random_layer(std::mt19937_64& gen, std::size_t c, std::size_t h, std::size_t n,
                                   std::size_t k, RoutingKind kind, std::size_t n_tasks, float range) {
  MoeLayerParams layer;
  layer.top_k = k;
  for (std::size_t e = 0; e < n; ++e) layer.experts.push_back(random_expert(gen, c, h, range));
  switch (kind) {
    case RoutingKind::kSingle:
      layer.routing = SingleGate{random_router(gen, c, n, 1.0f)};
      break;
    case RoutingKind::kMultiGate: {
      MultiGate mg;
      for (std::size_t t = 0; t < n_tasks; ++t) mg.routers.push_back(random_router(gen, c, n, 1.0f));
      layer.routing = std::move(mg);
      break;
    }
    case RoutingKind::kTaskConditioned:
      layer.routing = TaskConditioned{
          random_router(gen, c + kTaskEmbedDim, n, 1.0f),
          {random_matrix(gen, n_tasks, kTaskEmbedDim, 1.0f), random_vector(gen, kTaskEmbedDim, 1.0f),
           random_matrix(gen, kTaskEmbedDim, kTaskEmbedDim, 0.5f), random_vector(gen, kTaskEmbedDim, 0.5f)}};
      break;
  }
  return layer;
}

// Decision with the given expert lists (descending-gate order per token);
// gates are read off a softmax whose logits rank the listed experts first.
inline GatingDecision decision_from_lists(const std::vector<std::vector<std::size_t>>& picks,
                                          std::size_t n_experts) {
  const std::size_t k = picks.empty() ? 1 : picks.front().size();
  Matrix logits(picks.size(), n_experts, -10.0f);
  for (std::size_t t = 0; t < picks.size(); ++t) {
    for (std::size_t j = 0; j < picks[t].size(); ++j) {
      logits(t, picks[t][j]) = 10.0f - static_cast<float>(j);
    }
  }
  return top_k_gate(logits, k);
}

}  // namespace moeflow::testing_util
