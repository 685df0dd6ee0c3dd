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

// Deterministic parameter and input generation. Every tensor is filled from
// its own counter stream keyed by (seed, tensor name), so values do not depend
// on creation order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moeflow/moe.hpp"
#include "moeflow/rng.hpp"
#include "moeflow/tensor.hpp"
#include "moeflow/vit.hpp"

namespace moeflow {

inline constexpr float kInitRange = 0.02f;

inline Matrix seeded_matrix(std::uint64_t seed, const std::string& name, std::size_t rows,
                            std::size_t cols, float range = kInitRange) {
  CounterRng rng(seed, name);
  Matrix m(rows, cols);
  for (float& v : m.data()) v = rng.uniform(-range, range);
  return m;
}

inline Vector seeded_vector(std::uint64_t seed, const std::string& name, std::size_t n,
                            float range = kInitRange) {
  CounterRng rng(seed, name);
  Vector v(n);
  for (float& x : v) x = rng.uniform(-range, range);
  return v;
}

inline ExpertParams seeded_expert(std::uint64_t seed, const std::string& prefix, std::size_t c,
                                  std::size_t h) {
  return {seeded_matrix(seed, prefix + ".w1", c, h), seeded_vector(seed, prefix + ".b1", h),
          seeded_matrix(seed, prefix + ".w2", h, c), seeded_vector(seed, prefix + ".b2", c)};
}

inline RouterParams seeded_router(std::uint64_t seed, const std::string& prefix, std::size_t in,
                                  std::size_t n) {
  return {seeded_matrix(seed, prefix + ".wg", in, n), seeded_vector(seed, prefix + ".bg", n)};
}

inline MoeLayerParams seeded_moe_layer(const ModelConfig& config, std::uint64_t seed,
                                       const std::string& prefix) {
  MoeLayerParams layer;
  layer.top_k = config.top_k;
  for (std::size_t e = 0; e < config.expert_count; ++e) {
    layer.experts.push_back(seeded_expert(seed, prefix + ".expert" + std::to_string(e),
                                          config.hidden_dim, config.expert_hidden()));
  }
  const std::size_t n = config.expert_count;
  switch (config.routing_kind) {
    case RoutingKind::kSingle:
      layer.routing = SingleGate{seeded_router(seed, prefix + ".router", config.hidden_dim, n)};
      break;
    case RoutingKind::kMultiGate: {
      MultiGate mg;
      for (std::size_t t = 0; t < config.n_tasks; ++t) {
        mg.routers.push_back(
            seeded_router(seed, prefix + ".router" + std::to_string(t), config.hidden_dim, n));
      }
      layer.routing = std::move(mg);
      break;
    }
    case RoutingKind::kTaskConditioned: {
      TaskEmbedderParams emb{
          seeded_matrix(seed, prefix + ".task.w_a", config.n_tasks, kTaskEmbedDim),
          seeded_vector(seed, prefix + ".task.b_a", kTaskEmbedDim),
          seeded_matrix(seed, prefix + ".task.w_b", kTaskEmbedDim, kTaskEmbedDim),
          seeded_vector(seed, prefix + ".task.b_b", kTaskEmbedDim)};
      layer.routing = TaskConditioned{
          seeded_router(seed, prefix + ".router", config.hidden_dim + kTaskEmbedDim, n),
          std::move(emb)};
      break;
    }
  }
  return layer;
}

// Weights and biases are uniform in [-0.02, 0.02]; layer norms start at
// gamma = 1, beta = 0.
inline ModelParams seeded_init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t c = config.hidden_dim;
  ModelParams p;
  p.patch.projection = seeded_matrix(seed, "patch.projection", config.patch_dim(), c);
  p.patch.bias = seeded_vector(seed, "patch.bias", c);
  p.patch.pos_embed = seeded_matrix(seed, "patch.pos_embed", config.token_count(), c);
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    BlockParams block;
    block.ln1 = {Vector(c, 1.0f), Vector(c, 0.0f)};
    block.ln2 = {Vector(c, 1.0f), Vector(c, 0.0f)};
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      const std::string hp = prefix + ".attn.head" + std::to_string(h);
      block.attn.wq.push_back(seeded_matrix(seed, hp + ".wq", c, config.head_dim()));
      block.attn.wk.push_back(seeded_matrix(seed, hp + ".wk", c, config.head_dim()));
      block.attn.wv.push_back(seeded_matrix(seed, hp + ".wv", c, config.head_dim()));
    }
    block.attn.wo = seeded_matrix(seed, prefix + ".attn.wo", c, c);
    if (config.is_moe_block(b)) {
      block.ffn = seeded_moe_layer(config, seed, prefix + ".moe");
    } else {
      block.ffn = seeded_expert(seed, prefix + ".mlp", c, config.mlp_hidden());
    }
    p.blocks.push_back(std::move(block));
  }
  return p;
}

// Pixels uniform in [0, 1).
inline Image seeded_image(const ModelConfig& config, std::uint64_t seed, std::size_t frame) {
  Image img{config.image_h, config.image_w, config.channels, {}};
  img.pixels.resize(img.height * img.width * img.channels);
  CounterRng rng(seed, "image.frame" + std::to_string(frame));
  for (float& v : img.pixels) v = rng.uniform01f();
  return img;
}

}  // namespace moeflow
