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

// Vision-transformer backbone with MoE feed-forward blocks.
//
// Layout: patch embedding + position embedding, then `num_blocks` pre-norm
// blocks. Block b (1-indexed) uses an MoE feed-forward when
// b % moe_every == 0 and a dense 4C MLP otherwise. All tokens are patch
// tokens; there is no class token.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "moeflow/moe.hpp"
#include "moeflow/queues.hpp"
#include "moeflow/tensor.hpp"

namespace moeflow {

struct ModelConfig {
  std::size_t image_h = 16;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_blocks = 4;
  std::size_t num_heads = 2;
  double mlp_ratio = 4.0;
  std::size_t moe_every = 2;
  std::size_t expert_count = 16;
  std::size_t top_k = 4;
  std::size_t n_tasks = 2;
  RoutingKind routing_kind = RoutingKind::kMultiGate;
  // When set, expert hidden = mlp_ratio * C / K so K experts cost one dense MLP.
  bool flop_matched = true;
  std::size_t expert_hidden_override = 0;
  float ln_eps = 1e-6f;

  std::size_t token_count() const {
    return (image_h / patch_size) * (image_w / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return hidden_dim / num_heads; }

  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(hidden_dim)));
  }

  std::size_t expert_hidden() const {
    return flop_matched ? mlp_hidden() / top_k : expert_hidden_override;
  }

  bool is_moe_block(std::size_t block) const { return (block + 1) % moe_every == 0; }

  std::size_t moe_layer_count() const { return moe_every == 0 ? 0 : num_blocks / moe_every; }

  std::size_t router_input_dim() const {
    return routing_kind == RoutingKind::kTaskConditioned ? hidden_dim + kTaskEmbedDim : hidden_dim;
  }

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const {
    const auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
    if (patch_size == 0) fail("model.patch_size must be positive");
    if (image_h == 0 || image_w == 0 || channels == 0) fail("model image dims must be positive");
    if (image_h % patch_size != 0 || image_w % patch_size != 0) {
      fail("model.image_h/image_w must be divisible by model.patch_size");
    }
    if (hidden_dim == 0 || num_heads == 0) fail("model.hidden_dim and model.num_heads must be positive");
    if (hidden_dim % num_heads != 0) fail("model.hidden_dim must be divisible by model.num_heads");
    if (!(mlp_ratio > 0.0)) fail("model.mlp_ratio must be positive");
    if (std::fabs(mlp_ratio * static_cast<double>(hidden_dim) - static_cast<double>(mlp_hidden())) > 1e-9) {
      fail("model.mlp_ratio * model.hidden_dim must be an integer");
    }
    if (moe_every == 0) fail("model.moe_every must be positive");
    if (expert_count == 0) fail("model.expert_count must be positive");
    if (top_k < 1 || top_k > expert_count) fail("model.top_k must satisfy 1 <= top_k <= expert_count");
    if (n_tasks == 0) fail("model.n_tasks must be positive");
    if (flop_matched && mlp_hidden() % top_k != 0) {
      fail("flop-matched experts need mlp_ratio * hidden_dim divisible by top_k");
    }
    if (expert_hidden() == 0) fail("model.expert_hidden must be positive");
  }

  // Desk-scale default: small enough for brute-force oracles.
  static ModelConfig desk() { return ModelConfig{}; }

  // ViT-small geometry at 512x512 input, for cost and memory accounting.
  static ModelConfig vit_small() {
    ModelConfig c;
    c.image_h = 512;
    c.image_w = 512;
    c.patch_size = 16;
    c.hidden_dim = 384;
    c.num_blocks = 12;
    c.num_heads = 6;
    return c;
  }
};

struct PatchEmbedParams {
  Matrix projection;  // patch_dim x C
  Vector bias;        // C
  Matrix pos_embed;   // T x C
};

struct AttentionParams {
  std::vector<Matrix> wq, wk, wv;  // per head, C x head_dim
  Matrix wo;                       // C x C
};

struct LayerNormParams {
  Vector gamma;
  Vector beta;
};

// Same shape and formula as an expert, at 4C hidden width.
using DenseMlpParams = ExpertParams;

struct BlockParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  std::variant<DenseMlpParams, MoeLayerParams> ffn;

  bool is_moe() const { return std::holds_alternative<MoeLayerParams>(ffn); }
};

struct ModelParams {
  PatchEmbedParams patch;
  std::vector<BlockParams> blocks;
};

// H x W x channels, stored row-major with channel fastest.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Splits into non-overlapping p x p patches (row-major over the patch grid),
// flattens each in (row, col, channel) order, projects, adds positions.
inline Matrix patch_embed(const Image& image, const PatchEmbedParams& params, std::size_t patch_size) {
  if (patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ShapeError("patch_embed: image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " not divisible by patch " + std::to_string(patch_size));
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw ShapeError("patch_embed: pixel buffer size mismatch");
  }
  const std::size_t gh = image.height / patch_size;
  const std::size_t gw = image.width / patch_size;
  const std::size_t dim = patch_size * patch_size * image.channels;
  if (params.projection.rows() != dim) {
    throw ShapeError("patch_embed: projection has " + std::to_string(params.projection.rows()) +
                     " rows, patches have " + std::to_string(dim) + " values");
  }
  Matrix patches(gh * gw, dim);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      auto dst = patches.row(py * gw + px);
      std::size_t i = 0;
      for (std::size_t dy = 0; dy < patch_size; ++dy)
        for (std::size_t dx = 0; dx < patch_size; ++dx)
          for (std::size_t c = 0; c < image.channels; ++c)
            dst[i++] = image.at(py * patch_size + dy, px * patch_size + dx, c);
    }
  }
  const Matrix projected = affine(patches, params.projection, params.bias);
  if (params.pos_embed.rows() != projected.rows() || params.pos_embed.cols() != projected.cols()) {
    throw ShapeError("patch_embed: pos_embed " + shape_str(params.pos_embed) + " vs tokens " +
                     shape_str(projected));
  }
  return add(projected, params.pos_embed);
}

// Multi-head scaled-dot attention without the residual.
inline Matrix self_attention(const AttentionParams& attn, const Matrix& tokens) {
  const std::size_t heads = attn.wq.size();
  if (heads == 0 || attn.wk.size() != heads || attn.wv.size() != heads) {
    throw ShapeError("self_attention: inconsistent head count");
  }
  const std::size_t c = tokens.cols();
  const std::size_t d = attn.wq.front().cols();
  if (d * heads != c || attn.wo.rows() != c || attn.wo.cols() != c) {
    throw ShapeError("self_attention: head_dim * heads must equal C and wo must be C x C");
  }
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
  Matrix concat(tokens.rows(), c);
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix q = matmul(tokens, attn.wq[h]);
    const Matrix k = matmul(tokens, attn.wk[h]);
    const Matrix v = matmul(tokens, attn.wv[h]);
    const Matrix weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
    const Matrix head = matmul(weights, v);
    for (std::size_t t = 0; t < tokens.rows(); ++t)
      for (std::size_t j = 0; j < d; ++j) concat(t, h * d + j) = head(t, j);
  }
  return matmul(concat, attn.wo);
}

struct MoeLayerRecord {
  std::size_t block = 0;    // 0-based block index
  Matrix input;             // normalized tokens fed to the MoE layer
  GatingDecision decision;
};

struct ForwardResult {
  Matrix features;
  std::vector<MoeLayerRecord> moe_layers;  // in block order
};

enum class MoeExecution { kReference, kReordered };

inline ForwardResult model_forward(const ModelConfig& config, const ModelParams& params,
                                   const Image& image, std::size_t task,
                                   MoeExecution execution = MoeExecution::kReordered) {
  if (task >= config.n_tasks) {
    throw std::out_of_range("task " + std::to_string(task) + " >= n_tasks " +
                            std::to_string(config.n_tasks));
  }
  ForwardResult result;
  Matrix x = patch_embed(image, params.patch, config.patch_size);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const BlockParams& block = params.blocks[b];
    x = add(std::move(x), self_attention(block.attn, layer_norm(x, block.ln1.gamma, block.ln1.beta,
                                                                config.ln_eps)));
    Matrix normed = layer_norm(x, block.ln2.gamma, block.ln2.beta, config.ln_eps);
    if (const auto* moe = std::get_if<MoeLayerParams>(&block.ffn)) {
      GatingDecision decision = select_experts(*moe, normed, task);
      Matrix y = execution == MoeExecution::kReordered
                     ? execute_reordered(*moe, normed, decision)
                     : moe_forward_reference(*moe, normed, decision);
      x = add(std::move(x), y);
      result.moe_layers.push_back({b, std::move(normed), std::move(decision)});
    } else {
      x = add(std::move(x), expert_forward(std::get<DenseMlpParams>(block.ffn), normed));
    }
  }
  result.features = std::move(x);
  return result;
}

// Analytic multiply-accumulate counts; FLOPs are 2 per MAC. Norms, softmax
// and activations are not counted.
struct FlopBreakdown {
  std::uint64_t tokens = 0;
  std::uint64_t dense_blocks = 0;
  std::uint64_t moe_blocks = 0;

  std::uint64_t patch_embed_macs = 0;
  // Per block.
  std::uint64_t attn_qkv_macs = 0;
  std::uint64_t attn_scores_macs = 0;  // Q K^T over all heads
  std::uint64_t attn_av_macs = 0;
  std::uint64_t attn_out_macs = 0;
  std::uint64_t dense_mlp_macs = 0;
  std::uint64_t moe_expert_macs = 0;  // K active experts per token
  std::uint64_t moe_router_macs = 0;  // gate plus task embedder if any

  // Per token.
  std::uint64_t dense_mlp_macs_per_token = 0;
  std::uint64_t expert_macs_per_token = 0;      // one expert
  std::uint64_t moe_expert_macs_per_token = 0;  // K experts

  std::uint64_t attention_macs() const {
    return attn_qkv_macs + attn_scores_macs + attn_av_macs + attn_out_macs;
  }

  std::uint64_t total_macs() const {
    return patch_embed_macs + (dense_blocks + moe_blocks) * attention_macs() +
           dense_blocks * dense_mlp_macs + moe_blocks * (moe_expert_macs + moe_router_macs);
  }

  // Same geometry with every block dense.
  std::uint64_t dense_variant_total_macs() const {
    return patch_embed_macs + (dense_blocks + moe_blocks) * (attention_macs() + dense_mlp_macs);
  }

  std::uint64_t total_flops() const { return 2 * total_macs(); }
};

inline FlopBreakdown flop_count(const ModelConfig& config) {
  config.validate();
  using u64 = std::uint64_t;
  const u64 t = config.token_count();
  const u64 c = config.hidden_dim;
  const u64 n = config.expert_count;
  const u64 k = config.top_k;
  FlopBreakdown f;
  f.tokens = t;
  f.moe_blocks = config.moe_layer_count();
  f.dense_blocks = config.num_blocks - f.moe_blocks;
  f.patch_embed_macs = t * config.patch_dim() * c;
  f.attn_qkv_macs = 3 * t * c * c;
  f.attn_scores_macs = t * t * c;
  f.attn_av_macs = t * t * c;
  f.attn_out_macs = t * c * c;
  f.dense_mlp_macs_per_token = 2 * c * config.mlp_hidden();
  f.dense_mlp_macs = t * f.dense_mlp_macs_per_token;
  f.expert_macs_per_token = 2 * c * config.expert_hidden();
  f.moe_expert_macs_per_token = k * f.expert_macs_per_token;
  f.moe_expert_macs = t * f.moe_expert_macs_per_token;
  f.moe_router_macs = t * config.router_input_dim() * n;
  if (config.routing_kind == RoutingKind::kTaskConditioned) {
    f.moe_router_macs += config.n_tasks * kTaskEmbedDim + kTaskEmbedDim * kTaskEmbedDim;
  }
  return f;
}

}  // namespace moeflow
