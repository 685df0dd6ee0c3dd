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

// Flat binary parameter container.
//
//   bytes [0, 8)        magic "MFPARAM1"
//   bytes [8, 16)       header length H, unsigned 64-bit little-endian
//   bytes [16, 16+H)    UTF-8 JSON header:
//                         {"format":"moeflow-params","version":1,
//                          "tensors":[{"name":..,"rows":..,"cols":..,"offset":..},..]}
//   bytes [16+H, end)   payload; tensor i is rows*cols IEEE-754 binary32
//                       little-endian values, row-major, starting `offset`
//                       bytes into the payload
//
// Vectors are stored as 1 x n tensors. Tensors are written back to back in
// header order, so the file size is 16 + H + 4 * sum(rows * cols).

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "moeflow/moe.hpp"
#include "moeflow/tensor.hpp"
#include "moeflow/vit.hpp"

namespace moeflow {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kArchiveMagic = {'M', 'F', 'P', 'A', 'R', 'A', 'M', '1'};

class TensorArchive {
 public:
  void put(const std::string& name, Matrix m) {
    if (index_.count(name) != 0) throw ArchiveError("duplicate tensor name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(m));
  }
  void put(const std::string& name, const Vector& v) { put(name, Matrix::row_vector(v)); }

  const Matrix& matrix(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ArchiveError("missing tensor: " + name);
    return entries_[it->second].second;
  }

  Vector vector(const std::string& name) const {
    const Matrix& m = matrix(name);
    if (m.rows() != 1) throw ArchiveError("tensor " + name + " is not a vector");
    return Vector(m.data().begin(), m.data().end());
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Matrix>>& entries() const { return entries_; }

  std::string serialize() const {
    nlohmann::json header;
    header["format"] = "moeflow-params";
    header["version"] = 1;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : entries_) {
      header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()},
                                   {"offset", offset}});
      offset += 4 * static_cast<std::uint64_t>(m.size());
    }
    const std::string text = header.dump();
    std::string out(kArchiveMagic.begin(), kArchiveMagic.end());
    append_u64(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& entry : entries_) {
      for (float v : entry.second.data()) append_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
  }

  static TensorArchive deserialize(const std::string& bytes) {
    if (bytes.size() < 16 || !std::equal(kArchiveMagic.begin(), kArchiveMagic.end(), bytes.begin())) {
      throw ArchiveError("not a moeflow parameter archive (bad magic)");
    }
    const std::uint64_t header_len = read_u64(bytes, 8);
    if (header_len > bytes.size() - 16) throw ArchiveError("truncated archive header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
      throw ArchiveError(std::string("corrupt archive header: ") + e.what());
    }
    if (header.value("format", "") != "moeflow-params" || header.value("version", 0) != 1) {
      throw ArchiveError("unsupported archive format/version");
    }
    const std::size_t payload = 16 + header_len;
    TensorArchive archive;
    std::uint64_t expected_end = 0;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const std::uint64_t len = 4 * static_cast<std::uint64_t>(rows) * cols;
      if (payload + offset + len > bytes.size()) throw ArchiveError("tensor " + name + " out of bounds");
      std::vector<float> data(rows * cols);
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = std::bit_cast<float>(read_u32(bytes, payload + offset + 4 * i));
      }
      archive.put(name, Matrix(rows, cols, std::move(data)));
      expected_end = std::max(expected_end, offset + len);
    }
    if (payload + expected_end != bytes.size()) throw ArchiveError("trailing bytes after payload");
    return archive;
  }

  void save(const std::string& path) const {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArchiveError("cannot open " + path + " for writing");
    const std::string bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError("write failed: " + path);
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  static void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  static std::uint32_t read_u32(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
    return v;
  }
  static std::uint64_t read_u64(const std::string& s, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
    return v;
  }

  std::vector<std::pair<std::string, Matrix>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_expert(TensorArchive& a, const std::string& p, const ExpertParams& e) {
  a.put(p + ".w1", e.w1);
  a.put(p + ".b1", e.b1);
  a.put(p + ".w2", e.w2);
  a.put(p + ".b2", e.b2);
}

inline ExpertParams get_expert(const TensorArchive& a, const std::string& p) {
  return {a.matrix(p + ".w1"), a.vector(p + ".b1"), a.matrix(p + ".w2"), a.vector(p + ".b2")};
}

inline void put_router(TensorArchive& a, const std::string& p, const RouterParams& r) {
  a.put(p + ".wg", r.wg);
  a.put(p + ".bg", r.bg);
}

inline RouterParams get_router(const TensorArchive& a, const std::string& p) {
  return {a.matrix(p + ".wg"), a.vector(p + ".bg")};
}

}  // namespace detail

// Tensor names match the keys used by seeded_init.
inline TensorArchive to_archive(const ModelParams& params) {
  TensorArchive a;
  a.put("patch.projection", params.patch.projection);
  a.put("patch.bias", params.patch.bias);
  a.put("patch.pos_embed", params.patch.pos_embed);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto& block = params.blocks[b];
    const std::string prefix = "block" + std::to_string(b);
    a.put(prefix + ".ln1.gamma", block.ln1.gamma);
    a.put(prefix + ".ln1.beta", block.ln1.beta);
    a.put(prefix + ".ln2.gamma", block.ln2.gamma);
    a.put(prefix + ".ln2.beta", block.ln2.beta);
    for (std::size_t h = 0; h < block.attn.wq.size(); ++h) {
      const std::string hp = prefix + ".attn.head" + std::to_string(h);
      a.put(hp + ".wq", block.attn.wq[h]);
      a.put(hp + ".wk", block.attn.wk[h]);
      a.put(hp + ".wv", block.attn.wv[h]);
    }
    a.put(prefix + ".attn.wo", block.attn.wo);
    if (const auto* moe = std::get_if<MoeLayerParams>(&block.ffn)) {
      const std::string mp = prefix + ".moe";
      for (std::size_t e = 0; e < moe->experts.size(); ++e) {
        detail::put_expert(a, mp + ".expert" + std::to_string(e), moe->experts[e]);
      }
      if (const auto* s = std::get_if<SingleGate>(&moe->routing)) {
        detail::put_router(a, mp + ".router", s->router);
      } else if (const auto* m = std::get_if<MultiGate>(&moe->routing)) {
        for (std::size_t t = 0; t < m->routers.size(); ++t) {
          detail::put_router(a, mp + ".router" + std::to_string(t), m->routers[t]);
        }
      } else {
        const auto& tc = std::get<TaskConditioned>(moe->routing);
        detail::put_router(a, mp + ".router", tc.router);
        a.put(mp + ".task.w_a", tc.embedder.w_a);
        a.put(mp + ".task.b_a", tc.embedder.b_a);
        a.put(mp + ".task.w_b", tc.embedder.w_b);
        a.put(mp + ".task.b_b", tc.embedder.b_b);
      }
    } else {
      detail::put_expert(a, prefix + ".mlp", std::get<DenseMlpParams>(block.ffn));
    }
  }
  return a;
}

// Rebuilds parameters for `config`; every tensor the config implies must be present.
// Rebuilds the parameter tree for `config`; any missing tensor or shape that
// disagrees with the config is an ArchiveError.
inline ModelParams from_archive(const ModelConfig& config, const TensorArchive& a) {
  config.validate();
  const auto shaped = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const Matrix& m = a.matrix(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw ArchiveError("tensor " + name + " is " + shape_str(m) + ", config expects " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    return m;
  };
  const auto shaped_vec = [&](const std::string& name, std::size_t n) {
    const Matrix m = shaped(name, 1, n);
    return Vector(m.data().begin(), m.data().end());
  };
  const std::size_t c = config.hidden_dim;
  ModelParams p;
  p.patch = {shaped("patch.projection", config.patch_dim(), c), shaped_vec("patch.bias", c),
             shaped("patch.pos_embed", config.token_count(), c)};
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    BlockParams block;
    block.ln1 = {shaped_vec(prefix + ".ln1.gamma", c), shaped_vec(prefix + ".ln1.beta", c)};
    block.ln2 = {shaped_vec(prefix + ".ln2.gamma", c), shaped_vec(prefix + ".ln2.beta", c)};
    for (std::size_t h = 0; h < config.num_heads; ++h) {
      const std::string hp = prefix + ".attn.head" + std::to_string(h);
      block.attn.wq.push_back(shaped(hp + ".wq", c, config.head_dim()));
      block.attn.wk.push_back(shaped(hp + ".wk", c, config.head_dim()));
      block.attn.wv.push_back(shaped(hp + ".wv", c, config.head_dim()));
    }
    block.attn.wo = shaped(prefix + ".attn.wo", c, c);
    if (config.is_moe_block(b)) {
      const std::string mp = prefix + ".moe";
      MoeLayerParams layer;
      layer.top_k = config.top_k;
      for (std::size_t e = 0; e < config.expert_count; ++e) {
        layer.experts.push_back(detail::get_expert(a, mp + ".expert" + std::to_string(e)));
      }
      switch (config.routing_kind) {
        case RoutingKind::kSingle:
          layer.routing = SingleGate{detail::get_router(a, mp + ".router")};
          break;
        case RoutingKind::kMultiGate: {
          MultiGate mg;
          for (std::size_t t = 0; t < config.n_tasks; ++t) {
            mg.routers.push_back(detail::get_router(a, mp + ".router" + std::to_string(t)));
          }
          layer.routing = std::move(mg);
          break;
        }
        case RoutingKind::kTaskConditioned:
          layer.routing = TaskConditioned{
              detail::get_router(a, mp + ".router"),
              {a.matrix(mp + ".task.w_a"), a.vector(mp + ".task.b_a"), a.matrix(mp + ".task.w_b"),
               a.vector(mp + ".task.b_b")}};
          break;
      }
      try {
        layer.validate();
        for (const auto& e : layer.experts) {
          if (e.model_dim() != c || e.hidden_dim() != config.expert_hidden()) {
            throw std::invalid_argument("expert shape disagrees with config");
          }
        }
      } catch (const std::invalid_argument& e) {
        throw ArchiveError(mp + ": " + e.what());
      }
      block.ffn = std::move(layer);
    } else {
      ExpertParams mlp = detail::get_expert(a, prefix + ".mlp");
      if (mlp.w1.rows() != c || mlp.w1.cols() != config.mlp_hidden() || mlp.w2.rows() != config.mlp_hidden() ||
          mlp.w2.cols() != c || mlp.b1.size() != config.mlp_hidden() || mlp.b2.size() != c) {
        throw ArchiveError(prefix + ".mlp: shape disagrees with config");
      }
      block.ffn = std::move(mlp);
    }
    p.blocks.push_back(std::move(block));
  }
  return p;
}

}  // namespace moeflow
