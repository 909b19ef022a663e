#pragma once

// Masked-attention query decoder: N learnable queries attend, stage by
// stage, to the coarse-to-fine embedding maps, each stage gated by the
// masks the queries themselves predict.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "maskcd/layers.hpp"
#include "maskcd/positional_encoding.hpp"

namespace maskcd {

struct DecoderConfig {
  std::size_t queries = 75;
  std::size_t heads = 8;
  std::size_t ffn_ratio = 4;
  bool disable_masked_attention = false;
};

struct AttentionMask {
  std::size_t queries = 0, positions = 0;
  std::vector<std::uint8_t> binary;   // [N, HW], 1 = attend
  Tensor additive;                    // [N, HW] in {0, -inf}; undefined means no masking
  std::vector<std::size_t> fallback;  // rows with no foreground, given full attention
};

inline Tensor flatten_map(const Tensor& gamma) {
  return reshape(gamma, Shape{gamma.dim(0), gamma.dim(1) * gamma.dim(2)});
}

/// Dot products <mlp(x_q), gamma(p)> as [N, HW].
inline Tensor query_mask_logits(const Tensor& queries, const Tensor& gamma, const Mlp& mask_mlp) {
  return matmul(mask_mlp(queries), flatten_map(gamma));
}

inline AttentionMask predict_attention_mask(const Tensor& queries, const Tensor& gamma, const Mlp& mask_mlp) {
  NoGradGuard no_grad;
  const Tensor logits = query_mask_logits(queries, gamma, mask_mlp);
  AttentionMask m;
  m.queries = logits.dim(0);
  m.positions = logits.dim(1);
  m.binary.resize(logits.size());
  std::vector<double> bias(logits.size());
  const auto lv = logits.data();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t q = 0; q < m.queries; ++q) {
    bool any = false;
    for (std::size_t p = 0; p < m.positions; ++p) {
      const std::size_t k = q * m.positions + p;
      m.binary[k] = sigmoid_value(lv[k]) > 0.5 ? 1 : 0;
      any = any || m.binary[k];
    }
    if (!any) m.fallback.push_back(q);
    for (std::size_t p = 0; p < m.positions; ++p) {
      const std::size_t k = q * m.positions + p;
      bias[k] = (!any || m.binary[k]) ? 0.0 : kNegInf;
    }
  }
  m.additive = Tensor(Shape{m.queries, m.positions}, std::move(bias));
  return m;
}

/// Cross-attention from queries to one embedding map, then residual + LN.
struct MaskedAttention {
  Linear q, k, v, out;
  LayerNorm norm;
  std::size_t heads = 1;

  MaskedAttention() = default;
  MaskedAttention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng) : heads(heads) {
    q = Linear(store, name + ".q", dim, dim, rng);
    k = Linear(store, name + ".k", dim, dim, rng);
    v = Linear(store, name + ".v", dim, dim, rng);
    out = Linear(store, name + ".out", dim, dim, rng);
    norm = LayerNorm(store, name + ".norm", dim, rng);
  }

  /// Pre-residual attention output [N, d]; `additive` may be undefined.
  Tensor attend(const Tensor& x, const Tensor& gamma, const Tensor& additive) const {
    const Tensor tokens = transpose_last(flatten_map(gamma));
    const Tensor pos = transpose_last(flatten_map(positional_encoding(gamma.dim(1), gamma.dim(2), gamma.dim(0))));
    return out(multi_head_attention(q(x), k(add(tokens, pos)), v(tokens), heads, additive));
  }

  Tensor operator()(const Tensor& x, const Tensor& gamma, const Tensor& additive) const {
    return norm(add(x, attend(x, gamma, additive)));
  }
};

struct QuerySelfAttention {
  Linear q, k, v, out;
  LayerNorm norm;
  std::size_t heads = 1;

  QuerySelfAttention() = default;
  QuerySelfAttention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, Rng& rng) : heads(heads) {
    q = Linear(store, name + ".q", dim, dim, rng);
    k = Linear(store, name + ".k", dim, dim, rng);
    v = Linear(store, name + ".v", dim, dim, rng);
    out = Linear(store, name + ".out", dim, dim, rng);
    norm = LayerNorm(store, name + ".norm", dim, rng);
  }

  Tensor attend(const Tensor& x) const { return out(multi_head_attention(q(x), k(x), v(x), heads, Tensor())); }
  Tensor operator()(const Tensor& x) const { return norm(add(x, attend(x))); }
};

struct DecoderStage {
  MaskedAttention cross;
  QuerySelfAttention self;
  Mlp ffn;
  LayerNorm ffn_norm;

  DecoderStage() = default;
  DecoderStage(ParameterStore& store, const std::string& name, std::size_t dim, const DecoderConfig& cfg, Rng& rng) {
    cross = MaskedAttention(store, name + ".cross", dim, cfg.heads, rng);
    self = QuerySelfAttention(store, name + ".self", dim, cfg.heads, rng);
    ffn = Mlp(store, name + ".ffn", {dim, dim * cfg.ffn_ratio, dim}, rng);
    ffn_norm = LayerNorm(store, name + ".ffn_norm", dim, rng);
  }

  Tensor operator()(const Tensor& x, const Tensor& gamma, const Tensor& additive) const {
    const Tensor h = self(cross(x, gamma, additive));
    return ffn_norm(add(h, ffn(h)));
  }
};

struct DecoderOutput {
  Tensor final;                       // per-segment embeddings [N, d]
  std::vector<Tensor> stages;         // query state after each stage; back() == final
  std::vector<AttentionMask> masks;   // mask used by each stage
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(ParameterStore& store, const DecoderConfig& config, std::size_t dim, Rng& rng, const std::string& name = "decoder")
      : config_(config) {
    if (config.queries == 0) throw ConfigError("model.queries must be positive");
    if (dim % config.heads != 0) throw ConfigError("model.dim " + std::to_string(dim) + " not divisible by decoder heads " + std::to_string(config.heads));
    query_embed_ = store.create(name + ".query_embed", Shape{config.queries, dim}, Init::StandardNormal, rng);
    for (std::size_t s = 0; s < 3; ++s) stages_.emplace_back(store, name + ".stage" + std::to_string(s), dim, config, rng);
  }

  const DecoderConfig& config() const { return config_; }
  const Tensor& query_embed() const { return query_embed_; }
  std::vector<DecoderStage>& stages() { return stages_; }
  const std::vector<DecoderStage>& stages() const { return stages_; }

  /// `gamma` holds the four embedding maps (stride 4 first). Stages visit levels 4, 3, 2.
  DecoderOutput operator()(const Tensor& x0, const std::vector<Tensor>& gamma, const Mlp& mask_mlp) const {
    if (gamma.size() != 4) throw DimensionError("decoder expects 4 embedding levels, got " + std::to_string(gamma.size()));
    DecoderOutput out;
    Tensor x = x0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const Tensor& g = gamma[3 - s];
      AttentionMask m;
      if (!config_.disable_masked_attention) m = predict_attention_mask(x, g, mask_mlp);
      x = stages_[s](x, g, m.additive);
      out.stages.push_back(x);
      out.masks.push_back(std::move(m));
    }
    out.final = x;
    return out;
  }

  DecoderOutput operator()(const std::vector<Tensor>& gamma, const Mlp& mask_mlp) const {
    return (*this)(query_embed_, gamma, mask_mlp);
  }

 private:
  DecoderConfig config_;
  Tensor query_embed_;
  std::vector<DecoderStage> stages_;
};

}  // namespace maskcd
