#pragma once

// Cross-level change representation: per-level 1x1 projections, a
// deformable-attention encoder over the flattened levels 2..4, and a residual
// fusion that rebuilds the stride-4 embedding map.

#include <cmath>
#include <string>
#include <vector>

#include "maskcd/encoder.hpp"
#include "maskcd/positional_encoding.hpp"

namespace maskcd {

struct DeformAttnConfig {
  std::size_t heads = 8;
  std::size_t points = 4;
  std::size_t layers = 3;
  std::size_t ffn_ratio = 4;
};

/// Position of one level inside the flattened sequence.
struct LevelSpan {
  std::size_t offset = 0, height = 0, width = 0;
  std::size_t length() const { return height * width; }
};

struct ProjectedLevels {
  Tensor residual;  // level-1 projection [d, H1, W1]
  Tensor sequence;  // levels 2..4 flattened row-major and concatenated: [sum H_l W_l, d]
  std::vector<LevelSpan> spans;
};

struct PerPixelEmbeddings {
  std::vector<Tensor> gamma;  // 4 maps [d, H_l, W_l]; gamma[0] has stride 4
};

/// Splits a [S, d] sequence back into [d, H_l, W_l] maps.
inline std::vector<Tensor> split_levels(const Tensor& sequence, const std::vector<LevelSpan>& spans) {
  std::vector<Tensor> maps;
  for (const auto& s : spans) maps.push_back(tokens_to_map(slice(sequence, 0, s.offset, s.length()), s.height, s.width));
  return maps;
}

/// Inverse of split_levels.
inline Tensor flatten_levels(const std::vector<Tensor>& maps) {
  std::vector<Tensor> parts;
  for (const auto& m : maps) parts.push_back(map_to_tokens(m));
  return concat(parts, 0);
}

/// Reference point of every sequence element expressed in each level's pixel
/// space: element q sits at its own normalized coordinate p in [0,1]^2 and
/// level l sees it at p * (W_l - 1, H_l - 1). Returns one [S, 1, 1, 2] tensor per level.
inline std::vector<Tensor> reference_points(const std::vector<LevelSpan>& spans) {
  std::size_t total = 0;
  for (const auto& s : spans) total += s.length();
  std::vector<double> norm(total * 2);
  for (const auto& s : spans)
    for (std::size_t i = 0; i < s.height; ++i)
      for (std::size_t j = 0; j < s.width; ++j) {
        const std::size_t q = s.offset + i * s.width + j;
        norm[2 * q] = s.width > 1 ? static_cast<double>(j) / static_cast<double>(s.width - 1) : 0.0;
        norm[2 * q + 1] = s.height > 1 ? static_cast<double>(i) / static_cast<double>(s.height - 1) : 0.0;
      }
  std::vector<Tensor> refs;
  for (const auto& s : spans) {
    std::vector<double> pix(total * 2);
    for (std::size_t q = 0; q < total; ++q) {
      pix[2 * q] = norm[2 * q] * static_cast<double>(s.width - 1);
      pix[2 * q + 1] = norm[2 * q + 1] * static_cast<double>(s.height - 1);
    }
    refs.emplace_back(Shape{total, 1, 1, 2}, std::move(pix));
  }
  return refs;
}

/// Multi-scale deformable attention (pre-residual):
///   out_q = W [ sum_l sum_k A_mlqk * (W' x)_l(ref_q + offset_mlqk) ] per head m.
/// Offsets and weights are linear in the query; weights are softmax-normalized
/// jointly over (level, point) within each head.
struct DeformableAttention {
  Linear value_proj, offset_proj, weight_proj, output_proj;
  std::size_t dim = 0, heads = 0, levels = 0, points = 0;
  std::string name;

  DeformableAttention() = default;
  DeformableAttention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, std::size_t levels,
                      std::size_t points, Rng& rng)
      : dim(dim), heads(heads), levels(levels), points(points), name(name) {
    if (dim % heads != 0) throw ConfigError(name + ": width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    value_proj = Linear(store, name + ".value_proj", dim, dim, rng);
    // Zero-initialised predictors: sampling starts at the reference point with uniform weights.
    offset_proj = Linear(store, name + ".offset_proj", dim, heads * levels * points * 2, rng, Init::Zeros);
    weight_proj = Linear(store, name + ".weight_proj", dim, heads * levels * points, rng, Init::Zeros);
    output_proj = Linear(store, name + ".output_proj", dim, dim, rng);
  }

  /// Attention weights [S, heads, levels, points]; each (q, m) slice sums to 1.
  Tensor attention_weights(const Tensor& query) const {
    const std::size_t S = query.dim(0);
    const Tensor logits = reshape(weight_proj(query), Shape{S, heads, levels * points});
    return reshape(softmax_lastdim(logits), Shape{S, heads, levels, points});
  }

  Tensor operator()(const Tensor& query, const Tensor& input, const std::vector<Tensor>& refs,
                    const std::vector<LevelSpan>& spans) const {
    const std::size_t S = query.dim(0), dh = dim / heads, K = points;
    if (spans.size() != levels || refs.size() != levels) throw DimensionError(name + ": expected " + std::to_string(levels) + " levels");
    const Tensor value = value_proj(input);
    const Tensor raw_offsets = offset_proj(query);
    for (double v : raw_offsets.data()) {
      if (!std::isfinite(v)) throw NumericError(name + ": non-finite sampling offsets");
    }
    const Tensor offsets = permute(reshape(raw_offsets, Shape{S, heads, levels, K, 2}), {2, 0, 3, 1, 4});  // [L,S,K,M,2]
    const Tensor weights = permute(attention_weights(query), {2, 0, 3, 1});                                 // [L,S,K,M]

    Tensor aggregated;
    for (std::size_t l = 0; l < levels; ++l) {
      const LevelSpan& sp = spans[l];
      const Tensor feat = reshape(slice(value, 0, sp.offset, sp.length()), Shape{sp.height, sp.width, heads, dh});
      const Tensor loc = add(reshape(slice(offsets, 0, l, 1), Shape{S, K, heads, 2}), refs[l]);
      const Tensor sampled = reshape(bilinear_sample_grouped(feat, reshape(loc, Shape{S * K, heads, 2})), Shape{S, K, heads, dh});
      const Tensor w = reshape(slice(weights, 0, l, 1), Shape{S, K, heads, 1});
      const Tensor contrib = sum_dim(mul(sampled, w), 1);  // [S, M, dh]
      aggregated = l == 0 ? contrib : add(aggregated, contrib);
    }
    return output_proj(reshape(aggregated, Shape{S, dim}));
  }
};

/// Deformable attention + residual + LN, then FFN + residual + LN.
struct DeformEncoderLayer {
  DeformableAttention attn;
  LayerNorm norm1, norm2;
  Mlp ffn;

  DeformEncoderLayer() = default;
  DeformEncoderLayer(ParameterStore& store, const std::string& name, std::size_t dim, const DeformAttnConfig& cfg, std::size_t levels, Rng& rng) {
    attn = DeformableAttention(store, name + ".attn", dim, cfg.heads, levels, cfg.points, rng);
    norm1 = LayerNorm(store, name + ".norm1", dim, rng);
    ffn = Mlp(store, name + ".ffn", {dim, dim * cfg.ffn_ratio, dim}, rng);
    norm2 = LayerNorm(store, name + ".norm2", dim, rng);
  }

  Tensor operator()(const Tensor& x, const Tensor& pos, const std::vector<Tensor>& refs, const std::vector<LevelSpan>& spans) const {
    const Tensor h = norm1(add(x, attn(add(x, pos), x, refs, spans)));
    return norm2(add(h, ffn(h)));
  }
};

struct ClcrpConfig {
  std::size_t dim = 64;
  DeformAttnConfig deform;
  bool disable_deform_mhsa = false;
};

class Clcrp {
 public:
  Clcrp() = default;
  /// `level_channels` are the channel counts of the four concatenated levels (2 * C_l).
  Clcrp(ParameterStore& store, const ClcrpConfig& config, const std::vector<std::size_t>& level_channels, Rng& rng,
        const std::string& name = "clcrp")
      : config_(config) {
    if (level_channels.size() != 4) throw ConfigError("clcrp expects 4 feature levels");
    if (config.dim % 4 != 0) throw ConfigError("model.dim " + std::to_string(config.dim) + " must be divisible by 4");
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = name + ".input_proj" + std::to_string(l + 1);
      proj_kernel_.push_back(store.create(p + ".weight", Shape{config.dim, level_channels[l], 1, 1}, Init::XavierUniform, rng));
      proj_bias_.push_back(store.create(p + ".bias", Shape{config.dim}, Init::Zeros, rng));
    }
    level_embed_ = store.create(name + ".level_embed", Shape{3, config.dim}, Init::StandardNormal, rng);
    for (std::size_t i = 0; i < config.deform.layers; ++i) {
      layers_.emplace_back(store, name + ".layer" + std::to_string(i), config.dim, config.deform, 3, rng);
    }
    fuse_kernel_ = store.create(name + ".fuse.weight", Shape{config.dim, config.dim, 3, 3}, Init::KaimingUniform, rng);
    fuse_bias_ = store.create(name + ".fuse.bias", Shape{config.dim}, Init::Zeros, rng);
  }

  const ClcrpConfig& config() const { return config_; }
  const std::vector<DeformEncoderLayer>& layers() const { return layers_; }
  std::vector<DeformEncoderLayer>& layers() { return layers_; }

  ProjectedLevels project_levels(const std::vector<Tensor>& delta) const {
    if (delta.size() != 4) throw DimensionError("project_levels expects 4 levels, got " + std::to_string(delta.size()));
    ProjectedLevels out;
    out.residual = conv2d(delta[0], proj_kernel_[0], proj_bias_[0], 0);
    std::vector<Tensor> parts;
    std::size_t offset = 0;
    for (std::size_t l = 1; l < 4; ++l) {
      const Tensor m = conv2d(delta[l], proj_kernel_[l], proj_bias_[l], 0);
      out.spans.push_back(LevelSpan{offset, m.dim(1), m.dim(2)});
      offset += m.dim(1) * m.dim(2);
      parts.push_back(map_to_tokens(m));
    }
    out.sequence = concat(parts, 0);
    return out;
  }

  /// Sine position code per element plus its level's learned embedding: [S, d].
  Tensor sequence_positions(const std::vector<LevelSpan>& spans) const {
    std::vector<Tensor> parts;
    for (std::size_t l = 0; l < spans.size(); ++l) {
      const Tensor pe = map_to_tokens(positional_encoding(spans[l].height, spans[l].width, config_.dim));
      parts.push_back(add(pe, reshape(slice(level_embed_, 0, l, 1), Shape{config_.dim})));
    }
    return concat(parts, 0);
  }

  Tensor encode(const Tensor& sequence, const std::vector<LevelSpan>& spans) const {
    if (config_.disable_deform_mhsa) return sequence;
    const Tensor pos = sequence_positions(spans);
    const std::vector<Tensor> refs = reference_points(spans);
    Tensor x = sequence;
    for (const auto& layer : layers_) x = layer(x, pos, refs, spans);
    return x;
  }

  /// gamma_1 = conv3x3(upsample2x(gamma_2) + residual); gamma_2..4 are the encoded level maps.
  PerPixelEmbeddings fuse(const Tensor& encoded, const std::vector<LevelSpan>& spans, const Tensor& residual) const {
    std::vector<Tensor> maps = split_levels(encoded, spans);
    const std::size_t h1 = residual.dim(1), w1 = residual.dim(2);
    if ((h1 + 1) / 2 != maps[0].dim(1) || (w1 + 1) / 2 != maps[0].dim(2)) {
      throw DimensionError("fuse: level-2 map " + shape_str(maps[0].shape()) + " is not half of residual " + shape_str(residual.shape()));
    }
    Tensor up = upsample_bilinear(maps[0], 2);
    if (up.dim(1) != h1) up = slice(up, 1, 0, h1);
    if (up.dim(2) != w1) up = slice(up, 2, 0, w1);
    PerPixelEmbeddings out;
    out.gamma.push_back(conv2d(add(up, residual), fuse_kernel_, fuse_bias_, 1));
    for (auto& m : maps) out.gamma.push_back(m);
    return out;
  }

  PerPixelEmbeddings operator()(const std::vector<Tensor>& delta) const {
    const ProjectedLevels p = project_levels(delta);
    return fuse(encode(p.sequence, p.spans), p.spans, p.residual);
  }

 private:
  ClcrpConfig config_;
  std::vector<Tensor> proj_kernel_, proj_bias_;
  Tensor level_embed_;
  std::vector<DeformEncoderLayer> layers_;
  Tensor fuse_kernel_, fuse_bias_;
};

}  // namespace maskcd
