#pragma once

// Siamese hierarchical window-attention encoder.
//
// Tokens travel as [H*W, C] row-major grids. Each stage runs pairs of blocks
// (regular windows, then cyclically shifted windows), reports its output as a
// [C, H, W] level map, and patch-merges 2x2 neighbourhoods for the next stage.

#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "maskcd/layers.hpp"

namespace maskcd {

struct EncoderConfig {
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::vector<std::size_t> depths{2, 2, 2, 2};
  std::vector<std::size_t> heads{2, 4, 8, 16};
  std::size_t window = 4;
  std::size_t mlp_ratio = 4;

  std::size_t stage_dim(std::size_t stage) const { return embed_dim << stage; }

  void validate() const {
    if (patch_size != 4) throw ConfigError("encoder.patch_size must be 4 (masks are predicted at stride 4)");
    if (depths.size() != 4 || heads.size() != 4) throw ConfigError("encoder.depths and encoder.heads need exactly 4 stages");
    if (embed_dim == 0 || window == 0) throw ConfigError("encoder.embed_dim and encoder.window must be positive");
    for (std::size_t s = 0; s < 4; ++s) {
      if (depths[s] % 2 != 0) {
        throw ConfigError("encoder.depths[" + std::to_string(s) + "] = " + std::to_string(depths[s]) +
                          " must be even (regular/shifted block pairs)");
      }
      if (heads[s] == 0 || stage_dim(s) % heads[s] != 0) {
        throw ConfigError("encoder.heads[" + std::to_string(s) + "]: stage width " + std::to_string(stage_dim(s)) +
                          " not divisible by " + std::to_string(heads[s]) + " heads");
      }
    }
  }
};

struct BitemporalFeatures {
  std::vector<Tensor> t1;     // [C_l, H_l, W_l]
  std::vector<Tensor> t2;     // same shapes as t1
  std::vector<Tensor> delta;  // [2*C_l, H_l, W_l] = [t1_l; t2_l]
};

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// Window geometry for one grid: effective window, shift, and row permutations
/// between the token grid and the (shifted) window-major layout.
struct WindowLayout {
  std::size_t height = 0, width = 0, window = 0, shift = 0;
  std::size_t num_windows = 0;
  IndexMap to_windows;    // window-major row r <- grid row
  IndexMap from_windows;  // grid row r <- window-major row
  Tensor shift_mask;      // [nW, 1, M*M, M*M] of {0, -inf}; undefined without shift

  /// Largest divisor of gcd(H, W) not exceeding the configured window.
  static std::size_t effective_window(std::size_t height, std::size_t width, std::size_t window) {
    const std::size_t g = std::gcd(height, width);
    for (std::size_t m = std::min(window, g); m > 1; --m)
      if (g % m == 0) return m;
    return 1;
  }

  static WindowLayout build(std::size_t height, std::size_t width, std::size_t window, bool shifted) {
    WindowLayout L;
    L.height = height;
    L.width = width;
    L.window = effective_window(height, width, window);
    L.shift = (shifted && L.window < std::min(height, width)) ? L.window / 2 : 0;
    const std::size_t M = L.window, s = L.shift;
    const std::size_t nwy = height / M, nwx = width / M;
    L.num_windows = nwy * nwx;
    const std::size_t n = height * width;
    auto fwd = std::make_shared<std::vector<std::int64_t>>(n);
    auto inv = std::make_shared<std::vector<std::int64_t>>(n);
    for (std::size_t wy = 0; wy < nwy; ++wy)
      for (std::size_t wx = 0; wx < nwx; ++wx)
        for (std::size_t a = 0; a < M; ++a)
          for (std::size_t b = 0; b < M; ++b) {
            const std::size_t r = ((wy * nwx + wx) * M + a) * M + b;
            // Cyclic shift by -s: the shifted grid at (i, j) holds the original token (i+s, j+s).
            const std::size_t i = (wy * M + a + s) % height;
            const std::size_t j = (wx * M + b + s) % width;
            (*fwd)[r] = static_cast<std::int64_t>(i * width + j);
            (*inv)[i * width + j] = static_cast<std::int64_t>(r);
          }
    L.to_windows = fwd;
    L.from_windows = inv;
    if (s > 0) {
      // Tokens that only became neighbours through the wrap-around must not attend to each other.
      auto region = [M, s](std::size_t coord, std::size_t extent) -> int {
        if (coord < extent - M) return 0;
        if (coord < extent - s) return 1;
        return 2;
      };
      const std::size_t T = M * M;
      std::vector<double> mask(L.num_windows * T * T, 0.0);
      for (std::size_t wy = 0; wy < nwy; ++wy)
        for (std::size_t wx = 0; wx < nwx; ++wx) {
          std::vector<int> label(T);
          for (std::size_t a = 0; a < M; ++a)
            for (std::size_t b = 0; b < M; ++b)
              label[a * M + b] = region(wy * M + a, height) * 3 + region(wx * M + b, width);
          double* m = mask.data() + (wy * nwx + wx) * T * T;
          for (std::size_t p = 0; p < T; ++p)
            for (std::size_t q = 0; q < T; ++q)
              if (label[p] != label[q]) m[p * T + q] = -std::numeric_limits<double>::infinity();
        }
      L.shift_mask = Tensor(Shape{L.num_windows, 1, T, T}, std::move(mask));
    }
    return L;
  }
};

/// Relative position bias table shared by all windows of a block.
struct RelativePositionBias {
  Tensor table;  // [(2M-1)^2, heads]
  std::size_t window = 0, heads = 0;

  RelativePositionBias() = default;
  RelativePositionBias(ParameterStore& store, const std::string& name, std::size_t window, std::size_t heads, Rng& rng)
      : window(window), heads(heads) {
    const std::size_t span = 2 * window - 1;
    table = store.create(name + ".relative_bias", Shape{span * span, heads}, Init::Normal002, rng);
  }

  /// Table row for each (query, key) pair of an m x m window, m <= window.
  /// A clamped window reads the central part of the table.
  IndexMap index(std::size_t m) const {
    const std::size_t span = 2 * window - 1, T = m * m;
    auto idx = std::make_shared<std::vector<std::int64_t>>(heads * T * T);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t p = 0; p < T; ++p)
        for (std::size_t q = 0; q < T; ++q) {
          const std::size_t dy = p / m + window - 1 - q / m;
          const std::size_t dx = p % m + window - 1 - q % m;
          (*idx)[(h * T + p) * T + q] = static_cast<std::int64_t>((dy * span + dx) * heads + h);
        }
    return idx;
  }

  /// B as [heads, m^2, m^2].
  Tensor matrix(std::size_t m) const {
    if (m > window) throw DimensionError("relative bias built for window " + std::to_string(window) + ", asked for " + std::to_string(m));
    return gather(table, index(m), Shape{heads, m * m, m * m});
  }
};

/// Multi-head self-attention inside windows: SoftMax(QK^T/sqrt(d_head) + B [+ shift mask]) V.
struct WindowAttention {
  Linear qkv;
  Linear proj;
  RelativePositionBias bias;
  std::size_t dim = 0, heads = 0;

  WindowAttention() = default;
  WindowAttention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, std::size_t window, Rng& rng)
      : dim(dim), heads(heads) {
    if (dim % heads != 0) throw ConfigError(name + ": width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    qkv = Linear(store, name + ".qkv", dim, 3 * dim, rng, Init::Normal002);
    proj = Linear(store, name + ".proj", dim, dim, rng, Init::Normal002);
    bias = RelativePositionBias(store, name, window, heads, rng);
  }

  /// tokens: [nW, M^2, C]; shift_mask: [nW, 1, M^2, M^2] or undefined.
  Tensor operator()(const Tensor& tokens, const Tensor& shift_mask) const {
    const std::size_t nw = tokens.dim(0), T = tokens.dim(1), C = tokens.dim(2);
    if (C % heads != 0) throw ConfigError("window attention: width " + std::to_string(C) + " not divisible by " + std::to_string(heads));
    const auto m = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(T))));
    if (m * m != T) throw DimensionError("window attention: " + std::to_string(T) + " tokens is not a square window");
    const std::size_t dh = C / heads;
    const Tensor packed = permute(reshape(qkv(tokens), Shape{nw, T, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3,nW,h,T,dh]
    const Tensor q = reshape(slice(packed, 0, 0, 1), Shape{nw, heads, T, dh});
    const Tensor k = reshape(slice(packed, 0, 1, 1), Shape{nw, heads, T, dh});
    const Tensor v = reshape(slice(packed, 0, 2, 1), Shape{nw, heads, T, dh});
    Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    scores = add(scores, bias.matrix(m));
    if (shift_mask.defined()) scores = add(scores, shift_mask);
    const Tensor attn = softmax_lastdim(scores);
    const Tensor ctx = permute(matmul(attn, v), {0, 2, 1, 3});  // [nW, T, h, dh]
    return proj(reshape(ctx, Shape{nw, T, C}));
  }
};

/// LN -> (S)W-MSA -> residual -> LN -> MLP -> residual.
struct SwinBlock {
  LayerNorm norm1, norm2;
  WindowAttention attn;
  Mlp mlp;
  bool shifted = false;
  std::size_t window = 0;

  SwinBlock() = default;
  SwinBlock(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads, std::size_t window,
            std::size_t mlp_ratio, bool shifted, Rng& rng)
      : shifted(shifted), window(window) {
    norm1 = LayerNorm(store, name + ".norm1", dim, rng);
    attn = WindowAttention(store, name + ".attn", dim, heads, window, rng);
    norm2 = LayerNorm(store, name + ".norm2", dim, rng);
    mlp = Mlp(store, name + ".mlp", {dim, dim * mlp_ratio, dim}, rng, Init::Normal002);
  }

  Tensor operator()(const Tensor& x, const WindowLayout& layout) const {
    const std::size_t C = x.dim(1), T = layout.window * layout.window;
    const Tensor windows = reshape(gather_rows(norm1(x), layout.to_windows), Shape{layout.num_windows, T, C});
    const Tensor attended = gather_rows(reshape(attn(windows, layout.shift_mask), Shape{layout.num_windows * T, C}), layout.from_windows);
    const Tensor h = add(x, attended);
    return add(h, mlp(norm2(h)));
  }
};

/// 2x2 neighbourhood concatenation -> LN -> linear 4C -> 2C. Odd extents are zero-padded.
struct PatchMerging {
  LayerNorm norm;
  Linear reduction;

  PatchMerging() = default;
  PatchMerging(ParameterStore& store, const std::string& name, std::size_t dim, Rng& rng) {
    norm = LayerNorm(store, name + ".norm", 4 * dim, rng);
    reduction = Linear(store, name + ".reduction", 4 * dim, 2 * dim, rng, Init::Normal002, false);
  }

  Tensor operator()(const Tensor& x, std::size_t height, std::size_t width) const {
    const std::size_t C = x.dim(1);
    const std::size_t h2 = (height + 1) / 2, w2 = (width + 1) / 2;
    auto idx = std::make_shared<std::vector<std::int64_t>>(h2 * w2 * 4 * C);
    static constexpr std::size_t di[4] = {0, 1, 0, 1};
    static constexpr std::size_t dj[4] = {0, 0, 1, 1};
    for (std::size_t i = 0; i < h2; ++i)
      for (std::size_t j = 0; j < w2; ++j)
        for (std::size_t q = 0; q < 4; ++q) {
          const std::size_t si = 2 * i + di[q], sj = 2 * j + dj[q];
          for (std::size_t c = 0; c < C; ++c) {
            (*idx)[((i * w2 + j) * 4 + q) * C + c] =
                (si < height && sj < width) ? static_cast<std::int64_t>((si * width + sj) * C + c) : -1;
          }
        }
    return reduction(norm(gather(x, idx, Shape{h2 * w2, 4 * C})));
  }
};

struct StageOutput {
  Tensor level;  // [C_l, H_l, W_l]
  Tensor next;   // merged tokens [H_{l+1} W_{l+1}, 2 C_l]; undefined after the last stage
  std::size_t next_height = 0, next_width = 0;
};

inline Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width) {
  return reshape(transpose_last(tokens), Shape{tokens.dim(1), height, width});
}

inline Tensor map_to_tokens(const Tensor& map) {
  return transpose_last(reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

struct SwinStage {
  std::vector<SwinBlock> blocks;
  PatchMerging merge;
  bool has_merge = false;
  std::size_t window = 0;

  SwinStage() = default;
  SwinStage(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t depth, std::size_t heads,
            std::size_t window, std::size_t mlp_ratio, bool with_merge, Rng& rng)
      : has_merge(with_merge), window(window) {
    for (std::size_t b = 0; b < depth; ++b) {
      blocks.emplace_back(store, name + ".block" + std::to_string(b), dim, heads, window, mlp_ratio, b % 2 == 1, rng);
    }
    if (with_merge) merge = PatchMerging(store, name + ".merge", dim, rng);
  }

  StageOutput operator()(Tensor x, std::size_t height, std::size_t width) const {
    const WindowLayout regular = WindowLayout::build(height, width, window, false);
    const WindowLayout shifted = WindowLayout::build(height, width, window, true);
    for (const auto& block : blocks) x = block(x, block.shifted ? shifted : regular);
    StageOutput out;
    out.level = tokens_to_map(x, height, width);
    if (has_merge) {
      out.next = merge(x, height, width);
      out.next_height = (height + 1) / 2;
      out.next_width = (width + 1) / 2;
    }
    return out;
  }
};

/// Non-overlapping 4x4 patch projection: [3,H,W] -> [H/4 * W/4, C1] tokens.
struct PatchEmbed {
  Linear proj;
  std::size_t patch = 4;

  PatchEmbed() = default;
  PatchEmbed(ParameterStore& store, const std::string& name, std::size_t in_channels, std::size_t dim, std::size_t patch, Rng& rng)
      : patch(patch) {
    proj = Linear(store, name + ".proj", in_channels * patch * patch, dim, rng, Init::Normal002);
  }

  Tensor operator()(const Tensor& image) const {
    if (image.rank() != 3) throw InputError("patch_embed: expected [C,H,W] image, got " + shape_str(image.shape()));
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (H % patch != 0 || W % patch != 0 || H == 0 || W == 0) {
      throw InputError("image size " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by the patch stride " +
                       std::to_string(patch) + "; pad or tile the input");
    }
    const std::size_t hp = H / patch, wp = W / patch, f = C * patch * patch;
    auto idx = std::make_shared<std::vector<std::int64_t>>(hp * wp * f);
    for (std::size_t i = 0; i < hp; ++i)
      for (std::size_t j = 0; j < wp; ++j)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < patch; ++a)
            for (std::size_t b = 0; b < patch; ++b) {
              (*idx)[(i * wp + j) * f + (c * patch + a) * patch + b] =
                  static_cast<std::int64_t>((c * H + i * patch + a) * W + j * patch + b);
            }
    return proj(gather(image, idx, Shape{hp * wp, f}));
  }
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterStore& store, const EncoderConfig& config, Rng& rng, const std::string& name = "encoder") : config_(config) {
    config.validate();
    embed_ = PatchEmbed(store, name + ".patch_embed", 3, config.embed_dim, config.patch_size, rng);
    for (std::size_t s = 0; s < 4; ++s) {
      stages_.emplace_back(store, name + ".stage" + std::to_string(s + 1), config.stage_dim(s), config.depths[s], config.heads[s],
                           config.window, config.mlp_ratio, s + 1 < 4, rng);
    }
  }

  const EncoderConfig& config() const { return config_; }
  const PatchEmbed& patch_embed() const { return embed_; }
  const SwinStage& stage(std::size_t s) const { return stages_.at(s); }

  /// Four level maps [C_l, H_l, W_l] for one image.
  std::vector<Tensor> operator()(const Tensor& image) const {
    Tensor x = embed_(image);
    std::size_t h = image.dim(1) / config_.patch_size, w = image.dim(2) / config_.patch_size;
    std::vector<Tensor> levels;
    for (const auto& stage : stages_) {
      StageOutput out = stage(x, h, w);
      levels.push_back(out.level);
      x = out.next;
      h = out.next_height;
      w = out.next_width;
    }
    return levels;
  }

  /// Shared-weight forward of both acquisitions plus channel-wise concatenation per level.
  BitemporalFeatures siamese(const Tensor& image_t1, const Tensor& image_t2) const {
    if (image_t1.shape() != image_t2.shape()) {
      throw InputError("bitemporal images differ in shape: " + shape_str(image_t1.shape()) + " vs " + shape_str(image_t2.shape()));
    }
    BitemporalFeatures f;
    f.t1 = (*this)(image_t1);
    f.t2 = (*this)(image_t2);
    for (std::size_t l = 0; l < f.t1.size(); ++l) f.delta.push_back(concat({f.t1[l], f.t2[l]}, 0));
    return f;
  }

 private:
  EncoderConfig config_;
  PatchEmbed embed_;
  std::vector<SwinStage> stages_;
};

}  // namespace maskcd
