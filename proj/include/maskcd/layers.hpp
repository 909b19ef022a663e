#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskcd/ops/nn.hpp"
#include "maskcd/parameter.hpp"

namespace maskcd {

/// y = x W + b with W stored [in, out]; applies to the last axis of x.
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when constructed without bias

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         Init init = Init::XavierUniform, bool with_bias = true) {
    weight = store.create(name + ".weight", Shape{in, out}, init, rng);
    if (with_bias) bias = store.create(name + ".bias", Shape{out}, Init::Zeros, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t dim, Rng& rng) {
    gain = store.create(name + ".gain", Shape{dim}, Init::Ones, rng);
    bias = store.create(name + ".bias", Shape{dim}, Init::Zeros, rng);
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

/// Linear layers with GELU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::vector<std::size_t>& dims, Rng& rng,
      Init init = Init::XavierUniform) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers.emplace_back(store, name + ".fc" + std::to_string(i), dims[i], dims[i + 1], rng, init);
    }
  }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = gelu(x);
    }
    return x;
  }
};

/// Scaled dot-product attention split across heads.
///   q: [Nq, D], k: [Nk, D], v: [Nk, D]
///   additive_mask: optional [Nq, Nk] (0 or -inf), shared by all heads
/// Returns concatenated head outputs [Nq, D] (no output projection).
/// `degenerate_rows` collects (head * Nq + row) for rows whose mask removed every key.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                   const Tensor& additive_mask, std::vector<std::size_t>* degenerate_rows = nullptr) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (d % heads != 0) throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const Tensor qh = permute(reshape(q, Shape{nq, heads, dh}), {1, 0, 2});  // [h, Nq, dh]
  const Tensor kt = permute(reshape(k, Shape{nk, heads, dh}), {1, 2, 0});  // [h, dh, Nk]
  const Tensor vh = permute(reshape(v, Shape{nk, heads, dh}), {1, 0, 2});  // [h, Nk, dh]
  Tensor scores = scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (additive_mask.defined()) scores = add(scores, additive_mask);
  std::vector<std::size_t> degenerate;
  const Tensor attn = softmax_lastdim(scores, degenerate);
  if (degenerate_rows) {
    degenerate_rows->insert(degenerate_rows->end(), degenerate.begin(), degenerate.end());
  } else if (!degenerate.empty()) {
    throw NumericError("attention row with every key masked");
  }
  const Tensor ctx = matmul(attn, vh);  // [h, Nq, dh]
  return reshape(permute(ctx, {1, 0, 2}), Shape{nq, d});
}

}  // namespace maskcd
