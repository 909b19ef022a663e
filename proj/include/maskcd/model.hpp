#pragma once

#include <string>
#include <vector>

#include "maskcd/clcrp.hpp"
#include "maskcd/decoder.hpp"
#include "maskcd/encoder.hpp"
#include "maskcd/mask_head.hpp"

namespace maskcd {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t dim = 64;
  std::size_t queries = 75;
  std::size_t decoder_heads = 8;
  DeformAttnConfig deform;
  std::size_t mask_mlp_layers = 3;
  bool disable_deform_mhsa = false;
  bool disable_masked_attention = false;
  bool per_pixel_head = false;
  bool two_logit_classes = false;

  void validate() const {
    encoder.validate();
    if (dim == 0 || dim % 4 != 0) throw ConfigError("model.dim = " + std::to_string(dim) + " must be a positive multiple of 4");
    if (queries == 0) throw ConfigError("model.queries must be positive");
    if (decoder_heads == 0 || dim % decoder_heads != 0) throw ConfigError("model.decoder_heads must divide model.dim");
    if (deform.heads == 0 || dim % deform.heads != 0) throw ConfigError("model.deform_heads must divide model.dim");
    if (deform.points == 0) throw ConfigError("model.deform_points must be positive");
    if (mask_mlp_layers == 0) throw ConfigError("model.mask_mlp_layers must be positive");
  }
};

struct ModelOutput {
  PerPixelEmbeddings embeddings;
  std::vector<ProbMaskPair> stages;  // one prediction set per decoder stage; back() is the final one
  Tensor per_pixel_logits;           // [2, H1, W1] with the per-pixel head, else undefined
};

class MaskCdModel {
 public:
  explicit MaskCdModel(const ModelConfig& config, std::uint64_t seed = kDefaultSeed) : config_(config) {
    config.validate();
    Rng rng(seed);
    encoder_ = Encoder(store_, config.encoder, rng);
    std::vector<std::size_t> channels;
    for (std::size_t s = 0; s < 4; ++s) channels.push_back(2 * config.encoder.stage_dim(s));
    clcrp_ = Clcrp(store_, ClcrpConfig{config.dim, config.deform, config.disable_deform_mhsa}, channels, rng);
    if (config.per_pixel_head) {
      pixel_kernel_ = store_.create("pixel_head.weight", Shape{2, config.dim, 1, 1}, Init::XavierUniform, rng);
      pixel_bias_ = store_.create("pixel_head.bias", Shape{2}, Init::Zeros, rng);
    } else {
      head_ = MaskHead(store_, MaskHeadConfig{config.two_logit_classes, config.mask_mlp_layers}, config.dim, rng);
      decoder_ = Decoder(store_, DecoderConfig{config.queries, config.decoder_heads, 4, config.disable_masked_attention}, config.dim, rng);
    }
  }

  MaskCdModel(const MaskCdModel&) = delete;
  MaskCdModel& operator=(const MaskCdModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const Encoder& encoder() const { return encoder_; }
  const Clcrp& clcrp() const { return clcrp_; }
  const Decoder& decoder() const { return decoder_; }
  const MaskHead& head() const { return head_; }

  /// Images are [3, H, W] with values in [0, 1].
  ModelOutput forward(const Tensor& image_t1, const Tensor& image_t2) const {
    const BitemporalFeatures f = encoder_.siamese(add_scalar(image_t1, -0.5), add_scalar(image_t2, -0.5));
    ModelOutput out;
    out.embeddings = clcrp_(f.delta);
    const Tensor& gamma1 = out.embeddings.gamma[0];
    if (config_.per_pixel_head) {
      out.per_pixel_logits = conv2d(gamma1, pixel_kernel_, pixel_bias_, 0);
      return out;
    }
    const DecoderOutput d = decoder_(out.embeddings.gamma, head_.mask_mlp());
    for (const auto& x : d.stages) out.stages.push_back(head_(x, gamma1));
    return out;
  }

  ChangeMap change_map(const ModelOutput& out) const {
    return config_.per_pixel_head ? per_pixel_change_map(out.per_pixel_logits) : assemble_change_map(out.stages.back());
  }

  ChangeMap predict(const Tensor& image_t1, const Tensor& image_t2) const {
    NoGradGuard no_grad;
    return change_map(forward(image_t1, image_t2));
  }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Encoder encoder_;
  Clcrp clcrp_;
  MaskHead head_;
  Decoder decoder_;
  Tensor pixel_kernel_, pixel_bias_;
};

}  // namespace maskcd
