#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcd/config.hpp"
#include "maskcd/io/checkpoint.hpp"
#include "maskcd/io/synthetic.hpp"
#include "maskcd/metrics.hpp"

namespace maskcd {

struct StepRecord {
  std::size_t step = 0;  // 1-based
  double lr = 0, total = 0, cls = 0, bce = 0, dice = 0;
};

inline std::string step_record_json(const StepRecord& r) {
  const nlohmann::json j = {{"step", r.step}, {"lr", r.lr}, {"total", r.total}, {"cls", r.cls}, {"bce", r.bce}, {"dice", r.dice}};
  return j.dump();
}

struct TrainData {
  std::vector<io::Sample> train;
  std::vector<io::Sample> val;
};

inline TrainData load_train_data(const DataConfig& d, std::uint64_t seed) {
  TrainData out;
  if (d.synthetic) {
    const io::SyntheticOptions opt{d.synthetic_ellipse_fraction, 0.02};
    out.train = io::synthetic_split(seed, d.synthetic_train, d.tile_size, d.synthetic_shapes, opt);
    out.val = io::synthetic_split(seed + 1, d.synthetic_val, d.tile_size, d.synthetic_shapes, opt);
    return out;
  }
  if (d.root.empty()) throw ConfigError("config key 'data.root' is required unless data.synthetic is set");
  out.train = io::load_samples(io::load_tile_dataset(d.root, d.train_split), d.strict_labels);
  if (out.train.empty()) throw InputError("training split '" + d.train_split + "' is empty");
  if (!d.val_split.empty() && std::filesystem::is_directory(std::filesystem::path(d.root) / d.val_split)) {
    out.val = io::load_samples(io::load_tile_dataset(d.root, d.val_split), d.strict_labels);
  }
  return out;
}

/// Loss of one sample; gradients flow into the model parameters.
struct SampleLoss {
  Tensor total;
  double cls = 0, bce = 0, dice = 0;
};

inline SampleLoss sample_loss(const MaskCdModel& model, const io::Sample& s, const LossWeights& w, std::size_t mask_stride = 4) {
  const ModelOutput out = model.forward(s.t1, s.t2);
  SampleLoss r;
  if (model.config().per_pixel_head) {
    r.total = mask_stride == 1 ? per_pixel_loss(upsample_bilinear(out.per_pixel_logits, 4), s.label)
                               : per_pixel_loss(out.per_pixel_logits, downsample_label(s.label, s.height, s.width, mask_stride));
    r.cls = r.total.item();
    return r;
  }
  const LossBreakdown b = maskcd_loss(out.stages, make_segments(s.label, s.height, s.width, mask_stride), w);
  r.total = b.total;
  r.cls = b.cls;
  r.bce = b.bce;
  r.dice = b.dice;
  return r;
}

inline ConfusionCounts count_predictions(const MaskCdModel& model, const std::vector<io::Sample>& samples) {
  ConfusionCounts c;
  for (const auto& s : samples) c += confusion_counts(model.predict(s.t1, s.t2).labels, s.label);
  return c;
}

inline MetricReport evaluate(const MaskCdModel& model, const std::vector<io::Sample>& samples) {
  if (samples.empty()) throw InputError("cannot evaluate on an empty split");
  return compute_metrics(count_predictions(model, samples));
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  auto field = [](const Ratio& x) { return nlohmann::json{{"value", x.value}, {"undefined", x.undefined}}; };
  return {{"counts", {{"tp", r.counts.tp}, {"tn", r.counts.tn}, {"fp", r.counts.fp}, {"fn", r.counts.fn}}},
          {"oa", field(r.oa)},
          {"precision", field(r.precision)},
          {"recall", field(r.recall)},
          {"f1", field(r.f1)},
          {"iou_changed", field(r.iou_changed)},
          {"iou_unchanged", field(r.iou_unchanged)},
          {"miou", field(r.miou)}};
}

/// Owns the model, optimizer state, data order and RNG of one training run.
class Trainer {
 public:
  Trainer(const RunConfig& config, TrainData data)
      : config_(config), data_(std::move(data)), model_(std::make_unique<MaskCdModel>(config.model, config.train.seed)), rng_(config.train.seed ^ 0x5eedULL) {
    if (data_.train.empty()) throw InputError("training set is empty");
  }

  const RunConfig& config() const { return config_; }
  MaskCdModel& model() { return *model_; }
  const TrainData& data() const { return data_; }
  std::size_t step() const { return step_; }

  /// One optimizer step over the next mini-batch.
  StepRecord train_step() {
    const std::size_t b = config_.train.batch_size;
    const double lr = cosine_lr(config_.train.lr, config_.train.lr_floor, step_, config_.train.steps);
    StepRecord rec;
    rec.step = step_ + 1;
    rec.lr = lr;
    for (std::size_t k = 0; k < b; ++k) {
      const io::Sample& s = data_.train[next_index()];
      SampleLoss l = sample_loss(*model_, s, config_.train.weights, config_.train.mask_loss_stride);
      if (!std::isfinite(l.total.item())) throw NumericError("non-finite loss at step " + std::to_string(rec.step) + " on sample '" + s.name + "'");
      scale(l.total, 1.0 / static_cast<double>(b)).backward();
      rec.total += l.total.item() / static_cast<double>(b);
      rec.cls += l.cls / static_cast<double>(b);
      rec.bce += l.bce / static_cast<double>(b);
      rec.dice += l.dice / static_cast<double>(b);
    }
    adam_step(model_->parameters(), lr, config_.train.adam);
    ++step_;
    return rec;
  }

  nlohmann::json state_json() const {
    std::ostringstream rs;
    rs << rng_;
    return {{"config", to_json(config_)}, {"step", step_}, {"rng", rs.str()}, {"epoch", epoch_}, {"order", order_}, {"cursor", cursor_}};
  }

  void save(const std::filesystem::path& path) const { io::save_checkpoint(path, model_->parameters(), state_json()); }

  /// Restores parameters, optimizer moments, data order and RNG; the model config must match.
  void resume(const std::filesystem::path& path) {
    const io::CheckpointData ck = io::load_checkpoint(path);
    const auto stored = ck.meta.at("config").at("model");
    const auto wanted = model_to_json(config_.model);
    if (stored != wanted) {
      throw ConfigError("checkpoint '" + path.string() + "' was trained with model config " + stored.dump() + ", requested " + wanted.dump());
    }
    io::restore_parameters(model_->parameters(), ck);
    step_ = ck.meta.at("step").get<std::size_t>();
    epoch_ = ck.meta.at("epoch").get<std::size_t>();
    order_ = ck.meta.at("order").get<std::vector<std::size_t>>();
    cursor_ = ck.meta.at("cursor").get<std::size_t>();
    std::istringstream rs(ck.meta.at("rng").get<std::string>());
    rs >> rng_;
    if (!rs) throw ParseError("checkpoint '" + path.string() + "' has a malformed RNG state");
  }

 private:
  std::size_t next_index() {
    if (cursor_ >= order_.size()) {
      order_.resize(data_.train.size());
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
      ++epoch_;
    }
    return order_[cursor_++];
  }

  RunConfig config_;
  TrainData data_;
  std::unique_ptr<MaskCdModel> model_;
  Rng rng_;
  std::size_t step_ = 0, epoch_ = 0, cursor_ = 0;
  std::vector<std::size_t> order_;
};

/// Model restored from a checkpoint for inference.
inline std::unique_ptr<MaskCdModel> load_model(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  const io::CheckpointData ck = io::load_checkpoint(path);
  const ModelConfig cfg = model_from_json(ck.meta.at("config").at("model"));
  if (expected && model_to_json(*expected) != model_to_json(cfg)) {
    throw ConfigError("checkpoint '" + path.string() + "' model config " + model_to_json(cfg).dump() + " does not match requested " +
                      model_to_json(*expected).dump());
  }
  auto model = std::make_unique<MaskCdModel>(cfg);
  io::restore_parameters(model->parameters(), ck);
  return model;
}

}  // namespace maskcd
