#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "maskcd/losses.hpp"
#include "maskcd/model.hpp"

namespace maskcd {

struct TrainConfig {
  double lr = 5e-5;
  double lr_floor = 1e-7;
  std::size_t batch_size = 4;
  std::size_t steps = 500;
  std::uint64_t seed = kDefaultSeed;
  std::size_t checkpoint_every = 100;
  std::size_t mask_loss_stride = 1;  // 1: upsampled masks vs full label; 4: stride-4 masks vs downsampled label
  LossWeights weights;
  AdamOptions adam;
};

struct DataConfig {
  std::string root;
  std::string train_split = "train";
  std::string val_split = "val";
  std::size_t tile_size = 64;
  bool strict_labels = true;
  bool synthetic = false;
  std::size_t synthetic_train = 8;
  std::size_t synthetic_val = 8;
  std::size_t synthetic_shapes = 4;
  double synthetic_ellipse_fraction = 0.5;
};

struct OutputConfig {
  std::string run_dir = "runs/default";
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  OutputConfig output;
};

/// Cosine annealing from lr0 at t = 0 to `floor` at t = total.
inline double cosine_lr(double lr0, double floor, std::size_t t, std::size_t total) {
  if (total == 0) return lr0;
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return floor + (lr0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace detail {

using nlohmann::json;

/// Reads keys of one object, rejecting any it does not know.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config key '" + path_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + key(it.key()) + "'");
    }
  }
  template <class T>
  void read(const char* name, T& out) {
    seen_.insert(name);
    if (!j_.contains(name)) return;
    try {
      out = j_.at(name).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key(name) + "' has an invalid value: " + e.what());
    }
  }
  template <class T>
  void read_positive(const char* name, T& out) {
    read(name, out);
    if (!(out > T{0})) throw ConfigError("config key '" + key(name) + "' must be positive");
  }
  void read_nonneg(const char* name, double& out) {
    read(name, out);
    if (!(out >= 0.0)) throw ConfigError("config key '" + key(name) + "' must be non-negative");
  }
  const json& child(const char* name) {
    seen_.insert(name);
    return j_.contains(name) ? j_.at(name) : empty();
  }
  std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {
      {"encoder",
       {{"patch_size", m.encoder.patch_size},
        {"embed_dim", m.encoder.embed_dim},
        {"depths", m.encoder.depths},
        {"heads", m.encoder.heads},
        {"window", m.encoder.window},
        {"mlp_ratio", m.encoder.mlp_ratio}}},
      {"dim", m.dim},
      {"queries", m.queries},
      {"decoder_heads", m.decoder_heads},
      {"deform_heads", m.deform.heads},
      {"deform_points", m.deform.points},
      {"deform_layers", m.deform.layers},
      {"mask_mlp_layers", m.mask_mlp_layers},
      {"disable_deform_mhsa", m.disable_deform_mhsa},
      {"disable_masked_attention", m.disable_masked_attention},
      {"per_pixel_head", m.per_pixel_head},
      {"two_logit_classes", m.two_logit_classes},
  };
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  return {
      {"model", model_to_json(c.model)},
      {"train",
       {{"lr", t.lr},
        {"lr_floor", t.lr_floor},
        {"batch_size", t.batch_size},
        {"steps", t.steps},
        {"seed", t.seed},
        {"checkpoint_every", t.checkpoint_every},
        {"mask_loss_stride", t.mask_loss_stride},
        {"weights",
         {{"cls", t.weights.cls}, {"mask", t.weights.mask}, {"bce", t.weights.bce}, {"dice", t.weights.dice}, {"no_object", t.weights.no_object}}},
        {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}}}},
      {"data",
       {{"root", c.data.root},
        {"train_split", c.data.train_split},
        {"val_split", c.data.val_split},
        {"tile_size", c.data.tile_size},
        {"strict_labels", c.data.strict_labels},
        {"synthetic", c.data.synthetic},
        {"synthetic_train", c.data.synthetic_train},
        {"synthetic_val", c.data.synthetic_val},
        {"synthetic_shapes", c.data.synthetic_shapes},
        {"synthetic_ellipse_fraction", c.data.synthetic_ellipse_fraction}}},
      {"output", {{"run_dir", c.output.run_dir}}},
  };
}

inline ModelConfig model_from_json(const nlohmann::json& j, const std::string& path = "model") {
  ModelConfig m;
  detail::Section s(j, path);
  {
    detail::Section e(s.child("encoder"), s.key("encoder"));
    e.read("patch_size", m.encoder.patch_size);
    e.read_positive("embed_dim", m.encoder.embed_dim);
    e.read("depths", m.encoder.depths);
    e.read("heads", m.encoder.heads);
    e.read_positive("window", m.encoder.window);
    e.read_positive("mlp_ratio", m.encoder.mlp_ratio);
  }
  s.read_positive("dim", m.dim);
  s.read_positive("queries", m.queries);
  s.read_positive("decoder_heads", m.decoder_heads);
  s.read_positive("deform_heads", m.deform.heads);
  s.read_positive("deform_points", m.deform.points);
  s.read("deform_layers", m.deform.layers);
  s.read_positive("mask_mlp_layers", m.mask_mlp_layers);
  s.read("disable_deform_mhsa", m.disable_deform_mhsa);
  s.read("disable_masked_attention", m.disable_masked_attention);
  s.read("per_pixel_head", m.per_pixel_head);
  s.read("two_logit_classes", m.two_logit_classes);
  return m;
}

/// Fills a RunConfig from JSON; missing keys keep their defaults, unknown keys are errors.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Section root(j, "");
  c.model = model_from_json(root.child("model"));
  {
    detail::Section t(root.child("train"), "train");
    t.read_positive("lr", c.train.lr);
    t.read_nonneg("lr_floor", c.train.lr_floor);
    t.read_positive("batch_size", c.train.batch_size);
    t.read("steps", c.train.steps);
    t.read("seed", c.train.seed);
    t.read_positive("checkpoint_every", c.train.checkpoint_every);
    t.read("mask_loss_stride", c.train.mask_loss_stride);
    if (c.train.mask_loss_stride != 1 && c.train.mask_loss_stride != 4) throw ConfigError("config key 'train.mask_loss_stride' must be 1 or 4");
    {
      detail::Section w(t.child("weights"), "train.weights");
      w.read_nonneg("cls", c.train.weights.cls);
      w.read_nonneg("mask", c.train.weights.mask);
      w.read_nonneg("bce", c.train.weights.bce);
      w.read_nonneg("dice", c.train.weights.dice);
      w.read_nonneg("no_object", c.train.weights.no_object);
    }
    {
      detail::Section a(t.child("adam"), "train.adam");
      a.read_nonneg("beta1", c.train.adam.beta1);
      a.read_nonneg("beta2", c.train.adam.beta2);
      a.read_positive("eps", c.train.adam.eps);
      if (c.train.adam.beta1 >= 1.0 || c.train.adam.beta2 >= 1.0) throw ConfigError("config keys 'train.adam.beta1/beta2' must be below 1");
    }
  }
  {
    detail::Section d(root.child("data"), "data");
    d.read("root", c.data.root);
    d.read("train_split", c.data.train_split);
    d.read("val_split", c.data.val_split);
    d.read_positive("tile_size", c.data.tile_size);
    d.read("strict_labels", c.data.strict_labels);
    d.read("synthetic", c.data.synthetic);
    d.read_positive("synthetic_train", c.data.synthetic_train);
    d.read("synthetic_val", c.data.synthetic_val);
    d.read("synthetic_shapes", c.data.synthetic_shapes);
    d.read_nonneg("synthetic_ellipse_fraction", c.data.synthetic_ellipse_fraction);
  }
  {
    detail::Section o(root.child("output"), "output");
    o.read("run_dir", c.output.run_dir);
  }
  try {
    c.model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return c;
}

inline RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return config_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace maskcd
