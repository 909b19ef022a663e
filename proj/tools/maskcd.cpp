#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "maskcd/io/change_map.hpp"
#include "maskcd/train.hpp"

namespace fs = std::filesystem;
using namespace maskcd;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct TrainFlags {
  std::string config_path, run_dir, data_root, resume;
  std::optional<std::size_t> steps, batch_size, queries, checkpoint_every, synthetic_train, synthetic_val, tile_size;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool synthetic = false, no_deform = false, no_masked = false, per_pixel = false, two_logit = false;
};

fs::path resolve_run_dir(const std::string& dir) {
  const fs::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("MASKCD_RUN_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

RunConfig effective_config(const TrainFlags& f) {
  RunConfig c = f.config_path.empty() ? RunConfig{} : load_config_file(f.config_path);
  if (f.synthetic) c.data.synthetic = true;
  if (!f.data_root.empty()) c.data.root = f.data_root;
  if (f.tile_size) c.data.tile_size = *f.tile_size;
  if (f.synthetic_train) c.data.synthetic_train = *f.synthetic_train;
  if (f.synthetic_val) c.data.synthetic_val = *f.synthetic_val;
  if (f.steps) c.train.steps = *f.steps;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.seed) c.train.seed = *f.seed;
  if (f.lr) c.train.lr = *f.lr;
  if (f.checkpoint_every) c.train.checkpoint_every = *f.checkpoint_every;
  if (f.queries) c.model.queries = *f.queries;
  if (f.no_deform) c.model.disable_deform_mhsa = true;
  if (f.no_masked) c.model.disable_masked_attention = true;
  if (f.per_pixel) c.model.per_pixel_head = true;
  if (f.two_logit) c.model.two_logit_classes = true;
  if (!f.run_dir.empty()) c.output.run_dir = f.run_dir;
  // Round-trip through JSON so flag overrides get the same validation as file values.
  return config_from_json(to_json(c));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
}

/// Keeps log lines with step <= `last_step` (used when resuming into an existing run).
void truncate_log(const fs::path& path, std::size_t last_step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("step").get<std::size_t>() <= last_step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

int cmd_train(const TrainFlags& flags) {
  const RunConfig config = effective_config(flags);
  const fs::path run = resolve_run_dir(config.output.run_dir);
  fs::create_directories(run / "checkpoints");
  write_text(run / "config.json", to_json(config).dump(2) + "\n");

  Trainer trainer(config, load_train_data(config.data, config.train.seed));
  const fs::path log_path = run / "loss_log.jsonl";
  if (!flags.resume.empty()) {
    trainer.resume(flags.resume);
    truncate_log(log_path, trainer.step());
  } else {
    write_text(log_path, "");
  }
  std::ofstream log(log_path, std::ios::app);
  char name[64];
  while (trainer.step() < config.train.steps) {
    const StepRecord rec = trainer.train_step();
    log << step_record_json(rec) << '\n' << std::flush;
    if (rec.step % config.train.checkpoint_every == 0 || rec.step == config.train.steps) {
      std::snprintf(name, sizeof name, "step_%06zu.mkcd", rec.step);
      trainer.save(run / "checkpoints" / name);
    }
  }
  trainer.save(run / "last.mkcd");
  if (!trainer.data().val.empty()) {
    write_text(run / "metrics_val.json", report_to_json(evaluate(trainer.model(), trainer.data().val)).dump(2) + "\n");
  }
  std::cout << "run written to " << run.string() << "\n";
  return kOk;
}

struct EvalFlags {
  std::string checkpoint, data_root, split = "val", out;
  bool synthetic = false;
  std::size_t count = 8, size = 64, shapes = 4;
  std::uint64_t seed = kDefaultSeed + 1;
};

int cmd_eval(const EvalFlags& f) {
  const auto model = load_model(f.checkpoint);
  std::vector<io::Sample> samples;
  if (f.synthetic) {
    samples = io::synthetic_split(f.seed, f.count, f.size, f.shapes);
  } else {
    if (f.data_root.empty()) throw ConfigError("eval needs --data-root or --synthetic");
    samples = io::load_samples(io::load_tile_dataset(f.data_root, f.split));
  }
  if (samples.empty()) throw InputError("split '" + f.split + "' has no tiles");
  const std::string text = report_to_json(evaluate(*model, samples)).dump(2) + "\n";
  if (f.out.empty()) {
    std::cout << text;
  } else {
    write_text(f.out, text);
  }
  return kOk;
}

struct PredictFlags {
  std::string checkpoint, t1, t2, out, overlay;
};

int cmd_predict(const PredictFlags& f) {
  const auto model = load_model(f.checkpoint);
  const io::Image8 a = io::read_png(f.t1, 3), b = io::read_png(f.t2, 3);
  if (a.width != b.width || a.height != b.height) {
    throw InputError("images differ in size: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " + std::to_string(b.width) +
                     "x" + std::to_string(b.height));
  }
  const ChangeMap map = model->predict(io::image_to_tensor(a), io::image_to_tensor(b));
  std::optional<std::vector<std::uint8_t>> gt;
  if (!f.overlay.empty()) gt = io::binarize_label(io::read_png(f.overlay, 1), f.overlay, false);
  io::write_change_map(map, gt, f.out);
  return kOk;
}

struct SynthFlags {
  std::string out, split = "train";
  std::size_t count = 8, size = 64, shapes = 4;
  std::uint64_t seed = kDefaultSeed;
};

int cmd_synth(const SynthFlags& f) {
  io::write_tile_dataset(f.out, f.split, io::synthetic_split(f.seed, f.count, f.size, f.shapes));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-classification change detection for bitemporal image pairs"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints, a loss log and validation metrics");
  train->add_option("--config", tf.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  train->add_option("--run-dir", tf.run_dir, "Output directory (relative paths resolve under $MASKCD_RUN_ROOT)");
  train->add_option("--data-root", tf.data_root, "Dataset root with <split>/{A,B,label}");
  train->add_option("--resume", tf.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--steps", tf.steps);
  train->add_option("--batch-size", tf.batch_size);
  train->add_option("--seed", tf.seed);
  train->add_option("--lr", tf.lr);
  train->add_option("--checkpoint-every", tf.checkpoint_every);
  train->add_option("--queries", tf.queries);
  train->add_option("--tile-size", tf.tile_size);
  train->add_option("--synthetic-train", tf.synthetic_train, "Number of synthetic training pairs");
  train->add_option("--synthetic-val", tf.synthetic_val, "Number of synthetic validation pairs");
  train->add_flag("--synthetic", tf.synthetic, "Use generated pairs instead of a dataset");
  train->add_flag("--disable-deform-mhsa", tf.no_deform);
  train->add_flag("--disable-masked-attention", tf.no_masked);
  train->add_flag("--per-pixel-head", tf.per_pixel);
  train->add_flag("--two-logit-classes", tf.two_logit);

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a split");
  eval->add_option("--checkpoint", ef.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data-root", ef.data_root);
  eval->add_option("--split", ef.split);
  eval->add_option("--out", ef.out, "Report path (stdout if omitted)");
  eval->add_flag("--synthetic", ef.synthetic);
  eval->add_option("--count", ef.count);
  eval->add_option("--size", ef.size);
  eval->add_option("--shapes", ef.shapes);
  eval->add_option("--seed", ef.seed);

  PredictFlags pf;
  auto* predict = app.add_subcommand("predict", "Write the change map of one image pair");
  predict->add_option("--checkpoint", pf.checkpoint)->required()->check(CLI::ExistingFile);
  predict->add_option("--t1", pf.t1)->required()->check(CLI::ExistingFile);
  predict->add_option("--t2", pf.t2)->required()->check(CLI::ExistingFile);
  predict->add_option("--out", pf.out)->required();
  predict->add_option("--overlay", pf.overlay, "Reference label; writes the TP/TN/FP/FN colour map")->check(CLI::ExistingFile);

  SynthFlags sf;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset split");
  synth->add_option("--out", sf.out)->required();
  synth->add_option("--split", sf.split);
  synth->add_option("--count", sf.count);
  synth->add_option("--size", sf.size);
  synth->add_option("--shapes", sf.shapes);
  synth->add_option("--seed", sf.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(tf);
    if (*eval) return cmd_eval(ef);
    if (*predict) return cmd_predict(pf);
    if (*synth) return cmd_synth(sf);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InputError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
