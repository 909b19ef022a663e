// Trains a small model on a few generated pairs and prints the loss and scores.

#include <cstdio>

#include "maskcd/maskcd.hpp"

int main() {
  using namespace maskcd;
  RunConfig config;
  config.data.synthetic = true;
  config.data.synthetic_train = 4;
  config.data.synthetic_val = 4;
  config.train.steps = 20;
  config.train.batch_size = 2;
  config.train.lr = 1e-3;

  Trainer trainer(config, load_train_data(config.data, config.train.seed));
  while (trainer.step() < config.train.steps) {
    const StepRecord r = trainer.train_step();
    if (r.step % 5 == 0) std::printf("step %3zu  loss %.4f  lr %.2e\n", r.step, r.total, r.lr);
  }
  const MetricReport m = evaluate(trainer.model(), trainer.data().val);
  std::printf("val  OA %.4f  F1 %.4f  mIoU %.4f\n", m.oa.value, m.f1.value, m.miou.value);
}
