#pragma once

#include <unordered_map>

#include "vig/dataset.hpp"
#include "vig/model.hpp"

namespace vig {

struct TrainConfig {
  int epochs = 20;
  int batch = 32;
  double lr = 1e-3;
  int warmup_epochs = 1;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  double drop_path = 0.0;  // informational; set on the model config at build
  uint64_t seed = 0;
  bool augment_flip = true;
  int crop_pad = 2;
  bool serial = false;     // single-threaded, bitwise-reproducible runs
  std::string out_dir;     // when set: metrics.csv + best.ckpt
  double stop_at_val_top1 = -1.0;  // optional early stop once reached
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr);

// Decoupled AdamW with bias-corrected moments; decay is applied
// multiplicatively before the adaptive step.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::unordered_map<std::string, Tensor> m, v;

  void step(const std::vector<std::pair<std::string, Tensor>>& params,
            const std::unordered_map<std::string, Tensor>& grads, double lr,
            double weight_decay);
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_top1 = 0.0, val_top5 = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_top1 = 0.0;
  std::string checkpoint_path;

  std::string metrics_csv() const;
};

// Supervised training with the simplified recipe (AdamW, cosine schedule,
// label smoothing, flip/crop augmentation). Aborts with NumericError after 3
// consecutive non-finite losses.
TrainResult train(Model& m, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg);

// Top-1 / top-5 accuracy; ties resolved toward the lower class index.
std::pair<double, double> evaluate(Model& m, const Dataset& ds, int batch = 64);

// Multinomial logistic regression on raw pixels; reference floor for the
// dataset-nontriviality check.
double linear_baseline_accuracy(const Dataset& train_set, const Dataset& val_set, int epochs,
                                double lr, uint64_t seed);

}  // namespace vig
