#include "vig/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vig/checkpoint.hpp"

namespace vig {

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
  if (step > total_steps) throw ContractError("cosine_lr: step beyond schedule");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * double(step) / double(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(progress * M_PI));
}

void AdamW::step(const std::vector<std::pair<std::string, Tensor>>& params,
                 const std::unordered_map<std::string, Tensor>& grads, double lr,
                 double weight_decay) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (const auto& [name, p] : params) {
    auto git = grads.find(name);
    Tensor g = git != grads.end() ? git->second : Tensor::zeros(p.shape(), p.dtype());
    require_same_shape(p, g, "adamw");
    auto& ms = m.try_emplace(name, Tensor::zeros(p.shape(), p.dtype())).first->second;
    auto& vs = v.try_emplace(name, Tensor::zeros(p.shape(), p.dtype())).first->second;
    Tensor pv = p;  // shared buffer: updates land in the model
    with_dtype(p.dtype(), [&]<typename T>() {
      auto pp = pv.data<T>();
      auto pg = g.data<T>();
      auto pm = ms.data<T>();
      auto pvv = vs.data<T>();
      for (size_t i = 0; i < pp.size(); ++i) {
        pp[i] = static_cast<T>(pp[i] * (1.0 - lr * weight_decay));
        pm[i] = static_cast<T>(beta1 * pm[i] + (1.0 - beta1) * pg[i]);
        pvv[i] = static_cast<T>(beta2 * pvv[i] + (1.0 - beta2) * double(pg[i]) * double(pg[i]));
        const double mhat = pm[i] / bc1;
        const double vhat = pvv[i] / bc2;
        pp[i] = static_cast<T>(pp[i] - lr * mhat / (std::sqrt(vhat) + eps));
      }
    });
  }
}

std::string TrainResult::metrics_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,val_top1,val_top5,lr\n";
  for (const auto& e : history)
    os << e.epoch << "," << e.train_loss << "," << e.val_top1 << "," << e.val_top5 << ","
       << e.lr << "\n";
  return os.str();
}

namespace {

// Class ranking with deterministic ties: sort by (logit desc, index asc).
std::vector<int> ranked_classes(const Tensor& logits, int64_t row) {
  const int64_t c = logits.cols2d();
  std::vector<int> order(static_cast<size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> vals(static_cast<size_t>(c));
  for (int64_t j = 0; j < c; ++j) vals[static_cast<size_t>(j)] = logits.at(row * c + j);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (vals[static_cast<size_t>(a)] != vals[static_cast<size_t>(b)])
      return vals[static_cast<size_t>(a)] > vals[static_cast<size_t>(b)];
    return a < b;
  });
  return order;
}

struct FiniteCheckGuard {
  bool prev;
  explicit FiniteCheckGuard(bool enable) : prev(finite_checks_enabled()) {
    set_finite_checks(enable);
  }
  ~FiniteCheckGuard() { set_finite_checks(prev); }
};

struct ThreadGuard {
  int prev;
  explicit ThreadGuard(bool serial) : prev(max_threads()) {
    if (serial) set_max_threads(1);
  }
  ~ThreadGuard() { set_max_threads(prev); }
};

}  // namespace

std::pair<double, double> evaluate(Model& m, const Dataset& ds, int batch) {
  ds.validate();
  int64_t top1 = 0, top5 = 0;
  Ctx ctx;  // eval mode
  for (int64_t start = 0; start < ds.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, ds.size());
    std::vector<int64_t> idx(static_cast<size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = batch_tensor(ds, idx, m.cfg.dtype);
    Tensor logits = m.forward(x, ctx);
    for (int64_t r = 0; r < stop - start; ++r) {
      const auto order = ranked_classes(logits, r);
      const int target = ds.labels[static_cast<size_t>(start + r)];
      if (order[0] == target) ++top1;
      for (int j = 0; j < std::min<int>(5, static_cast<int>(order.size())); ++j)
        if (order[static_cast<size_t>(j)] == target) {
          ++top5;
          break;
        }
    }
  }
  return {double(top1) / double(ds.size()), double(top5) / double(ds.size())};
}

TrainResult train(Model& m, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg) {
  train_set.validate();
  val_set.validate();
  if (train_set.h != m.cfg.image_h || train_set.w != m.cfg.image_w)
    throw ConfigError("train: dataset resolution does not match model config");
  if (train_set.num_classes != m.cfg.num_classes)
    throw ConfigError("train: dataset class count does not match model config");

  ThreadGuard threads(cfg.serial);
  Rng rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);

  std::vector<std::pair<std::string, Tensor>> params;
  m.visit_params([&](const std::string& n, Tensor& t) { params.emplace_back(n, t); });
  AdamW opt;

  const int64_t steps_per_epoch =
      (train_set.size() + cfg.batch - 1) / std::max(1, cfg.batch);
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  TrainResult result;
  std::string best_path;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    best_path = cfg.out_dir + "/best.ckpt";
  }

  std::vector<int64_t> order(static_cast<size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), 0);

  int64_t step = 0;
  int nonfinite_streak = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int64_t loss_count = 0;
    double lr_now = cfg.lr;
    {
      FiniteCheckGuard quiet(false);  // loss checked explicitly below
      for (int64_t start = 0; start < train_set.size(); start += cfg.batch) {
        const int64_t stop = std::min<int64_t>(start + cfg.batch, train_set.size());
        std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(stop - start));
        lr_now = cosine_lr(step, total_steps, warmup_steps, cfg.lr);
        ++step;

        Tensor x = batch_tensor(train_set, idx, m.cfg.dtype, cfg.augment_flip, &rng,
                                cfg.crop_pad);
        std::vector<int> y = batch_labels(train_set, idx);

        GradTape tape;
        Ctx ctx;
        ctx.tape = &tape;
        ctx.training = true;
        ctx.rng = &rng;
        Tensor logits = m.forward(x, ctx);
        Tensor loss = softmax_cross_entropy(logits, y, cfg.label_smoothing);
        const double lv = loss.at(0);
        if (!std::isfinite(lv)) {
          if (++nonfinite_streak >= 3)
            throw NumericError("training diverged: loss non-finite for 3 consecutive steps "
                               "(epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + ")");
          continue;  // skip the update for this batch
        }
        nonfinite_streak = 0;
        loss_sum += lv;
        ++loss_count;

        auto grads = tape.backward(loss);
        opt.step(params, grads, lr_now, cfg.weight_decay);
      }
    }

    auto [top1, top5] = evaluate(m, val_set);
    result.history.push_back(
        {epoch, loss_count ? loss_sum / double(loss_count) : 0.0, top1, top5, lr_now});
    if (epoch == 1 || top1 > result.best_top1) {
      result.best_top1 = top1;
      if (!best_path.empty()) save_checkpoint(best_path, m);
    }
    if (cfg.stop_at_val_top1 > 0.0 && top1 >= cfg.stop_at_val_top1) break;
  }

  if (!cfg.out_dir.empty()) {
    std::ofstream mf(cfg.out_dir + "/metrics.csv", std::ios::trunc);
    mf << result.metrics_csv();
    result.checkpoint_path = best_path;
  }
  return result;
}

double linear_baseline_accuracy(const Dataset& train_set, const Dataset& val_set, int epochs,
                                double lr, uint64_t seed) {
  const int64_t dim = int64_t(train_set.h) * train_set.w * 3;
  const int64_t classes = train_set.num_classes;
  Rng rng(seed);
  Tensor w = Tensor::randn({dim, classes}, rng, 0.01);
  Tensor b = Tensor::zeros({classes});
  AdamW opt;
  std::vector<std::pair<std::string, Tensor>> params{{"w", w}, {"b", b}};

  std::vector<int64_t> order(static_cast<size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), 0);
  const int batch = 64;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t start = 0; start < train_set.size(); start += batch) {
      const int64_t stop = std::min<int64_t>(start + batch, train_set.size());
      std::span<const int64_t> idx(order.data() + start, static_cast<size_t>(stop - start));
      Tensor x2 = batch_tensor(train_set, idx, DType::Float32).reshaped({stop - start, dim});
      GradTape tape;
      Tensor logits = bias_add(matmul(x2, tape.watch("w", w)), tape.watch("b", b));
      Tensor loss = softmax_cross_entropy(logits, batch_labels(train_set, idx), 0.0);
      auto grads = tape.backward(loss);
      opt.step(params, grads, lr, 0.0);
    }
  }

  // argmax accuracy on the validation split
  int64_t hits = 0;
  for (int64_t start = 0; start < val_set.size(); start += batch) {
    const int64_t stop = std::min<int64_t>(start + batch, val_set.size());
    std::vector<int64_t> idx(static_cast<size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = batch_tensor(val_set, idx, DType::Float32).reshaped({stop - start, dim});
    Tensor logits = bias_add(matmul(x, w), b);
    for (int64_t r = 0; r < stop - start; ++r) {
      const auto order2 = ranked_classes(logits, r);
      if (order2[0] == val_set.labels[static_cast<size_t>(start + r)]) ++hits;
    }
  }
  return double(hits) / double(val_set.size());
}

}  // namespace vig
