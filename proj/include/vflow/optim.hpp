#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "vflow/autodiff.hpp"

namespace vflow {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

/// Adam over every tensor of a ParamStore. Parameters listed as frozen keep
/// their values and moments untouched.
class Adam {
 public:
  Adam(const ad::ParamStore& store, AdamConfig config);

  void freeze(ad::ParamId id);
  bool frozen(ad::ParamId id) const { return frozen_.at(id.index); }
  void step(ad::ParamStore& store, const ad::Gradients& grads);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  AdamConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  std::vector<bool> frozen_;
  std::int64_t t_ = 0;
};

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 256;
  int epochs = 50;
  /// Epochs without validation improvement before stopping; 0 disables.
  int patience = 10;
  std::uint64_t seed = 0;
  /// Dequantization samples per example when scoring the validation split.
  int eval_samples = 1;
  /// Cosine annealing from adam.lr down to adam.lr * min_lr_fraction at the
  /// last epoch; 1 keeps the rate constant.
  double min_lr_fraction = 1.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_nll = 0.0;
  bool stopped_early = false;
};

/// Callbacks that adapt a model to the generic minibatch loop.
struct TrainHooks {
  /// Mean negative log-likelihood (or bound) of the rows `batch` on a tape.
  std::function<ad::Var(ad::Tape&, const std::vector<std::size_t>& batch, std::mt19937_64& rng)>
      batch_loss;
  /// Mean validation NLL with parameters as currently stored.
  std::function<double()> validate;
  /// Called after every optimizer step (for projections).
  std::function<void(ad::ParamStore&)> after_step;
  /// Called at the end of every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Shuffled minibatch Adam with early stopping on validation NLL. The store
/// ends holding the best-validation parameters. A non-finite loss restores
/// the best parameters seen so far and throws DivergedLoss.
TrainReport train_loop(ad::ParamStore& store, Adam& optimizer, std::size_t num_train,
                       const TrainConfig& config, const TrainHooks& hooks);

}  // namespace vflow
