#include "vflow/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <numbers>

namespace vflow {

Adam::Adam(const ad::ParamStore& store, AdamConfig config) : config_(config) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.value(ad::ParamId{i});
    m_.push_back(ad::Tensor::Zero(v.rows(), v.cols()));
    v_.push_back(ad::Tensor::Zero(v.rows(), v.cols()));
  }
  frozen_.assign(store.size(), false);
}

void Adam::freeze(ad::ParamId id) { frozen_.at(id.index) = true; }

void Adam::step(ad::ParamStore& store, const ad::Gradients& grads) {
  if (grads.by_param.size() != m_.size())
    throw Error(Errc::ShapeMismatch, "gradient count does not match the optimizer state");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < m_.size(); ++i)
      if (!frozen_[i]) sq += grads.by_param[i].squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    if (frozen_[i]) continue;
    const ad::Tensor g = grads.by_param[i] * scale;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    ad::Tensor& p = store.value(ad::ParamId{i});
    p.array() -= config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

TrainReport train_loop(ad::ParamStore& store, Adam& optimizer, std::size_t num_train,
                       const TrainConfig& config, const TrainHooks& hooks) {
  if (num_train == 0) throw Error(Errc::ConfigInvalid, "training split is empty");
  if (config.batch_size < 1) throw Error(Errc::ConfigInvalid, "batch size must be positive");
  if (!(config.min_lr_fraction > 0.0 && config.min_lr_fraction <= 1.0))
    throw Error(Errc::ConfigInvalid, "min_lr_fraction must lie in (0, 1]");
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(num_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport report;
  std::vector<double> best = store.flatten();
  report.best_val_nll = hooks.validate();
  report.best_epoch = 0;
  int since_best = 0;
  const double base_lr = optimizer.config().lr;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (config.min_lr_fraction != 1.0) {
      const double progress = config.epochs > 1 ? double(epoch - 1) / (config.epochs - 1) : 0.0;
      const double f = config.min_lr_fraction;
      optimizer.set_lr(base_lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
    }
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < num_train; b0 += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t b1 = std::min(num_train, b0 + static_cast<std::size_t>(config.batch_size));
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                           order.begin() + static_cast<std::ptrdiff_t>(b1));
      ad::Tape tape(&store);
      const ad::Var loss = hooks.batch_loss(tape, batch, rng);
      const double value = loss.scalar();
      const ad::Gradients grads = tape.backward(loss);
      bool finite = std::isfinite(value);
      for (const auto& g : grads.by_param) finite = finite && g.allFinite();
      if (!finite) {
        store.unflatten(best);
        throw Error(Errc::DivergedLoss, "non-finite training objective at epoch " +
                                            std::to_string(epoch));
      }
      optimizer.step(store, grads);
      if (hooks.after_step) hooks.after_step(store);
      total += value * static_cast<double>(batch.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_nll = total / static_cast<double>(num_train);
    rec.val_nll = hooks.validate();
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (!std::isfinite(rec.val_nll)) {
      store.unflatten(best);
      throw Error(Errc::DivergedLoss, "non-finite validation objective at epoch " +
                                          std::to_string(epoch));
    }
    if (rec.val_nll < report.best_val_nll) {
      report.best_val_nll = rec.val_nll;
      report.best_epoch = epoch;
      best = store.flatten();
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      report.stopped_early = true;
      break;
    }
  }
  store.unflatten(best);
  return report;
}

}  // namespace vflow
