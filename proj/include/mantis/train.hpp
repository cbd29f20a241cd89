#pragma once

#include "mantis/core.hpp"
#include "mantis/dscd.hpp"
#include "mantis/model.hpp"
#include "mantis/params.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace mantis {

struct AdamWConfig {
  double lr = 5e-4;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct Moments {
  Matrix m;
  Matrix v;
};

/// Adaptive moments with bias correction; weight decay shrinks the weights
/// directly before the moment step and never enters the moments.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t steps, std::map<std::string, Moments> moments) {
    step_ = steps;
    moments_ = std::move(moments);
  }

  void step(ParamStore& store, double lr) {
    for (const auto& p : store)
      if (p.trainable && !p.grad.allFinite()) throw NumericError("non-finite gradient for '" + p.name + "'");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& p : store) {
      if (!p.trainable) continue;
      auto [it, fresh] = moments_.try_emplace(p.name);
      Moments& mo = it->second;
      if (fresh || mo.m.rows() != p.value.rows() || mo.m.cols() != p.value.cols()) {
        mo.m = Matrix::Zero(p.value.rows(), p.value.cols());
        mo.v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      p.value *= 1.0 - lr * cfg_.weight_decay;
      mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * p.grad;
      mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + cfg_.eps);
    }
  }

 private:
  AdamWConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Linear warmup over the first `warmup` epochs (epoch e gets (e+1)/warmup of
/// the base rate), then cosine decay to 0 at `total`.
inline double learning_rate(double base, std::size_t epoch, std::size_t warmup, std::size_t total) {
  if (epoch < warmup) return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = static_cast<double>(epoch - warmup) / static_cast<double>(total - warmup);
  return 0.5 * base * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 5e-2;
  std::size_t epochs = 200;
  std::size_t warmup = 10;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  DscdWeights dscd;
  TuningMode mode = TuningMode::mantis;
  std::size_t discrepancy_every = 0;  // 0 = never during training

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("train.epochs must be positive");
    if (batch < 1) throw ConfigError("train.batch must be positive");
    if (!(dscd.tau > 0.0)) throw ConfigError("train.tau must be positive");
    if (!(dscd.alpha >= 0.0) || !(dscd.beta >= 0.0)) throw ConfigError("train.alpha and train.beta must be non-negative");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double task = 0.0;
  double feat = 0.0;
  double pred = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::optional<Discrepancy> discrepancy;
  std::size_t degenerate = 0;
  double seconds = 0.0;
};

inline int argmax(const Matrix& row) {
  Eigen::Index best = 0;
  row.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

/// Mini-batch training of a model's trainable set on prepared samples.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg, const std::vector<PreparedSample>& train,
          const std::vector<PreparedSample>& test)
      : model_(model), cfg_(cfg), train_(train), test_(test), opt_(AdamWConfig{cfg.lr, cfg.weight_decay}) {
    cfg_.validate();
    if (train_.empty()) throw ArgumentError("training set is empty");
    model_.set_mode(cfg_.mode);
  }

  std::size_t epoch() const { return epoch_; }
  bool done() const { return epoch_ >= cfg_.epochs; }
  AdamW& optimizer() { return opt_; }
  void set_epoch(std::size_t e) { epoch_ = e; }

  EpochMetrics run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = learning_rate(cfg_.lr, epoch_, cfg_.warmup, cfg_.epochs);

    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, 0xE90C000 + epoch_));
    rng.shuffle(order);

    DegenerateCounter degenerate;
    std::size_t correct = 0;
    const bool trains = model_.store().trainable_count() > 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg_.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg_.batch);
      const double scale = trains ? 1.0 / static_cast<double>(b1 - b0) : 0.0;
      model_.store().zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t idx = order[i];
        const SampleLoss l = sample_loss(train_[idx], idx, scale, &degenerate);
        m.task += l.task;
        m.feat += l.feat;
        m.pred += l.pred;
        m.total += l.total;
        if (argmax(l.logits) == train_[idx].label) ++correct;
      }
      if (trains) opt_.step(model_.store(), m.lr);
    }
    const double n = static_cast<double>(train_.size());
    m.task /= n;
    m.feat /= n;
    m.pred /= n;
    m.total /= n;
    m.train_acc = static_cast<double>(correct) / n;
    m.degenerate = degenerate.events;
    ++epoch_;
    m.test_acc = test_.empty() ? 0.0 : evaluate(test_);
    if (cfg_.discrepancy_every && !test_.empty() && (epoch_ % cfg_.discrepancy_every == 0 || done()))
      m.discrepancy = discrepancy_metrics(model_, test_, cfg_.dscd.tau);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
  }

  /// Accuracy of the averaged-branch prediction.
  double evaluate(const std::vector<PreparedSample>& set) {
    if (set.empty()) throw ArgumentError("evaluation set is empty");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      Tape tape(false);
      ParamBinder bind(tape, model_.store());
      Matrix logits;
      if (model_.head_only() && &set == &test_) {
        logits = head_logits(cached_test(i));
      } else if (model_.head_only() && &set == &train_) {
        logits = head_logits(cached_train(i));
      } else {
        const ForwardOutput f = model_.forward(bind, set[i]);
        logits = 0.5 * (f.logits1.value() + f.logits2.value());
      }
      if (argmax(logits) == set[i].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(set.size());
  }

 private:
  struct Pooled {
    Matrix p1, p2;
  };

  SampleLoss sample_loss(const PreparedSample& s, std::size_t idx, double scale, DegenerateCounter* counter) {
    if (model_.head_only()) {
      const Pooled& p = cached_train(idx);
      return model_.head_loss(p.p1, p.p2, s.label, cfg_.dscd, scale);
    }
    return model_.loss(s, cfg_.dscd, scale, counter);
  }

  Matrix head_logits(const Pooled& p) {
    const Matrix& w = model_.store().at("head.w").value;
    const Matrix& b = model_.store().at("head.b").value;
    return 0.5 * ((p.p1 * w.transpose() + b) + (p.p2 * w.transpose() + b));
  }

  static Pooled pool(Model& model, const PreparedSample& s) {
    Tape tape(false);
    ParamBinder bind(tape, model.store());
    const ForwardOutput f = model.forward(bind, s);
    return {f.pooled1.value(), f.pooled2.value()};
  }

  const Pooled& cached_train(std::size_t i) {
    if (pooled_train_.empty())
      for (const auto& s : train_) pooled_train_.push_back(pool(model_, s));
    return pooled_train_[i];
  }
  const Pooled& cached_test(std::size_t i) {
    if (pooled_test_.empty())
      for (const auto& s : test_) pooled_test_.push_back(pool(model_, s));
    return pooled_test_[i];
  }

  Model& model_;
  TrainConfig cfg_;
  const std::vector<PreparedSample>& train_;
  const std::vector<PreparedSample>& test_;
  AdamW opt_;
  std::size_t epoch_ = 0;
  std::vector<Pooled> pooled_train_, pooled_test_;
};

}  // namespace mantis
