#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "mabsrec/config.hpp"
#include "mabsrec/error.hpp"
#include "mabsrec/evaluator.hpp"
#include "mabsrec/model.hpp"

namespace mabsrec {

/// Adam with bias correction and no weight decay.
class Adam {
 public:
  explicit Adam(const ParamSet& params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params) {
      m_.emplace_back(e.value.shape(), 0.0);
      v_.emplace_back(e.value.shape(), 0.0);
    }
  }

  void step(ParamSet& params) {
    if (params.size() != m_.size()) throw InvalidArgument("Adam: parameter set changed shape");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& e : params) {
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      ++k;
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = e.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        e.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_recall10 = 0.0;
  double val_ndcg10 = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  /// Parameters of the best validation epoch.
  ParamSet params;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_recall10 = -1.0;
  double best_val_ndcg10 = -1.0;
};

/// Called after each epoch's validation pass with the current parameters.
using EpochCallback = std::function<void(const EpochRecord&, const ParamSet&)>;

/// One optimizer step over `batch`: gradients of the batch-mean loss are
/// accumulated micro-batch by micro-batch in example order. Returns the summed
/// per-example loss.
inline double train_step(ParamSet& params, Adam& adam, const ModelGraphs& graphs, std::span<const Example* const> batch,
                         const TrainConfig& cfg, Rng& rng) {
  params.zero_grad();
  double loss_sum = 0.0;
  const double total = static_cast<double>(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += cfg.micro_batch) {
    const auto micro = batch.subspan(start, std::min(cfg.micro_batch, batch.size() - start));
    Tape tape(true);
    const ForwardOutput out = forward_batch(tape, params, graphs, micro, cfg, true, rng);
    std::vector<ItemIndex> targets;
    for (const Example* ex : micro) targets.push_back(ex->target);
    Var loss = rec_loss(out.logits, targets);
    const double micro_mean = loss.value().item();
    loss_sum += micro_mean * static_cast<double>(micro.size());
    if (!std::isfinite(micro_mean)) return micro_mean;
    tape.backward(numeric::scale(loss, static_cast<double>(micro.size()) / total));
  }
  adam.step(params);
  return loss_sum;
}

/// Mini-batch Adam on the mean next-item loss with early stopping on
/// validation Recall@10 (stops after `patience` epochs without improvement).
/// An epoch improves when its Recall@10 is strictly higher, or equal with a
/// strictly higher NDCG@10. Returns the best-validation parameters.
inline TrainResult train(const TrainingData& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                         std::optional<ParamSet> initial = std::nullopt) {
  cfg.validate();
  if (data.train.empty()) throw InvalidArgument("training set is empty");
  ParamSet params = initial ? std::move(*initial) : init_model_params(data.n_items, cfg);
  Adam adam(params, cfg.learning_rate);
  Rng rng(cfg.seed ^ 0x5DEECE66DULL);

  TrainResult result;
  result.params = params;
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(&data.train[order[i]]);
      const double batch_loss = train_step(params, adam, data.graphs, batch, cfg, rng);
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError(epoch, batch_index,
                              "training diverged: non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index) + " (learning rate " + detail::format_real(cfg.learning_rate) + ")");
      }
      loss_sum += batch_loss;
    }
    const EvalReport val = evaluate(params, data.graphs, data.valid, cfg);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_recall10 = val.at("recall@10");
    rec.val_ndcg10 = val.at("ndcg@10");
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec, params);

    const bool improved = rec.val_recall10 > result.best_val_recall10 ||
                          (rec.val_recall10 == result.best_val_recall10 && rec.val_ndcg10 > result.best_val_ndcg10);
    if (improved) {
      result.best_val_recall10 = rec.val_recall10;
      result.best_val_ndcg10 = rec.val_ndcg10;
      result.best_epoch = epoch;
      result.params = params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace mabsrec
