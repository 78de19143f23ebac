#include "hexform/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "hexform/optim.hpp"

namespace hexform {

namespace {

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = static_cast<int>(j);
  }
  return best;
}

}  // namespace

EvalStats evaluate(const TransformerModel& model, const Dataset& data) {
  NoGradGuard ng;
  EvalStats stats;
  ForwardHooks hooks;
  int64_t correct = 0, total = 0;
  double se = 0.0;
  for (const Example& ex : data.items) {
    auto logits = model.forward_tokens(ex.tokens, ex.mask, &hooks);
    switch (data.kind) {
      case TaskKind::Classify: {
        if (argmax_row(logits.data()) == ex.label) ++correct;
        ++total;
        break;
      }
      case TaskKind::Regress: {
        double d = logits.item() - ex.target;
        se += d * d;
        ++total;
        break;
      }
      case TaskKind::Tag: {
        int k = logits.dim(1);
        for (size_t i = 0; i < ex.tag_labels.size(); ++i) {
          if (ex.tag_labels[i] < 0) continue;
          std::span<const double> row = logits.data().subspan(i * k, k);
          if (argmax_row(row) == ex.tag_labels[i]) ++correct;
          ++total;
        }
        break;
      }
    }
  }
  stats.max_preln_abs = hooks.max_preln_abs;
  if (data.kind == TaskKind::Regress) {
    stats.mse = se / std::max<int64_t>(1, total);
    stats.metric = -stats.mse;
  } else {
    stats.metric = 100.0 * static_cast<double>(correct) /
                   std::max<int64_t>(1, total);
  }
  return stats;
}

Tensor example_loss(const TransformerModel& model, const Example& ex,
                    TaskKind kind) {
  auto logits = model.forward_tokens(ex.tokens, ex.mask);
  switch (kind) {
    case TaskKind::Classify:
      return cross_entropy_with_logits(logits, {ex.label});
    case TaskKind::Regress:
      return mse_loss(logits, Tensor::from_data(logits.shape(), {ex.target}));
    case TaskKind::Tag:
      return cross_entropy_with_logits(logits, ex.tag_labels);
  }
  throw BadConfig("unreachable task kind");
}

FitResult fit(TransformerModel& model, const Dataset& train, const Dataset& dev,
              const TrainHyper& hp) {
  auto params = model.trainable_parameters();
  AdamW opt(params, {.lr = hp.lr, .weight_decay = hp.weight_decay});

  FitResult result;
  std::vector<std::vector<double>> best_snapshot;
  try {
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
      auto batches =
          batch_indices(train.items.size(), hp.batch, hp.seed + epoch);
      for (const auto& batch : batches) {
        opt.zero_grad();
        double scale = 1.0 / static_cast<double>(batch.size());
        for (int idx : batch) {
          auto loss =
              scalar_mul(example_loss(model, train.items[idx], train.kind),
                         scale);
          if (!std::isfinite(loss.item())) {
            throw NonFiniteLoss("at epoch " + std::to_string(epoch));
          }
          backward(loss);
        }
        opt.step();
      }
      double metric = evaluate(model, dev).metric;
      result.epoch_dev_metrics.push_back(metric);
      if (result.best_epoch < 0 || metric > result.best_dev_metric) {
        result.best_dev_metric = metric;
        result.best_epoch = epoch;
        if (hp.select_best_dev) best_snapshot = model.snapshot_values();
      }
    }
  } catch (const NonFiniteValue& e) {
    // overflowing activations surface as a training failure, not a tensor bug
    throw NonFiniteLoss(e.what());
  }
  if (hp.select_best_dev && !best_snapshot.empty()) {
    model.restore_values(best_snapshot);
  }
  result.final_dev_metric = evaluate(model, dev).metric;
  return result;
}

}  // namespace hexform
