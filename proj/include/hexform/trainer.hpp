#pragma once

#include <cstdint>

#include "hexform/data.hpp"
#include "hexform/model.hpp"

namespace hexform {

struct TrainHyper {
  int epochs = 8;
  int batch = 16;
  double lr = 3e-4;
  double weight_decay = 0.1;
  uint64_t seed = 0;
  bool select_best_dev = true;  // restore the dev-metric argmax checkpoint
};

struct FitResult {
  double final_dev_metric = 0.0;
  double best_dev_metric = 0.0;
  int best_epoch = -1;
  std::vector<double> epoch_dev_metrics;
};

struct EvalStats {
  double metric = 0.0;        // accuracy in points for Classify/Tag, -mse for Regress
  double mse = 0.0;           // Regress only
  double max_preln_abs = 0.0; // largest |value| entering any norm site
};

// Dev metric convention: classification and tagging report accuracy in points
// (0..100); regression reports -MSE so that higher is always better.
EvalStats evaluate(const TransformerModel& model, const Dataset& data);

Tensor example_loss(const TransformerModel& model, const Example& ex,
                    TaskKind kind);

// Gradient-accumulation training loop; batch order is a pure function of the
// seed. NonFiniteValue from an overflowing forward surfaces as NonFiniteLoss.
FitResult fit(TransformerModel& model, const Dataset& train, const Dataset& dev,
              const TrainHyper& hp);

}  // namespace hexform
