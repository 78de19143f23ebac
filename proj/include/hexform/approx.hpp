#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hexform/data.hpp"
#include "hexform/estimator.hpp"
#include "hexform/model.hpp"
#include "hexform/trainer.hpp"

namespace hexform {

enum class Schedule { TwoStages, JointFtS, JointFtLn, JointFtSLn };

const char* schedule_name(Schedule s);
Schedule schedule_from_name(const std::string& name);

// Swaps GELU for ReLU and exact softmax for the estimation network. Weights
// are untouched; double application is a no-op.
void replace_ops(TransformerModel& model,
                 std::shared_ptr<SoftmaxEstimator> estimator);

// gamma_t = gamma / sqrt(v + eps), beta_t = beta - gamma_t ∘ m.
std::pair<Tensor, Tensor> affine_from_moments(const Tensor& gamma,
                                              const Tensor& beta,
                                              std::span<const double> mean,
                                              std::span<const double> var);

// Moment-matched affine initialization per LN site, with m, v the per-feature
// mean/variance of pre-LN activations over the calibration examples.
void init_affine_from_calibration(TransformerModel& model,
                                  const std::vector<const Example*>& calibration);

struct DistillOptions {
  int steps = 300;
  int batch = 8;
  double lr = 1e-2;
  uint64_t seed = 1;
};

struct DistillResult {
  double train_mse = 0.0;    // mean per-site MSE on the last pass
  double heldout_mse = 0.0;  // mean per-site MSE on held-out data
  double init_heldout_mse = 0.0;  // same measure before any update
};

// Trains only the affine parameters to match exact LN outputs site by site;
// loss is the sum over sites of per-site output MSE against the live teacher.
// Every other weight is untouched (verifiable by parameter hash).
DistillResult ln_distill(TransformerModel& model, const Dataset& data,
                         const Dataset& heldout, const DistillOptions& opts);

// Measures mean per-site MSE between affine and exact LN outputs on `data`.
double affine_vs_exact_mse(const TransformerModel& model, const Dataset& data);

// Removes the exact LN: forward routes through the affine parameters only.
void drop_ln(TransformerModel& model);

struct WorkflowHyper {
  TrainHyper train;
  DistillOptions distill;
  int calibration_examples = 64;
};

struct WorkflowResult {
  // ordered key=value pairs for the run report
  std::vector<std::pair<std::string, double>> report;
  double metric_after_finetune = 0.0;  // dev metric with exact LN still in place
  double metric_final = 0.0;           // dev metric of the HE-ready model
  double max_preln_abs = 0.0;          // attention-overflow measure on dev
  DistillResult distill;
  bool distilled = false;
};

// Runs one approximation schedule end to end; the model must already be
// fine-tuneable (pretrained or random-initialized) and still fully exact.
// All schedules end with drop_ln, so the result only computes with add, mul
// and relu.
WorkflowResult run_workflow(TransformerModel& model,
                            std::shared_ptr<SoftmaxEstimator> estimator,
                            const Dataset& train, const Dataset& dev,
                            Schedule schedule, const WorkflowHyper& hp);

}  // namespace hexform
