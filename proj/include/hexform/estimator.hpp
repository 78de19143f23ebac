#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "hexform/tensor.hpp"

namespace hexform {

// Softmax estimation network: out_i = x_i * T(z) with
// z = sum_j relu((x_j/2 + 1)^3), evaluated once per row. T is a 1->16->16->1
// network with ReLU between layers that approximates the reciprocal of z;
// its input is pre-scaled by 1/dim so it stays O(1) across row lengths.
// The whole forward uses only add, mul and relu.
class SoftmaxEstimator {
 public:
  SoftmaxEstimator(int dim, std::mt19937_64& rng);

  int dim() const { return dim_; }
  double input_scale() const { return input_scale_; }

  // Applies the estimator to every row of a [n, d] tensor.
  Tensor forward_rows(const Tensor& rows) const;

  // T alone: [n,1] pre-scaled statistic -> [n,1] reciprocal estimate.
  Tensor reciprocal_net(const Tensor& u) const;

  std::vector<Tensor> parameters() const;
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  SoftmaxEstimator clone() const;

  // Weight access for checkpointing.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  const Tensor& weight1() const { return w1_; }
  const Tensor& bias1() const { return b1_; }
  const Tensor& weight2() const { return w2_; }
  const Tensor& bias2() const { return b2_; }
  const Tensor& weight3() const { return w3_; }
  const Tensor& bias3() const { return b3_; }

 private:
  int dim_;
  double input_scale_;
  bool frozen_ = false;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

struct EstimatorTrainOptions {
  int64_t max_steps = 100000;
  double lr = 1e-3;
  int batch = 256;
  int64_t dataset_rows = 73728;  // split 90/10 train/held-out
  double stop_mse = 1e-6;        // early stop once the train MSE reaches this
  double converge_mse = 1e-4;    // held-out MSE above this raises DidNotConverge
};

struct EstimatorTrainReport {
  int64_t steps_used = 0;
  double train_mse = 0.0;            // T's reciprocal-regression loss
  double heldout_mse = 0.0;          // same loss on the held-out split
  double softmax_mse_heldout = 0.0;  // end-to-end estimate vs exact softmax
  bool reached_target = false;
};

// Trains T against the reciprocal of the row statistic on rows drawn from
// uniform[-3,3]^dim: up to 100k Adam steps at lr 1e-3, early stopping once
// the train MSE is at or below 1e-6. Throws InvalidSpec for dim < 2 and
// DidNotConverge when the held-out MSE stays above 1e-4.
std::pair<SoftmaxEstimator, EstimatorTrainReport> train_estimator(
    int dim, uint64_t seed, const EstimatorTrainOptions& opts = {});

}  // namespace hexform
