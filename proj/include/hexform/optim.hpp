#pragma once

#include <cstdint>
#include <vector>

#include "hexform/tensor.hpp"

namespace hexform {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with decoupled weight decay. The decay is applied multiplicatively
// before the Adam step, so its strength does not pass through the adaptive
// scaling — that is what lets it act as an attention-magnitude regularizer.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);

  void step();  // throws NonFiniteGradient on a bad gradient
  void zero_grad();
  int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  int64_t step_count_ = 0;
};

}  // namespace hexform
