#pragma once

#include <string>
#include <vector>

#include "hexform/estimator.hpp"
#include "hexform/model.hpp"

namespace hexform::ckpt {

// Checkpoint directory layout:
//   manifest.txt  key=value header (format_version=1, config fields) followed
//                 by one inventory line per tensor:
//                 tensor=<name> shape=AxB dtype=f32 offset=<bytes>
//   params.bin    little-endian f32 values, concatenated in manifest order
//   tokens.txt    vocabulary, one token per line (model checkpoints)
// Training runs in f64; checkpoints store f32 for compact interchange.

void save_model(const std::string& dir, const TransformerModel& model,
                const std::vector<std::string>& vocab);

struct LoadedModel {
  TransformerModel model;
  std::vector<std::string> vocab;
};

LoadedModel load_model(const std::string& dir);

void save_estimator(const std::string& dir, const SoftmaxEstimator& estimator);
SoftmaxEstimator load_estimator(const std::string& dir);

// Line-oriented key=value run report next to a checkpoint.
void write_report(const std::string& path,
                  const std::vector<std::pair<std::string, std::string>>& rows);

}  // namespace hexform::ckpt
