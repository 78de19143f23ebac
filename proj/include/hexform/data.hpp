#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hexform/model.hpp"

namespace hexform {

// Fixed token layout: 0 = <unk>, 1 = <pad>, ids from kReservedTokens up are
// ordinary vocabulary. Synthetic rules plant their markers right after the
// reserved block.
constexpr int kUnkId = 0;
constexpr int kPadId = 1;
constexpr int kReservedTokens = 2;

struct Vocab {
  std::vector<std::string> tokens;

  static Vocab standard(int size);
  int id_for(const std::string& token) const;  // kUnkId when missing
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens.size()); }
};

std::vector<int> tokenize(const std::string& text, const Vocab& vocab);

struct Example {
  std::vector<int> tokens;         // padded to seq_len for variable-length tasks
  std::vector<uint8_t> mask;       // 1 marks padding; empty means none
  int label = -1;                  // Classify
  double target = 0.0;             // Regress
  std::vector<int> tag_labels;     // Tag; -1 on padding
};

struct Dataset {
  TaskKind kind = TaskKind::Classify;
  int num_classes = 0;  // 0 for Regress
  std::vector<Example> items;

  size_t size() const { return items.size(); }
};

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::Classify;
  int vocab_size = 32;
  int seq_len = 16;
  int num_classes = 4;
  uint64_t rule_seed = 17;
  int train_size = 384;
  int dev_size = 128;

  void validate() const;  // throws InvalidSpec
};

// Deterministic under seed; dev rows are disjoint from train rows. Labels are
// a pure function of the tokens: Classify plants one marker token whose index
// is the class; Regress targets the mean of per-token weights in [0,1]; Tag
// derives each token's class from a hash shifted by a planted mode token, so
// correct tagging requires attending to the mode position.
std::pair<Dataset, Dataset> gen_synthetic(const SyntheticTaskSpec& spec,
                                          uint64_t seed);

struct TsvSchema {
  TaskKind kind = TaskKind::Classify;
  bool has_header = false;
};

struct TsvLoadResult {
  Dataset dataset;
  Vocab vocab;
  std::map<std::string, int> label_map;
};

// Tab-separated rows of (text, label). Builds vocab and label map from the
// data and writes the label map next to the file as `<path>.labels`.
// Errors carry the 1-based line number.
TsvLoadResult load_tsv(const std::string& path, const TsvSchema& schema,
                       int max_seq_len);

// Shuffled batch order as a pure function of (size, batch, seed).
std::vector<std::vector<int>> batch_indices(size_t n, int batch_size,
                                            uint64_t seed);

}  // namespace hexform
