#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hexform/estimator.hpp"
#include "hexform/tensor.hpp"

namespace hexform {

enum class Activation { Gelu, Relu };
enum class SoftmaxKind { Exact, Estimated };
enum class NormKind { LayerNorm, Affine };
enum class TaskKind : uint8_t { Classify = 0, Regress = 1, Tag = 2 };

const char* task_name(TaskKind k);
TaskKind task_from_name(const std::string& name);

constexpr double kLnEpsilon = 1e-12;

struct ModelConfig {
  int num_layers = 2;
  int hidden_size = 128;
  int num_heads = 2;
  int ffn_size = 512;
  int vocab_size = 0;
  int max_seq_len = 64;
  int num_outputs = 2;  // classes for Classify/Tag, 1 for Regress
  TaskKind task = TaskKind::Classify;
  Activation activation = Activation::Gelu;
  SoftmaxKind softmax = SoftmaxKind::Exact;
  NormKind norm = NormKind::LayerNorm;
  double mask_value = -3.0;  // finite stand-in for the -inf attention mask
  bool scale_absorbed = false;

  int head_dim() const { return hidden_size / num_heads; }
  void validate() const;
};

// y = (x - mean)/sqrt(var + eps) * gamma + beta over the last axis.
Tensor ln_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLnEpsilon);

// y = x ∘ gamma + beta; no mean, no variance, no division.
Tensor affine_norm_forward(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta);

// scores[i][j] += mask_value wherever mask[j] marks a padding position.
Tensor apply_mask(const Tensor& scores, const std::vector<uint8_t>& mask,
                  double mask_value);

// One normalization site: exact LN parameters plus the optional affine
// replacement trained by distillation.
struct NormSite {
  std::string name;
  Tensor gamma, beta;      // undefined once the exact LN is dropped
  Tensor gamma_t, beta_t;  // affine replacement, undefined until attached
  bool exact_dropped = false;
};

struct ForwardHooks {
  // Captures (pre-norm input, exact LN output) pairs per site, in site order.
  bool capture_norm_io = false;
  std::vector<std::pair<Tensor, Tensor>> norm_io;
  // Largest |value| seen entering any normalization site.
  double max_preln_abs = 0.0;
};

// Two-layer post-LN encoder with swappable activation / softmax / norm and a
// linear task head. No pooler exists in any configuration; the sequence head
// reads position 0 directly.
class TransformerModel {
 public:
  struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FfnWeights {
    Tensor w1, b1, w2, b2;
  };

  TransformerModel(ModelConfig cfg, std::mt19937_64& rng);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }

  // Token + position embedding lookup (the step a protocol client runs
  // locally).
  Tensor embed(const std::vector<int>& tokens) const;

  // Forward from embeddings [seq, hidden]; mask empty or seq-long with 1 for
  // padding. Returns [num_outputs] for Classify/Regress, [seq, num_outputs]
  // for Tag.
  Tensor forward(const Tensor& embeddings,
                 const std::vector<uint8_t>& mask = {},
                 ForwardHooks* hooks = nullptr) const;
  Tensor forward_tokens(const std::vector<int>& tokens,
                        const std::vector<uint8_t>& mask = {},
                        ForwardHooks* hooks = nullptr) const;

  // Multi-head attention for one layer, exposed for direct testing.
  Tensor attention_forward(int layer, const Tensor& hidden,
                           const std::vector<uint8_t>& mask) const;

  // Multiplies W_Q and its bias by 1/sqrt(d_k) so the forward skips the
  // runtime scaling; forward outputs are preserved. No-op when already
  // absorbed.
  void absorb_attention_scale();

  std::vector<Tensor> parameters() const;            // everything, incl. estimator
  std::vector<Tensor> trainable_parameters() const;  // honors frozen estimator
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  void attach_estimator(std::shared_ptr<SoftmaxEstimator> est);
  const std::shared_ptr<SoftmaxEstimator>& estimator() const { return est_; }

  std::vector<NormSite>& norm_sites() { return sites_; }
  const std::vector<NormSite>& norm_sites() const { return sites_; }

  const Tensor& token_table() const { return tok_emb_; }
  const Tensor& position_table() const { return pos_emb_; }
  const AttentionWeights& attention_weights(int layer) const {
    return attn_[layer];
  }
  const FfnWeights& ffn_weights(int layer) const { return ffn_[layer]; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }

  // Deep copy (weights, sites, estimator).
  TransformerModel clone() const;

  // Snapshot/restore of all parameter values, for best-checkpoint selection.
  std::vector<std::vector<double>> snapshot_values() const;
  void restore_values(const std::vector<std::vector<double>>& snap);

 private:
  Tensor apply_norm(int site, const Tensor& x, ForwardHooks* hooks) const;
  Tensor activation_fn(const Tensor& x) const;
  Tensor softmax_rows(const Tensor& scores) const;

  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<AttentionWeights> attn_;
  std::vector<FfnWeights> ffn_;
  std::vector<NormSite> sites_;  // [emb, layer0.attn, layer0.ffn, layer1.attn, ...]
  Tensor head_w_, head_b_;
  std::shared_ptr<SoftmaxEstimator> est_;
};

// FNV-1a over the raw bytes of the given tensors; used by tests to prove a
// training stage left weights untouched.
uint64_t param_hash(const std::vector<Tensor>& params);

}  // namespace hexform
