#include "hexform/model.hpp"

#include <cmath>
#include <cstring>

namespace hexform {

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Classify: return "classify";
    case TaskKind::Regress: return "regress";
    case TaskKind::Tag: return "tag";
  }
  return "?";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "classify") return TaskKind::Classify;
  if (name == "regress") return TaskKind::Regress;
  if (name == "tag") return TaskKind::Tag;
  throw InvalidSpec("unknown task '" + name + "'");
}

void ModelConfig::validate() const {
  if (num_layers < 1 || hidden_size < 1 || num_heads < 1 || ffn_size < 1 ||
      vocab_size < 1 || max_seq_len < 1 || num_outputs < 1) {
    throw BadConfig("all sizes must be positive");
  }
  if (hidden_size % num_heads != 0) {
    throw BadConfig("hidden_size must be divisible by num_heads");
  }
  if (!std::isfinite(mask_value)) {
    throw NonFiniteMaskValue("mask_value must be finite");
  }
  if (task == TaskKind::Regress && num_outputs != 1) {
    throw BadConfig("regression head has one output");
  }
}

Tensor ln_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.dim(-1) < 2) throw ShapeMismatch("layernorm needs feature dim >= 2");
  int h = x.dim(-1);
  int64_t rows = x.numel() / h;
  std::span<const double> xv = x.data();
  std::vector<double> vals(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * h];
    double m = 0.0;
    for (int j = 0; j < h; ++j) m += row[j];
    m /= h;
    double var = 0.0;
    for (int j = 0; j < h; ++j) {
      double d = row[j] - m;
      var += d * d;
    }
    var /= h;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < h; ++j) vals[r * h + j] = (row[j] - m) * inv;
  }
  trace_prim(Prim::Add, 3 * x.numel());
  trace_prim(Prim::Mul, x.numel());
  trace_prim(Prim::Div, x.numel());
  trace_prim(Prim::Sqrt, rows);

  auto normalized = make_op_output(
      x.shape(), std::move(vals), {x},
      [h, rows, eps](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        auto& node = *px.node();
        if (node.grad.size() != node.values.size())
          node.grad.assign(node.values.size(), 0.0);
        std::span<const double> xv2 = px.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* row = &xv2[r * h];
          double m = 0.0;
          for (int j = 0; j < h; ++j) m += row[j];
          m /= h;
          double var = 0.0;
          for (int j = 0; j < h; ++j) {
            double d = row[j] - m;
            var += d * d;
          }
          var /= h;
          double inv = 1.0 / std::sqrt(var + eps);
          double gsum = 0.0, gdot = 0.0;
          for (int j = 0; j < h; ++j) {
            double xhat = (row[j] - m) * inv;
            gsum += o.grad[r * h + j];
            gdot += o.grad[r * h + j] * xhat;
          }
          for (int j = 0; j < h; ++j) {
            double xhat = (row[j] - m) * inv;
            node.grad[r * h + j] +=
                inv * (o.grad[r * h + j] - gsum / h - xhat * gdot / h);
          }
        }
      },
      "layernorm");
  return add(mul(normalized, gamma), beta);
}

Tensor affine_norm_forward(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta) {
  if (gamma.numel() != x.dim(-1) || beta.numel() != x.dim(-1)) {
    throw ShapeMismatch("affine norm parameter length vs feature dim");
  }
  return add(mul(x, gamma), beta);
}

Tensor apply_mask(const Tensor& scores, const std::vector<uint8_t>& mask,
                  double mask_value) {
  if (!std::isfinite(mask_value)) {
    throw NonFiniteMaskValue("mask value " + std::to_string(mask_value));
  }
  if (mask.empty()) return scores;
  if (static_cast<int>(mask.size()) != scores.dim(-1)) {
    throw ShapeMismatch("mask length vs key positions");
  }
  std::vector<double> addend(mask.size());
  for (size_t j = 0; j < mask.size(); ++j) {
    addend[j] = mask[j] ? mask_value : 0.0;
  }
  return add(scores, Tensor::from_data({static_cast<int>(mask.size())},
                                       std::move(addend)));
}

// ---- model -----------------------------------------------------------------

namespace {

// Xavier-style fan-based init; this model trains from scratch, so the tiny
// fixed stddev used for large pretrained encoders would under-scale it.
Tensor weight_init(int in, int out, std::mt19937_64& rng) {
  double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  return Tensor::normal({in, out}, rng, 0.0, stddev, true);
}

std::string site_label(int i) {
  if (i == 0) return "emb";
  int layer = (i - 1) / 2;
  return "layer" + std::to_string(layer) +
         ((i - 1) % 2 == 0 ? ".attn" : ".ffn");
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  tok_emb_ = Tensor::normal({cfg_.vocab_size, cfg_.hidden_size}, rng, 0.0, 1.0,
                            true);
  pos_emb_ = Tensor::normal({cfg_.max_seq_len, cfg_.hidden_size}, rng, 0.0, 0.5,
                            true);
  int h = cfg_.hidden_size;
  for (int l = 0; l < cfg_.num_layers; ++l) {
    AttentionWeights aw;
    aw.wq = weight_init(h, h, rng);
    aw.bq = Tensor::zeros({h}, true);
    aw.wk = weight_init(h, h, rng);
    aw.bk = Tensor::zeros({h}, true);
    aw.wv = weight_init(h, h, rng);
    aw.bv = Tensor::zeros({h}, true);
    aw.wo = weight_init(h, h, rng);
    aw.bo = Tensor::zeros({h}, true);
    attn_.push_back(std::move(aw));
    FfnWeights fw;
    fw.w1 = weight_init(h, cfg_.ffn_size, rng);
    fw.b1 = Tensor::zeros({cfg_.ffn_size}, true);
    fw.w2 = weight_init(cfg_.ffn_size, h, rng);
    fw.b2 = Tensor::zeros({h}, true);
    ffn_.push_back(std::move(fw));
  }
  int n_sites = 1 + 2 * cfg_.num_layers;
  for (int i = 0; i < n_sites; ++i) {
    NormSite s;
    s.name = site_label(i);
    s.gamma = Tensor::full({h}, 1.0, true);
    s.beta = Tensor::zeros({h}, true);
    sites_.push_back(std::move(s));
  }
  head_w_ = weight_init(h, cfg_.num_outputs, rng);
  head_b_ = Tensor::zeros({cfg_.num_outputs}, true);
}

Tensor TransformerModel::embed(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw EmptyQuery("no tokens");
  if (static_cast<int>(tokens.size()) > cfg_.max_seq_len) {
    throw SeqTooLong(std::to_string(tokens.size()) + " > max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw VocabOverflow("token id " + std::to_string(t));
    }
  }
  auto tok = gather_rows(tok_emb_, tokens);
  auto pos = slice_rows(pos_emb_, 0, static_cast<int>(tokens.size()));
  return add(tok, pos);
}

Tensor TransformerModel::apply_norm(int site, const Tensor& x,
                                    ForwardHooks* hooks) const {
  const NormSite& s = sites_[site];
  if (hooks) {
    hooks->max_preln_abs = std::max(hooks->max_preln_abs, max_abs(x));
  }
  if (cfg_.norm == NormKind::LayerNorm) {
    if (s.exact_dropped) {
      throw MissingAffineNorm("exact LN dropped at site " + s.name);
    }
    auto out = ln_forward(x, s.gamma, s.beta);
    if (hooks && hooks->capture_norm_io) {
      hooks->norm_io.emplace_back(x.detach(), out.detach());
    }
    return out;
  }
  if (!s.gamma_t.defined()) {
    throw MissingAffineNorm("no affine parameters at site " + s.name);
  }
  return affine_norm_forward(x, s.gamma_t, s.beta_t);
}

Tensor TransformerModel::activation_fn(const Tensor& x) const {
  return cfg_.activation == Activation::Gelu ? gelu(x) : relu(x);
}

Tensor TransformerModel::softmax_rows(const Tensor& scores) const {
  if (cfg_.softmax == SoftmaxKind::Exact) {
    return softmax_exact(scores, -1);
  }
  if (!est_) {
    throw BadConfig("softmax mode is Estimated but no estimator attached");
  }
  return est_->forward_rows(scores);
}

Tensor TransformerModel::attention_forward(int layer, const Tensor& h,
                                           const std::vector<uint8_t>& mask) const {
  const AttentionWeights& w = attn_[layer];
  auto q = add(matmul(h, w.wq), w.bq);
  auto k = add(matmul(h, w.wk), w.bk);
  auto v = add(matmul(h, w.wv), w.bv);
  if (!cfg_.scale_absorbed) {
    q = scalar_mul(q, 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim())));
  }
  int d = cfg_.head_dim();
  std::vector<Tensor> ctx;
  for (int head = 0; head < cfg_.num_heads; ++head) {
    auto qh = slice_cols(q, head * d, (head + 1) * d);
    auto kh = slice_cols(k, head * d, (head + 1) * d);
    auto vh = slice_cols(v, head * d, (head + 1) * d);
    auto scores = matmul(qh, transpose(kh));
    scores = apply_mask(scores, mask, cfg_.mask_value);
    auto probs = softmax_rows(scores);
    ctx.push_back(matmul(probs, vh));
  }
  auto merged = cfg_.num_heads == 1 ? ctx[0] : concat_cols(ctx);
  return add(matmul(merged, w.wo), w.bo);
}

Tensor TransformerModel::forward(const Tensor& embeddings,
                                 const std::vector<uint8_t>& mask,
                                 ForwardHooks* hooks) const {
  if (embeddings.ndim() != 2 || embeddings.dim(1) != cfg_.hidden_size) {
    throw ShapeMismatch("embeddings must be [seq, hidden]");
  }
  if (embeddings.dim(0) > cfg_.max_seq_len) {
    throw SeqTooLong("sequence of " + std::to_string(embeddings.dim(0)));
  }
  if (!mask.empty() && static_cast<int>(mask.size()) != embeddings.dim(0)) {
    throw ShapeMismatch("mask length vs sequence length");
  }
  auto h = apply_norm(0, embeddings, hooks);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    auto a = attention_forward(l, h, mask);
    h = apply_norm(1 + 2 * l, add(h, a), hooks);
    const FfnWeights& f = ffn_[l];
    auto mid = activation_fn(add(matmul(h, f.w1), f.b1));
    auto out = add(matmul(mid, f.w2), f.b2);
    h = apply_norm(2 + 2 * l, add(h, out), hooks);
  }
  if (cfg_.task == TaskKind::Tag) {
    return add(matmul(h, head_w_), head_b_);  // per-position logits
  }
  auto first = slice_rows(h, 0, 1);  // sequence head reads position 0
  return add(matmul(first, head_w_), head_b_);
}

Tensor TransformerModel::forward_tokens(const std::vector<int>& tokens,
                                        const std::vector<uint8_t>& mask,
                                        ForwardHooks* hooks) const {
  return forward(embed(tokens), mask, hooks);
}

void TransformerModel::absorb_attention_scale() {
  if (cfg_.scale_absorbed) return;
  double s = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));
  for (auto& w : attn_) {
    for (double& v : w.wq.mutable_data()) v *= s;
    for (double& v : w.bq.mutable_data()) v *= s;
  }
  cfg_.scale_absorbed = true;
}

std::vector<Tensor> TransformerModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> TransformerModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("emb.token", tok_emb_);
  out.emplace_back("emb.position", pos_emb_);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    const auto& a = attn_[l];
    out.emplace_back(p + "attn.wq", a.wq);
    out.emplace_back(p + "attn.bq", a.bq);
    out.emplace_back(p + "attn.wk", a.wk);
    out.emplace_back(p + "attn.bk", a.bk);
    out.emplace_back(p + "attn.wv", a.wv);
    out.emplace_back(p + "attn.bv", a.bv);
    out.emplace_back(p + "attn.wo", a.wo);
    out.emplace_back(p + "attn.bo", a.bo);
    const auto& f = ffn_[l];
    out.emplace_back(p + "ffn.w1", f.w1);
    out.emplace_back(p + "ffn.b1", f.b1);
    out.emplace_back(p + "ffn.w2", f.w2);
    out.emplace_back(p + "ffn.b2", f.b2);
  }
  for (const auto& s : sites_) {
    if (s.gamma.defined() && !s.exact_dropped) {
      out.emplace_back("norm." + s.name + ".gamma", s.gamma);
      out.emplace_back("norm." + s.name + ".beta", s.beta);
    }
    if (s.gamma_t.defined()) {
      out.emplace_back("norm." + s.name + ".gamma_t", s.gamma_t);
      out.emplace_back("norm." + s.name + ".beta_t", s.beta_t);
    }
  }
  out.emplace_back("head.w", head_w_);
  out.emplace_back("head.b", head_b_);
  if (est_) {
    for (auto& [name, t] : est_->named_parameters()) out.emplace_back(name, t);
  }
  return out;
}

void TransformerModel::attach_estimator(std::shared_ptr<SoftmaxEstimator> est) {
  est_ = std::move(est);
}

TransformerModel TransformerModel::clone() const {
  TransformerModel out = *this;
  auto copy = [](Tensor& t) {
    if (t.defined()) {
      t = Tensor::from_data(
          t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
          t.requires_grad());
    }
  };
  copy(out.tok_emb_);
  copy(out.pos_emb_);
  for (auto& a : out.attn_) {
    copy(a.wq); copy(a.bq); copy(a.wk); copy(a.bk);
    copy(a.wv); copy(a.bv); copy(a.wo); copy(a.bo);
  }
  for (auto& f : out.ffn_) {
    copy(f.w1); copy(f.b1); copy(f.w2); copy(f.b2);
  }
  for (auto& s : out.sites_) {
    copy(s.gamma); copy(s.beta); copy(s.gamma_t); copy(s.beta_t);
  }
  copy(out.head_w_);
  copy(out.head_b_);
  if (est_) {
    out.est_ = std::make_shared<SoftmaxEstimator>(est_->clone());
  }
  return out;
}

std::vector<std::vector<double>> TransformerModel::snapshot_values() const {
  std::vector<std::vector<double>> snap;
  for (const Tensor& p : parameters()) {
    snap.emplace_back(p.data().begin(), p.data().end());
  }
  return snap;
}

void TransformerModel::restore_values(
    const std::vector<std::vector<double>>& snap) {
  auto params = parameters();
  if (snap.size() != params.size()) {
    throw ShapeMismatch("snapshot arity mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    if (snap[i].size() != dst.size()) throw ShapeMismatch("snapshot shape");
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

uint64_t param_hash(const std::vector<Tensor>& params) {
  uint64_t h = 1469598103934665603ULL;
  for (const Tensor& p : params) {
    for (double v : p.data()) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

}  // namespace hexform
