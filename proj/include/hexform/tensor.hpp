#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hexform/errors.hpp"

namespace hexform {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Scalar primitive kinds recorded by the op trace. Composite ops report the
// primitives they reduce to (matmul -> mul+add); gelu and tanh stay distinct
// kinds so the audit can tell an activation from a pooler.
enum class Prim { Add, Mul, Relu, Gelu, Exp, Div, Sqrt, Tanh, Log, Compare };

const char* prim_name(Prim p);

class OpTrace {
 public:
  void record(Prim p, int64_t n = 1);
  int64_t count(Prim p) const;
  std::set<Prim> kinds() const;
  // True when every recorded primitive is in `allowed`.
  bool only(std::initializer_list<Prim> allowed) const;
  void clear();

 private:
  int64_t counts_[10] = {0};
};

// Installs `trace` as the active trace for the current thread.
class TraceScope {
 public:
  explicit TraceScope(OpTrace& trace);
  ~TraceScope();
  TraceScope(const TraceScope&) = delete;
  TraceScope& operator=(const TraceScope&) = delete;

 private:
  OpTrace* prev_;
};

void trace_prim(Prim p, int64_t n = 1);

// Disables graph construction (forward values only) for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Dense f64 tensor with reverse-mode autodiff. Value semantics: copies share
// the underlying node, ops never mutate their inputs. The only sanctioned
// in-place writes are optimizer updates and checkpoint loads via
// mutable_data(), between graph lifetimes.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated lazily, same length as values
    bool requires_grad = false;
    std::vector<Tensor> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backprop;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, std::mt19937_64& rng, double mean,
                       double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;  // negative axis counts from the back
  int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  std::span<const double> grad() const;  // empty when not allocated
  void zero_grad();

  // Value copy detached from the graph.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_op_output(Shape shape, std::vector<double> values,
                               std::vector<Tensor> parents,
                               std::function<void(Tensor::Node&)> backprop,
                               const char* op_name);
};

// Builds an op output node: validates finiteness, wires parents/backprop when
// the graph is live. The extension point for ops with bespoke gradients.
Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(Tensor::Node&)> backprop,
                      const char* op_name);

// ---- ops ----------------------------------------------------------------

// add/sub/mul broadcast numpy-style with trailing alignment; every aligned
// dim must match or be 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-d

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax_exact(const Tensor& x, int axis = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor row_sums(const Tensor& x);  // [r,c] -> [r,1]

Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
// logits [n,k]; labels of length n, entries in [0,k) or -1 to skip the row.
Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& labels);

// Reverse-mode sweep from a scalar loss. Gradients accumulate until
// zero_grad, so per-example backward calls implement batch accumulation.
void backward(const Tensor& loss);

double max_abs(const Tensor& x);

}  // namespace hexform
