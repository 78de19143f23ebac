#include "hexform/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace hexform {

namespace {

thread_local OpTrace* g_trace = nullptr;
thread_local int g_no_grad_depth = 0;

constexpr double kGeluCubic = 0.044715;

void ensure_finite(std::span<const double> vals, const char* op) {
  for (double v : vals) {
    if (!std::isfinite(v)) {
      throw NonFiniteValue(std::string(op) + " produced a non-finite value");
    }
  }
}

}  // namespace

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

const char* prim_name(Prim p) {
  switch (p) {
    case Prim::Add: return "add";
    case Prim::Mul: return "mul";
    case Prim::Relu: return "relu";
    case Prim::Gelu: return "gelu";
    case Prim::Exp: return "exp";
    case Prim::Div: return "div";
    case Prim::Sqrt: return "sqrt";
    case Prim::Tanh: return "tanh";
    case Prim::Log: return "log";
    case Prim::Compare: return "compare";
  }
  return "?";
}

void OpTrace::record(Prim p, int64_t n) { counts_[static_cast<int>(p)] += n; }

int64_t OpTrace::count(Prim p) const { return counts_[static_cast<int>(p)]; }

std::set<Prim> OpTrace::kinds() const {
  std::set<Prim> out;
  for (int i = 0; i < 10; ++i) {
    if (counts_[i] > 0) out.insert(static_cast<Prim>(i));
  }
  return out;
}

bool OpTrace::only(std::initializer_list<Prim> allowed) const {
  for (Prim p : kinds()) {
    if (std::find(allowed.begin(), allowed.end(), p) == allowed.end()) {
      return false;
    }
  }
  return true;
}

void OpTrace::clear() { std::fill(std::begin(counts_), std::end(counts_), 0); }

TraceScope::TraceScope(OpTrace& trace) : prev_(g_trace) { g_trace = &trace; }
TraceScope::~TraceScope() { g_trace = prev_; }

void trace_prim(Prim p, int64_t n) {
  if (g_trace != nullptr && n > 0) g_trace->record(p, n);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeMismatch("extent must be positive, got " + shape_str(shape));
  }
  auto n = numel_of(shape);
  if (values.empty()) values.assign(n, 0.0);
  if (static_cast<int64_t>(values.size()) != n) {
    throw ShapeMismatch("data length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> vals(numel_of(shape));
  for (double& v : vals) v = dist(rng);
  return from_data(std::move(shape), std::move(vals), requires_grad);
}

Tensor Tensor::normal(Shape shape, std::mt19937_64& rng, double mean,
                      double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<double> vals(numel_of(shape));
  for (double& v : vals) v = dist(rng);
  return from_data(std::move(shape), std::move(vals), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }

int Tensor::dim(int axis) const {
  int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeMismatch("axis out of range");
  return node_->shape[axis];
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(node_->values.size());
}

std::span<const double> Tensor::data() const { return node_->values; }
std::span<double> Tensor::mutable_data() { return node_->values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeMismatch("item() on tensor with numel != 1");
  return node_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) {
    throw ShapeMismatch("index rank mismatch");
  }
  int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->values[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  node_->requires_grad = rg;
  if (!rg) node_->grad.clear();
}

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from_data(node_->shape, node_->values, false);
}

// Shared construction path for every op: wires parents/backprop only when the
// graph is live, and rejects non-finite outputs right away.
Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(Tensor::Node&)> backprop,
                      const char* op_name) {
  ensure_finite(values, op_name);
  auto node = std::make_shared<Tensor::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool rg = false;
  if (grad_enabled()) {
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

// ---- broadcasting ----------------------------------------------------------

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    int da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " +
                          shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 for broadcast (size-1 or missing) dims, aligned to
// the output rank.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    size_t oi = out.size() - (in.size() - i);
    strides[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : s;
    s *= in[i];
  }
  return strides;
}

struct BroadcastPlan {
  Shape out_shape;
  std::vector<int64_t> sa, sb;
  bool same_shape;
};

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b) {
  BroadcastPlan p;
  p.same_shape = a.shape() == b.shape();
  p.out_shape = p.same_shape ? a.shape() : broadcast_shape(a.shape(), b.shape());
  if (!p.same_shape) {
    p.sa = broadcast_strides(a.shape(), p.out_shape);
    p.sb = broadcast_strides(b.shape(), p.out_shape);
  }
  return p;
}

template <typename F>
std::vector<double> broadcast_apply(const Tensor& a, const Tensor& b,
                                    const BroadcastPlan& p, F f) {
  std::span<const double> av = a.data(), bv = b.data();
  int64_t n = numel_of(p.out_shape);
  std::vector<double> out(n);
  if (p.same_shape) {
    for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    return out;
  }
  size_t rank = p.out_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = f(av[ia], bv[ib]);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out_shape[d]) break;
      idx[d] = 0;
      ia -= p.sa[d] * p.out_shape[d];
      ib -= p.sb[d] * p.out_shape[d];
    }
  }
  return out;
}

// Accumulates out-shaped gradient into an operand's grad, summing over the
// dims that were broadcast.
void reduce_into_grad(std::span<const double> out_grad, const Shape& out_shape,
                      Tensor& operand, const std::vector<int64_t>& strides,
                      bool same_shape, std::span<const double> scale = {}) {
  auto& g = operand.node()->grad;
  if (same_shape) {
    if (scale.empty()) {
      for (size_t i = 0; i < out_grad.size(); ++i) g[i] += out_grad[i];
    } else {
      for (size_t i = 0; i < out_grad.size(); ++i) g[i] += out_grad[i] * scale[i];
    }
    return;
  }
  size_t rank = out_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t io = 0;
  int64_t n = numel_of(out_shape);
  for (int64_t i = 0; i < n; ++i) {
    g[io] += scale.empty() ? out_grad[i] : out_grad[i] * scale[i];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      io += strides[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      io -= strides[d] * out_shape[d];
    }
  }
}

void alloc_grad(Tensor& t) {
  auto& n = *t.node();
  if (n.requires_grad && n.grad.size() != n.values.size()) {
    n.grad.assign(n.values.size(), 0.0);
  }
}

// For the mul backward we need the broadcast-expanded values of the other
// operand aligned with the output; recompute them on demand.
std::vector<double> expand_to(const Tensor& t, const Shape& out_shape) {
  if (t.shape() == out_shape) {
    return std::vector<double>(t.data().begin(), t.data().end());
  }
  auto strides = broadcast_strides(t.shape(), out_shape);
  int64_t n = numel_of(out_shape);
  std::vector<double> out(n);
  std::span<const double> v = t.data();
  size_t rank = out_shape.size();
  std::vector<int> idx(rank, 0);
  int64_t ii = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = v[ii];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      ++idx[d];
      ii += strides[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      ii -= strides[d] * out_shape[d];
    }
  }
  return out;
}

}  // namespace

// ---- elementwise ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  auto p = plan_broadcast(a, b);
  auto vals = broadcast_apply(a, b, p, [](double x, double y) { return x + y; });
  trace_prim(Prim::Add, numel_of(p.out_shape));
  return make_op_output(
      p.out_shape, std::move(vals), {a, b},
      [p](Tensor::Node& out) {
        Tensor pa = out.parents[0], pb = out.parents[1];
        if (pa.requires_grad()) {
          alloc_grad(pa);
          reduce_into_grad(out.grad, p.out_shape, pa, p.sa,
                           pa.shape() == p.out_shape);
        }
        if (pb.requires_grad()) {
          alloc_grad(pb);
          reduce_into_grad(out.grad, p.out_shape, pb, p.sb,
                           pb.shape() == p.out_shape);
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto p = plan_broadcast(a, b);
  auto vals = broadcast_apply(a, b, p, [](double x, double y) { return x - y; });
  // a - b lowers to add + mul(-1) in the arithmetic contract
  trace_prim(Prim::Add, numel_of(p.out_shape));
  trace_prim(Prim::Mul, numel_of(p.out_shape));
  return make_op_output(
      p.out_shape, std::move(vals), {a, b},
      [p](Tensor::Node& out) {
        Tensor pa = out.parents[0], pb = out.parents[1];
        if (pa.requires_grad()) {
          alloc_grad(pa);
          reduce_into_grad(out.grad, p.out_shape, pa, p.sa,
                           pa.shape() == p.out_shape);
        }
        if (pb.requires_grad()) {
          alloc_grad(pb);
          std::vector<double> neg(out.grad.size());
          for (size_t i = 0; i < neg.size(); ++i) neg[i] = -out.grad[i];
          reduce_into_grad(neg, p.out_shape, pb, p.sb,
                           pb.shape() == p.out_shape);
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto p = plan_broadcast(a, b);
  auto vals = broadcast_apply(a, b, p, [](double x, double y) { return x * y; });
  trace_prim(Prim::Mul, numel_of(p.out_shape));
  return make_op_output(
      p.out_shape, std::move(vals), {a, b},
      [p](Tensor::Node& out) {
        Tensor pa = out.parents[0], pb = out.parents[1];
        if (pa.requires_grad()) {
          alloc_grad(pa);
          auto bexp = expand_to(pb, p.out_shape);
          reduce_into_grad(out.grad, p.out_shape, pa, p.sa,
                           pa.shape() == p.out_shape, bexp);
        }
        if (pb.requires_grad()) {
          alloc_grad(pb);
          auto aexp = expand_to(pa, p.out_shape);
          reduce_into_grad(out.grad, p.out_shape, pb, p.sb,
                           pb.shape() == p.out_shape, aexp);
        }
      },
      "mul");
}

Tensor scalar_mul(const Tensor& a, double s) {
  std::vector<double> vals(a.data().begin(), a.data().end());
  for (double& v : vals) v *= s;
  trace_prim(Prim::Mul, a.numel());
  return make_op_output(
      a.shape(), std::move(vals), {a},
      [s](Tensor::Node& out) {
        Tensor pa = out.parents[0];
        if (!pa.requires_grad()) return;
        alloc_grad(pa);
        auto& g = pa.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * s;
      },
      "scalar_mul");
}

Tensor scalar_add(const Tensor& a, double s) {
  std::vector<double> vals(a.data().begin(), a.data().end());
  for (double& v : vals) v += s;
  trace_prim(Prim::Add, a.numel());
  return make_op_output(
      a.shape(), std::move(vals), {a},
      [](Tensor::Node& out) {
        Tensor pa = out.parents[0];
        if (!pa.requires_grad()) return;
        alloc_grad(pa);
        auto& g = pa.node()->grad;
        for (size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
      },
      "scalar_add");
}

// ---- matmul / transpose ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeMismatch("matmul " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::span<const double> av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  // i-k-j order: each out element accumulates in ascending k, which is the
  // same summation order the ciphertext lowering uses.
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double aik = av[static_cast<size_t>(i) * k + kk];
      const double* brow = &bv[static_cast<size_t>(kk) * n];
      double* orow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  trace_prim(Prim::Mul, static_cast<int64_t>(m) * k * n);
  trace_prim(Prim::Add, static_cast<int64_t>(m) * k * n);
  return make_op_output(
      {m, n}, std::move(out), {a, b},
      [m, k, n](Tensor::Node& o) {
        Tensor pa = o.parents[0], pb = o.parents[1];
        if (pa.requires_grad()) {
          alloc_grad(pa);
          auto& ga = pa.node()->grad;
          std::span<const double> bv2 = pb.data();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              double g = o.grad[static_cast<size_t>(i) * n + j];
              for (int kk = 0; kk < k; ++kk)
                ga[static_cast<size_t>(i) * k + kk] +=
                    g * bv2[static_cast<size_t>(kk) * n + j];
            }
        }
        if (pb.requires_grad()) {
          alloc_grad(pb);
          auto& gb = pb.node()->grad;
          std::span<const double> av2 = pa.data();
          for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i)
                acc += av2[static_cast<size_t>(i) * k + kk] *
                       o.grad[static_cast<size_t>(i) * n + j];
              gb[static_cast<size_t>(kk) * n + j] += acc;
            }
        }
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeMismatch("transpose expects 2-d");
  int r = a.dim(0), c = a.dim(1);
  std::span<const double> av = a.data();
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
  return make_op_output(
      {c, r}, std::move(out), {a},
      [r, c](Tensor::Node& o) {
        Tensor pa = o.parents[0];
        if (!pa.requires_grad()) return;
        alloc_grad(pa);
        auto& g = pa.node()->grad;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            g[static_cast<size_t>(i) * c + j] +=
                o.grad[static_cast<size_t>(j) * r + i];
      },
      "transpose");
}

// ---- activations -----------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> vals(x.data().begin(), x.data().end());
  for (double& v : vals) v = v > 0.0 ? v : 0.0;
  trace_prim(Prim::Relu, x.numel());
  return make_op_output(
      x.shape(), std::move(vals), {x},
      [](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        std::span<const double> xv = px.data();
        // subgradient 0 at exactly 0
        for (size_t i = 0; i < g.size(); ++i)
          if (xv[i] > 0.0) g[i] += o.grad[i];
      },
      "relu");
}

Tensor gelu(const Tensor& x) {
  static const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);
  std::span<const double> xv = x.data();
  std::vector<double> vals(xv.size());
  for (size_t i = 0; i < vals.size(); ++i) {
    double v = xv[i];
    double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
    vals[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  trace_prim(Prim::Gelu, x.numel());
  return make_op_output(
      x.shape(), std::move(vals), {x},
      [](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        std::span<const double> xv2 = px.data();
        for (size_t i = 0; i < g.size(); ++i) {
          double v = xv2[i];
          double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
          double t = std::tanh(u);
          double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
          double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
          g[i] += o.grad[i] * d;
        }
      },
      "gelu");
}

Tensor softmax_exact(const Tensor& x, int axis) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeMismatch("softmax axis out of range");
  int len = x.shape()[axis];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];

  std::span<const double> xv = x.data();
  std::vector<double> vals(xv.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * len * inner + in;
      // max-subtraction stabilization; mathematically a no-op by shift
      // invariance
      double mx = xv[base];
      for (int i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (int i = 0; i < len; ++i) {
        double e = std::exp(xv[base + i * inner] - mx);
        vals[base + i * inner] = e;
        z += e;
      }
      for (int i = 0; i < len; ++i) vals[base + i * inner] /= z;
    }
  }
  trace_prim(Prim::Exp, x.numel());
  trace_prim(Prim::Div, x.numel());
  trace_prim(Prim::Add, x.numel());
  trace_prim(Prim::Compare, x.numel());
  return make_op_output(
      x.shape(), std::move(vals), {x},
      [len, inner, outer](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        const auto& y = o.values;
        for (int64_t ou = 0; ou < outer; ++ou) {
          for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ou * len * inner + in;
            double dot = 0.0;
            for (int i = 0; i < len; ++i)
              dot += o.grad[base + i * inner] * y[base + i * inner];
            for (int i = 0; i < len; ++i)
              g[base + i * inner] +=
                  y[base + i * inner] * (o.grad[base + i * inner] - dot);
          }
        }
      },
      "softmax_exact");
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  trace_prim(Prim::Add, x.numel());
  return make_op_output(
      {1}, {acc}, {x},
      [](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        for (double& v : g) v += o.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  double inv = 1.0 / static_cast<double>(x.numel());
  trace_prim(Prim::Add, x.numel());
  trace_prim(Prim::Mul, 1);
  return make_op_output(
      {1}, {acc * inv}, {x},
      [inv](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        for (double& v : g) v += o.grad[0] * inv;
      },
      "mean");
}

Tensor row_sums(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeMismatch("row_sums expects 2-d");
  int r = x.dim(0), c = x.dim(1);
  std::span<const double> xv = x.data();
  std::vector<double> out(r, 0.0);
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += xv[static_cast<size_t>(i) * c + j];
    out[i] = acc;
  }
  trace_prim(Prim::Add, x.numel());
  return make_op_output(
      {r, 1}, std::move(out), {x},
      [r, c](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            g[static_cast<size_t>(i) * c + j] += o.grad[i];
      },
      "row_sums");
}

// ---- structural ops ---------------------------------------------------------

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  if (x.ndim() != 2) throw ShapeMismatch("slice_rows expects 2-d");
  int r = x.dim(0), c = x.dim(1);
  if (r0 < 0 || r1 > r || r0 >= r1) throw ShapeMismatch("bad row slice");
  std::span<const double> xv = x.data();
  std::vector<double> out(xv.begin() + static_cast<size_t>(r0) * c,
                          xv.begin() + static_cast<size_t>(r1) * c);
  return make_op_output(
      {r1 - r0, c}, std::move(out), {x},
      [r0, c](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        for (size_t i = 0; i < o.grad.size(); ++i)
          g[static_cast<size_t>(r0) * c + i] += o.grad[i];
      },
      "slice_rows");
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.ndim() != 2) throw ShapeMismatch("slice_cols expects 2-d");
  int r = x.dim(0), c = x.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeMismatch("bad col slice");
  int w = c1 - c0;
  std::span<const double> xv = x.data();
  std::vector<double> out(static_cast<size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] =
          xv[static_cast<size_t>(i) * c + c0 + j];
  return make_op_output(
      {r, w}, std::move(out), {x},
      [r, c, c0, w](Tensor::Node& o) {
        Tensor px = o.parents[0];
        if (!px.requires_grad()) return;
        alloc_grad(px);
        auto& g = px.node()->grad;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            g[static_cast<size_t>(i) * c + c0 + j] +=
                o.grad[static_cast<size_t>(i) * w + j];
      },
      "slice_cols");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  int r = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r)
      throw ShapeMismatch("concat_cols row mismatch");
    total += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(r) * total);
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.dim(1);
    std::span<const double> pv = p.data();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<size_t>(i) * total + off + j] =
            pv[static_cast<size_t>(i) * w + j];
    off += w;
  }
  std::vector<int> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(1));
  return make_op_output(
      {r, total}, std::move(out), parts,
      [r, total, widths](Tensor::Node& o) {
        int off2 = 0;
        for (size_t pi = 0; pi < o.parents.size(); ++pi) {
          Tensor p = o.parents[pi];
          int w = widths[pi];
          if (p.requires_grad()) {
            alloc_grad(p);
            auto& g = p.node()->grad;
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < w; ++j)
                g[static_cast<size_t>(i) * w + j] +=
                    o.grad[static_cast<size_t>(i) * total + off2 + j];
          }
          off2 += w;
        }
      },
      "concat_cols");
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw ShapeMismatch("gather_rows expects 2-d table");
  int rows = table.dim(0), c = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= rows)
      throw VocabOverflow("row id " + std::to_string(id) + " out of [0," +
                          std::to_string(rows) + ")");
  }
  std::span<const double> tv = table.data();
  std::vector<double> out(ids.size() * static_cast<size_t>(c));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&tv[static_cast<size_t>(ids[i]) * c], c, &out[i * c]);
  return make_op_output(
      {static_cast<int>(ids.size()), c}, std::move(out), {table},
      [ids, c](Tensor::Node& o) {
        Tensor pt = o.parents[0];
        if (!pt.requires_grad()) return;
        alloc_grad(pt);
        auto& g = pt.node()->grad;
        for (size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < c; ++j)
            g[static_cast<size_t>(ids[i]) * c + j] +=
                o.grad[i * static_cast<size_t>(c) + j];
      },
      "gather_rows");
}

// ---- losses ----------------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeMismatch("mse_loss shapes " + shape_str(pred.shape()) + " vs " +
                        shape_str(target.shape()));
  std::span<const double> pv = pred.data(), tv = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    double d = pv[i] - tv[i];
    acc += d * d;
  }
  double inv = 1.0 / static_cast<double>(pv.size());
  trace_prim(Prim::Add, 2 * pred.numel());
  trace_prim(Prim::Mul, pred.numel() + 1);
  return make_op_output(
      {1}, {acc * inv}, {pred, target},
      [inv](Tensor::Node& o) {
        Tensor pp = o.parents[0], pt = o.parents[1];
        std::span<const double> pv2 = pp.data(), tv2 = pt.data();
        double g0 = o.grad[0];
        if (pp.requires_grad()) {
          alloc_grad(pp);
          auto& g = pp.node()->grad;
          for (size_t i = 0; i < g.size(); ++i)
            g[i] += g0 * 2.0 * inv * (pv2[i] - tv2[i]);
        }
        if (pt.requires_grad()) {
          alloc_grad(pt);
          auto& g = pt.node()->grad;
          for (size_t i = 0; i < g.size(); ++i)
            g[i] -= g0 * 2.0 * inv * (pv2[i] - tv2[i]);
        }
      },
      "mse_loss");
}

Tensor cross_entropy_with_logits(const Tensor& logits,
                                 const std::vector<int>& labels) {
  if (logits.ndim() != 2 ||
      logits.dim(0) != static_cast<int>(labels.size())) {
    throw ShapeMismatch("cross_entropy rows vs labels");
  }
  int n = logits.dim(0), k = logits.dim(1);
  std::span<const double> lv = logits.data();
  double acc = 0.0;
  int counted = 0;
  for (int i = 0; i < n; ++i) {
    int y = labels[i];
    if (y < 0) continue;
    if (y >= k) throw ShapeMismatch("label out of range");
    const double* row = &lv[static_cast<size_t>(i) * k];
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    acc += std::log(z) + mx - row[y];
    ++counted;
  }
  if (counted == 0) throw ShapeMismatch("cross_entropy with no labeled rows");
  double inv = 1.0 / counted;
  trace_prim(Prim::Exp, static_cast<int64_t>(counted) * k);
  trace_prim(Prim::Log, counted);
  trace_prim(Prim::Add, static_cast<int64_t>(counted) * k);
  trace_prim(Prim::Compare, static_cast<int64_t>(counted) * k);
  return make_op_output(
      {1}, {acc * inv}, {logits},
      [labels, n, k, inv](Tensor::Node& o) {
        Tensor pl = o.parents[0];
        if (!pl.requires_grad()) return;
        alloc_grad(pl);
        auto& g = pl.node()->grad;
        std::span<const double> lv2 = pl.data();
        double g0 = o.grad[0];
        for (int i = 0; i < n; ++i) {
          int y = labels[i];
          if (y < 0) continue;
          const double* row = &lv2[static_cast<size_t>(i) * k];
          double mx = row[0];
          for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
          double z = 0.0;
          for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
          for (int j = 0; j < k; ++j) {
            double p = std::exp(row[j] - mx) / z;
            g[static_cast<size_t>(i) * k + j] +=
                g0 * inv * (p - (j == y ? 1.0 : 0.0));
          }
        }
      },
      "cross_entropy");
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw NotScalarLoss("backward expects a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // iterative post-order DFS
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> seen;
  struct Frame {
    Tensor::Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Tensor::Node* p = f.node->parents[f.next_parent++].node().get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  auto* root = loss.node().get();
  if (root->grad.size() != root->values.size())
    root->grad.assign(root->values.size(), 0.0);
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor::Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace hexform
