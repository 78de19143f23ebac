#include "hexform/estimator.hpp"

#include <algorithm>
#include <cmath>

#include "hexform/optim.hpp"

namespace hexform {

namespace {

constexpr int kHidden = 16;

Tensor linear_init(int in, int out, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Tensor::uniform({in, out}, rng, -bound, bound, true);
}

}  // namespace

SoftmaxEstimator::SoftmaxEstimator(int dim, std::mt19937_64& rng)
    : dim_(dim), input_scale_(1.0 / static_cast<double>(dim)) {
  if (dim < 2) throw InvalidSpec("estimator dim must be >= 2");
  w1_ = linear_init(1, kHidden, rng);
  b1_ = Tensor::uniform({kHidden}, rng, -1.0, 1.0, true);
  w2_ = linear_init(kHidden, kHidden, rng);
  b2_ = Tensor::uniform({kHidden}, rng, -0.25, 0.25, true);
  w3_ = linear_init(kHidden, 1, rng);
  b3_ = Tensor::uniform({1}, rng, -0.25, 0.25, true);
}

Tensor SoftmaxEstimator::reciprocal_net(const Tensor& u) const {
  auto h1 = relu(add(matmul(u, w1_), b1_));
  auto h2 = relu(add(matmul(h1, w2_), b2_));
  return add(matmul(h2, w3_), b3_);
}

Tensor SoftmaxEstimator::forward_rows(const Tensor& rows) const {
  if (rows.ndim() != 2) throw ShapeMismatch("estimator expects [n, d] rows");
  auto shifted = scalar_add(scalar_mul(rows, 0.5), 1.0);
  auto cubed = mul(mul(shifted, shifted), shifted);
  auto z = row_sums(relu(cubed));                        // [n,1]
  auto t = reciprocal_net(scalar_mul(z, input_scale_));  // [n,1]
  return mul(rows, t);  // t broadcasts across each row
}

std::vector<Tensor> SoftmaxEstimator::parameters() const {
  return {w1_, b1_, w2_, b2_, w3_, b3_};
}

void SoftmaxEstimator::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (Tensor p : parameters()) p.set_requires_grad(!frozen);
}

SoftmaxEstimator SoftmaxEstimator::clone() const {
  SoftmaxEstimator out = *this;
  auto copy = [](const Tensor& t) {
    return Tensor::from_data(
        t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
        t.requires_grad());
  };
  out.w1_ = copy(w1_);
  out.b1_ = copy(b1_);
  out.w2_ = copy(w2_);
  out.b2_ = copy(b2_);
  out.w3_ = copy(w3_);
  out.b3_ = copy(b3_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> SoftmaxEstimator::named_parameters()
    const {
  return {{"estimator.w1", w1_}, {"estimator.b1", b1_},
          {"estimator.w2", w2_}, {"estimator.b2", b2_},
          {"estimator.w3", w3_}, {"estimator.b3", b3_}};
}

std::pair<SoftmaxEstimator, EstimatorTrainReport> train_estimator(
    int dim, uint64_t seed, const EstimatorTrainOptions& opts) {
  if (dim < 2) throw InvalidSpec("estimator dim must be >= 2");

  std::mt19937_64 rng(seed);
  SoftmaxEstimator est(dim, rng);

  // Row statistic z and its reciprocal, sampled from uniform[-3,3]^dim rows.
  // Rows whose statistic collapses to ~0 (every entry under -2) are
  // resampled; the reciprocal target is unbounded there.
  const double z_floor = 0.05 * dim;
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  int64_t n_rows = opts.dataset_rows;
  std::vector<double> u_all(n_rows), y_all(n_rows);
  std::vector<std::vector<double>> heldout_rows;
  int64_t n_train = n_rows - n_rows / 10;
  std::vector<double> row(dim);
  for (int64_t r = 0; r < n_rows; ++r) {
    double z = 0.0;
    do {
      z = 0.0;
      for (int j = 0; j < dim; ++j) {
        row[j] = unif(rng);
        double c = row[j] / 2.0 + 1.0;
        double f = c * c * c;
        if (f > 0.0) z += f;
      }
    } while (z < z_floor);
    u_all[r] = z / dim;
    y_all[r] = 1.0 / z;
    if (r >= n_train) heldout_rows.push_back(row);
  }

  auto params = est.parameters();
  AdamW opt(params, {.lr = opts.lr, .weight_decay = 0.0});

  auto full_mse = [&](int64_t lo, int64_t hi) {
    NoGradGuard ng;
    double acc = 0.0;
    const int64_t chunk = 4096;
    for (int64_t at = lo; at < hi; at += chunk) {
      int64_t n = std::min(chunk, hi - at);
      auto u = Tensor::from_data(
          {static_cast<int>(n), 1},
          {u_all.begin() + at, u_all.begin() + at + n});
      auto pred = est.reciprocal_net(u);
      for (int64_t i = 0; i < n; ++i) {
        double d = pred.data()[i] - y_all[at + i];
        acc += d * d;
      }
    }
    return acc / static_cast<double>(hi - lo);
  };

  std::mt19937_64 batch_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int64_t> pick(0, n_train - 1);
  EstimatorTrainReport report;
  double ema = -1.0;
  int64_t step = 0;
  while (step < opts.max_steps) {
    std::vector<double> ub(opts.batch), yb(opts.batch);
    for (int i = 0; i < opts.batch; ++i) {
      int64_t r = pick(batch_rng);
      ub[i] = u_all[r];
      yb[i] = y_all[r];
    }
    auto u = Tensor::from_data({opts.batch, 1}, std::move(ub));
    auto y = Tensor::from_data({opts.batch, 1}, std::move(yb));
    opt.zero_grad();
    auto loss = mse_loss(est.reciprocal_net(u), y);
    backward(loss);
    opt.step();
    ++step;
    double l = loss.item();
    ema = ema < 0 ? l : 0.99 * ema + 0.01 * l;
    if (ema <= opts.stop_mse && step % 100 == 0 &&
        full_mse(0, n_train) <= opts.stop_mse) {
      break;
    }
  }

  report.steps_used = step;
  report.train_mse = full_mse(0, n_train);
  report.heldout_mse = full_mse(n_train, n_rows);
  report.reached_target = report.train_mse <= opts.stop_mse;

  // End-to-end quality of the estimate against exact softmax on the held-out
  // rows. The x_i * T(z) structure has a large irreducible error here; this
  // number is reported, not optimized.
  {
    NoGradGuard ng;
    double acc = 0.0;
    int64_t count = 0;
    for (const auto& hrow : heldout_rows) {
      auto x = Tensor::from_data({1, dim}, hrow);
      auto pred = est.forward_rows(x);
      auto target = softmax_exact(x, -1);
      for (int j = 0; j < dim; ++j) {
        double d = pred.data()[j] - target.data()[j];
        acc += d * d;
        ++count;
      }
    }
    report.softmax_mse_heldout = acc / static_cast<double>(count);
  }

  if (report.heldout_mse > opts.converge_mse) {
    throw DidNotConverge("estimator held-out MSE " +
                         std::to_string(report.heldout_mse) + " after " +
                         std::to_string(step) + " steps");
  }
  return {std::move(est), report};
}

}  // namespace hexform
