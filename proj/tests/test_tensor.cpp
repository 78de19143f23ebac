#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hexform/optim.hpp"
#include "hexform/tensor.hpp"

using namespace hexform;

namespace {

// Central-difference gradient oracle: perturbs input element e of `input`,
// re-runs `f` (which must rebuild the graph), returns d f / d input[e].
double fd_grad(Tensor& input, int64_t e,
               const std::function<double()>& f, double h = 1e-5) {
  auto w = input.mutable_data();
  double keep = w[e];
  w[e] = keep + h;
  double up = f();
  w[e] = keep - h;
  double down = f();
  w[e] = keep;
  return (up - down) / (2.0 * h);
}

double rel_err(double got, double want) {
  double denom = std::max({std::fabs(got), std::fabs(want), 1e-8});
  return std::fabs(got - want) / denom;
}

}  // namespace

TEST_CASE("elementwise add basics") {
  auto a = Tensor::from_data({2}, {1, 2});
  auto b = Tensor::from_data({2}, {3, 4});
  auto c = add(a, b);
  CHECK(c.data()[0] == 4.0);
  CHECK(c.data()[1] == 6.0);

  auto z = Tensor::zeros({2});
  auto back = add(a, z);
  CHECK(back.data()[0] == a.data()[0]);
  CHECK(back.data()[1] == a.data()[1]);

  CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeMismatch);
}

TEST_CASE("add gradient is all-ones") {
  std::mt19937_64 rng(1);
  auto a = Tensor::uniform({3, 4}, rng, -2, 2, true);
  auto b = Tensor::uniform({3, 4}, rng, -2, 2, true);
  auto loss = sum(add(a, b));
  backward(loss);
  for (double g : a.grad()) CHECK(g == 1.0);
  for (double g : b.grad()) CHECK(g == 1.0);
}

TEST_CASE("elementwise mul basics and gradient vs finite differences") {
  auto a = Tensor::from_data({2}, {1, 2});
  auto b = Tensor::from_data({2}, {3, 4});
  auto c = mul(a, b);
  CHECK(c.data()[0] == 3.0);
  CHECK(c.data()[1] == 8.0);

  auto ones = Tensor::full({2}, 1.0);
  auto same = mul(a, ones);
  CHECK(same.data()[0] == a.data()[0]);

  std::mt19937_64 rng(2);
  auto x = Tensor::uniform({3, 5}, rng, -2, 2, true);
  auto y = Tensor::uniform({3, 5}, rng, -2, 2, true);
  auto loss = sum(mul(x, y));
  backward(loss);
  for (int64_t e = 0; e < x.numel(); ++e) {
    double fd = fd_grad(x, e, [&] { return sum(mul(x, y)).item(); });
    CHECK(std::fabs(x.grad()[e] - fd) < 1e-6);
  }
}

TEST_CASE("broadcasting over trailing singleton dims") {
  // [r,c] * [r,1]
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto col = Tensor::from_data({2, 1}, {10, 100});
  auto out = mul(a, col);
  CHECK(out.data()[0] == 10.0);
  CHECK(out.data()[5] == 600.0);

  // [r,c] + [c]
  auto bias = Tensor::from_data({3}, {1, 1, 1});
  auto sum_out = add(a, bias);
  CHECK(sum_out.data()[0] == 2.0);
  CHECK(sum_out.data()[5] == 7.0);

  // gradient reduces over the broadcast dims
  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto c2 = Tensor::from_data({2, 1}, {2, 3}, true);
  backward(sum(mul(x, c2)));
  CHECK(c2.grad()[0] == doctest::Approx(1 + 2 + 3));
  CHECK(c2.grad()[1] == doctest::Approx(4 + 5 + 6));
  CHECK(x.grad()[0] == doctest::Approx(2));
  CHECK(x.grad()[3] == doctest::Approx(3));
}

TEST_CASE("matmul identity and small product") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto out = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == m.data()[i]);

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11.0);

  CHECK_THROWS_AS(matmul(a, a), ShapeMismatch);
}

TEST_CASE("matmul gradients vs finite differences") {
  std::mt19937_64 rng(3);
  auto a = Tensor::uniform({4, 5}, rng, -2, 2, true);
  auto b = Tensor::uniform({5, 3}, rng, -2, 2, true);
  auto weights = Tensor::uniform({4, 3}, rng, -1, 1);
  auto run = [&] { return sum(mul(matmul(a, b), weights)).item(); };
  backward(sum(mul(matmul(a, b), weights)));
  for (int64_t e = 0; e < a.numel(); ++e) {
    CHECK(rel_err(a.grad()[e], fd_grad(a, e, run)) < 1e-4);
  }
  for (int64_t e = 0; e < b.numel(); ++e) {
    CHECK(rel_err(b.grad()[e], fd_grad(b, e, run)) < 1e-4);
  }
}

TEST_CASE("relu definition, idempotence, gradient mask") {
  auto x = Tensor::from_data({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);

  auto yy = relu(relu(x));
  for (int i = 0; i < 3; ++i) CHECK(yy.data()[i] == y.data()[i]);

  std::mt19937_64 rng(4);
  auto v = Tensor::uniform({64}, rng, -2, 2, true);
  // keep away from the kink so the finite-difference oracle is valid
  {
    auto w = v.mutable_data();
    for (double& e : w)
      if (std::fabs(e) < 1e-3) e = 0.5;
  }
  backward(sum(relu(v)));
  for (int64_t e = 0; e < v.numel(); ++e) {
    double expect = v.data()[e] > 0 ? 1.0 : 0.0;
    CHECK(v.grad()[e] == expect);
  }
}

TEST_CASE("gelu matches its closed form and stays near relu") {
  auto zero = gelu(Tensor::scalar(0.0));
  CHECK(zero.item() == 0.0);

  auto ten = gelu(Tensor::scalar(10.0));
  CHECK(std::fabs(ten.item() - 10.0) < 1e-4);

  // dense grid sweep on [-6, 6]
  const int n = 1201;
  std::vector<double> grid(n);
  for (int i = 0; i < n; ++i) grid[i] = -6.0 + 12.0 * i / (n - 1);
  auto g = gelu(Tensor::from_data({n}, grid));
  auto r = relu(Tensor::from_data({n}, grid));
  for (int i = 0; i < n; ++i) {
    CHECK(std::fabs(g.data()[i] - r.data()[i]) < 0.5);
  }

  std::mt19937_64 rng(5);
  auto x = Tensor::uniform({32}, rng, -2, 2, true);
  backward(sum(gelu(x)));
  for (int64_t e = 0; e < x.numel(); ++e) {
    double fd = fd_grad(x, e, [&] { return sum(gelu(x)).item(); });
    CHECK(rel_err(x.grad()[e], fd) < 1e-4);
  }
}

TEST_CASE("softmax_exact values, shift invariance, row sums") {
  auto flat = softmax_exact(Tensor::from_data({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i)
    CHECK(flat.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // direct evaluation of exp(x_i)/sum_j exp(x_j) for [1,2,3]
  auto s = softmax_exact(Tensor::from_data({3}, {1, 2, 3}));
  CHECK(s.data()[0] == doctest::Approx(0.090030573).epsilon(1e-7));
  CHECK(s.data()[1] == doctest::Approx(0.244728471).epsilon(1e-7));
  CHECK(s.data()[2] == doctest::Approx(0.665240956).epsilon(1e-7));

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensor::uniform({4, 7}, rng, -5, 5);
    auto y = softmax_exact(x, -1);
    auto shifted = softmax_exact(scalar_add(x, 3.7), -1);
    for (int64_t i = 0; i < y.numel(); ++i) {
      CHECK(y.data()[i] > 0.0);
      CHECK(y.data()[i] == doctest::Approx(shifted.data()[i]).epsilon(1e-12));
    }
    for (int r = 0; r < 4; ++r) {
      double row = 0;
      for (int c = 0; c < 7; ++c) row += y.at({r, c});
      CHECK(std::fabs(row - 1.0) < 1e-12);
    }
  }

  std::mt19937_64 rng2(7);
  auto x = Tensor::uniform({2, 5}, rng2, -2, 2, true);
  auto w = Tensor::uniform({2, 5}, rng2, -1, 1);
  auto run = [&] { return sum(mul(softmax_exact(x, -1), w)).item(); };
  backward(sum(mul(softmax_exact(x, -1), w)));
  for (int64_t e = 0; e < x.numel(); ++e) {
    CHECK(rel_err(x.grad()[e], fd_grad(x, e, run)) < 1e-4);
  }
}

TEST_CASE("ops are pure and deterministic") {
  std::mt19937_64 rng(8);
  auto a = Tensor::uniform({4, 4}, rng, -2, 2);
  auto b = Tensor::uniform({4, 4}, rng, -2, 2);
  std::vector<double> before(a.data().begin(), a.data().end());
  auto c1 = matmul(a, b);
  auto c2 = matmul(a, b);
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == before[i]);
    CHECK(c1.data()[i] == c2.data()[i]);
  }
}

TEST_CASE("seeded runs produce bit-identical gradients") {
  auto once = [] {
    std::mt19937_64 rng(99);
    auto x = Tensor::uniform({8, 8}, rng, -1, 1, true);
    auto y = Tensor::uniform({8, 8}, rng, -1, 1);
    backward(mse_loss(relu(matmul(x, y)), Tensor::zeros({8, 8})));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  auto g1 = once();
  auto g2 = once();
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("analytic gradient of sum(w*w)") {
  auto w = Tensor::from_data({4}, {1, -2, 3, 0.5}, true);
  backward(sum(mul(w, w)));
  for (int64_t i = 0; i < w.numel(); ++i) {
    CHECK(w.grad()[i] == doctest::Approx(2.0 * w.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), NotScalarLoss);
}

TEST_CASE("non-finite op outputs raise instead of propagating") {
  auto big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(add(big, big), NonFiniteValue);
}

TEST_CASE("cross entropy matches softmax probabilities") {
  auto logits = Tensor::from_data({2, 3}, {1, 2, 3, 0, 0, 0}, true);
  std::vector<int> labels = {2, -1};  // second row skipped
  auto loss = cross_entropy_with_logits(logits, labels);
  CHECK(loss.item() == doctest::Approx(-std::log(0.665240955774822)));
  backward(loss);
  // gradient of skipped row is zero
  for (int j = 0; j < 3; ++j) CHECK(logits.grad()[3 + j] == 0.0);
}

TEST_CASE("adamw fixed points and decoupled decay") {
  auto p = Tensor::from_data({2}, {1.0, -2.0}, true);

  SUBCASE("zero grad, zero decay leaves parameters alone") {
    AdamW opt({p}, {.lr = 1e-3, .weight_decay = 0.0});
    opt.step();
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == -2.0);
  }

  SUBCASE("zero grad, decay scales by (1 - lr*wd)") {
    AdamW opt({p}, {.lr = 1e-3, .weight_decay = 0.1});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(1.0 * (1 - 1e-3 * 0.1)).epsilon(1e-15));
    CHECK(p.data()[1] == doctest::Approx(-2.0 * (1 - 1e-3 * 0.1)).epsilon(1e-15));
  }

  SUBCASE("rejects non-finite gradients") {
    auto q = Tensor::from_data({1}, {1.0}, true);
    backward(sum(q));
    q.node()->grad[0] = std::numeric_limits<double>::quiet_NaN();
    AdamW opt({q}, {});
    CHECK_THROWS_AS(opt.step(), NonFiniteGradient);
  }
}

TEST_CASE("adamw converges on a 1-d quadratic") {
  // loss = (x - 3)^2, closed-form minimizer x* = 3
  auto x = Tensor::from_data({1}, {-4.0}, true);
  AdamW opt({x}, {.lr = 1e-2, .weight_decay = 0.0});
  int steps = 0;
  for (; steps < 5000; ++steps) {
    opt.zero_grad();
    auto d = scalar_add(x, -3.0);
    backward(sum(mul(d, d)));
    opt.step();
    if (std::fabs(x.data()[0] - 3.0) < 1e-3) break;
  }
  CHECK(std::fabs(x.data()[0] - 3.0) < 1e-3);
  CHECK(steps < 5000);
  CHECK(opt.step_count() == steps + 1);
}

TEST_CASE("op trace records primitive kinds") {
  OpTrace trace;
  {
    TraceScope scope(trace);
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto b = relu(matmul(a, a));
    (void)b;
  }
  CHECK(trace.count(Prim::Mul) == 8);
  CHECK(trace.count(Prim::Add) == 8);
  CHECK(trace.count(Prim::Relu) == 4);
  CHECK(trace.only({Prim::Add, Prim::Mul, Prim::Relu}));

  OpTrace trace2;
  {
    TraceScope scope(trace2);
    auto x = Tensor::from_data({3}, {1, 2, 3});
    (void)softmax_exact(x);
  }
  CHECK(trace2.count(Prim::Exp) == 3);
  CHECK(trace2.count(Prim::Div) == 3);
  CHECK_FALSE(trace2.only({Prim::Add, Prim::Mul, Prim::Relu}));
}

TEST_CASE("property: autodiff agrees with central differences on random graphs") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    auto a = Tensor::uniform({3, 4}, rng, -2, 2, true);
    auto b = Tensor::uniform({4, 3}, rng, -2, 2, true);
    auto c = Tensor::uniform({3, 3}, rng, -2, 2, true);
    auto run = [&] {
      auto h = relu(matmul(a, b));
      auto s = softmax_exact(add(h, c), -1);
      return mean(mul(s, h)).item();
    };
    auto h = relu(matmul(a, b));
    auto s = softmax_exact(add(h, c), -1);
    backward(mean(mul(s, h)));
    for (Tensor* t : {&a, &b, &c}) {
      for (int64_t e = 0; e < t->numel(); ++e) {
        double fd = fd_grad(*t, e, run);
        double got = t->grad()[e];
        if (std::fabs(fd) < 1e-7 && std::fabs(got) < 1e-7) continue;
        CHECK(rel_err(got, fd) < 1e-4);
      }
    }
  }
}
