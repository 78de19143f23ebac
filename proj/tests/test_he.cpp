#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "hexform/approx.hpp"
#include "hexform/he.hpp"

using namespace hexform;
using namespace hexform::he;

namespace {

KeyPair test_key(uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  return KeyPair::generate(rng);
}

HeParams shallow_params() {
  HeParams p;
  p.poly_modulus_degree = 1024;
  p.coeff_modulus_bits = {60, 30, 30, 60};  // level budget 3
  return p;
}

// Builds an HE-ready approximated model via the real workflow pieces.
struct ReadyModel {
  TransformerModel model;
  Dataset train, dev;
};

ReadyModel build_ready_model(TaskKind task, uint64_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 16;
  cfg.num_heads = 2;
  cfg.ffn_size = 32;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 8;
  cfg.task = task;
  cfg.num_outputs = task == TaskKind::Regress ? 1 : 3;
  std::mt19937_64 rng(seed);
  TransformerModel model(cfg, rng);

  SyntheticTaskSpec spec;
  spec.kind = task;
  spec.vocab_size = 24;
  spec.seq_len = 8;
  spec.num_classes = 3;
  spec.train_size = 48;
  spec.dev_size = 24;
  auto [train, dev] = gen_synthetic(spec, seed);

  EstimatorTrainOptions eopts;
  eopts.dataset_rows = 18432;
  auto [est, report] = train_estimator(8, seed, eopts);
  auto est_ptr = std::make_shared<SoftmaxEstimator>(std::move(est));
  est_ptr->set_frozen(true);
  replace_ops(model, est_ptr);

  std::vector<const Example*> calib;
  for (size_t i = 0; i < 16; ++i) calib.push_back(&train.items[i]);
  init_affine_from_calibration(model, calib);
  DistillOptions dopts;
  dopts.steps = 60;
  dopts.batch = 8;
  ln_distill(model, train, dev, dopts);
  drop_ln(model);
  model.absorb_attention_scale();
  return {std::move(model), std::move(train), std::move(dev)};
}

// The fixture is read-only across test cases, so build it once.
const ReadyModel& make_ready_model() {
  static ReadyModel fixture = build_ready_model(TaskKind::Classify, 3);
  return fixture;
}

}  // namespace

TEST_CASE("params validation follows the grid") {
  HeParams p;
  CHECK_NOTHROW(p.validate());
  p.poly_modulus_degree = 1000;
  CHECK_THROWS_AS(p.validate(), InvalidSpec);
  p = HeParams{};
  p.coeff_modulus_bits = {60, 31, 60};
  CHECK_THROWS_AS(p.validate(), InvalidSpec);
  p = HeParams{};
  CHECK(p.slot_count() == 4096);
  CHECK(p.level_budget() == 3);
}

TEST_CASE("shadow round trip is lossless; wrong key is an error") {
  auto key = test_key();
  auto x = Tensor::from_data({2}, {1.5, -2.25});
  auto ct = encrypt(x, key, shallow_params());
  CHECK(ct.level == 0);
  CHECK(ct.mult_depth == 0);
  auto back = decrypt(ct, key);
  CHECK(back.data()[0] == 1.5);
  CHECK(back.data()[1] == -2.25);

  auto other = test_key(2);
  CHECK_THROWS_AS(decrypt(ct, other), KeyMismatch);
}

TEST_CASE("fixed-point round trip stays within the quantization bound") {
  auto key = test_key();
  auto params = shallow_params();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensor::uniform({64}, rng, -100, 100);
    auto ct = encrypt(x, key, params, Backend::FixedPoint);
    auto back = decrypt(ct, key);
    double bound = std::ldexp(1.0, -params.scale_bits + 1);
    for (int64_t i = 0; i < x.numel(); ++i) {
      CHECK(std::fabs(back.data()[i] - x.data()[i]) <= bound);
    }
  }
}

TEST_CASE("fixed-point payload is whitened") {
  auto key = test_key();
  auto x = Tensor::from_data({4}, {1.0, 2.0, 3.0, 4.0});
  auto ct = encrypt(x, key, shallow_params(), Backend::FixedPoint);
  // raw payload words should not be the plain fixed-point encoding
  int64_t plain_encoding = static_cast<int64_t>(1) << ct.scale_bits;
  CHECK(ct.fp_vals[0] != plain_encoding);
}

TEST_CASE("homomorphic add/mul with depth and level bookkeeping") {
  auto key = test_key();
  auto params = shallow_params();
  for (Backend backend : {Backend::Shadow, Backend::FixedPoint}) {
    CAPTURE(static_cast<int>(backend));
    auto a = encrypt(Tensor::from_data({2}, {2, 3}), key, params, backend);
    auto b = encrypt(Tensor::from_data({2}, {5, -1}), key, params, backend);

    auto sum = ct_add(a, b);
    CHECK(sum.mult_depth == 0);
    CHECK(sum.level == 0);
    auto sv = decrypt(sum, key);
    CHECK(sv.data()[0] == doctest::Approx(7).epsilon(1e-8));

    auto prod = ct_mul(a, b);
    CHECK(prod.mult_depth == 1);
    CHECK(prod.level == 1);
    auto pv = decrypt(prod, key);
    CHECK(pv.data()[0] == doctest::Approx(10).epsilon(1e-7));
    CHECK(pv.data()[1] == doctest::Approx(-3).epsilon(1e-7));

    // depth(add) = max of operand depths
    auto mixed = ct_add(prod, ct_mod_switch(a, prod.level));
    CHECK(mixed.mult_depth == 1);

    // plaintext operand variants
    auto ap = ct_add_plain(a, Tensor::from_data({2}, {1, 1}));
    CHECK(ap.mult_depth == 0);
    auto mp = ct_mul_plain(a, Tensor::from_data({2}, {4, 4}));
    CHECK(mp.mult_depth == 1);
    CHECK(decrypt(mp, key).data()[0] == doctest::Approx(8).epsilon(1e-7));
  }
}

TEST_CASE("level misuse raises") {
  auto key = test_key();
  auto params = shallow_params();
  auto a = encrypt(Tensor::from_data({2}, {1, 2}), key, params);
  auto b = ct_mul(a, a);  // level 1
  CHECK_THROWS_AS(ct_add(a, b), LevelMismatch);
  CHECK_NOTHROW(ct_add(ct_mod_switch(a, 1), b));
  CHECK_THROWS_AS(ct_mod_switch(b, 0), LevelMismatch);
}

TEST_CASE("key isolation on binary ops") {
  auto k1 = test_key(1), k2 = test_key(2);
  auto params = shallow_params();
  auto a = encrypt(Tensor::from_data({2}, {1, 2}), k1, params);
  auto b = encrypt(Tensor::from_data({2}, {3, 4}), k2, params);
  CHECK_THROWS_AS(ct_add(a, b), KeyMismatch);
  CHECK_THROWS_AS(ct_mul(a, b), KeyMismatch);
}

TEST_CASE("multiplication chain exhausts the budget at the k-th step") {
  auto key = test_key();
  auto params = shallow_params();  // budget 3
  set_op_site("chain-test");
  for (Backend backend : {Backend::Shadow, Backend::FixedPoint}) {
    auto x = encrypt(Tensor::from_data({1}, {1.01}), key, params, backend);
    auto acc = x;
    for (int i = 0; i < 3; ++i) acc = ct_mul(acc, ct_mod_switch(x, acc.level));
    CHECK(acc.mult_depth == 3);
    CHECK_THROWS_AS(ct_mul(acc, ct_mod_switch(x, acc.level)), DepthExceeded);
  }
}

TEST_CASE("DepthExceeded names the op site") {
  auto key = test_key();
  auto params = shallow_params();
  set_op_site("layer9.attention.scores");
  auto x = encrypt(Tensor::from_data({1}, {1.0}), key, params);
  auto acc = x;
  for (int i = 0; i < 3; ++i) acc = ct_mul(acc, ct_mod_switch(x, acc.level));
  try {
    (void)ct_mul(acc, ct_mod_switch(x, acc.level));
    FAIL("expected DepthExceeded");
  } catch (const DepthExceeded& e) {
    CHECK(std::string(e.what()).find("layer9.attention.scores") !=
          std::string::npos);
  }
}

TEST_CASE("fixed-point 5-deep product chain keeps 1e-4 relative accuracy") {
  auto key = test_key();
  HeParams params;
  params.coeff_modulus_bits = {60, 30, 30, 30, 30, 30, 60};  // budget 6
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_real_distribution<double> unif(0.5, 1.5);
    double expect = 1.0;
    auto acc = encrypt(Tensor::from_data({1}, {1.0}), key, params,
                       Backend::FixedPoint);
    for (int i = 0; i < 5; ++i) {
      double v = unif(rng);
      expect *= v;
      auto operand = ct_mod_switch(
          encrypt(Tensor::from_data({1}, {v}), key, params,
                  Backend::FixedPoint),
          acc.level);
      acc = ct_mul(acc, operand);
    }
    CHECK(acc.mult_depth == 5);
    double got = decrypt(acc, key).item();
    CHECK(std::fabs(got - expect) / std::fabs(expect) <= 1e-4);
  }
}

TEST_CASE("forbidden primitives raise UnsupportedOp naming the op") {
  auto key = test_key();
  auto a = encrypt(Tensor::from_data({2}, {1, 2}), key, shallow_params());
  auto check_op = [](auto fn, const std::string& name) {
    try {
      fn();
      FAIL_CHECK("expected UnsupportedOp for " << name);
    } catch (const UnsupportedOp& e) {
      CHECK(e.op == name);
    }
  };
  check_op([&] { ct_max(a, a); }, "max");
  check_op([&] { ct_exp(a); }, "exp");
  check_op([&] { ct_div(a, a); }, "div");
  check_op([&] { ct_compare(a, a); }, "compare");
  check_op([&] { (void)he::softmax_exact(a); }, "exp");
  check_op([&] { (void)he::gelu(a); }, "gelu");
}

TEST_CASE("lower_matmul equals plaintext matmul bit-for-bit on shadow") {
  auto key = test_key();
  auto params = shallow_params();
  std::mt19937_64 rng(13);

  // identity weight passes values through
  auto x = Tensor::uniform({3, 4}, rng, -2, 2);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  auto ct = encrypt(x, key, params);
  auto out = lower_matmul(ct, Tensor::from_data({4, 4}, eye));
  CHECK(out.mult_depth == ct.mult_depth + 1);
  auto vals = decrypt(out, key);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(vals.data()[i] == x.data()[i]);

  // random product matches the plaintext oracle exactly
  auto a = Tensor::uniform({4, 5}, rng, -2, 2);
  auto w = Tensor::uniform({5, 3}, rng, -2, 2);
  auto a_ct = encrypt(a, key, params);
  auto prod = decrypt(lower_matmul(a_ct, w), key);
  auto want = matmul(a, w);
  for (int64_t i = 0; i < want.numel(); ++i) {
    CHECK(prod.data()[i] == want.data()[i]);
  }

  // ciphertext-ciphertext element-wise lowering matches too
  auto b = Tensor::uniform({5, 3}, rng, -2, 2);
  auto b_ct = encrypt(b, key, params);
  auto prod2 = decrypt(ct_matmul(a_ct, b_ct), key);
  auto want2 = matmul(a, b);
  for (int64_t i = 0; i < want2.numel(); ++i) {
    CHECK(prod2.data()[i] == want2.data()[i]);
  }
  auto prod3 =
      decrypt(ct_matmul_nt(a_ct, encrypt(transpose(b), key, params)), key);
  for (int64_t i = 0; i < want2.numel(); ++i) {
    CHECK(prod3.data()[i] == want2.data()[i]);
  }
}

TEST_CASE("serialization round trip is byte-stable and validates") {
  auto key = test_key();
  auto params = shallow_params();
  std::mt19937_64 rng(17);
  for (Backend backend : {Backend::Shadow, Backend::FixedPoint}) {
    auto x = Tensor::uniform({600}, rng, -5, 5);  // two packs at 512 slots
    auto ct = encrypt(x, key, params, backend);
    auto bytes = serialize(ct);
    CHECK(bytes[0] == 'H');
    CHECK(bytes[1] == 'E');
    CHECK(bytes[2] == 'X');
    CHECK(bytes[3] == 'C');
    auto bytes2 = serialize(ct);
    CHECK(bytes == bytes2);

    auto back = deserialize(bytes, params);
    CHECK(back.numel() == 600);
    CHECK(back.level == ct.level);
    CHECK(back.mult_depth == ct.mult_depth);
    auto vals = decrypt(back, key);
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (backend == Backend::Shadow) {
        CHECK(vals.data()[i] == x.data()[i]);
      } else {
        CHECK(vals.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-7));
      }
    }

    // truncation and garbage are rejected
    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    CHECK_THROWS_AS(deserialize(truncated, params), MalformedBlob);
    auto garbage = bytes;
    garbage[0] = 'X';
    CHECK_THROWS_AS(deserialize(garbage, params), MalformedBlob);
  }
}

TEST_CASE("packing is transparent; disabling it enforces slot capacity") {
  auto key = test_key();
  HeParams params;
  params.poly_modulus_degree = 1024;  // 512 slots
  auto big = Tensor::zeros({1000});
  auto ct = encrypt(big, key, params);
  CHECK(ct.pack_count() == 2);
  CHECK_THROWS_AS(encrypt(big, key, params, Backend::Shadow, false),
                  TooManySlots);
}

TEST_CASE("local relu channel resets depth and applies relu") {
  auto key = test_key();
  auto params = shallow_params();
  LocalReluChannel channel(key, params);
  for (Backend backend : {Backend::Shadow, Backend::FixedPoint}) {
    auto x = Tensor::from_data({1, 3}, {-1, 0, 2});
    auto ct = encrypt(x, key, params, backend);
    auto deep = ct_mul(ct, ct);  // depth 1
    auto deep2 = ct_mul(deep, ct_mod_switch(ct, deep.level));
    CHECK(deep2.mult_depth == 2);
    auto fresh = channel.relu(deep2);
    CHECK(fresh.mult_depth == 0);
    CHECK(fresh.level == 0);
    auto vals = decrypt(fresh, key);
    for (int64_t i = 0; i < vals.numel(); ++i) CHECK(vals.data()[i] >= 0.0);
  }
  CHECK(channel.round_trips() == 2);
}

TEST_CASE("shadow he_forward equals the plaintext forward bit-for-bit") {
  const auto& ready = make_ready_model();
  auto key = test_key(5);
  auto params = HeParams::deep();
  LocalReluChannel channel(key, params);

  for (int trial = 0; trial < 6; ++trial) {
    const auto& ex = ready.train.items[trial % ready.train.size()];
    NoGradGuard ng;
    auto emb = ready.model.embed(ex.tokens);
    auto want = ready.model.forward(emb, ex.mask);

    auto ct = encrypt(emb, key, params);
    auto result = he_forward(ready.model, ct, channel, ex.mask);
    auto got = decrypt(result.logits, key);
    REQUIRE(got.numel() == want.numel());
    for (int64_t i = 0; i < want.numel(); ++i) {
      CHECK(got.data()[i] == want.data()[i]);
    }
    CHECK(result.relu_round_trips == 4 * ready.model.config().num_layers);
  }
}

TEST_CASE("fixed-point he_forward tracks the plaintext forward closely") {
  const auto& ready = make_ready_model();
  auto key = test_key(6);
  auto params = HeParams::deep(8192, 30);
  LocalReluChannel channel(key, params);

  for (int trial = 0; trial < 4; ++trial) {
    const auto& ex = ready.train.items[trial];
    NoGradGuard ng;
    auto emb = ready.model.embed(ex.tokens);
    auto want = ready.model.forward(emb, ex.mask);

    auto ct = encrypt(emb, key, params, Backend::FixedPoint);
    auto result = he_forward(ready.model, ct, channel, ex.mask);
    auto got = decrypt(result.logits, key);
    for (int64_t i = 0; i < want.numel(); ++i) {
      CHECK(std::fabs(got.data()[i] - want.data()[i]) <= 1e-3);
    }
  }
}

TEST_CASE("dynamic depth equals the static DAG depth") {
  const auto& ready = make_ready_model();
  auto key = test_key(7);
  auto params = HeParams::deep();
  LocalReluChannel channel(key, params);
  const auto& ex = ready.train.items[0];
  NoGradGuard ng;
  auto emb = ready.model.embed(ex.tokens);

  CtTrace trace;
  HeForwardResult result;
  {
    CtTraceScope scope(trace);
    auto ct = encrypt(emb, key, params);
    result = he_forward(ready.model, ct, channel, ex.mask);
  }
  auto audit = audit_depths(trace);
  CHECK(audit.per_node_match);
  CHECK(audit.static_max_depth == result.max_mult_depth);
  CHECK(audit.dynamic_max_depth == result.max_mult_depth);
  // session depth reflects inter-relu segments, not the whole-model total
  CHECK(result.max_mult_depth < 20);
}

TEST_CASE("he_forward rejects non-approximated models before computing") {
  std::mt19937_64 rng(23);
  ModelConfig cfg;
  cfg.hidden_size = 16;
  cfg.num_heads = 2;
  cfg.ffn_size = 32;
  cfg.vocab_size = 8;
  cfg.max_seq_len = 4;
  TransformerModel exact_model(cfg, rng);

  auto key = test_key(8);
  auto params = HeParams::deep();
  LocalReluChannel channel(key, params);
  auto emb = [&] {
    NoGradGuard ng;
    return exact_model.embed({1, 2});
  }();
  auto ct = encrypt(emb, key, params);

  CHECK_THROWS_AS(he_forward(exact_model, ct, channel), UnsupportedOp);
  CHECK_FALSE(he_ready(exact_model));

  const auto& ready = make_ready_model();
  std::string why;
  CHECK(he_ready(ready.model, &why));
}
