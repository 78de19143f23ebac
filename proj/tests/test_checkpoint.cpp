#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "hexform/approx.hpp"
#include "hexform/checkpoint.hpp"
#include "hexform/he.hpp"

using namespace hexform;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  std::string path;
  TempDir() {
    path = "/tmp/hexform_ckpt_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++);
  }
  ~TempDir() { fs::remove_all(path); }
  static int counter;
};
int TempDir::counter = 0;

std::vector<uint8_t> slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 16;
  cfg.num_heads = 2;
  cfg.ffn_size = 32;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 8;
  cfg.num_outputs = 3;
  return cfg;
}

}  // namespace

TEST_CASE("model checkpoint round trip reproduces forwards within f32 error") {
  std::mt19937_64 rng(1);
  TransformerModel model(small_cfg(), rng);
  auto vocab = Vocab::standard(24).tokens;

  TempDir dir;
  ckpt::save_model(dir.path, model, vocab);
  auto loaded = ckpt::load_model(dir.path);
  CHECK(loaded.vocab == vocab);
  CHECK(loaded.model.config().hidden_size == 16);

  NoGradGuard ng;
  std::uniform_int_distribution<int> tok(0, 23);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<int> tokens(6);
    for (int& t : tokens) t = tok(rng);
    auto a = model.forward_tokens(tokens);
    auto b = loaded.model.forward_tokens(tokens);
    // f32 storage: error relative to the logit scale, not to near-zero entries
    double scale = std::max(max_abs(a), 1.0);
    for (int64_t i = 0; i < a.numel(); ++i) {
      CHECK(std::fabs(a.data()[i] - b.data()[i]) / scale <= 1e-6);
    }
  }
}

TEST_CASE("saving the same model twice is byte-identical") {
  std::mt19937_64 rng(2);
  TransformerModel model(small_cfg(), rng);
  auto vocab = Vocab::standard(24).tokens;
  TempDir d1, d2;
  ckpt::save_model(d1.path, model, vocab);
  ckpt::save_model(d2.path, model, vocab);
  CHECK(slurp(d1.path + "/params.bin") == slurp(d2.path + "/params.bin"));
  CHECK(slurp(d1.path + "/manifest.txt") == slurp(d2.path + "/manifest.txt"));
}

TEST_CASE("estimator checkpoints round trip") {
  EstimatorTrainOptions opts;
  opts.dataset_rows = 18432;
  auto [est, report] = train_estimator(8, 3, opts);
  TempDir dir;
  ckpt::save_estimator(dir.path, est);
  auto loaded = ckpt::load_estimator(dir.path);
  CHECK(loaded.dim() == 8);

  NoGradGuard ng;
  std::mt19937_64 rng(5);
  auto rows = Tensor::uniform({4, 8}, rng, -3, 3);
  auto a = est.forward_rows(rows);
  auto b = loaded.forward_rows(rows);
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("HE-ready checkpoints keep dropped norms and the estimator") {
  std::mt19937_64 rng(4);
  TransformerModel model(small_cfg(), rng);

  SyntheticTaskSpec spec;
  spec.vocab_size = 24;
  spec.seq_len = 8;
  spec.num_classes = 3;
  spec.train_size = 48;
  spec.dev_size = 24;
  auto [train, dev] = gen_synthetic(spec, 6);

  EstimatorTrainOptions eopts;
  eopts.dataset_rows = 18432;
  auto [est, report] = train_estimator(8, 6, eopts);
  auto est_ptr = std::make_shared<SoftmaxEstimator>(std::move(est));
  est_ptr->set_frozen(true);
  replace_ops(model, est_ptr);
  std::vector<const Example*> calib;
  for (size_t i = 0; i < 16; ++i) calib.push_back(&train.items[i]);
  init_affine_from_calibration(model, calib);
  DistillOptions dopts;
  dopts.steps = 40;
  dopts.batch = 8;
  ln_distill(model, train, dev, dopts);
  drop_ln(model);
  model.absorb_attention_scale();

  TempDir dir;
  ckpt::save_model(dir.path, model, Vocab::standard(24).tokens);
  auto loaded = ckpt::load_model(dir.path);

  CHECK(loaded.model.config().norm == NormKind::Affine);
  CHECK(loaded.model.config().scale_absorbed);
  CHECK(loaded.model.estimator() != nullptr);
  CHECK(he::he_ready(loaded.model));
  for (const auto& site : loaded.model.norm_sites()) {
    CHECK(site.exact_dropped);
    CHECK(site.gamma_t.defined());
  }

  NoGradGuard ng;
  auto a = model.forward_tokens(train.items[0].tokens, train.items[0].mask);
  auto b =
      loaded.model.forward_tokens(train.items[0].tokens, train.items[0].mask);
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(std::fabs(a.data()[i] - b.data()[i]) <= 1e-4);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  TempDir dir;
  fs::create_directories(dir.path);
  {
    std::ofstream m(dir.path + "/manifest.txt");
    m << "format_version=2\nkind=model\n";
  }
  CHECK_THROWS_AS(ckpt::load_model(dir.path), CheckpointError);

  std::mt19937_64 rng(7);
  TransformerModel model(small_cfg(), rng);
  TempDir d2;
  ckpt::save_model(d2.path, model, Vocab::standard(24).tokens);
  // truncate the blob
  auto blob = slurp(d2.path + "/params.bin");
  std::ofstream out(d2.path + "/params.bin", std::ios::binary);
  out.write(reinterpret_cast<const char*>(blob.data()), blob.size() / 2);
  out.close();
  CHECK_THROWS_AS(ckpt::load_model(d2.path), CheckpointError);
}
