#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <thread>

#include "hexform/approx.hpp"
#include "hexform/protocol.hpp"

using namespace hexform;
using namespace hexform::proto;

namespace {

struct Fixture {
  TransformerModel model;
  Dataset train, dev;
  std::vector<std::string> vocab;
};

Fixture build_fixture(uint64_t seed) {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 16;
  cfg.num_heads = 2;
  cfg.ffn_size = 32;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 8;
  cfg.num_outputs = 3;
  std::mt19937_64 rng(seed);
  TransformerModel model(cfg, rng);

  SyntheticTaskSpec spec;
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
  return {std::move(model), std::move(train), std::move(dev),
          Vocab::standard(24).tokens};
}

// Sessions only ever clone the model, so one fixture serves every case.
const Fixture& make_fixture() {
  static Fixture fixture = build_fixture(3);
  return fixture;
}

Message roundtrip(const Message& m) { return frame_decode(frame_encode(m)); }

}  // namespace

TEST_CASE("frame codec round-trips every message variant") {
  std::mt19937_64 rng(1);
  auto key = he::KeyPair::generate(rng);
  he::HeParams params;
  auto blob = he::serialize(
      he::encrypt(Tensor::uniform({6}, rng, -2, 2), key, params));

  SessionInit init;
  init.params = he::HeParams::deep(4096, 30, 12);
  init.backend = 1;
  init.model_id = "m-1";
  init.task_kind = 2;
  init.num_outputs = 5;
  auto init2 = std::get<SessionInit>(roundtrip(init));
  CHECK(init2.params.poly_modulus_degree == 4096);
  CHECK(init2.params.coeff_modulus_bits == init.params.coeff_modulus_bits);
  CHECK(init2.model_id == "m-1");
  CHECK(init2.task_kind == 2);
  CHECK(init2.num_outputs == 5);

  EmbedAssets assets;
  assets.vocab = {"<unk>", "<pad>", "w2"};
  assets.token_table = Tensor::uniform({3, 4}, rng, -1, 1);
  assets.position_table = Tensor::uniform({2, 4}, rng, -1, 1);
  auto assets2 = std::get<EmbedAssets>(roundtrip(assets));
  CHECK(assets2.vocab == assets.vocab);
  for (int64_t i = 0; i < assets.token_table.numel(); ++i) {
    CHECK(assets2.token_table.data()[i] == assets.token_table.data()[i]);
  }

  Query q{blob, 3, 1};
  auto q2 = std::get<Query>(roundtrip(q));
  CHECK(q2.blob == blob);
  CHECK(q2.seq_len == 3);

  ReluRequest rq{42, blob};
  auto rq2 = std::get<ReluRequest>(roundtrip(rq));
  CHECK(rq2.request_id == 42);
  CHECK(rq2.blob == blob);

  ReluResponse rs{42, blob};
  CHECK(std::get<ReluResponse>(roundtrip(rs)).request_id == 42);

  ResultMsg res{blob, 17, 8};
  auto res2 = std::get<ResultMsg>(roundtrip(res));
  CHECK(res2.max_mult_depth == 17);
  CHECK(res2.relu_round_trips == 8);

  ErrorMsg err{kErrDepthExceeded, "too deep"};
  auto err2 = std::get<ErrorMsg>(roundtrip(err));
  CHECK(err2.code == kErrDepthExceeded);
  CHECK(err2.detail == "too deep");
}

TEST_CASE("frame decode rejects truncation, bad tags and other versions") {
  auto frame = frame_encode(ErrorMsg{1, "x"});
  auto truncated = frame;
  truncated.resize(truncated.size() - 1);
  CHECK_THROWS_AS(frame_decode(truncated), MalformedBlob);

  auto bad_tag = frame;
  bad_tag[5] = 0x7f;
  CHECK_THROWS_AS(frame_decode(bad_tag), MalformedBlob);

  auto bad_version = frame;
  bad_version[4] = 0x02;
  CHECK_THROWS_AS(frame_decode(bad_version), ProtocolVersionMismatch);
}

TEST_CASE("in-process session equals the local plaintext forward bit-for-bit") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab, he::HeParams::deep(),
                         he::Backend::Shadow);

  auto [client_side, server_side] = make_inprocess_pair();
  std::vector<TranscriptEntry> transcript;
  RecordingTransport recorded(*client_side, &transcript);

  SessionState final_state = SessionState::AwaitQuery;
  std::thread server_thread(
      [&] { final_state = server.serve_session(*server_side); });

  InferenceClient client(recorded, 99);
  const auto& ex = fx.train.items[0];
  auto outcome = client.query_tokens(ex.tokens);
  server_thread.join();

  CHECK(final_state == SessionState::Done);
  CHECK(outcome.relu_round_trips == 8);  // 4 relu sites per layer, 2 layers

  NoGradGuard ng;
  auto want = fx.model.forward(fx.model.embed(ex.tokens));
  REQUIRE(outcome.logits.numel() == want.numel());
  for (int64_t i = 0; i < want.numel(); ++i) {
    CHECK(outcome.logits.data()[i] == want.data()[i]);
  }

  // leakage audit over the full recorded transcript
  std::string why;
  CHECK(audit_transcript(transcript, server.params(), &why));

  // client-side embedding equals the reference model embedding bit-for-bit
  auto client_emb = client.embed(ex.tokens);
  auto model_emb = fx.model.embed(ex.tokens);
  for (int64_t i = 0; i < model_emb.numel(); ++i) {
    CHECK(client_emb.data()[i] == model_emb.data()[i]);
  }
}

TEST_CASE("loopback tcp equals in-process transport bit-for-bit") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab, he::HeParams::deep(),
                         he::Backend::Shadow);
  const auto& ex = fx.train.items[1];

  Tensor inproc_logits;
  {
    auto [client_side, server_side] = make_inprocess_pair();
    std::thread st([&] { server.serve_session(*server_side); });
    InferenceClient client(*client_side, 7);
    inproc_logits = client.query_tokens(ex.tokens).logits;
    st.join();
  }

  Tensor tcp_logits;
  {
    TcpListener listener(0);
    std::thread st([&] {
      auto t = listener.accept_one();
      server.serve_session(*t);
    });
    auto t = tcp_connect("127.0.0.1", listener.port());
    InferenceClient client(*t, 7);
    tcp_logits = client.query_tokens(ex.tokens).logits;
    st.join();
  }

  REQUIRE(inproc_logits.numel() == tcp_logits.numel());
  for (int64_t i = 0; i < inproc_logits.numel(); ++i) {
    CHECK(inproc_logits.data()[i] == tcp_logits.data()[i]);
  }
}

TEST_CASE("relu service applies relu under the right key only") {
  std::mt19937_64 rng(5);
  auto key = he::KeyPair::generate(rng);
  auto wrong = he::KeyPair::generate(rng);
  he::HeParams params;

  auto ct = he::encrypt(Tensor::from_data({3}, {-1, 0, 2}), key, params);
  ReluRequest req{9, he::serialize(ct)};
  auto resp = client_relu_service(req, key, params, he::Backend::Shadow);
  CHECK(resp.request_id == 9);
  auto out = he::deserialize(resp.blob, params);
  CHECK(out.mult_depth == 0);  // regardless of request depth
  auto vals = he::decrypt(out, key);
  CHECK(vals.data()[0] == 0.0);
  CHECK(vals.data()[1] == 0.0);
  CHECK(vals.data()[2] == 2.0);

  CHECK_THROWS_AS(client_relu_service(req, wrong, params, he::Backend::Shadow),
                  KeyMismatch);
  ReluRequest garbage{1, {0xde, 0xad}};
  CHECK_THROWS_AS(client_relu_service(garbage, key, params, he::Backend::Shadow),
                  MalformedBlob);
}

TEST_CASE("severed transport mid-relu fails the session without a result") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab, he::HeParams::deep(),
                         he::Backend::Shadow);

  auto [client_side, server_side] = make_inprocess_pair();
  SessionState final_state = SessionState::AwaitQuery;
  std::thread server_thread(
      [&] { final_state = server.serve_session(*server_side); });

  // handshake + query by hand, then drop the connection at the first
  // relu request
  auto init_frame = client_side->recv();
  REQUIRE(init_frame.has_value());
  auto init = std::get<SessionInit>(frame_decode(*init_frame));
  auto assets_frame = client_side->recv();
  REQUIRE(assets_frame.has_value());
  auto assets = std::get<EmbedAssets>(frame_decode(*assets_frame));

  std::mt19937_64 rng(17);
  auto key = he::KeyPair::generate(rng);
  NoGradGuard ng;
  auto emb = add(gather_rows(assets.token_table, {2, 3}),
                 slice_rows(assets.position_table, 0, 2));
  auto ct = he::encrypt(emb, key, init.params);
  client_side->send(frame_encode(
      Query{he::serialize(ct), 2, static_cast<uint8_t>(init.task_kind)}));

  auto first_relu = client_side->recv();
  REQUIRE(first_relu.has_value());
  CHECK(std::holds_alternative<ReluRequest>(frame_decode(*first_relu)));
  client_side->close();  // sever mid-AWAIT_RELU

  server_thread.join();
  CHECK(final_state == SessionState::Failed);
}

TEST_CASE("a server hosts concurrent sessions") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab, he::HeParams::deep(),
                         he::Backend::Shadow);

  auto run_one = [&](uint64_t seed, const Example& ex, Tensor* out) {
    auto [client_side, server_side] = make_inprocess_pair();
    std::thread st([&server, t = std::move(server_side)] {
      server.serve_session(*t);
    });
    InferenceClient client(*client_side, seed);
    *out = client.query_tokens(ex.tokens).logits;
    st.join();
  };

  Tensor l1, l2;
  std::thread a([&] { run_one(1, fx.train.items[0], &l1); });
  std::thread b([&] { run_one(2, fx.train.items[1], &l2); });
  a.join();
  b.join();

  NoGradGuard ng;
  auto w1 = fx.model.forward(fx.model.embed(fx.train.items[0].tokens));
  auto w2 = fx.model.forward(fx.model.embed(fx.train.items[1].tokens));
  for (int64_t i = 0; i < w1.numel(); ++i) {
    CHECK(l1.data()[i] == w1.data()[i]);
    CHECK(l2.data()[i] == w2.data()[i]);
  }
}

TEST_CASE("fixed-point protocol session stays within tolerance") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab,
                         he::HeParams::deep(8192, 30),
                         he::Backend::FixedPoint);
  auto [client_side, server_side] = make_inprocess_pair();
  std::thread st([&] { server.serve_session(*server_side); });
  InferenceClient client(*client_side, 23);
  const auto& ex = fx.train.items[2];
  auto outcome = client.query_tokens(ex.tokens);
  st.join();

  NoGradGuard ng;
  auto want = fx.model.forward(fx.model.embed(ex.tokens));
  for (int64_t i = 0; i < want.numel(); ++i) {
    CHECK(std::fabs(outcome.logits.data()[i] - want.data()[i]) <= 1e-3);
  }
}

TEST_CASE("client rejects empty queries") {
  const auto& fx = make_fixture();
  InferenceServer server(fx.model.clone(), fx.vocab, he::HeParams::deep(),
                         he::Backend::Shadow);
  auto [client_side, server_side] = make_inprocess_pair();
  std::thread st([&] { server.serve_session(*server_side); });
  InferenceClient client(*client_side, 3);
  CHECK_THROWS_AS(client.embed({}), EmptyQuery);
  CHECK_THROWS_AS(client.query_tokens({}), EmptyQuery);
  // finish the session so the server thread can exit
  (void)client.query_tokens(fx.train.items[0].tokens);
  st.join();
}
