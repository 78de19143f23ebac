#include "hexform/protocol.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>

#include "hexform/data.hpp"

namespace hexform::proto {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((v >> (8 * i)) & 0xff);
}
void put_bytes(std::vector<uint8_t>& out, std::span<const uint8_t> b) {
  put_u32(out, static_cast<uint32_t>(b.size()));
  out.insert(out.end(), b.begin(), b.end());
}
void put_string(std::vector<uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}
void put_tensor(std::vector<uint8_t>& out, const Tensor& t) {
  put_u32(out, static_cast<uint32_t>(t.dim(0)));
  put_u32(out, static_cast<uint32_t>(t.dim(1)));
  for (double v : t.data()) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  }
}

struct Reader {
  std::span<const uint8_t> bytes;
  size_t at = 0;
  bool done() const { return at == bytes.size(); }
  uint8_t u8() {
    if (at + 1 > bytes.size()) throw MalformedBlob("truncated frame");
    return bytes[at++];
  }
  uint16_t u16() { return u8() | (static_cast<uint16_t>(u8()) << 8); }
  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
    return v;
  }
  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::vector<uint8_t> bytes_field() {
    uint32_t n = u32();
    if (at + n > bytes.size()) throw MalformedBlob("truncated byte field");
    std::vector<uint8_t> out(bytes.begin() + at, bytes.begin() + at + n);
    at += n;
    return out;
  }
  std::string string_field() {
    auto b = bytes_field();
    return std::string(b.begin(), b.end());
  }
  Tensor tensor_field() {
    uint32_t r = u32(), c = u32();
    if (r == 0 || c == 0 || static_cast<uint64_t>(r) * c > (1u << 28)) {
      throw MalformedBlob("bad tensor extent");
    }
    std::vector<double> vals(static_cast<size_t>(r) * c);
    for (double& v : vals) {
      uint64_t bits = u64();
      std::memcpy(&v, &bits, 8);
    }
    return Tensor::from_data({static_cast<int>(r), static_cast<int>(c)},
                             std::move(vals));
  }
};

void encode_params(std::vector<uint8_t>& out, const he::HeParams& p) {
  put_u32(out, static_cast<uint32_t>(p.poly_modulus_degree));
  out.push_back(static_cast<uint8_t>(p.scale_bits));
  out.push_back(static_cast<uint8_t>(p.coeff_modulus_bits.size()));
  for (int b : p.coeff_modulus_bits) out.push_back(static_cast<uint8_t>(b));
}

he::HeParams decode_params(Reader& r) {
  he::HeParams p;
  p.poly_modulus_degree = static_cast<int>(r.u32());
  p.scale_bits = r.u8();
  uint8_t n = r.u8();
  p.coeff_modulus_bits.clear();
  for (int i = 0; i < n; ++i) p.coeff_modulus_bits.push_back(r.u8());
  return p;
}

}  // namespace

MsgTag tag_of(const Message& msg) {
  return static_cast<MsgTag>(msg.index() + 1);
}

std::vector<uint8_t> frame_encode(const Message& msg) {
  std::vector<uint8_t> payload;
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, SessionInit>) {
          payload.push_back(m.protocol_version);
          encode_params(payload, m.params);
          payload.push_back(m.backend);
          put_string(payload, m.model_id);
          payload.push_back(m.task_kind);
          put_u32(payload, m.num_outputs);
        } else if constexpr (std::is_same_v<T, EmbedAssets>) {
          put_u32(payload, static_cast<uint32_t>(m.vocab.size()));
          for (const auto& tok : m.vocab) put_string(payload, tok);
          put_tensor(payload, m.token_table);
          put_tensor(payload, m.position_table);
        } else if constexpr (std::is_same_v<T, Query>) {
          put_bytes(payload, m.blob);
          put_u32(payload, m.seq_len);
          payload.push_back(m.task_kind);
        } else if constexpr (std::is_same_v<T, ReluRequest>) {
          put_u64(payload, m.request_id);
          put_bytes(payload, m.blob);
        } else if constexpr (std::is_same_v<T, ReluResponse>) {
          put_u64(payload, m.request_id);
          put_bytes(payload, m.blob);
        } else if constexpr (std::is_same_v<T, ResultMsg>) {
          put_bytes(payload, m.blob);
          put_u16(payload, m.max_mult_depth);
          put_u32(payload, m.relu_round_trips);
        } else if constexpr (std::is_same_v<T, ErrorMsg>) {
          put_u16(payload, m.code);
          put_string(payload, m.detail);
        }
      },
      msg);

  std::vector<uint8_t> frame;
  put_u32(frame, static_cast<uint32_t>(payload.size() + 2));
  frame.push_back(kProtocolVersion);
  frame.push_back(static_cast<uint8_t>(tag_of(msg)));
  frame.insert(frame.end(), payload.begin(), payload.end());
  return frame;
}

Message frame_decode(std::span<const uint8_t> frame) {
  Reader r{frame};
  uint32_t length = r.u32();
  if (length + 4 != frame.size()) {
    throw MalformedBlob("frame length field does not match frame size");
  }
  uint8_t version = r.u8();
  if (version != kProtocolVersion) {
    throw ProtocolVersionMismatch("frame version " + std::to_string(version));
  }
  uint8_t tag = r.u8();
  Message out;
  switch (static_cast<MsgTag>(tag)) {
    case MsgTag::SessionInit: {
      SessionInit m;
      m.protocol_version = r.u8();
      m.params = decode_params(r);
      m.backend = r.u8();
      m.model_id = r.string_field();
      m.task_kind = r.u8();
      m.num_outputs = r.u32();
      out = std::move(m);
      break;
    }
    case MsgTag::EmbedAssets: {
      EmbedAssets m;
      uint32_t n = r.u32();
      if (n > (1u << 20)) throw MalformedBlob("absurd vocab size");
      for (uint32_t i = 0; i < n; ++i) m.vocab.push_back(r.string_field());
      m.token_table = r.tensor_field();
      m.position_table = r.tensor_field();
      out = std::move(m);
      break;
    }
    case MsgTag::Query: {
      Query m;
      m.blob = r.bytes_field();
      m.seq_len = r.u32();
      m.task_kind = r.u8();
      out = std::move(m);
      break;
    }
    case MsgTag::ReluRequest: {
      ReluRequest m;
      m.request_id = r.u64();
      m.blob = r.bytes_field();
      out = std::move(m);
      break;
    }
    case MsgTag::ReluResponse: {
      ReluResponse m;
      m.request_id = r.u64();
      m.blob = r.bytes_field();
      out = std::move(m);
      break;
    }
    case MsgTag::Result: {
      ResultMsg m;
      m.blob = r.bytes_field();
      m.max_mult_depth = r.u16();
      m.relu_round_trips = r.u32();
      out = std::move(m);
      break;
    }
    case MsgTag::Error: {
      ErrorMsg m;
      m.code = r.u16();
      m.detail = r.string_field();
      out = std::move(m);
      break;
    }
    default:
      throw MalformedBlob("unknown message tag " + std::to_string(tag));
  }
  if (!r.done()) throw MalformedBlob("trailing bytes in frame");
  return out;
}

// ---- in-process transport ------------------------------------------------------

namespace {

struct Pipe {
  std::mutex m;
  std::condition_variable cv;
  std::deque<std::vector<uint8_t>> q;
  bool closed = false;

  void push(std::vector<uint8_t> frame) {
    {
      std::lock_guard lock(m);
      if (closed) throw ChannelClosed("transport closed");
      q.push_back(std::move(frame));
    }
    cv.notify_all();
  }

  std::optional<std::vector<uint8_t>> pop() {
    std::unique_lock lock(m);
    cv.wait(lock, [&] { return !q.empty() || closed; });
    if (q.empty()) return std::nullopt;
    auto frame = std::move(q.front());
    q.pop_front();
    return frame;
  }

  void close() {
    {
      std::lock_guard lock(m);
      closed = true;
    }
    cv.notify_all();
  }
};

class InProcessTransport : public Transport {
 public:
  InProcessTransport(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  void send(const std::vector<uint8_t>& frame) override { out_->push(frame); }
  std::optional<std::vector<uint8_t>> recv() override { return in_->pop(); }
  void close() override {
    in_->close();
    out_->close();
  }

 private:
  std::shared_ptr<Pipe> in_, out_;
};

}  // namespace

std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>>
make_inprocess_pair() {
  auto a2b = std::make_shared<Pipe>();
  auto b2a = std::make_shared<Pipe>();
  return {std::make_unique<InProcessTransport>(b2a, a2b),
          std::make_unique<InProcessTransport>(a2b, b2a)};
}

// ---- tcp transport ----------------------------------------------------------------

namespace {

class TcpTransport : public Transport {
 public:
  explicit TcpTransport(int fd) : fd_(fd) {}
  ~TcpTransport() override { close(); }

  void send(const std::vector<uint8_t>& frame) override {
    size_t sent = 0;
    while (sent < frame.size()) {
      ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent,
                         MSG_NOSIGNAL);
      if (n <= 0) throw ChannelClosed("tcp send failed");
      sent += static_cast<size_t>(n);
    }
  }

  std::optional<std::vector<uint8_t>> recv() override {
    std::vector<uint8_t> header(4);
    if (!read_exact(header.data(), 4)) return std::nullopt;
    uint32_t length = 0;
    for (int i = 0; i < 4; ++i) {
      length |= static_cast<uint32_t>(header[i]) << (8 * i);
    }
    if (length < 2 || length > (1u << 28)) {
      throw MalformedBlob("implausible frame length");
    }
    std::vector<uint8_t> frame(4 + length);
    std::copy(header.begin(), header.end(), frame.begin());
    if (!read_exact(frame.data() + 4, length)) return std::nullopt;
    return frame;
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  bool read_exact(uint8_t* dst, size_t n) {
    size_t got = 0;
    while (got < n) {
      ssize_t r = ::recv(fd_, dst + got, n - got, 0);
      if (r <= 0) return false;
      got += static_cast<size_t>(r);
    }
    return true;
  }

  int fd_;
};

}  // namespace

TcpListener::TcpListener(uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw SessionAborted("socket() failed");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd_);
    throw SessionAborted("bind() failed on port " + std::to_string(port));
  }
  if (::listen(fd_, 16) != 0) {
    ::close(fd_);
    throw SessionAborted("listen() failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { shutdown(); }

std::unique_ptr<Transport> TcpListener::accept_one() {
  int client = ::accept(fd_, nullptr, nullptr);
  if (client < 0) throw SessionAborted("accept() failed");
  return std::make_unique<TcpTransport>(client);
}

void TcpListener::shutdown() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<Transport> tcp_connect(const std::string& host, uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw SessionAborted("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(),
                  &addr.sin_addr) != 1) {
    ::close(fd);
    throw SessionAborted("unresolvable host " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw SessionAborted("connect() to " + host + ":" + std::to_string(port) +
                         " failed");
  }
  return std::make_unique<TcpTransport>(fd);
}

// ---- recording and audit ------------------------------------------------------------

void RecordingTransport::send(const std::vector<uint8_t>& frame) {
  if (log_ != nullptr) log_->push_back({true, frame});
  inner_.send(frame);
}

std::optional<std::vector<uint8_t>> RecordingTransport::recv() {
  auto frame = inner_.recv();
  if (frame && log_ != nullptr) log_->push_back({false, *frame});
  return frame;
}

bool audit_transcript(const std::vector<TranscriptEntry>& transcript,
                      const he::HeParams& params, std::string* why) {
  auto fail = [&](const std::string& reason) {
    if (why != nullptr) *why = reason;
    return false;
  };
  bool setup_done = false;
  for (size_t i = 0; i < transcript.size(); ++i) {
    Message msg;
    try {
      msg = frame_decode(transcript[i].frame);
    } catch (const Error& e) {
      return fail("frame " + std::to_string(i) + ": " + e.what());
    }
    MsgTag tag = tag_of(msg);
    if (!setup_done) {
      if (tag == MsgTag::EmbedAssets) setup_done = true;
      continue;
    }
    switch (tag) {
      case MsgTag::SessionInit:
      case MsgTag::EmbedAssets:
        return fail("setup message after setup phase");
      case MsgTag::Error:
        continue;  // control metadata only
      case MsgTag::Query:
      case MsgTag::ReluRequest:
      case MsgTag::ReluResponse:
      case MsgTag::Result: {
        const std::vector<uint8_t>* blob = nullptr;
        if (auto* q = std::get_if<Query>(&msg)) blob = &q->blob;
        if (auto* rq = std::get_if<ReluRequest>(&msg)) blob = &rq->blob;
        if (auto* rs = std::get_if<ReluResponse>(&msg)) blob = &rs->blob;
        if (auto* res = std::get_if<ResultMsg>(&msg)) blob = &res->blob;
        try {
          (void)he::deserialize(*blob, params);
        } catch (const Error& e) {
          return fail("frame " + std::to_string(i) +
                      " payload is not a ciphertext: " + e.what());
        }
        continue;
      }
    }
    return fail("unexpected tag in transcript");
  }
  if (!setup_done) return fail("transcript has no setup phase");
  return true;
}

// ---- server ---------------------------------------------------------------------------

const char* session_state_name(SessionState s) {
  switch (s) {
    case SessionState::AwaitQuery: return "await_query";
    case SessionState::Forwarding: return "forwarding";
    case SessionState::AwaitRelu: return "await_relu";
    case SessionState::Done: return "done";
    case SessionState::Failed: return "failed";
  }
  return "?";
}

InferenceServer::InferenceServer(TransformerModel model,
                                 std::vector<std::string> vocab,
                                 he::HeParams params, he::Backend backend,
                                 std::string model_id)
    : model_(std::move(model)),
      vocab_(std::move(vocab)),
      params_(std::move(params)),
      backend_(backend),
      model_id_(std::move(model_id)) {
  params_.validate();
  std::string why;
  if (!he::he_ready(model_, &why)) {
    throw BadConfig("model is not HE-ready: " + why);
  }
}

namespace {

// Drives the relu delegation over the session transport. Messages within a
// session are strictly ordered, so the exchange is a plain send/recv pair.
class ProtocolReluChannel : public he::ReluChannel {
 public:
  ProtocolReluChannel(Transport& transport, const he::HeParams& params,
                      SessionState& state)
      : transport_(transport), params_(params), state_(state) {}

  he::CipherTensor relu(const he::CipherTensor& input) override {
    ++round_trips_;
    uint64_t id = next_id_++;
    state_ = SessionState::AwaitRelu;
    transport_.send(frame_encode(ReluRequest{id, he::serialize(input)}));
    auto frame = transport_.recv();
    if (!frame) throw ChannelClosed("transport closed during relu exchange");
    Message msg = frame_decode(*frame);
    auto* resp = std::get_if<ReluResponse>(&msg);
    if (resp == nullptr) {
      throw ChannelClosed("expected a relu response");
    }
    if (resp->request_id != id) {
      throw ChannelClosed("relu response id " +
                          std::to_string(resp->request_id) + " != " +
                          std::to_string(id));
    }
    auto ct = he::deserialize(resp->blob, params_);
    if (ct.numel() != input.numel()) {
      throw MalformedBlob("relu response extent changed");
    }
    ct.shape = input.shape;
    state_ = SessionState::Forwarding;
    return ct;
  }

 private:
  Transport& transport_;
  const he::HeParams& params_;
  SessionState& state_;
  uint64_t next_id_ = 1;
};

}  // namespace

SessionState InferenceServer::serve_session(Transport& transport) const {
  SessionState state = SessionState::AwaitQuery;
  try {
    SessionInit init;
    init.params = params_;
    init.backend = static_cast<uint8_t>(backend_);
    init.model_id = model_id_;
    init.task_kind = static_cast<uint8_t>(model_.config().task);
    init.num_outputs = static_cast<uint32_t>(model_.config().num_outputs);
    transport.send(frame_encode(init));

    EmbedAssets assets;
    assets.vocab = vocab_;
    assets.token_table = model_.token_table().detach();
    assets.position_table = model_.position_table().detach();
    transport.send(frame_encode(assets));

    auto frame = transport.recv();
    if (!frame) return SessionState::Failed;
    Message msg = frame_decode(*frame);
    auto* query = std::get_if<Query>(&msg);
    if (query == nullptr) {
      transport.send(frame_encode(ErrorMsg{kErrBadQuery, "expected a query"}));
      return SessionState::Failed;
    }
    if (query->task_kind != static_cast<uint8_t>(model_.config().task)) {
      transport.send(
          frame_encode(ErrorMsg{kErrBadQuery, "task kind mismatch"}));
      return SessionState::Failed;
    }

    auto ct = he::deserialize(query->blob, params_);
    int seq = static_cast<int>(query->seq_len);
    if (seq < 1 ||
        ct.numel() != static_cast<int64_t>(seq) * model_.config().hidden_size) {
      transport.send(
          frame_encode(ErrorMsg{kErrBadQuery, "query extent mismatch"}));
      return SessionState::Failed;
    }
    ct.shape = {seq, model_.config().hidden_size};

    state = SessionState::Forwarding;
    ProtocolReluChannel channel(transport, params_, state);
    auto result = he::he_forward(model_, ct, channel);

    ResultMsg out;
    out.blob = he::serialize(result.logits);
    out.max_mult_depth = static_cast<uint16_t>(result.max_mult_depth);
    out.relu_round_trips = static_cast<uint32_t>(result.relu_round_trips);
    transport.send(frame_encode(out));
    state = SessionState::Done;
    return state;
  } catch (const DepthExceeded& e) {
    try {
      transport.send(frame_encode(ErrorMsg{kErrDepthExceeded, e.what()}));
    } catch (...) {
    }
    return SessionState::Failed;
  } catch (const ChannelClosed&) {
    return SessionState::Failed;
  } catch (const Error& e) {
    try {
      transport.send(frame_encode(ErrorMsg{kErrGeneric, e.what()}));
    } catch (...) {
    }
    return SessionState::Failed;
  }
}

// ---- client ----------------------------------------------------------------------------

ReluResponse client_relu_service(const ReluRequest& request,
                                 const he::KeyPair& key,
                                 const he::HeParams& params,
                                 he::Backend backend) {
  auto ct = he::deserialize(request.blob, params);
  NoGradGuard ng;
  Tensor plain = he::decrypt(ct, key);  // KeyMismatch surfaces here
  Tensor activated = relu(plain);
  auto fresh = he::encrypt(activated, key, params, backend);
  return ReluResponse{request.request_id, he::serialize(fresh)};
}

InferenceClient::InferenceClient(Transport& transport, uint64_t key_seed)
    : transport_(transport) {
  std::mt19937_64 rng(key_seed);
  key_ = he::KeyPair::generate(rng);

  auto first = transport_.recv();
  if (!first) throw SessionAborted("closed before session init");
  Message init_msg = frame_decode(*first);
  auto* init = std::get_if<SessionInit>(&init_msg);
  if (init == nullptr) throw SessionAborted("expected session init");
  if (init->protocol_version != kProtocolVersion) {
    throw ProtocolVersionMismatch("server speaks version " +
                                  std::to_string(init->protocol_version));
  }
  params_ = init->params;
  backend_ = static_cast<he::Backend>(init->backend);
  task_ = static_cast<TaskKind>(init->task_kind);
  num_outputs_ = init->num_outputs;

  auto second = transport_.recv();
  if (!second) throw SessionAborted("closed before embedding assets");
  Message assets_msg = frame_decode(*second);
  auto* assets = std::get_if<EmbedAssets>(&assets_msg);
  if (assets == nullptr) throw SessionAborted("expected embedding assets");
  vocab_ = assets->vocab;
  token_table_ = assets->token_table;
  position_table_ = assets->position_table;
}

Tensor InferenceClient::embed(const std::vector<int>& token_ids) const {
  if (token_ids.empty()) throw EmptyQuery("nothing to embed");
  if (token_ids.size() > static_cast<size_t>(position_table_.dim(0))) {
    throw SeqTooLong(std::to_string(token_ids.size()));
  }
  NoGradGuard ng;
  auto tok = gather_rows(token_table_, token_ids);
  auto pos = slice_rows(position_table_, 0, static_cast<int>(token_ids.size()));
  return add(tok, pos);
}

InferenceClient::Outcome InferenceClient::query_tokens(
    const std::vector<int>& token_ids) {
  Tensor embeddings = embed(token_ids);
  auto ct = he::encrypt(embeddings, key_, params_, backend_);
  Query q;
  q.blob = he::serialize(ct);
  q.seq_len = static_cast<uint32_t>(token_ids.size());
  q.task_kind = static_cast<uint8_t>(task_);
  transport_.send(frame_encode(q));

  while (true) {
    auto frame = transport_.recv();
    if (!frame) throw SessionAborted("transport closed mid-session");
    Message msg = frame_decode(*frame);
    if (auto* req = std::get_if<ReluRequest>(&msg)) {
      auto resp = client_relu_service(*req, key_, params_, backend_);
      transport_.send(frame_encode(resp));
      continue;
    }
    if (auto* res = std::get_if<ResultMsg>(&msg)) {
      auto logits_ct = he::deserialize(res->blob, params_);
      Outcome out;
      int rows = task_ == TaskKind::Tag
                     ? static_cast<int>(token_ids.size())
                     : 1;
      if (logits_ct.numel() != static_cast<int64_t>(rows) * num_outputs_) {
        throw MalformedBlob("result extent mismatch");
      }
      logits_ct.shape = {rows, static_cast<int>(num_outputs_)};
      out.logits = he::decrypt(logits_ct, key_);
      out.max_mult_depth = res->max_mult_depth;
      out.relu_round_trips = res->relu_round_trips;
      return out;
    }
    if (auto* err = std::get_if<ErrorMsg>(&msg)) {
      if (err->code == kErrDepthExceeded) throw DepthExceeded(err->detail);
      throw SessionAborted("server error: " + err->detail);
    }
    throw SessionAborted("unexpected message from server");
  }
}

InferenceClient::Outcome InferenceClient::query_text(const std::string& text) {
  Vocab v;
  v.tokens = vocab_;
  return query_tokens(tokenize(text, v));
}

}  // namespace hexform::proto
