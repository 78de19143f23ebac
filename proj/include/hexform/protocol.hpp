#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hexform/he.hpp"
#include "hexform/model.hpp"

namespace hexform::proto {

constexpr uint8_t kProtocolVersion = 0x01;

// error codes carried by ErrorMsg
constexpr uint16_t kErrGeneric = 1;
constexpr uint16_t kErrDepthExceeded = 2;
constexpr uint16_t kErrBadQuery = 3;

enum class MsgTag : uint8_t {
  SessionInit = 1,
  EmbedAssets = 2,
  Query = 3,
  ReluRequest = 4,
  ReluResponse = 5,
  Result = 6,
  Error = 7,
};

struct SessionInit {
  uint8_t protocol_version = kProtocolVersion;
  he::HeParams params;
  uint8_t backend = 0;
  std::string model_id;
  uint8_t task_kind = 0;
  uint32_t num_outputs = 0;
};

// Server -> client at setup. The threat model protects user data, not model
// weights; the client needs the tables to run the embedding step locally.
struct EmbedAssets {
  std::vector<std::string> vocab;
  Tensor token_table;
  Tensor position_table;
};

struct Query {
  std::vector<uint8_t> blob;  // encrypted [seq, hidden] embeddings
  uint32_t seq_len = 0;
  uint8_t task_kind = 0;
};

struct ReluRequest {
  uint64_t request_id = 0;
  std::vector<uint8_t> blob;
};

struct ReluResponse {
  uint64_t request_id = 0;
  std::vector<uint8_t> blob;
};

struct ResultMsg {
  std::vector<uint8_t> blob;  // encrypted logits
  uint16_t max_mult_depth = 0;
  uint32_t relu_round_trips = 0;
};

struct ErrorMsg {
  uint16_t code = kErrGeneric;
  std::string detail;
};

using Message = std::variant<SessionInit, EmbedAssets, Query, ReluRequest,
                             ReluResponse, ResultMsg, ErrorMsg>;

MsgTag tag_of(const Message& msg);

// Framing: u32 length (little endian, covers version+tag+payload),
// u8 version, u8 tag, payload. decode(encode(m)) == m.
std::vector<uint8_t> frame_encode(const Message& msg);
Message frame_decode(std::span<const uint8_t> frame);

// ---- transports -----------------------------------------------------------

// Ordered, reliable stream of whole frames.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(const std::vector<uint8_t>& frame) = 0;
  // Blocks; nullopt once the peer closed.
  virtual std::optional<std::vector<uint8_t>> recv() = 0;
  virtual void close() = 0;
};

std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>>
make_inprocess_pair();

class TcpListener {
 public:
  explicit TcpListener(uint16_t port);  // 0 picks an ephemeral port
  ~TcpListener();
  uint16_t port() const { return port_; }
  std::unique_ptr<Transport> accept_one();
  void shutdown();

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

std::unique_ptr<Transport> tcp_connect(const std::string& host, uint16_t port);

// ---- transcript recording ---------------------------------------------------

struct TranscriptEntry {
  bool client_to_server = false;
  std::vector<uint8_t> frame;
};

// Proxy around the client's transport; sees both directions of the session.
class RecordingTransport : public Transport {
 public:
  RecordingTransport(Transport& inner, std::vector<TranscriptEntry>* log)
      : inner_(inner), log_(log) {}
  void send(const std::vector<uint8_t>& frame) override;
  std::optional<std::vector<uint8_t>> recv() override;
  void close() override { inner_.close(); }

 private:
  Transport& inner_;
  std::vector<TranscriptEntry>* log_;
};

// Structural leakage audit: after EMBED_ASSETS every frame must be a Query,
// ReluRequest, ReluResponse, Result or Error, and every payload blob must
// parse as a ciphertext. No token ids or raw activations have a place to
// hide in that schema.
bool audit_transcript(const std::vector<TranscriptEntry>& transcript,
                      const he::HeParams& params, std::string* why = nullptr);

// ---- sessions ----------------------------------------------------------------

enum class SessionState { AwaitQuery, Forwarding, AwaitRelu, Done, Failed };

const char* session_state_name(SessionState s);

// Hosts one HE-ready model; every session serves it read-only, so many
// sessions may run concurrently on their own transports.
class InferenceServer {
 public:
  InferenceServer(TransformerModel model, std::vector<std::string> vocab,
                  he::HeParams params, he::Backend backend,
                  std::string model_id = "hexform");

  // Runs one full session; returns the terminal state.
  SessionState serve_session(Transport& transport) const;

  const he::HeParams& params() const { return params_; }
  const TransformerModel& model() const { return model_; }

 private:
  TransformerModel model_;
  std::vector<std::string> vocab_;
  he::HeParams params_;
  he::Backend backend_;
  std::string model_id_;
};

// Decrypt -> relu -> re-encrypt at depth zero, echoing the request id. The
// depth reset is what lets arbitrarily deep models fit a finite level budget.
ReluResponse client_relu_service(const ReluRequest& request,
                                 const he::KeyPair& key,
                                 const he::HeParams& params,
                                 he::Backend backend);

class InferenceClient {
 public:
  // Performs the handshake: consumes SessionInit and EmbedAssets.
  InferenceClient(Transport& transport, uint64_t key_seed);

  struct Outcome {
    Tensor logits;
    int max_mult_depth = 0;
    int64_t relu_round_trips = 0;
  };

  Tensor embed(const std::vector<int>& token_ids) const;
  Outcome query_tokens(const std::vector<int>& token_ids);
  Outcome query_text(const std::string& text);

  const std::vector<std::string>& vocab() const { return vocab_; }
  const he::HeParams& params() const { return params_; }
  TaskKind task_kind() const { return task_; }
  const he::KeyPair& key() const { return key_; }

 private:
  Transport& transport_;
  he::KeyPair key_;
  he::HeParams params_;
  he::Backend backend_ = he::Backend::Shadow;
  std::vector<std::string> vocab_;
  Tensor token_table_, position_table_;
  TaskKind task_ = TaskKind::Classify;
  uint32_t num_outputs_ = 0;
};

}  // namespace hexform::proto
