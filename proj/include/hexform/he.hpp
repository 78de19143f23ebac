#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hexform/model.hpp"
#include "hexform/tensor.hpp"

namespace hexform::he {

enum class Backend : uint8_t { Shadow = 0, FixedPoint = 1 };

// Arithmetic budget of a leveled scheme: the coefficient-modulus chain sets
// how many rescaling multiplications are available; the polynomial degree
// sets the slot capacity per pack. The fixed-point backend models the CKKS
// encoding at scale 2^scale_bits; the shadow backend keeps plaintext values
// and enforces exactly the same contract.
struct HeParams {
  int poly_modulus_degree = 8192;
  std::vector<int> coeff_modulus_bits = {60, 30, 30, 60};
  int scale_bits = 30;

  int slot_count() const { return poly_modulus_degree / 2; }
  int level_budget() const {
    return static_cast<int>(coeff_modulus_bits.size()) - 1;
  }
  void validate() const;

  // A chain deep enough to run the default 2-layer model between its relu
  // round trips.
  static HeParams deep(int degree = 8192, int scale_bits = 30,
                       int budget = 20);
};

struct KeyPair {
  std::array<uint8_t, 16> id{};
  uint64_t mask_seed = 0;  // secret; the public id is derived from it

  static KeyPair generate(std::mt19937_64& rng);
  static std::array<uint8_t, 16> id_from_seed(uint64_t seed);
};

// Dense encrypted tensor. Payload is either plaintext values (shadow) or
// whitened fixed-point words; both carry the same level/depth metadata and
// obey the same op contract. Values are immutable once constructed.
class CipherTensor {
 public:
  Backend backend = Backend::Shadow;
  Shape shape;
  std::array<uint8_t, 16> key_id{};
  int level = 0;
  int mult_depth = 0;
  int scale_bits = 30;
  int level_budget = 1;
  int slot_count = 4096;
  uint64_t nonce = 0;                 // fixed-point whitening nonce
  std::vector<double> shadow_vals;    // shadow payload
  std::vector<int64_t> fp_vals;       // fixed-point payload (whitened)
  mutable int64_t trace_id = -1;      // set lazily when a DAG trace is active

  bool defined() const { return !shape.empty(); }
  int64_t numel() const { return numel_of(shape); }
  int pack_count() const;
};

CipherTensor encrypt(const Tensor& x, const KeyPair& key, const HeParams& params,
                     Backend backend = Backend::Shadow, bool pack = true);
Tensor decrypt(const CipherTensor& ct, const KeyPair& key);

// Sets the thread-local label used in DepthExceeded messages.
void set_op_site(const std::string& site);

CipherTensor ct_add(const CipherTensor& a, const CipherTensor& b);
CipherTensor ct_add_plain(const CipherTensor& a, const Tensor& p);
CipherTensor ct_mul(const CipherTensor& a, const CipherTensor& b);
CipherTensor ct_mul_plain(const CipherTensor& a, const Tensor& p);

// Drops a fresher ciphertext to a higher level without consuming depth, the
// way CKKS mod-switches operands into agreement before addition.
CipherTensor ct_mod_switch(const CipherTensor& a, int target_level);

// ct[m,k] x plain[k,n] lowered to element-wise products:
//   sum_j ct_mul_plain(column-broadcast(a[:,j]), W[j,:])
// Exactly one multiplicative level regardless of k.
CipherTensor lower_matmul(const CipherTensor& a, const Tensor& w);

// Ciphertext-ciphertext products in the same element-wise style (used for
// attention scores and probability-value products).
CipherTensor ct_matmul(const CipherTensor& a, const CipherTensor& b);
// a[m,d] x b[n,d]^T without materializing a transpose.
CipherTensor ct_matmul_nt(const CipherTensor& a, const CipherTensor& b);

// Structural ops: free (no depth, no level, no arithmetic).
CipherTensor ct_slice_rows(const CipherTensor& a, int r0, int r1);
CipherTensor ct_slice_cols(const CipherTensor& a, int c0, int c1);
CipherTensor ct_concat_rows(const std::vector<CipherTensor>& parts);
CipherTensor ct_concat_cols(const std::vector<CipherTensor>& parts);
CipherTensor ct_broadcast_col(const CipherTensor& col, int ncols);
CipherTensor ct_reshape(const CipherTensor& a, Shape shape);

CipherTensor ct_row_sums(const CipherTensor& a);  // adds only

// The contract stops here: no division, no transcendental functions, no
// comparisons on ciphertext.
[[noreturn]] void ct_div(const CipherTensor& a, const CipherTensor& b);
[[noreturn]] void ct_exp(const CipherTensor& a);
[[noreturn]] void ct_compare(const CipherTensor& a, const CipherTensor& b);
[[noreturn]] void ct_max(const CipherTensor& a, const CipherTensor& b);
[[noreturn]] Tensor softmax_exact(const CipherTensor& x, int axis = -1);
[[noreturn]] Tensor gelu(const CipherTensor& x);

// Byte-exact serialization:
// "HEXC" | version u8 | backend u8 | key id (16) | level u16 | depth u16 |
// scale_bits u8 | pack_count u32 | per-pack payloads (little endian).
std::vector<uint8_t> serialize(const CipherTensor& ct);
CipherTensor deserialize(std::span<const uint8_t> bytes, const HeParams& params);

// ---- computation DAG recording ---------------------------------------------

struct CtTraceNode {
  enum class Kind { Input, Add, Mul, Relu, Struct };
  Kind kind;
  std::vector<int64_t> parents;
  int dynamic_depth = 0;
};

class CtTrace {
 public:
  int64_t record(CtTraceNode::Kind kind, std::vector<int64_t> parents,
                 int dynamic_depth);
  const std::vector<CtTraceNode>& nodes() const { return nodes_; }

 private:
  std::vector<CtTraceNode> nodes_;
};

class CtTraceScope {
 public:
  explicit CtTraceScope(CtTrace& trace);
  ~CtTraceScope();
  CtTraceScope(const CtTraceScope&) = delete;
  CtTraceScope& operator=(const CtTraceScope&) = delete;

 private:
  CtTrace* prev_;
};

// Marks a relu delegation edge in the recorded DAG (response derived from
// request with depth reset).
void trace_relu_link(CipherTensor& response, const CipherTensor& request);

struct DepthAudit {
  int static_max_depth = 0;    // longest mul chain, relu resets to zero
  int dynamic_max_depth = 0;   // max of the recorded per-node dynamic depths
  bool per_node_match = true;  // every node's dynamic depth equals the static one
};

// Independent graph-traversal oracle over the recorded DAG.
DepthAudit audit_depths(const CtTrace& trace);

// ---- encrypted forward -------------------------------------------------------

// The one non-arithmetic escape hatch: ciphertext goes out, relu of its
// plaintext comes back re-encrypted at depth 0.
class ReluChannel {
 public:
  virtual ~ReluChannel() = default;
  virtual CipherTensor relu(const CipherTensor& input) = 0;
  int64_t round_trips() const { return round_trips_; }

 protected:
  int64_t round_trips_ = 0;
};

// In-process channel holding the client key; used by tests and by the client
// side of the protocol. Re-encrypts under the same backend as the request.
class LocalReluChannel : public ReluChannel {
 public:
  LocalReluChannel(KeyPair key, HeParams params)
      : key_(key), params_(std::move(params)) {}
  CipherTensor relu(const CipherTensor& input) override;

 private:
  KeyPair key_;
  HeParams params_;
};

struct HeForwardResult {
  CipherTensor logits;
  int max_mult_depth = 0;
  int64_t relu_round_trips = 0;
};

// Evaluates the approximated model on ciphertext with ct_add / ct_mul /
// lower_matmul plus relu round trips. Refuses models whose configuration
// still needs a non-arithmetic primitive.
HeForwardResult he_forward(const TransformerModel& model,
                           const CipherTensor& embeddings, ReluChannel& relu,
                           const std::vector<uint8_t>& mask = {});

// True when the model's forward trace holds only add/mul/relu primitives.
bool he_ready(const TransformerModel& model, std::string* why = nullptr);

}  // namespace hexform::he
