#include "hexform/he.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace hexform::he {

namespace {

constexpr uint8_t kBlobVersion = 1;
const char kMagic[4] = {'H', 'E', 'X', 'C'};

thread_local CtTrace* g_ct_trace = nullptr;
thread_local std::string g_op_site = "unlabeled";
thread_local int g_session_max_depth = 0;

std::atomic<uint64_t> g_nonce_counter{1};

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv64(const uint8_t* data, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t whiten_mask(const std::array<uint8_t, 16>& key_id, uint64_t nonce,
                     uint64_t index) {
  return splitmix64(fnv64(key_id.data(), key_id.size()) ^
                    (nonce * 0x2545f4914f6cdd1dULL) ^ index);
}

int64_t encode_fixed(double x, int scale_bits) {
  double scaled = x * std::ldexp(1.0, scale_bits);
  if (!std::isfinite(scaled) || std::fabs(scaled) > std::ldexp(1.0, 62)) {
    throw EncodeOverflow("value " + std::to_string(x) + " at scale 2^" +
                         std::to_string(scale_bits));
  }
  return static_cast<int64_t>(std::llround(scaled));
}

// round-half-away-from-zero division by 2^scale_bits
int64_t rescale_fixed(__int128 p, int scale_bits) {
  __int128 half = static_cast<__int128>(1) << (scale_bits - 1);
  __int128 r =
      p >= 0 ? (p + half) >> scale_bits : -((-p + half) >> scale_bits);
  if (r > (static_cast<__int128>(1) << 62) ||
      r < -(static_cast<__int128>(1) << 62)) {
    throw EncodeOverflow("rescale overflow at " + g_op_site);
  }
  return static_cast<int64_t>(r);
}

std::vector<int64_t> unwhiten(const CipherTensor& ct) {
  std::vector<int64_t> out(ct.fp_vals.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<int64_t>(static_cast<uint64_t>(ct.fp_vals[i]) -
                                  whiten_mask(ct.key_id, ct.nonce, i));
  }
  return out;
}

void rewhiten(CipherTensor& ct, std::vector<int64_t> vals) {
  ct.nonce = g_nonce_counter.fetch_add(1);
  ct.fp_vals.resize(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) {
    ct.fp_vals[i] = static_cast<int64_t>(static_cast<uint64_t>(vals[i]) +
                                         whiten_mask(ct.key_id, ct.nonce, i));
  }
}

int64_t register_source(const CipherTensor& ct) {
  // operand predates the trace; register it as a source
  return g_ct_trace->record(CtTraceNode::Kind::Input, {}, ct.mult_depth);
}

void trace_node(CipherTensor& out, CtTraceNode::Kind kind,
                std::initializer_list<const CipherTensor*> parents) {
  g_session_max_depth = std::max(g_session_max_depth, out.mult_depth);
  if (g_ct_trace == nullptr) return;
  std::vector<int64_t> pids;
  for (const CipherTensor* p : parents) {
    if (p->trace_id < 0) p->trace_id = register_source(*p);
    pids.push_back(p->trace_id);
  }
  out.trace_id = g_ct_trace->record(kind, std::move(pids), out.mult_depth);
}

void trace_node_multi(CipherTensor& out, CtTraceNode::Kind kind,
                      const std::vector<CipherTensor>& parents) {
  g_session_max_depth = std::max(g_session_max_depth, out.mult_depth);
  if (g_ct_trace == nullptr) return;
  std::vector<int64_t> pids;
  for (const CipherTensor& p : parents) {
    if (p.trace_id < 0) p.trace_id = register_source(p);
    pids.push_back(p.trace_id);
  }
  out.trace_id = g_ct_trace->record(kind, std::move(pids), out.mult_depth);
}

void check_same_context(const CipherTensor& a, const CipherTensor& b) {
  if (a.backend != b.backend) throw Error("ciphertext backends differ");
  if (a.key_id != b.key_id) throw KeyMismatch("operands under different keys");
  if (a.scale_bits != b.scale_bits) {
    throw LevelMismatch("operand scales differ");
  }
  if (a.level_budget != b.level_budget) {
    throw LevelMismatch("operand modulus chains differ");
  }
}

CipherTensor metadata_like(const CipherTensor& a, Shape shape) {
  CipherTensor out;
  out.backend = a.backend;
  out.shape = std::move(shape);
  out.key_id = a.key_id;
  out.scale_bits = a.scale_bits;
  out.level_budget = a.level_budget;
  out.slot_count = a.slot_count;
  return out;
}

// Plain operand aligned to the ciphertext shape: same shape / same extent, a
// vector over the trailing dim, or a scalar.
std::vector<double> expand_plain(const CipherTensor& ct, const Tensor& p) {
  int64_t n = ct.numel();
  std::span<const double> pv = p.data();
  if (static_cast<int64_t>(pv.size()) == n) return {pv.begin(), pv.end()};
  if (p.numel() == 1) return std::vector<double>(n, pv[0]);
  int last = ct.shape.back();
  if (p.ndim() == 1 && p.numel() == last) {
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = pv[i % last];
    return out;
  }
  throw ShapeMismatch("plain operand " + shape_str(p.shape()) +
                      " does not align with ciphertext " +
                      shape_str(ct.shape));
}

void check_budget(const CipherTensor& a, int new_level) {
  if (new_level > a.level_budget) {
    throw DepthExceeded("at " + g_op_site + ": level " +
                        std::to_string(new_level) + " exceeds budget " +
                        std::to_string(a.level_budget));
  }
}

}  // namespace

void HeParams::validate() const {
  static const int kDegrees[] = {1024, 2048, 4096, 8192, 16384};
  if (std::find(std::begin(kDegrees), std::end(kDegrees),
                poly_modulus_degree) == std::end(kDegrees)) {
    throw InvalidSpec("poly_modulus_degree " +
                      std::to_string(poly_modulus_degree) +
                      " not in {1024, 2048, 4096, 8192, 16384}");
  }
  if (coeff_modulus_bits.size() < 2) {
    throw InvalidSpec("coefficient modulus chain needs at least 2 entries");
  }
  for (int b : coeff_modulus_bits) {
    if (b != 20 && b != 30 && b != 60) {
      throw InvalidSpec("coeff modulus bits must come from {20, 30, 60}");
    }
  }
  if (scale_bits < 10 || scale_bits > 60) {
    throw InvalidSpec("scale_bits out of range");
  }
}

HeParams HeParams::deep(int degree, int scale_bits, int budget) {
  HeParams p;
  p.poly_modulus_degree = degree;
  p.scale_bits = scale_bits;
  p.coeff_modulus_bits.assign(budget + 1, 30);
  p.coeff_modulus_bits.front() = 60;
  p.coeff_modulus_bits.back() = 60;
  return p;
}

std::array<uint8_t, 16> KeyPair::id_from_seed(uint64_t seed) {
  std::array<uint8_t, 16> id{};
  uint64_t a = splitmix64(seed);
  uint64_t b = splitmix64(a ^ 0xabcdef0123456789ULL);
  std::memcpy(id.data(), &a, 8);
  std::memcpy(id.data() + 8, &b, 8);
  return id;
}

KeyPair KeyPair::generate(std::mt19937_64& rng) {
  KeyPair kp;
  kp.mask_seed = rng();
  kp.id = id_from_seed(kp.mask_seed);
  return kp;
}

int CipherTensor::pack_count() const {
  return static_cast<int>((numel() + slot_count - 1) / slot_count);
}

void set_op_site(const std::string& site) { g_op_site = site; }

CipherTensor encrypt(const Tensor& x, const KeyPair& key,
                     const HeParams& params, Backend backend, bool pack) {
  params.validate();
  if (!pack && x.numel() > params.slot_count()) {
    throw TooManySlots(std::to_string(x.numel()) + " values for " +
                       std::to_string(params.slot_count()) + " slots");
  }
  CipherTensor ct;
  ct.backend = backend;
  ct.shape = x.shape();
  ct.key_id = key.id;
  ct.level = 0;
  ct.mult_depth = 0;
  ct.scale_bits = params.scale_bits;
  ct.level_budget = params.level_budget();
  ct.slot_count = params.slot_count();
  if (backend == Backend::Shadow) {
    ct.shadow_vals.assign(x.data().begin(), x.data().end());
  } else {
    std::vector<int64_t> vals(x.numel());
    for (int64_t i = 0; i < x.numel(); ++i) {
      vals[i] = encode_fixed(x.data()[i], params.scale_bits);
    }
    rewhiten(ct, std::move(vals));
  }
  trace_node(ct, CtTraceNode::Kind::Input, {});
  return ct;
}

Tensor decrypt(const CipherTensor& ct, const KeyPair& key) {
  if (ct.key_id != key.id) {
    throw KeyMismatch("ciphertext was not produced under this key");
  }
  if (ct.backend == Backend::Shadow) {
    return Tensor::from_data(ct.shape, ct.shadow_vals);
  }
  auto vals = unwhiten(ct);
  std::vector<double> out(vals.size());
  double inv = std::ldexp(1.0, -ct.scale_bits);
  for (size_t i = 0; i < vals.size(); ++i) {
    out[i] = static_cast<double>(vals[i]) * inv;
  }
  return Tensor::from_data(ct.shape, std::move(out));
}

CipherTensor ct_add(const CipherTensor& a, const CipherTensor& b) {
  check_same_context(a, b);
  if (a.shape != b.shape) {
    throw ShapeMismatch("ct_add " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
  }
  if (a.level != b.level) {
    throw LevelMismatch("ct_add at levels " + std::to_string(a.level) +
                        " vs " + std::to_string(b.level) + "; mod-switch first");
  }
  CipherTensor out = metadata_like(a, a.shape);
  out.level = a.level;
  out.mult_depth = std::max(a.mult_depth, b.mult_depth);
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.resize(a.shadow_vals.size());
    for (size_t i = 0; i < out.shadow_vals.size(); ++i) {
      out.shadow_vals[i] = a.shadow_vals[i] + b.shadow_vals[i];
    }
  } else {
    auto va = unwhiten(a), vb = unwhiten(b);
    for (size_t i = 0; i < va.size(); ++i) va[i] += vb[i];
    rewhiten(out, std::move(va));
  }
  trace_node(out, CtTraceNode::Kind::Add, {&a, &b});
  return out;
}

CipherTensor ct_add_plain(const CipherTensor& a, const Tensor& p) {
  auto plain = expand_plain(a, p);
  CipherTensor out = metadata_like(a, a.shape);
  out.level = a.level;
  out.mult_depth = a.mult_depth;
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.resize(plain.size());
    for (size_t i = 0; i < plain.size(); ++i) {
      out.shadow_vals[i] = a.shadow_vals[i] + plain[i];
    }
  } else {
    auto va = unwhiten(a);
    for (size_t i = 0; i < va.size(); ++i) {
      va[i] += encode_fixed(plain[i], a.scale_bits);
    }
    rewhiten(out, std::move(va));
  }
  trace_node(out, CtTraceNode::Kind::Add, {&a});
  return out;
}

CipherTensor ct_mul(const CipherTensor& a, const CipherTensor& b) {
  check_same_context(a, b);
  if (a.shape != b.shape) {
    throw ShapeMismatch("ct_mul " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
  }
  int new_level = std::max(a.level, b.level) + 1;
  check_budget(a, new_level);
  CipherTensor out = metadata_like(a, a.shape);
  out.level = new_level;
  out.mult_depth = std::max(a.mult_depth, b.mult_depth) + 1;
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.resize(a.shadow_vals.size());
    for (size_t i = 0; i < out.shadow_vals.size(); ++i) {
      out.shadow_vals[i] = a.shadow_vals[i] * b.shadow_vals[i];
    }
  } else {
    auto va = unwhiten(a), vb = unwhiten(b);
    std::vector<int64_t> vo(va.size());
    for (size_t i = 0; i < va.size(); ++i) {
      // scale squares to 2^(2*sb); rescale divides by 2^sb and drops a level
      vo[i] = rescale_fixed(
          static_cast<__int128>(va[i]) * static_cast<__int128>(vb[i]),
          a.scale_bits);
    }
    rewhiten(out, std::move(vo));
  }
  trace_node(out, CtTraceNode::Kind::Mul, {&a, &b});
  return out;
}

CipherTensor ct_mul_plain(const CipherTensor& a, const Tensor& p) {
  auto plain = expand_plain(a, p);
  int new_level = a.level + 1;
  check_budget(a, new_level);
  CipherTensor out = metadata_like(a, a.shape);
  out.level = new_level;
  out.mult_depth = a.mult_depth + 1;
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.resize(plain.size());
    for (size_t i = 0; i < plain.size(); ++i) {
      out.shadow_vals[i] = a.shadow_vals[i] * plain[i];
    }
  } else {
    auto va = unwhiten(a);
    std::vector<int64_t> vo(va.size());
    for (size_t i = 0; i < va.size(); ++i) {
      vo[i] = rescale_fixed(
          static_cast<__int128>(va[i]) *
              static_cast<__int128>(encode_fixed(plain[i], a.scale_bits)),
          a.scale_bits);
    }
    rewhiten(out, std::move(vo));
  }
  trace_node(out, CtTraceNode::Kind::Mul, {&a});
  return out;
}

CipherTensor ct_mod_switch(const CipherTensor& a, int target_level) {
  if (target_level < a.level) {
    throw LevelMismatch("cannot mod-switch upward from level " +
                        std::to_string(a.level) + " to " +
                        std::to_string(target_level));
  }
  check_budget(a, target_level);
  CipherTensor out = a;
  out.level = target_level;
  out.trace_id = -1;
  trace_node(out, CtTraceNode::Kind::Struct, {&a});
  return out;
}

// ---- structural ops ---------------------------------------------------------

namespace {

// new[i] = old[map(i)]; fixed-point payload is rewhitened under a new nonce.
template <typename MapFn>
CipherTensor remap(const CipherTensor& a, Shape out_shape, MapFn map) {
  CipherTensor out = metadata_like(a, std::move(out_shape));
  out.level = a.level;
  out.mult_depth = a.mult_depth;
  int64_t n = out.numel();
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.resize(n);
    for (int64_t i = 0; i < n; ++i) out.shadow_vals[i] = a.shadow_vals[map(i)];
  } else {
    auto va = unwhiten(a);
    std::vector<int64_t> vo(n);
    for (int64_t i = 0; i < n; ++i) vo[i] = va[map(i)];
    rewhiten(out, std::move(vo));
  }
  trace_node(out, CtTraceNode::Kind::Struct, {&a});
  return out;
}

void require_2d(const CipherTensor& a, const char* op) {
  if (a.shape.size() != 2) {
    throw ShapeMismatch(std::string(op) + " expects a 2-d ciphertext");
  }
}

}  // namespace

CipherTensor ct_slice_rows(const CipherTensor& a, int r0, int r1) {
  require_2d(a, "ct_slice_rows");
  int c = a.shape[1];
  if (r0 < 0 || r1 > a.shape[0] || r0 >= r1) throw ShapeMismatch("bad slice");
  return remap(a, {r1 - r0, c},
               [=](int64_t i) { return (r0 + i / c) * c + i % c; });
}

CipherTensor ct_slice_cols(const CipherTensor& a, int c0, int c1) {
  require_2d(a, "ct_slice_cols");
  int c = a.shape[1], w = c1 - c0;
  if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeMismatch("bad slice");
  return remap(a, {a.shape[0], w},
               [=](int64_t i) { return (i / w) * c + c0 + i % w; });
}

CipherTensor ct_concat_rows(const std::vector<CipherTensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  if (parts.size() == 1) return parts[0];
  int c = parts[0].shape[1];
  int rows = 0;
  for (const auto& p : parts) {
    require_2d(p, "ct_concat_rows");
    check_same_context(parts[0], p);
    if (p.shape[1] != c) throw ShapeMismatch("column mismatch");
    if (p.level != parts[0].level) {
      throw LevelMismatch("concat operands at different levels");
    }
    rows += p.shape[0];
  }
  CipherTensor out = metadata_like(parts[0], {rows, c});
  out.level = parts[0].level;
  for (const auto& p : parts) {
    out.mult_depth = std::max(out.mult_depth, p.mult_depth);
  }
  if (out.backend == Backend::Shadow) {
    for (const auto& p : parts) {
      out.shadow_vals.insert(out.shadow_vals.end(), p.shadow_vals.begin(),
                             p.shadow_vals.end());
    }
  } else {
    std::vector<int64_t> vo;
    for (const auto& p : parts) {
      auto vp = unwhiten(p);
      vo.insert(vo.end(), vp.begin(), vp.end());
    }
    rewhiten(out, std::move(vo));
  }
  trace_node_multi(out, CtTraceNode::Kind::Struct, parts);
  return out;
}

CipherTensor ct_concat_cols(const std::vector<CipherTensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  if (parts.size() == 1) return parts[0];
  int r = parts[0].shape[0];
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "ct_concat_cols");
    check_same_context(parts[0], p);
    if (p.shape[0] != r) throw ShapeMismatch("row mismatch");
    if (p.level != parts[0].level) {
      throw LevelMismatch("concat operands at different levels");
    }
    total += p.shape[1];
  }
  CipherTensor out = metadata_like(parts[0], {r, total});
  out.level = parts[0].level;
  for (const auto& p : parts) {
    out.mult_depth = std::max(out.mult_depth, p.mult_depth);
  }
  if (out.backend == Backend::Shadow) {
    out.shadow_vals.resize(static_cast<size_t>(r) * total);
    int off = 0;
    for (const auto& p : parts) {
      int w = p.shape[1];
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < w; ++j) {
          out.shadow_vals[static_cast<size_t>(i) * total + off + j] =
              p.shadow_vals[static_cast<size_t>(i) * w + j];
        }
      }
      off += w;
    }
  } else {
    std::vector<int64_t> vo(static_cast<size_t>(r) * total);
    int off = 0;
    for (const auto& p : parts) {
      int w = p.shape[1];
      auto vp = unwhiten(p);
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < w; ++j) {
          vo[static_cast<size_t>(i) * total + off + j] =
              vp[static_cast<size_t>(i) * w + j];
        }
      }
      off += w;
    }
    rewhiten(out, std::move(vo));
  }
  trace_node_multi(out, CtTraceNode::Kind::Struct, parts);
  return out;
}

CipherTensor ct_broadcast_col(const CipherTensor& col, int ncols) {
  require_2d(col, "ct_broadcast_col");
  if (col.shape[1] != 1) throw ShapeMismatch("expected a column");
  return remap(col, {col.shape[0], ncols}, [=](int64_t i) { return i / ncols; });
}

CipherTensor ct_reshape(const CipherTensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeMismatch("reshape to incompatible extent");
  }
  return remap(a, std::move(shape), [](int64_t i) { return i; });
}

CipherTensor ct_row_sums(const CipherTensor& a) {
  require_2d(a, "ct_row_sums");
  int r = a.shape[0], c = a.shape[1];
  CipherTensor out = metadata_like(a, {r, 1});
  out.level = a.level;
  out.mult_depth = a.mult_depth;
  if (a.backend == Backend::Shadow) {
    out.shadow_vals.assign(r, 0.0);
    for (int i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int j = 0; j < c; ++j) {
        acc += a.shadow_vals[static_cast<size_t>(i) * c + j];
      }
      out.shadow_vals[i] = acc;
    }
  } else {
    auto va = unwhiten(a);
    std::vector<int64_t> vo(r, 0);
    for (int i = 0; i < r; ++i) {
      int64_t acc = 0;
      for (int j = 0; j < c; ++j) acc += va[static_cast<size_t>(i) * c + j];
      vo[i] = acc;
    }
    rewhiten(out, std::move(vo));
  }
  trace_node(out, CtTraceNode::Kind::Add, {&a});
  return out;
}

// ---- lowered matrix products -------------------------------------------------

CipherTensor lower_matmul(const CipherTensor& a, const Tensor& w) {
  require_2d(a, "lower_matmul");
  if (w.ndim() != 2 || w.dim(0) != a.shape[1]) {
    throw ShapeMismatch("lower_matmul " + shape_str(a.shape) + " x " +
                        shape_str(w.shape()));
  }
  int k = a.shape[1], n = w.dim(1);
  CipherTensor acc;
  for (int j = 0; j < k; ++j) {
    auto col = ct_broadcast_col(ct_slice_cols(a, j, j + 1), n);  // [m,n]
    std::vector<double> wrow(w.data().begin() + static_cast<size_t>(j) * n,
                             w.data().begin() + static_cast<size_t>(j + 1) * n);
    auto term = ct_mul_plain(col, Tensor::from_data({n}, std::move(wrow)));
    acc = j == 0 ? term : ct_add(acc, term);
  }
  return acc;
}

CipherTensor ct_matmul(const CipherTensor& a, const CipherTensor& b) {
  require_2d(a, "ct_matmul");
  require_2d(b, "ct_matmul");
  if (a.shape[1] != b.shape[0]) throw ShapeMismatch("ct_matmul inner dims");
  int k = a.shape[1], n = b.shape[1], m = a.shape[0];
  CipherTensor acc;
  for (int j = 0; j < k; ++j) {
    auto col = ct_broadcast_col(ct_slice_cols(a, j, j + 1), n);     // [m,n]
    auto brow = ct_slice_rows(b, j, j + 1);                          // [1,n]
    auto brow_full = remap(brow, {m, n}, [=](int64_t i) { return i % n; });
    auto term = ct_mul(col, brow_full);
    acc = j == 0 ? term : ct_add(acc, term);
  }
  return acc;
}

CipherTensor ct_matmul_nt(const CipherTensor& a, const CipherTensor& b) {
  require_2d(a, "ct_matmul_nt");
  require_2d(b, "ct_matmul_nt");
  if (a.shape[1] != b.shape[1]) throw ShapeMismatch("ct_matmul_nt inner dims");
  int d = a.shape[1], m = a.shape[0], n = b.shape[0];
  CipherTensor acc;
  for (int t = 0; t < d; ++t) {
    auto col = ct_broadcast_col(ct_slice_cols(a, t, t + 1), n);  // [m,n]
    auto bcol = ct_slice_cols(b, t, t + 1);                       // [n,1]
    auto brow_full = remap(bcol, {m, n}, [=](int64_t i) { return i % n; });
    auto term = ct_mul(col, brow_full);
    acc = t == 0 ? term : ct_add(acc, term);
  }
  return acc;
}

// ---- forbidden ops -------------------------------------------------------------

void ct_div(const CipherTensor&, const CipherTensor&) {
  throw UnsupportedOp("div");
}
void ct_exp(const CipherTensor&) { throw UnsupportedOp("exp"); }
void ct_compare(const CipherTensor&, const CipherTensor&) {
  throw UnsupportedOp("compare");
}
void ct_max(const CipherTensor&, const CipherTensor&) {
  throw UnsupportedOp("max");
}
Tensor softmax_exact(const CipherTensor&, int) { throw UnsupportedOp("exp"); }
Tensor gelu(const CipherTensor&) { throw UnsupportedOp("gelu"); }

// ---- serialization -------------------------------------------------------------

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

struct Reader {
  std::span<const uint8_t> bytes;
  size_t at = 0;
  uint8_t u8() {
    if (at + 1 > bytes.size()) throw MalformedBlob("truncated ciphertext blob");
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
};

}  // namespace

std::vector<uint8_t> serialize(const CipherTensor& ct) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kBlobVersion);
  out.push_back(static_cast<uint8_t>(ct.backend));
  out.insert(out.end(), ct.key_id.begin(), ct.key_id.end());
  put_u16(out, static_cast<uint16_t>(ct.level));
  put_u16(out, static_cast<uint16_t>(ct.mult_depth));
  out.push_back(static_cast<uint8_t>(ct.scale_bits));
  int packs = ct.pack_count();
  put_u32(out, static_cast<uint32_t>(packs));
  int64_t n = ct.numel();
  for (int p = 0; p < packs; ++p) {
    int64_t lo = static_cast<int64_t>(p) * ct.slot_count;
    int64_t hi = std::min<int64_t>(n, lo + ct.slot_count);
    put_u32(out, static_cast<uint32_t>(hi - lo));
    if (ct.backend == Backend::Shadow) {
      for (int64_t i = lo; i < hi; ++i) {
        uint64_t bits;
        double v = ct.shadow_vals[i];
        std::memcpy(&bits, &v, 8);
        put_u64(out, bits);
      }
    } else {
      put_u64(out, ct.nonce);
      for (int64_t i = lo; i < hi; ++i) {
        put_u64(out, static_cast<uint64_t>(ct.fp_vals[i]));
      }
    }
  }
  return out;
}

CipherTensor deserialize(std::span<const uint8_t> bytes,
                         const HeParams& params) {
  Reader r{bytes};
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw MalformedBlob("bad ciphertext magic");
  }
  if (r.u8() != kBlobVersion) throw MalformedBlob("unknown blob version");
  uint8_t backend = r.u8();
  if (backend > 1) throw MalformedBlob("unknown backend tag");

  CipherTensor ct;
  ct.backend = static_cast<Backend>(backend);
  for (auto& b : ct.key_id) b = r.u8();
  ct.level = r.u16();
  ct.mult_depth = r.u16();
  ct.scale_bits = r.u8();
  ct.level_budget = params.level_budget();
  ct.slot_count = params.slot_count();
  uint32_t packs = r.u32();
  if (packs == 0 || packs > (1u << 20)) throw MalformedBlob("bad pack count");
  int64_t total = 0;
  bool nonce_set = false;
  for (uint32_t p = 0; p < packs; ++p) {
    uint32_t count = r.u32();
    if (count == 0 || count > static_cast<uint32_t>(ct.slot_count)) {
      throw MalformedBlob("bad pack size");
    }
    if (ct.backend == Backend::Shadow) {
      for (uint32_t i = 0; i < count; ++i) {
        uint64_t bits = r.u64();
        double v;
        std::memcpy(&v, &bits, 8);
        ct.shadow_vals.push_back(v);
      }
    } else {
      uint64_t nonce = r.u64();
      if (!nonce_set) {
        ct.nonce = nonce;
        nonce_set = true;
      } else if (nonce != ct.nonce) {
        throw MalformedBlob("inconsistent pack nonces");
      }
      for (uint32_t i = 0; i < count; ++i) {
        ct.fp_vals.push_back(static_cast<int64_t>(r.u64()));
      }
    }
    total += count;
  }
  if (r.at != bytes.size()) throw MalformedBlob("trailing bytes in blob");
  ct.shape = {static_cast<int>(total)};
  return ct;
}

// ---- trace ----------------------------------------------------------------------

int64_t CtTrace::record(CtTraceNode::Kind kind, std::vector<int64_t> parents,
                        int dynamic_depth) {
  nodes_.push_back({kind, std::move(parents), dynamic_depth});
  return static_cast<int64_t>(nodes_.size()) - 1;
}

CtTraceScope::CtTraceScope(CtTrace& trace) : prev_(g_ct_trace) {
  g_ct_trace = &trace;
}
CtTraceScope::~CtTraceScope() { g_ct_trace = prev_; }

void trace_relu_link(CipherTensor& response, const CipherTensor& request) {
  g_session_max_depth = std::max(g_session_max_depth, response.mult_depth);
  if (g_ct_trace == nullptr) return;
  if (request.trace_id < 0) request.trace_id = register_source(request);
  response.trace_id = g_ct_trace->record(CtTraceNode::Kind::Relu,
                                         {request.trace_id},
                                         response.mult_depth);
}

DepthAudit audit_depths(const CtTrace& trace) {
  DepthAudit audit;
  std::vector<int> static_depth(trace.nodes().size(), 0);
  for (size_t i = 0; i < trace.nodes().size(); ++i) {
    const CtTraceNode& n = trace.nodes()[i];
    int parent_max = 0;
    for (int64_t p : n.parents) {
      parent_max = std::max(parent_max, static_depth[p]);
    }
    switch (n.kind) {
      case CtTraceNode::Kind::Input:
        static_depth[i] = n.dynamic_depth;  // source entering the trace
        break;
      case CtTraceNode::Kind::Relu:
        static_depth[i] = 0;  // re-encryption resets the budget
        break;
      case CtTraceNode::Kind::Mul:
        static_depth[i] = parent_max + 1;
        break;
      case CtTraceNode::Kind::Add:
      case CtTraceNode::Kind::Struct:
        static_depth[i] = parent_max;
        break;
    }
    audit.static_max_depth = std::max(audit.static_max_depth, static_depth[i]);
    audit.dynamic_max_depth = std::max(audit.dynamic_max_depth, n.dynamic_depth);
    if (static_depth[i] != n.dynamic_depth) audit.per_node_match = false;
  }
  return audit;
}

// ---- relu channel and encrypted forward -------------------------------------------

CipherTensor LocalReluChannel::relu(const CipherTensor& input) {
  ++round_trips_;
  NoGradGuard ng;
  Tensor plain = decrypt(input, key_);
  Tensor activated = hexform::relu(plain);
  CipherTensor out = encrypt(activated, key_, params_, input.backend);
  out.shape = input.shape;
  return out;
}

namespace {

void batched_relu(ReluChannel& channel, const std::vector<CipherTensor>& parts,
                  std::vector<CipherTensor>* split_out) {
  CipherTensor request = parts.size() == 1 ? parts[0] : ct_concat_rows(parts);
  CipherTensor response = channel.relu(request);
  if (response.mult_depth != 0) {
    throw Error("relu response must come back at depth 0");
  }
  trace_relu_link(response, request);
  split_out->clear();
  if (parts.size() == 1) {
    split_out->push_back(std::move(response));
    return;
  }
  int at = 0;
  for (const auto& p : parts) {
    split_out->push_back(ct_slice_rows(response, at, at + p.shape[0]));
    at += p.shape[0];
  }
}

void align_levels(CipherTensor& a, CipherTensor& b) {
  if (a.level < b.level) {
    a = ct_mod_switch(a, b.level);
  } else if (b.level < a.level) {
    b = ct_mod_switch(b, a.level);
  }
}

}  // namespace

HeForwardResult he_forward(const TransformerModel& model,
                           const CipherTensor& embeddings, ReluChannel& relu,
                           const std::vector<uint8_t>& mask) {
  const ModelConfig& cfg = model.config();
  // contract check before any value is produced
  if (cfg.activation == Activation::Gelu) throw UnsupportedOp("gelu");
  if (cfg.softmax == SoftmaxKind::Exact) throw UnsupportedOp("exp");
  if (cfg.norm == NormKind::LayerNorm) throw UnsupportedOp("div");
  for (const NormSite& s : model.norm_sites()) {
    if (!s.gamma_t.defined()) {
      throw MissingAffineNorm("site " + s.name + " has no affine parameters");
    }
  }
  const auto& est = model.estimator();
  if (!est) throw BadConfig("estimated softmax needs an estimator");
  if (embeddings.shape.size() != 2 || embeddings.shape[1] != cfg.hidden_size) {
    throw ShapeMismatch("encrypted embeddings must be [seq, hidden]");
  }
  int seq = embeddings.shape[0];
  if (seq > cfg.max_seq_len) throw SeqTooLong(std::to_string(seq));
  if (!mask.empty() && static_cast<int>(mask.size()) != seq) {
    throw ShapeMismatch("mask length vs sequence");
  }

  g_session_max_depth = 0;
  int64_t trips_before = relu.round_trips();

  Tensor mask_row;
  if (!mask.empty()) {
    std::vector<double> addend(mask.size());
    for (size_t j = 0; j < mask.size(); ++j) {
      addend[j] = mask[j] ? cfg.mask_value : 0.0;
    }
    mask_row = Tensor::from_data({seq}, std::move(addend));
  }

  auto affine = [&](int site, const CipherTensor& x) {
    const NormSite& s = model.norm_sites()[site];
    set_op_site("norm." + s.name);
    return ct_add_plain(ct_mul_plain(x, s.gamma_t), s.beta_t);
  };

  CipherTensor h = affine(0, embeddings);
  int d = cfg.head_dim();
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d));

  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string lp = "layer" + std::to_string(l) + ".";
    const auto& aw = model.attention_weights(l);
    set_op_site(lp + "attn.projections");
    auto q = ct_add_plain(lower_matmul(h, aw.wq), aw.bq);
    auto k = ct_add_plain(lower_matmul(h, aw.wk), aw.bk);
    auto v = ct_add_plain(lower_matmul(h, aw.wv), aw.bv);
    if (!cfg.scale_absorbed) {
      set_op_site(lp + "attn.scale");
      q = ct_mul_plain(q, Tensor::scalar(inv_sqrt_dk));
    }

    std::vector<CipherTensor> masked_scores, cubed;
    for (int head = 0; head < cfg.num_heads; ++head) {
      set_op_site(lp + "attn.scores.head" + std::to_string(head));
      auto qh = ct_slice_cols(q, head * d, (head + 1) * d);
      auto kh = ct_slice_cols(k, head * d, (head + 1) * d);
      auto scores = ct_matmul_nt(qh, kh);
      if (mask_row.defined()) scores = ct_add_plain(scores, mask_row);
      set_op_site(lp + "attn.softmax_estimate");
      auto shifted = ct_add_plain(ct_mul_plain(scores, Tensor::scalar(0.5)),
                                  Tensor::scalar(1.0));
      auto squared = ct_mul(shifted, shifted);
      cubed.push_back(ct_mul(squared, shifted));
      masked_scores.push_back(std::move(scores));
    }

    set_op_site(lp + "attn.softmax_estimate");
    std::vector<CipherTensor> f;
    batched_relu(relu, cubed, &f);

    std::vector<CipherTensor> l1;
    for (int head = 0; head < cfg.num_heads; ++head) {
      auto z = ct_row_sums(f[head]);
      auto u = ct_mul_plain(z, Tensor::scalar(est->input_scale()));
      l1.push_back(ct_add_plain(lower_matmul(u, est->weight1()), est->bias1()));
    }
    std::vector<CipherTensor> h1;
    batched_relu(relu, l1, &h1);
    std::vector<CipherTensor> l2;
    for (auto& x : h1) {
      l2.push_back(ct_add_plain(lower_matmul(x, est->weight2()), est->bias2()));
    }
    std::vector<CipherTensor> h2;
    batched_relu(relu, l2, &h2);

    std::vector<CipherTensor> ctx;
    for (int head = 0; head < cfg.num_heads; ++head) {
      auto t = ct_add_plain(lower_matmul(h2[head], est->weight3()),
                            est->bias3());  // [seq,1]
      set_op_site(lp + "attn.probs.head" + std::to_string(head));
      auto t_full = ct_broadcast_col(t, seq);
      auto scores = masked_scores[head];
      align_levels(scores, t_full);
      auto probs = ct_mul(scores, t_full);
      auto vh = ct_slice_cols(v, head * d, (head + 1) * d);
      set_op_site(lp + "attn.context.head" + std::to_string(head));
      align_levels(probs, vh);
      ctx.push_back(ct_matmul(probs, vh));
    }
    auto merged = cfg.num_heads == 1 ? ctx[0] : ct_concat_cols(ctx);
    set_op_site(lp + "attn.output");
    auto attn_out = ct_add_plain(lower_matmul(merged, aw.wo), aw.bo);

    set_op_site(lp + "attn.residual");
    align_levels(h, attn_out);
    h = affine(1 + 2 * l, ct_add(h, attn_out));

    const auto& fw = model.ffn_weights(l);
    set_op_site(lp + "ffn.in");
    auto mid = ct_add_plain(lower_matmul(h, fw.w1), fw.b1);
    std::vector<CipherTensor> act_parts;
    batched_relu(relu, {mid}, &act_parts);
    set_op_site(lp + "ffn.out");
    auto ffn_out = ct_add_plain(lower_matmul(act_parts[0], fw.w2), fw.b2);
    set_op_site(lp + "ffn.residual");
    align_levels(h, ffn_out);
    h = affine(2 + 2 * l, ct_add(h, ffn_out));
  }

  set_op_site("head");
  CipherTensor logits;
  if (cfg.task == TaskKind::Tag) {
    logits = ct_add_plain(lower_matmul(h, model.head_weight()),
                          model.head_bias());
  } else {
    auto first = ct_slice_rows(h, 0, 1);
    logits = ct_add_plain(lower_matmul(first, model.head_weight()),
                          model.head_bias());
  }

  HeForwardResult result;
  result.logits = std::move(logits);
  result.max_mult_depth = g_session_max_depth;
  result.relu_round_trips = relu.round_trips() - trips_before;
  return result;
}

bool he_ready(const TransformerModel& model, std::string* why) {
  OpTrace trace;
  try {
    NoGradGuard ng;
    TraceScope scope(trace);
    int seq = std::min(4, model.config().max_seq_len);
    std::vector<int> tokens(seq, 0);
    (void)model.forward_tokens(tokens);
  } catch (const Error& e) {
    if (why != nullptr) *why = e.what();
    return false;
  }
  if (!trace.only({Prim::Add, Prim::Mul, Prim::Relu})) {
    if (why != nullptr) {
      std::string kinds;
      for (Prim p : trace.kinds()) {
        if (p != Prim::Add && p != Prim::Mul && p != Prim::Relu) {
          kinds += std::string(kinds.empty() ? "" : ", ") + prim_name(p);
        }
      }
      *why = "forward trace contains: " + kinds;
    }
    return false;
  }
  return true;
}

}  // namespace hexform::he
