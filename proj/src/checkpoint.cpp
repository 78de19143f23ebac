#include "hexform/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace hexform::ckpt {

namespace {

namespace fs = std::filesystem;

std::string shape_field(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& field) {
  Shape s;
  std::string part;
  std::istringstream is(field);
  while (std::getline(is, part, 'x')) s.push_back(std::stoi(part));
  return s;
}

struct InventoryRow {
  std::string name;
  Shape shape;
  size_t offset;
};

void write_blob(const std::string& path,
                const std::vector<std::pair<std::string, Tensor>>& tensors,
                std::vector<InventoryRow>* rows) {
  std::ofstream blob(path, std::ios::binary);
  if (!blob) throw CheckpointError("cannot write " + path);
  size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    rows->push_back({name, t.shape(), offset});
    for (double v : t.data()) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      char buf[4] = {static_cast<char>(bits & 0xff),
                     static_cast<char>((bits >> 8) & 0xff),
                     static_cast<char>((bits >> 16) & 0xff),
                     static_cast<char>((bits >> 24) & 0xff)};
      blob.write(buf, 4);
      offset += 4;
    }
  }
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void load_into(Tensor t, const std::vector<uint8_t>& blob, size_t offset) {
  auto dst = t.mutable_data();
  if (offset + dst.size() * 4 > blob.size()) {
    throw CheckpointError("blob too short for tensor at offset " +
                          std::to_string(offset));
  }
  for (size_t i = 0; i < dst.size(); ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<uint32_t>(blob[offset + i * 4 + b]) << (8 * b);
    }
    float f;
    std::memcpy(&f, &bits, 4);
    dst[i] = static_cast<double>(f);
  }
}

struct Manifest {
  std::map<std::string, std::string> header;
  std::vector<InventoryRow> rows;

  const std::string& need(const std::string& key) const {
    auto it = header.find(key);
    if (it == header.end()) {
      throw CheckpointError("manifest is missing '" + key + "'");
    }
    return it->second;
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& r : rows) {
      if (r.name == name) return true;
    }
    return false;
  }
};

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read " + path);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("tensor=", 0) == 0) {
      InventoryRow row;
      std::istringstream is(line);
      std::string field;
      while (is >> field) {
        auto eq = field.find('=');
        if (eq == std::string::npos) continue;
        std::string key = field.substr(0, eq), val = field.substr(eq + 1);
        if (key == "tensor") row.name = val;
        else if (key == "shape") row.shape = parse_shape(val);
        else if (key == "offset") row.offset = std::stoull(val);
        else if (key == "dtype" && val != "f32") {
          throw CheckpointError("unsupported dtype " + val);
        }
      }
      if (row.name.empty() || row.shape.empty()) {
        throw CheckpointError("bad inventory line " + std::to_string(lineno));
      }
      m.rows.push_back(std::move(row));
    } else {
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw CheckpointError("bad manifest line " + std::to_string(lineno));
      }
      m.header[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  if (m.need("format_version") != "1") {
    throw CheckpointError("unsupported format_version");
  }
  return m;
}

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& header,
                    const std::vector<InventoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path);
  for (const auto& [k, v] : header) out << k << "=" << v << "\n";
  for (const auto& r : rows) {
    out << "tensor=" << r.name << " shape=" << shape_field(r.shape)
        << " dtype=f32 offset=" << r.offset << "\n";
  }
}

const char* activation_name(Activation a) {
  return a == Activation::Gelu ? "gelu" : "relu";
}
const char* softmax_kind_name(SoftmaxKind s) {
  return s == SoftmaxKind::Exact ? "exact" : "estimated";
}
const char* norm_name(NormKind n) {
  return n == NormKind::LayerNorm ? "layernorm" : "affine";
}

}  // namespace

void save_model(const std::string& dir, const TransformerModel& model,
                const std::vector<std::string>& vocab) {
  fs::create_directories(dir);
  const ModelConfig& cfg = model.config();
  std::vector<std::pair<std::string, std::string>> header = {
      {"format_version", "1"},
      {"kind", "model"},
      {"num_layers", std::to_string(cfg.num_layers)},
      {"hidden_size", std::to_string(cfg.hidden_size)},
      {"num_heads", std::to_string(cfg.num_heads)},
      {"ffn_size", std::to_string(cfg.ffn_size)},
      {"vocab_size", std::to_string(cfg.vocab_size)},
      {"max_seq_len", std::to_string(cfg.max_seq_len)},
      {"num_outputs", std::to_string(cfg.num_outputs)},
      {"task", task_name(cfg.task)},
      {"activation", activation_name(cfg.activation)},
      {"softmax", softmax_kind_name(cfg.softmax)},
      {"norm", norm_name(cfg.norm)},
      {"mask_value", std::to_string(cfg.mask_value)},
      {"scale_absorbed", cfg.scale_absorbed ? "1" : "0"},
      {"has_estimator", model.estimator() ? "1" : "0"},
  };
  if (model.estimator()) {
    header.emplace_back("estimator_dim",
                        std::to_string(model.estimator()->dim()));
  }

  std::vector<InventoryRow> rows;
  write_blob(dir + "/params.bin", model.named_parameters(), &rows);
  write_manifest(dir + "/manifest.txt", header, rows);

  std::ofstream toks(dir + "/tokens.txt");
  for (const auto& t : vocab) toks << t << "\n";
}

LoadedModel load_model(const std::string& dir) {
  Manifest m = read_manifest(dir + "/manifest.txt");
  if (m.need("kind") != "model") throw CheckpointError("not a model checkpoint");

  ModelConfig cfg;
  cfg.num_layers = std::stoi(m.need("num_layers"));
  cfg.hidden_size = std::stoi(m.need("hidden_size"));
  cfg.num_heads = std::stoi(m.need("num_heads"));
  cfg.ffn_size = std::stoi(m.need("ffn_size"));
  cfg.vocab_size = std::stoi(m.need("vocab_size"));
  cfg.max_seq_len = std::stoi(m.need("max_seq_len"));
  cfg.num_outputs = std::stoi(m.need("num_outputs"));
  cfg.task = task_from_name(m.need("task"));
  cfg.activation =
      m.need("activation") == "gelu" ? Activation::Gelu : Activation::Relu;
  cfg.softmax =
      m.need("softmax") == "exact" ? SoftmaxKind::Exact : SoftmaxKind::Estimated;
  cfg.norm =
      m.need("norm") == "layernorm" ? NormKind::LayerNorm : NormKind::Affine;
  cfg.mask_value = std::stod(m.need("mask_value"));
  cfg.scale_absorbed = m.need("scale_absorbed") == "1";

  // build with exact LN in place (sites may get dropped below), then restore
  // the stored config; the constructor's random values are overwritten anyway
  std::mt19937_64 rng(0);
  ModelConfig build_cfg = cfg;
  build_cfg.norm = NormKind::LayerNorm;
  TransformerModel model(build_cfg, rng);
  model.config() = cfg;

  if (m.need("has_estimator") == "1") {
    int dim = std::stoi(m.need("estimator_dim"));
    model.attach_estimator(std::make_shared<SoftmaxEstimator>(dim, rng));
  }

  // reconstruct per-site parameter availability from the inventory
  for (auto& site : model.norm_sites()) {
    if (m.has_tensor("norm." + site.name + ".gamma_t")) {
      site.gamma_t = Tensor::zeros({cfg.hidden_size}, true);
      site.beta_t = Tensor::zeros({cfg.hidden_size}, true);
    }
    if (!m.has_tensor("norm." + site.name + ".gamma")) {
      site.exact_dropped = true;
      site.gamma = Tensor();
      site.beta = Tensor();
    }
  }

  auto blob = read_file(dir + "/params.bin");
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : model.named_parameters()) by_name.emplace(name, t);
  size_t expected = 0;
  for (const auto& row : m.rows) {
    auto it = by_name.find(row.name);
    if (it == by_name.end()) {
      throw CheckpointError("inventory names unknown tensor " + row.name);
    }
    if (it->second.shape() != row.shape) {
      throw CheckpointError("shape mismatch for " + row.name);
    }
    load_into(it->second, blob, row.offset);
    expected += static_cast<size_t>(it->second.numel()) * 4;
  }
  if (expected != blob.size()) {
    throw CheckpointError("blob length " + std::to_string(blob.size()) +
                          " != inventory total " + std::to_string(expected));
  }

  LoadedModel out{std::move(model), {}};
  std::ifstream toks(dir + "/tokens.txt");
  std::string line;
  while (std::getline(toks, line)) {
    if (!line.empty()) out.vocab.push_back(line);
  }
  return out;
}

void save_estimator(const std::string& dir, const SoftmaxEstimator& estimator) {
  fs::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> header = {
      {"format_version", "1"},
      {"kind", "estimator"},
      {"estimator_dim", std::to_string(estimator.dim())},
  };
  std::vector<InventoryRow> rows;
  write_blob(dir + "/params.bin", estimator.named_parameters(), &rows);
  write_manifest(dir + "/manifest.txt", header, rows);
}

SoftmaxEstimator load_estimator(const std::string& dir) {
  Manifest m = read_manifest(dir + "/manifest.txt");
  if (m.need("kind") != "estimator") {
    throw CheckpointError("not an estimator checkpoint");
  }
  std::mt19937_64 rng(0);
  SoftmaxEstimator est(std::stoi(m.need("estimator_dim")), rng);
  auto blob = read_file(dir + "/params.bin");
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : est.named_parameters()) by_name.emplace(name, t);
  for (const auto& row : m.rows) {
    auto it = by_name.find(row.name);
    if (it == by_name.end()) {
      throw CheckpointError("inventory names unknown tensor " + row.name);
    }
    load_into(it->second, blob, row.offset);
  }
  return est;
}

void write_report(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path);
  for (const auto& [k, v] : rows) out << k << "=" << v << "\n";
}

}  // namespace hexform::ckpt
