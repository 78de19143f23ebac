#include "hexform/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace hexform {

Vocab Vocab::standard(int size) {
  if (size < kReservedTokens + 1) throw InvalidSpec("vocab too small");
  Vocab v;
  v.tokens.reserve(size);
  v.tokens.push_back("<unk>");
  v.tokens.push_back("<pad>");
  for (int i = kReservedTokens; i < size; ++i) {
    v.tokens.push_back("w" + std::to_string(i));
  }
  return v;
}

int Vocab::id_for(const std::string& token) const {
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == token) return static_cast<int>(i);
  }
  return kUnkId;
}

const std::string& Vocab::token(int id) const { return tokens.at(id); }

std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) ids.push_back(vocab.id_for(tok));
  return ids;
}

void SyntheticTaskSpec::validate() const {
  if (seq_len < 2) throw InvalidSpec("seq_len must be >= 2");
  // reserved block, one marker per class, and enough content tokens that
  // every keyword group is populated
  if (vocab_size < kReservedTokens + num_classes + 2 * num_classes) {
    throw InvalidSpec("vocab too small for the planted rule");
  }
  if (kind != TaskKind::Regress && num_classes < 2) {
    throw InvalidSpec("need at least 2 classes");
  }
  if (train_size < 1 || dev_size < 1) throw InvalidSpec("empty split");
}

namespace {

uint64_t mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t token_fingerprint(const std::vector<int>& toks) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int t : toks) h = mix(h ^ static_cast<uint64_t>(t));
  return h;
}

Example gen_one(const SyntheticTaskSpec& spec, std::mt19937_64& rng) {
  Example ex;
  const int marker_base = kReservedTokens;                    // class markers
  const int content_base = marker_base + spec.num_classes;    // everything else
  std::uniform_int_distribution<int> content(content_base, spec.vocab_size - 1);

  switch (spec.kind) {
    case TaskKind::Classify: {
      // keyword rule: content tokens fall into num_classes groups by residue;
      // the label is the strictly dominant group. Sampling skews 70% toward
      // the planted class and resamples the rare draws where it fails to
      // dominate, so the label stays a deterministic function of the tokens.
      std::uniform_int_distribution<int> cls(0, spec.num_classes - 1);
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      int c = cls(rng);
      while (true) {
        ex.tokens.resize(spec.seq_len);
        std::vector<int> counts(spec.num_classes, 0);
        for (int i = 0; i < spec.seq_len; ++i) {
          int tok = content(rng);
          if (coin(rng) < 0.7) {
            int group = (tok - content_base) % spec.num_classes;
            tok += (c - group + spec.num_classes) % spec.num_classes;
            if (tok >= spec.vocab_size) tok -= spec.num_classes;
          }
          ex.tokens[i] = tok;
          ++counts[(ex.tokens[i] - content_base) % spec.num_classes];
        }
        int best = 0;
        for (int k = 1; k < spec.num_classes; ++k) {
          if (counts[k] > counts[best]) best = k;
        }
        bool strict = best == c;
        for (int k = 0; strict && k < spec.num_classes; ++k) {
          if (k != c && counts[k] == counts[c]) strict = false;
        }
        if (strict) break;
      }
      ex.label = c;
      break;
    }
    case TaskKind::Regress: {
      ex.tokens.resize(spec.seq_len);
      double acc = 0.0;
      for (int i = 0; i < spec.seq_len; ++i) {
        ex.tokens[i] = content(rng);
        // per-token weight in [0,1] derived from the rule seed
        uint64_t w = mix(spec.rule_seed ^ static_cast<uint64_t>(ex.tokens[i]));
        acc += static_cast<double>(w % 10000) / 10000.0;
      }
      ex.target = acc / spec.seq_len;
      break;
    }
    case TaskKind::Tag: {
      std::uniform_int_distribution<int> mode(0, spec.num_classes - 1);
      std::uniform_int_distribution<int> len(spec.seq_len / 2, spec.seq_len);
      int L = len(rng);
      std::uniform_int_distribution<int> pos(0, L - 1);
      int m = mode(rng);
      int at = pos(rng);
      ex.tokens.assign(spec.seq_len, kPadId);
      ex.mask.assign(spec.seq_len, 1);
      ex.tag_labels.assign(spec.seq_len, -1);
      for (int i = 0; i < L; ++i) {
        ex.tokens[i] = content(rng);
        ex.mask[i] = 0;
      }
      ex.tokens[at] = marker_base + m;
      for (int i = 0; i < L; ++i) {
        if (i == at) {
          ex.tag_labels[i] = m;
        } else {
          uint64_t h = mix(spec.rule_seed ^ static_cast<uint64_t>(ex.tokens[i]));
          ex.tag_labels[i] =
              static_cast<int>((h + static_cast<uint64_t>(m)) %
                               static_cast<uint64_t>(spec.num_classes));
        }
      }
      break;
    }
  }
  return ex;
}

}  // namespace

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticTaskSpec& spec,
                                          uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Dataset train, dev;
  train.kind = dev.kind = spec.kind;
  train.num_classes = dev.num_classes =
      spec.kind == TaskKind::Regress ? 0 : spec.num_classes;

  std::set<uint64_t> train_prints;
  while (static_cast<int>(train.items.size()) < spec.train_size) {
    Example ex = gen_one(spec, rng);
    train_prints.insert(token_fingerprint(ex.tokens));
    train.items.push_back(std::move(ex));
  }
  // dev stays disjoint from train
  while (static_cast<int>(dev.items.size()) < spec.dev_size) {
    Example ex = gen_one(spec, rng);
    if (train_prints.count(token_fingerprint(ex.tokens))) continue;
    dev.items.push_back(std::move(ex));
  }
  return {std::move(train), std::move(dev)};
}

TsvLoadResult load_tsv(const std::string& path, const TsvSchema& schema,
                       int max_seq_len) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  TsvLoadResult out;
  out.dataset.kind = schema.kind;
  std::vector<std::pair<std::vector<std::string>, std::string>> rows;
  std::string line;
  int lineno = 0;
  std::set<std::string> token_set;
  while (std::getline(in, line)) {
    ++lineno;
    if (schema.has_header && lineno == 1) continue;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected <text>\\t<label>");
    }
    std::string text = line.substr(0, tab);
    std::string label = line.substr(tab + 1);
    if (text.empty() || label.empty()) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": empty field");
    }
    std::vector<std::string> toks;
    std::istringstream ts(text);
    std::string t;
    while (ts >> t) {
      toks.push_back(t);
      token_set.insert(t);
    }
    if (toks.empty()) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": no tokens");
    }
    if (static_cast<int>(toks.size()) > max_seq_len) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": sequence longer than " + std::to_string(max_seq_len));
    }
    rows.emplace_back(std::move(toks), std::move(label));
  }

  out.vocab.tokens = {"<unk>", "<pad>"};
  for (const auto& t : token_set) out.vocab.tokens.push_back(t);

  int next_label = 0;
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& [toks, label] = rows[r];
    Example ex;
    for (const auto& t : toks) ex.tokens.push_back(out.vocab.id_for(t));
    switch (schema.kind) {
      case TaskKind::Regress: {
        try {
          size_t used = 0;
          ex.target = std::stod(label, &used);
          if (used != label.size()) throw std::invalid_argument(label);
        } catch (const std::exception&) {
          throw ParseError(path + ": non-numeric regression target '" + label +
                           "'");
        }
        break;
      }
      case TaskKind::Classify: {
        auto it = out.label_map.find(label);
        if (it == out.label_map.end()) {
          it = out.label_map.emplace(label, next_label++).first;
        }
        ex.label = it->second;
        break;
      }
      case TaskKind::Tag: {
        std::istringstream ls(label);
        std::string tag;
        while (ls >> tag) {
          auto it = out.label_map.find(tag);
          if (it == out.label_map.end()) {
            it = out.label_map.emplace(tag, next_label++).first;
          }
          ex.tag_labels.push_back(it->second);
        }
        if (ex.tag_labels.size() != ex.tokens.size()) {
          throw LabelOutOfSchema(path + ": row " + std::to_string(r + 1) +
                                 " has " + std::to_string(ex.tag_labels.size()) +
                                 " tags for " + std::to_string(ex.tokens.size()) +
                                 " tokens");
        }
        break;
      }
    }
    out.dataset.items.push_back(std::move(ex));
  }
  out.dataset.num_classes = next_label;

  if (schema.kind != TaskKind::Regress) {
    std::ofstream lm(path + ".labels");
    for (const auto& [name, id] : out.label_map) {
      lm << name << "=" << id << "\n";
    }
  }
  return out;
}

std::vector<std::vector<int>> batch_indices(size_t n, int batch_size,
                                            uint64_t seed) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (size_t at = 0; at < n; at += batch_size) {
    size_t end = std::min(n, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

}  // namespace hexform
