#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <map>

#include "hexform/data.hpp"

using namespace hexform;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& contents) {
    path = "/tmp/hexform_test_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++) + ".tsv";
    std::ofstream out(path);
    out << contents;
  }
  ~TempFile() {
    std::remove(path.c_str());
    std::remove((path + ".labels").c_str());
  }
  static int counter;
};
int TempFile::counter = 0;

}  // namespace

TEST_CASE("synthetic generation is deterministic and splits are disjoint") {
  SyntheticTaskSpec spec;
  auto [train1, dev1] = gen_synthetic(spec, 42);
  auto [train2, dev2] = gen_synthetic(spec, 42);
  REQUIRE(train1.size() == train2.size());
  for (size_t i = 0; i < train1.size(); ++i) {
    CHECK(train1.items[i].tokens == train2.items[i].tokens);
    CHECK(train1.items[i].label == train2.items[i].label);
  }
  for (const auto& d : dev1.items) {
    for (const auto& t : train1.items) {
      CHECK(d.tokens != t.tokens);
    }
  }
  auto [train3, _] = gen_synthetic(spec, 43);
  bool any_diff = false;
  for (size_t i = 0; i < train1.size() && !any_diff; ++i) {
    any_diff = train1.items[i].tokens != train3.items[i].tokens;
  }
  CHECK(any_diff);
}

TEST_CASE("classify labels are near-balanced") {
  SyntheticTaskSpec spec;
  spec.train_size = 512;
  auto [train, dev] = gen_synthetic(spec, 7);
  std::map<int, int> counts;
  for (const auto& ex : train.items) counts[ex.label]++;
  int majority = 0;
  for (auto& [label, n] : counts) majority = std::max(majority, n);
  double frac = static_cast<double>(majority) / train.size();
  CHECK(frac == doctest::Approx(1.0 / spec.num_classes).epsilon(0.25));
  CHECK(std::fabs(frac - 1.0 / spec.num_classes) < 0.05);
}

TEST_CASE("classify labels equal the strictly dominant keyword group") {
  SyntheticTaskSpec spec;
  auto [train, dev] = gen_synthetic(spec, 3);
  const int content_base = kReservedTokens + spec.num_classes;
  for (const auto& ex : train.items) {
    std::vector<int> counts(spec.num_classes, 0);
    for (int t : ex.tokens) {
      CHECK(t >= content_base);
      ++counts[(t - content_base) % spec.num_classes];
    }
    for (int k = 0; k < spec.num_classes; ++k) {
      if (k != ex.label) CHECK(counts[ex.label] > counts[k]);
    }
  }
}

TEST_CASE("regression targets are deterministic token functions in [0,1]") {
  SyntheticTaskSpec spec;
  spec.kind = TaskKind::Regress;
  auto [train, dev] = gen_synthetic(spec, 9);
  std::map<std::vector<int>, double> seen;
  for (const auto& ex : train.items) {
    CHECK(ex.target >= 0.0);
    CHECK(ex.target <= 1.0);
    auto it = seen.find(ex.tokens);
    if (it != seen.end()) CHECK(it->second == ex.target);
    seen[ex.tokens] = ex.target;
  }
}

TEST_CASE("tag rule depends on the planted mode token") {
  SyntheticTaskSpec spec;
  spec.kind = TaskKind::Tag;
  auto [train, dev] = gen_synthetic(spec, 11);
  for (const auto& ex : train.items) {
    REQUIRE(ex.mask.size() == ex.tokens.size());
    REQUIRE(ex.tag_labels.size() == ex.tokens.size());
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      if (ex.mask[i]) {
        CHECK(ex.tokens[i] == kPadId);
        CHECK(ex.tag_labels[i] == -1);
      } else {
        CHECK(ex.tag_labels[i] >= 0);
        CHECK(ex.tag_labels[i] < spec.num_classes);
      }
    }
  }
}

TEST_CASE("invalid specs are rejected") {
  SyntheticTaskSpec spec;
  spec.seq_len = 1;
  CHECK_THROWS_AS(gen_synthetic(spec, 0), InvalidSpec);
  spec = {};
  spec.vocab_size = 4;
  CHECK_THROWS_AS(gen_synthetic(spec, 0), InvalidSpec);
}

TEST_CASE("tsv loads rows and writes the label map sidecar") {
  TempFile f("good movie\tpos\nbad movie\tneg\n");
  auto loaded = load_tsv(f.path, {.kind = TaskKind::Classify}, 16);
  CHECK(loaded.dataset.size() == 2);
  CHECK(loaded.dataset.num_classes == 2);
  CHECK(loaded.label_map.size() == 2);
  CHECK(loaded.dataset.items[0].tokens.size() == 2);
  // same text tokens map to the same ids
  CHECK(loaded.dataset.items[0].tokens[1] == loaded.dataset.items[1].tokens[1]);

  std::ifstream sidecar(f.path + ".labels");
  REQUIRE(sidecar.good());
  std::string line;
  int lines = 0;
  while (std::getline(sidecar, line)) ++lines;
  CHECK(lines == 2);
}

TEST_CASE("tsv parse errors carry line numbers") {
  TempFile f("good movie\tpos\nno tab here\n");
  try {
    load_tsv(f.path, {.kind = TaskKind::Classify}, 16);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
}

TEST_CASE("tsv tag rows need one tag per token") {
  TempFile f("a b c\tx y\n");
  CHECK_THROWS_AS(load_tsv(f.path, {.kind = TaskKind::Tag}, 16),
                  LabelOutOfSchema);
}

TEST_CASE("tsv regression targets must be numeric") {
  TempFile f("a b\tnot_a_number\n");
  CHECK_THROWS_AS(load_tsv(f.path, {.kind = TaskKind::Regress}, 16), ParseError);
}

TEST_CASE("batch order is reproducible under seed") {
  auto b1 = batch_indices(100, 16, 5);
  auto b2 = batch_indices(100, 16, 5);
  CHECK(b1 == b2);
  auto b3 = batch_indices(100, 16, 6);
  CHECK(b1 != b3);
  size_t total = 0;
  for (const auto& b : b1) total += b.size();
  CHECK(total == 100);
}

TEST_CASE("tokenizer maps unknown words to unk") {
  auto vocab = Vocab::standard(8);
  auto ids = tokenize("w2 w7 mystery", vocab);
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == 2);
  CHECK(ids[1] == 7);
  CHECK(ids[2] == kUnkId);
}
