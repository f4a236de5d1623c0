#include <filesystem>

#include "doctest.h"
#include "drg/tokenizer.hpp"

using namespace drg;

namespace {

DatasetSplit tiny_split(const std::vector<std::string>& pos_lines,
                        const std::vector<std::string>& neg_lines) {
  DatasetSplit split;
  split.style_names = {"pos", "neg"};
  split.train.resize(2);
  split.dev.resize(2);
  split.test.resize(2);
  for (const auto& l : pos_lines) split.train[0].push_back({split_ws(l), l, 0});
  for (const auto& l : neg_lines) split.train[1].push_back({split_ws(l), l, 1});
  return split;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("vocabulary contains corpus tokens plus all specials") {
  auto v = Vocabulary::build(tiny_split({"a b"}, {"a c"}), 1);
  CHECK(v.lookup("a") >= v.n_specials());
  CHECK(v.lookup("b") >= v.n_specials());
  CHECK(v.lookup("c") >= v.n_specials());
  CHECK(v.size() == v.n_specials() + 3);
  CHECK(v.n_styles() == 2);
  // two styles, exactly two style specials
  CHECK(v.style_token(0) == Vocabulary::kFirstStyle);
  CHECK(v.style_token(1) == Vocabulary::kFirstStyle + 1);
  CHECK_THROWS_AS(v.style_token(2), UsageError);
  CHECK(v.style_of_token(v.style_token(1)) == 1);
  CHECK(v.style_of_token(Vocabulary::kPad) == -1);
}

TEST_CASE("min_count threshold drops rare tokens to UNK") {
  auto v = Vocabulary::build(tiny_split({"a b"}, {"a c"}), 2);
  CHECK(v.lookup("a") >= 0);
  CHECK(v.lookup("b") == -1);
  auto ids = v.encode(std::vector<std::string>{"a", "b", "c"});
  CHECK(ids[0] == v.lookup("a"));
  CHECK(ids[1] == Vocabulary::kUnk);
  CHECK(ids[2] == Vocabulary::kUnk);
}

TEST_CASE("max_size smaller than the special set is an error") {
  CHECK_THROWS_AS(Vocabulary::build(tiny_split({"a"}, {"b"}), 1, 3), UsageError);
}

TEST_CASE("encode/decode round-trips in-vocabulary text") {
  auto v = Vocabulary::build(tiny_split({"the food was good"}, {"the food was bad"}), 1);
  std::vector<std::string> tokens = {"the", "food", "was", "good"};
  CHECK(v.decode(v.encode(tokens)) == tokens);
  CHECK(v.encode(std::vector<std::string>{"zzz"})[0] == Vocabulary::kUnk);
  CHECK(v.encode(std::vector<std::string>{}).empty());
  CHECK(v.decode(std::vector<int>{}).empty());
}

TEST_CASE("out-of-vocabulary tokens round-trip to the UNK surface form") {
  auto v = Vocabulary::build(tiny_split({"a"}, {"b"}), 1);
  auto round = v.decode(v.encode(std::vector<std::string>{"zzz", "a"}));
  CHECK(round[0] == v.surface(Vocabulary::kUnk));
  CHECK(round[1] == "a");
}

TEST_CASE("decode rejects ids outside the vocabulary") {
  auto v = Vocabulary::build(tiny_split({"a"}, {"b"}), 1);
  CHECK_THROWS_AS(v.decode(std::vector<int>{v.size()}), DataError);
  CHECK_THROWS_AS(v.decode(std::vector<int>{-1}), DataError);
}

TEST_CASE("reserved-looking corpus tokens never map onto special ids") {
  auto v = Vocabulary::build(tiny_split({"<pad> x"}, {"y <style:pos>"}), 1);
  // the literal corpus strings fall through to UNK rather than aliasing specials
  CHECK(v.encode(std::vector<std::string>{"<pad>"})[0] == Vocabulary::kUnk);
  CHECK(v.encode(std::vector<std::string>{"<style:pos>"})[0] == Vocabulary::kUnk);
  CHECK(v.lookup("x") >= v.n_specials());
}

TEST_CASE("special ids survive save/load byte-for-byte") {
  auto v = Vocabulary::build(tiny_split({"the food was good"}, {"awful stuff"}), 1);
  auto path = (std::filesystem::temp_directory_path() / "drg_vocab_test.tsv").string();
  v.save(path);
  auto v2 = Vocabulary::load(path);
  CHECK(v2.size() == v.size());
  CHECK(v2.n_styles() == v.n_styles());
  for (int id = 0; id < v.size(); ++id) CHECK(v2.surface(id) == v.surface(id));
  CHECK(read_text_file(path).substr(0, 12) == "drg-vocab v1");
  std::filesystem::remove(path);
}

TEST_CASE("property: round-trip identity over random in-vocab samples") {
  auto corpus = tiny_split({"alpha beta gamma delta", "beta gamma", "epsilon alpha"},
                           {"zeta eta theta", "theta alpha beta"});
  auto v = Vocabulary::build(corpus, 1);
  Rng rng(99);
  std::vector<std::string> pool = {"alpha", "beta", "gamma", "delta", "epsilon",
                                   "zeta",  "eta",  "theta"};
  for (int it = 0; it < 200; ++it) {
    std::vector<std::string> sample;
    size_t len = rng.uniform_int(12);
    for (size_t i = 0; i < len; ++i) sample.push_back(pool[rng.uniform_int(pool.size())]);
    CHECK(v.decode(v.encode(sample)) == sample);
  }
}

TEST_CASE("build is deterministic regardless of count ties") {
  auto corpus = tiny_split({"b a d c"}, {"c d a b"});
  auto v1 = Vocabulary::build(corpus, 1);
  auto v2 = Vocabulary::build(corpus, 1);
  for (int id = 0; id < v1.size(); ++id) CHECK(v1.surface(id) == v2.surface(id));
  // ties broken lexicographically after the specials
  CHECK(v1.surface(v1.n_specials()) == "a");
}

}  // TEST_SUITE
