#include "doctest.h"
#include "drg/generate.hpp"
#include "synth_helpers.hpp"

using namespace drg;

namespace {

Vocabulary long_vocab() {
  DatasetSplit split;
  split.style_names = {"pos", "neg"};
  split.train.resize(2);
  split.dev.resize(2);
  split.test.resize(2);
  std::string line;
  for (int i = 0; i < 40; ++i) line += "w" + std::to_string(i) + " ";
  split.train[0].push_back({split_ws(line), line, 0});
  split.train[1].push_back({split_ws("neg words"), "neg words", 1});
  return Vocabulary::build(split);
}

}  // namespace

TEST_SUITE("generate") {

TEST_CASE("window-filling sentences truncate the output tail, not the skeleton") {
  auto vocab = long_vocab();
  std::vector<std::vector<ContentAttributeSplit>> splits(2);
  ContentAttributeSplit cas;
  for (int i = 0; i < 36; ++i) cas.content.push_back("w" + std::to_string(i));
  cas.attrs = {"w36", "w37"};
  cas.attr_positions = {36, 37};
  splits[0].push_back(cas);

  const int seq_len = 24;  // far smaller than the 38-token sentence
  for (Variant v : {Variant::blind, Variant::guided}) {
    auto examples = make_training_examples(vocab, splits, v, 5, seq_len);
    REQUIRE(examples.size() == 1);
    const auto& ex = examples[0];
    CHECK(ex.ids.size() <= static_cast<size_t>(seq_len));
    CHECK(ex.ids.size() == ex.targets.size());
    // at least one scored position survives truncation
    size_t scored = 0;
    for (int t : ex.targets) scored += t >= 0;
    CHECK(scored >= 1);
  }

  // an attribute block that cannot fit at all is a hard error
  ContentAttributeSplit absurd;
  for (int i = 0; i < 30; ++i) absurd.attrs.push_back("w" + std::to_string(i % 10));
  absurd.attr_positions.resize(30);
  for (int i = 0; i < 30; ++i) absurd.attr_positions[i] = i;
  std::vector<std::vector<ContentAttributeSplit>> bad(2);
  bad[0].push_back(absurd);
  CHECK_THROWS_AS(make_training_examples(vocab, bad, Variant::guided, 5, 24), DataError);
}

}  // TEST_SUITE
