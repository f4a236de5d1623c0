#include <cmath>
#include <set>

#include "doctest.h"
#include "drg/generate.hpp"
#include "synth_helpers.hpp"
#include "toy_lm.hpp"

using namespace drg;

namespace {

const std::vector<std::string> kContentLex = {"the",  "food", "service", "was",  "is",
                                              "here", "and",  "place",   "this", "always"};
const std::vector<std::vector<std::string>> kStyleLex = {
    {"good", "great", "amazing"}, {"bad", "awful", "terrible"}};

Vocabulary demo_vocab() {
  DatasetSplit split;
  split.style_names = {"pos", "neg"};
  split.train.resize(2);
  split.dev.resize(2);
  split.test.resize(2);
  std::string pos_line = "the service is always great ! awful good amazing";
  std::string neg_line = "bad terrible food was here and place this";
  split.train[0].push_back({split_ws(pos_line), pos_line, 0});
  split.train[1].push_back({split_ws(neg_line), neg_line, 1});
  return Vocabulary::build(split);
}

}  // namespace

TEST_SUITE("generate") {

TEST_CASE("blind assembly layout: [STYLE][CON] c... [OUT]") {
  auto vocab = demo_vocab();
  auto content = split_ws("the service is always !");
  auto in = assemble_blind(vocab, content, 1, 32);
  auto surfaces = vocab.decode(in.ids);
  std::vector<std::string> expect = {"<style:neg>", "<con>", "the", "service",
                                     "is",          "always", "!",  "<out>"};
  CHECK(surfaces == expect);
  CHECK_FALSE(in.truncated);
}

TEST_CASE("guided assembly layout: [ATTR] a... [CON] c... [OUT]") {
  auto vocab = demo_vocab();
  auto content = split_ws("the service is always !");
  std::vector<std::string> attrs = {"awful"};
  auto in = assemble_guided(vocab, content, attrs, 32);
  auto surfaces = vocab.decode(in.ids);
  std::vector<std::string> expect = {"<attr>", "awful", "<con>", "the", "service",
                                     "is",     "always", "!",    "<out>"};
  CHECK(surfaces == expect);
}

TEST_CASE("degenerate blind assembly: empty content is legal") {
  auto vocab = demo_vocab();
  auto in = assemble_blind(vocab, {}, 0, 8);
  auto surfaces = vocab.decode(in.ids);
  CHECK(surfaces == std::vector<std::string>{"<style:pos>", "<con>", "<out>"});
}

TEST_CASE("guided assembly without attributes errors unless a fallback allows it") {
  auto vocab = demo_vocab();
  CHECK_THROWS_AS(assemble_guided(vocab, split_ws("a"), {}, 16), UsageError);
  auto in = assemble_guided(vocab, split_ws("the"), {}, 16, /*allow_empty_attrs=*/true);
  CHECK(vocab.decode(in.ids) == std::vector<std::string>{"<attr>", "<con>", "the", "<out>"});
}

TEST_CASE("assembly truncates the content tail to the prefix budget") {
  auto vocab = demo_vocab();
  auto content = split_ws("the service is always great");
  auto in = assemble_blind(vocab, content, 0, 6);  // room for 3 content tokens
  CHECK(in.truncated);
  CHECK(in.ids.size() == 6);
  auto parsed = parse_input(vocab, in.ids);
  CHECK(parsed.content == std::vector<std::string>{"the", "service", "is"});
}

TEST_CASE("parse(assemble) recovers variant, attributes and content exactly") {
  auto vocab = demo_vocab();
  Rng rng(5150);
  std::vector<std::string> pool = split_ws("the service is always great bad food was here");
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> content, attrs;
    size_t n_content = rng.uniform_int(6);
    size_t n_attrs = 1 + rng.uniform_int(3);
    for (size_t i = 0; i < n_content; ++i) content.push_back(pool[rng.uniform_int(pool.size())]);
    for (size_t i = 0; i < n_attrs; ++i) attrs.push_back(pool[rng.uniform_int(pool.size())]);
    if (trial % 2 == 0) {
      int style = static_cast<int>(rng.uniform_int(2));
      auto parsed = parse_input(vocab, assemble_blind(vocab, content, style, 64).ids);
      CHECK(parsed.variant == Variant::blind);
      CHECK(parsed.style == style);
      CHECK(parsed.content == content);
      CHECK(parsed.attrs.empty());
    } else {
      auto parsed = parse_input(vocab, assemble_guided(vocab, content, attrs, 64).ids);
      CHECK(parsed.variant == Variant::guided);
      CHECK(parsed.attrs == attrs);
      CHECK(parsed.content == content);
    }
  }
}

TEST_CASE("training examples mask the prefix and target the sentence plus EOS") {
  auto corpus = synth_corpus(31, 40, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  auto examples = make_training_examples(vocab, splits, Variant::blind, 9, 64);
  REQUIRE(examples.size() == corpus.split.count(Part::train));
  size_t ex_index = 0;
  for (int s = 0; s < 2; ++s)
    for (size_t i = 0; i < splits[s].size(); ++i, ++ex_index) {
      const auto& ex = examples[ex_index];
      REQUIRE(ex.ids.size() == ex.targets.size());
      // find OUT_START: last prefix position
      size_t out_pos = 0;
      for (size_t t = 0; t < ex.ids.size(); ++t)
        if (ex.ids[t] == Vocabulary::kOutStart) out_pos = t;
      for (size_t t = 0; t < out_pos; ++t) CHECK(ex.targets[t] == -1);
      // the OUT position predicts the first output token; targets then
      // spell the original sentence and finish with EOS
      auto original = vocab.encode(corpus.split.train[s][i].tokens);
      REQUIRE(ex.targets.size() == out_pos + original.size() + 1);
      for (size_t k = 0; k < original.size(); ++k) CHECK(ex.targets[out_pos + k] == original[k]);
      CHECK(ex.ids.back() == original.back());
      CHECK(ex.targets.back() == Vocabulary::kEos);
      CHECK(ex.source_style == s);
      CHECK_FALSE(ex.noised);
    }
}

TEST_CASE("guided noising: exactly floor(0.05 n) per bucket, deterministic in the seed") {
  auto corpus = synth_corpus(32, 500, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  auto examples = make_training_examples(vocab, splits, Variant::guided, 41, 64);
  REQUIRE(examples.size() == 1000);

  size_t same_style = 0, other_style = 0;
  std::set<size_t> noised_at;
  for (size_t i = 0; i < examples.size(); ++i) {
    if (!examples[i].noised) continue;
    noised_at.insert(i);
    if (examples[i].noise_style == examples[i].source_style)
      ++same_style;
    else
      ++other_style;
  }
  CHECK(same_style == 50);   // floor(0.05 * 1000)
  CHECK(other_style == 50);

  // same seed reproduces the assignment; another seed moves it
  auto again = make_training_examples(vocab, splits, Variant::guided, 41, 64);
  for (size_t i = 0; i < examples.size(); ++i) {
    CHECK(again[i].noised == examples[i].noised);
    CHECK(again[i].ids == examples[i].ids);
  }
  auto moved = make_training_examples(vocab, splits, Variant::guided, 42, 64);
  std::set<size_t> moved_at;
  size_t moved_same = 0, moved_other = 0;
  for (size_t i = 0; i < moved.size(); ++i)
    if (moved[i].noised) {
      moved_at.insert(i);
      (moved[i].noise_style == moved[i].source_style ? moved_same : moved_other) += 1;
    }
  CHECK(moved_same == 50);
  CHECK(moved_other == 50);
  CHECK(moved_at != noised_at);
}

TEST_CASE("blind variant is never noised") {
  auto corpus = synth_corpus(33, 100, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  for (const auto& ex : make_training_examples(vocab, splits, Variant::blind, 41, 64))
    CHECK_FALSE(ex.noised);
}

TEST_CASE("noised guided examples still reconstruct their own sentence") {
  auto corpus = synth_corpus(34, 200, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  auto examples = make_training_examples(vocab, splits, Variant::guided, 8, 64);
  size_t ex_index = 0;
  for (int s = 0; s < 2; ++s)
    for (size_t i = 0; i < splits[s].size(); ++i, ++ex_index) {
      const auto& ex = examples[ex_index];
      if (!ex.noised) continue;
      std::vector<int> target_ids;
      for (int t : ex.targets)
        if (t >= 0) target_ids.push_back(t);
      target_ids.pop_back();  // EOS
      CHECK(vocab.decode(target_ids) == corpus.split.train[s][i].tokens);
      // and the noised attribute block differs from the sentence's own
      auto parsed = parse_input(
          vocab, std::vector<int>(ex.ids.begin(), ex.ids.begin() + (ex.ids.size() -
                                                                    target_ids.size())));
      CHECK(parsed.variant == Variant::guided);
    }
}

TEST_CASE("train_gst with zero epochs leaves the model untouched") {
  auto corpus = synth_corpus(35, 20, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  auto examples = make_training_examples(vocab, splits, Variant::blind, 1, 64);
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.model_dim = 16;
  cfg.ff_dim = 32;
  cfg.seq_len = 64;
  cfg.vocab_size = vocab.size();
  auto m = init_model<float>(cfg, 1);
  auto before = m.w;
  auto report = train_gst(m, examples, 0, 1e-3, 8, 4);
  CHECK(report.epoch_loss.empty());
  CHECK(m.w == before);
}

TEST_CASE("train_gst reports a falling loss curve on a tiny fixture") {
  auto corpus = synth_corpus(36, 15, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  auto splits = testutil::annotation_splits(corpus, Part::train);
  auto examples = make_training_examples(vocab, splits, Variant::blind, 1, 48);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.model_dim = 32;
  cfg.ff_dim = 64;
  cfg.seq_len = 48;
  cfg.vocab_size = vocab.size();
  auto m = init_model<float>(cfg, 2);
  auto report = train_gst(m, examples, 6, 2e-3, 8, 4);
  REQUIRE(report.epoch_loss.size() == 6);
  CHECK(report.epoch_loss.back() < report.epoch_loss.front());
}

TEST_CASE("beam width 1 equals greedy decoding token for token") {
  toylm::ToyLm toy{2};
  std::vector<int> prefix = {0, 0};
  StepLogits step = [&toy](std::span<const int> ids) { return toy(ids); };
  auto beams = beam_decode(step, prefix, 5, 1, 4);
  auto greedy = greedy_decode(step, prefix, 5, 4);
  REQUIRE(!beams.empty());
  CHECK(beams[0].out_ids == greedy);
}

TEST_CASE("beam width 5 recovers the exhaustive argmax on the toy LM") {
  toylm::ToyLm toy{2};
  std::vector<int> prefix = {0, 0};
  StepLogits step = [&toy](std::span<const int> ids) { return toy(ids); };
  const int max_len = 4;
  auto beams = beam_decode(step, prefix, 5, 5, max_len);
  REQUIRE(!beams.empty());

  std::vector<toylm::Enumerated> all;
  std::vector<int> ids(prefix);
  toylm::enumerate_all(step, ids, prefix.size(), toylm::Enumerated{}, max_len, all);
  const toylm::Enumerated* best = nullptr;
  for (const auto& e : all)
    if (e.finished && (!best || e.score() > best->score())) best = &e;
  REQUIRE(best != nullptr);

  CHECK(beams[0].finished);
  CHECK(beams[0].out_ids == best->seq);
  CHECK(beams[0].score() == doctest::Approx(best->score()).epsilon(1e-9));

  // no hypothesis may beat the exhaustive optimum
  for (const auto& b : beams)
    if (b.finished) CHECK(b.score() <= best->score() + 1e-9);

  // width monotonicity: the beam-5 winner scores at least the greedy path
  auto greedy_beams = beam_decode(step, prefix, 5, 1, max_len);
  CHECK(beams[0].score() >= greedy_beams[0].score() - 1e-12);
}

TEST_CASE("beam flags unfinished hypotheses when EOS never fires") {
  StepLogits step = [](std::span<const int> ids) {
    std::vector<float> logits(6, 0.0f);
    logits[5] = -100.0f;  // EOS effectively impossible
    logits[static_cast<int>(ids.size()) % 5] = 2.0f;
    return logits;
  };
  std::vector<int> prefix = {0};
  auto beams = beam_decode(step, prefix, 5, 3, 4);
  REQUIRE(!beams.empty());
  for (const auto& b : beams) {
    CHECK_FALSE(b.finished);
    CHECK(b.out_ids.size() == 4);
  }
}

TEST_CASE("rescore: a single beam returns unconditionally") {
  std::vector<Hypothesis> beams = {{{1, 2}, -1.0, 3, true}};
  StyleScorer scorer = [](std::span<const int>) { return std::vector<double>{0.5, 0.5}; };
  CHECK(rescore_and_pick(beams, scorer, 0).out_ids == std::vector<int>{1, 2});
}

TEST_CASE("rescore: the DT score wins regardless of LM score") {
  std::vector<Hypothesis> beams = {{{1}, -0.1, 2, true}, {{2}, -5.0, 2, true}};
  StyleScorer scorer = [](std::span<const int> ids) {
    // beam [2] carries the target style
    return ids[0] == 2 ? std::vector<double>{0.1, 0.9} : std::vector<double>{0.8, 0.2};
  };
  CHECK(rescore_and_pick(beams, scorer, 1).out_ids == std::vector<int>{2});
}

TEST_CASE("rescore: equal DT scores fall back to the higher log-prob beam") {
  std::vector<Hypothesis> beams = {{{1}, -5.0, 2, true}, {{2}, -0.1, 2, true}};
  StyleScorer scorer = [](std::span<const int>) { return std::vector<double>{0.5, 0.5}; };
  CHECK(rescore_and_pick(beams, scorer, 0).out_ids == std::vector<int>{2});
}

TEST_CASE("transfer demands a complete pipeline and an index when guided") {
  TransferPipeline pipe;
  CHECK_THROWS_AS(transfer(pipe, split_ws("a b"), 0, 1), UsageError);

  auto corpus = synth_corpus(37, 30, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  ModelConfig dt_cfg;
  dt_cfg.n_layers = 1;
  dt_cfg.n_heads = 2;
  dt_cfg.model_dim = 16;
  dt_cfg.ff_dim = 32;
  dt_cfg.seq_len = 32;
  dt_cfg.vocab_size = vocab.size();
  dt_cfg.mode = ModelMode::cls_classifier;
  dt_cfg.n_styles = 2;
  auto dt = init_model<float>(dt_cfg, 1);
  ModelConfig gst_cfg = dt_cfg;
  gst_cfg.mode = ModelMode::causal_lm;
  gst_cfg.n_styles = 0;
  auto gst = init_model<float>(gst_cfg, 2);
  HeadLayerChoice choice;
  choice.gamma = 0.2;
  choice.lambda = 1e-3;
  choice.n_heads = dt_cfg.n_heads;
  choice.n_layers = dt_cfg.n_layers;

  pipe.dt = &dt;
  pipe.gst = &gst;
  pipe.vocab = &vocab;
  pipe.choice = &choice;
  pipe.variant = Variant::guided;
  CHECK_THROWS_AS(transfer(pipe, split_ws("the food was good"), 0, 1), UsageError);

  // blind transfer through untrained models still runs deterministically
  pipe.variant = Variant::blind;
  pipe.beam_width = 2;
  auto r1 = transfer(pipe, split_ws("the food was good"), 0, 1);
  auto r2 = transfer(pipe, split_ws("the food was good"), 0, 1);
  CHECK(r1.output == r2.output);
  CHECK(r1.content == r2.content);
  CHECK(r1.input == split_ws("the food was good"));
}

TEST_CASE("guided transfer with no retrieval signal falls back to blind when available") {
  // index over content disjoint from the query so retrieval finds nothing
  std::vector<ContentAttributeSplit> docs(1);
  docs[0].content = split_ws("zz yy");
  docs[0].attrs = {"xx"};
  docs[0].attr_positions = {2};
  auto index = TfIdfIndex::build(docs);

  auto corpus = synth_corpus(38, 30, kContentLex, kStyleLex, {"pos", "neg"});
  auto vocab = Vocabulary::build(corpus.split);
  ModelConfig dt_cfg;
  dt_cfg.n_layers = 1;
  dt_cfg.n_heads = 2;
  dt_cfg.model_dim = 16;
  dt_cfg.ff_dim = 32;
  dt_cfg.seq_len = 32;
  dt_cfg.vocab_size = vocab.size();
  dt_cfg.mode = ModelMode::cls_classifier;
  dt_cfg.n_styles = 2;
  auto dt = init_model<float>(dt_cfg, 1);
  ModelConfig gst_cfg = dt_cfg;
  gst_cfg.mode = ModelMode::causal_lm;
  gst_cfg.n_styles = 0;
  auto gst = init_model<float>(gst_cfg, 2);
  auto gst_blind = init_model<float>(gst_cfg, 3);
  HeadLayerChoice choice;
  choice.gamma = 0.2;
  choice.lambda = 1e-3;
  choice.n_heads = dt_cfg.n_heads;
  choice.n_layers = dt_cfg.n_layers;

  TransferPipeline pipe;
  pipe.dt = &dt;
  pipe.gst = &gst;
  pipe.vocab = &vocab;
  pipe.choice = &choice;
  pipe.index = &index;
  pipe.variant = Variant::guided;
  pipe.beam_width = 2;

  // without a blind fallback the no-signal path is an error
  CHECK_THROWS_AS(transfer(pipe, split_ws("the food was good"), 0, 1), DataError);
  pipe.gst_blind = &gst_blind;
  auto res = transfer(pipe, split_ws("the food was good"), 0, 1);
  CHECK(res.no_signal);
  CHECK(res.fell_back_blind);
}

}  // TEST_SUITE
