#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "drg/model.hpp"
#include "reference_transformer.hpp"

using namespace drg;

namespace {

ModelConfig micro_lm(int vocab = 23) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.seq_len = 12;
  c.vocab_size = vocab;
  c.mode = ModelMode::causal_lm;
  return c;
}

ModelConfig micro_cls(int vocab = 23, int styles = 2) {
  ModelConfig c = micro_lm(vocab);
  c.mode = ModelMode::cls_classifier;
  c.n_styles = styles;
  return c;
}

std::vector<int> random_ids(Rng& rng, const ModelConfig& c, int len) {
  std::vector<int> ids(len);
  for (int& id : ids) id = static_cast<int>(rng.uniform_int(c.vocab_size));
  return ids;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("init is bitwise deterministic given (config, seed)") {
  auto a = init_model<float>(micro_lm(), 5);
  auto b = init_model<float>(micro_lm(), 5);
  CHECK(a.w == b.w);
  auto c = init_model<float>(micro_lm(), 6);
  CHECK(a.w != c.w);
}

TEST_CASE("parameter count matches the closed-form architecture count") {
  // independent count, summed from the declared architecture
  ModelConfig c = micro_lm(29);
  size_t D = c.model_dim, F = c.ff_dim, V = c.vocab_size, T = c.seq_len, L = c.n_layers;
  size_t per_layer = 2 * D                // ln1
                     + 4 * (D * D + D)    // q,k,v,o projections with biases
                     + 2 * D              // ln2
                     + (F * D + F)        // ff in
                     + (D * F + D);       // ff out
  size_t expect = V * D + T * D + L * per_layer + 2 * D + V * D;
  CHECK(c.param_count() == expect);
  auto m = init_model<float>(c, 1);
  CHECK(m.n_params() == expect);

  ModelConfig cc = micro_cls(29, 3);
  size_t expect_cls = V * D + T * D + L * per_layer + 2 * D + 3 * D + 3;
  CHECK(cc.param_count() == expect_cls);
}

TEST_CASE("invalid configurations are rejected") {
  ModelConfig c = micro_lm();
  c.model_dim = 15;  // not divisible by 2 heads
  CHECK_THROWS_AS(init_model<float>(c, 1), UsageError);
  c = micro_lm();
  c.vocab_size = 0;
  CHECK_THROWS_AS(init_model<float>(c, 1), UsageError);
  c = micro_cls();
  c.n_styles = 1;
  CHECK_THROWS_AS(init_model<float>(c, 1), UsageError);
}

TEST_CASE("forward matches the naive dense-matrix oracle") {
  Rng rng(404);
  for (ModelMode mode : {ModelMode::causal_lm, ModelMode::cls_classifier}) {
    ModelConfig c = mode == ModelMode::causal_lm ? micro_lm() : micro_cls();
    c.n_heads = 2;
    c.model_dim = 8;  // head_dim 4, the hand-checked shape
    c.ff_dim = 16;
    auto m = init_model<double>(c, 77);
    for (int trial = 0; trial < 4; ++trial) {
      auto ids = random_ids(rng, c, 2 + static_cast<int>(rng.uniform_int(8)));
      auto got = forward(m, ids);
      auto want = refimpl::run(m, ids);
      REQUIRE(got.logits.size() == want.logits.a.size());
      for (size_t i = 0; i < got.logits.size(); ++i)
        CHECK(got.logits[i] == doctest::Approx(want.logits.a[i]).epsilon(1e-10));
      for (int l = 0; l < c.n_layers; ++l)
        for (int h = 0; h < c.n_heads; ++h)
          for (int t = 0; t < static_cast<int>(ids.size()); ++t)
            for (int s = 0; s < static_cast<int>(ids.size()); ++s)
              CHECK(got.attention.at(l, h, t, s) ==
                    doctest::Approx(want.attn[l][h].at(t, s)).epsilon(1e-12));
    }
  }
}

TEST_CASE("hand-set two-token attention: softmax(QK^T / sqrt(4))") {
  // Q = [1,0,1,0]; K rows [1,1,1,1] and [2,0,2,0]; d_k = 4 so scores are
  // dot/2 = {1, 2}. softmax([1,2]) = [1/(1+e), e/(1+e)].
  std::vector<double> q = {1, 0, 1, 0};
  std::vector<double> k1 = {1, 1, 1, 1}, k2 = {2, 0, 2, 0};
  double s1 = 0, s2 = 0;
  for (int j = 0; j < 4; ++j) {
    s1 += q[j] * k1[j];
    s2 += q[j] * k2[j];
  }
  std::vector<double> row = {s1 / 2.0, s2 / 2.0};
  softmax_inplace(std::span<double>(row));
  CHECK(row[0] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(row[1] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(row[0] + row[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention rows are stochastic; causal mask zeroes the upper triangle") {
  Rng rng(11);
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 3);
  for (int trial = 0; trial < 8; ++trial) {
    auto ids = random_ids(rng, lm, 1 + static_cast<int>(rng.uniform_int(lm.seq_len)));
    auto out = forward(m, ids);
    const int T = static_cast<int>(ids.size());
    for (int l = 0; l < lm.n_layers; ++l)
      for (int h = 0; h < lm.n_heads; ++h)
        for (int t = 0; t < T; ++t) {
          double sum = 0;
          for (int s = 0; s < T; ++s) {
            float a = out.attention.at(l, h, t, s);
            CHECK(a >= 0.0f);
            if (s > t) CHECK(a == 0.0f);
            sum += a;
          }
          CHECK(std::abs(sum - 1.0) < 1e-6);
        }
  }

  ModelConfig cls = micro_cls();
  auto mc = init_model<float>(cls, 3);
  auto ids = random_ids(rng, cls, 6);
  auto out = forward(mc, ids);
  for (int l = 0; l < cls.n_layers; ++l)
    for (int h = 0; h < cls.n_heads; ++h)
      for (int t = 0; t < 6; ++t) {
        double sum = 0;
        bool any_late = false;
        for (int s = 0; s < 6; ++s) {
          sum += out.attention.at(l, h, t, s);
          any_late |= s > t && out.attention.at(l, h, t, s) > 0;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
        if (t < 5) CHECK(any_late);  // bidirectional attends right of the diagonal
      }
}

TEST_CASE("single-position input: attention row is softmax of one element") {
  ModelConfig cls = micro_cls();
  auto m = init_model<float>(cls, 9);
  auto out = forward(m, std::vector<int>{2});  // CLS alone
  for (int l = 0; l < cls.n_layers; ++l)
    for (int h = 0; h < cls.n_heads; ++h) CHECK(out.attention.at(l, h, 0, 0) == 1.0f);
}

TEST_CASE("causal invariance: suffix perturbation leaves prefix logits bit-identical") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 21);
  std::vector<int> ids = {4, 9, 1, 7, 3, 12};
  auto base = forward(m, ids);
  for (int t = 3; t < 6; ++t) {
    auto mutated = ids;
    mutated[t] = (ids[t] + 5) % lm.vocab_size;
    auto out = forward(m, mutated);
    for (int pos = 0; pos < t; ++pos)
      for (int vidx = 0; vidx < lm.vocab_size; ++vidx)
        CHECK(out.logits[pos * lm.vocab_size + vidx] == base.logits[pos * lm.vocab_size + vidx]);
  }
}

TEST_CASE("classifier softmax sums to one") {
  ModelConfig cls = micro_cls(23, 3);
  auto m = init_model<float>(cls, 15);
  Rng rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    auto probs = classify(m, random_ids(rng, cls, 5));
    double sum = 0;
    for (double p : probs) {
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("over-length and out-of-range inputs are rejected") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 1);
  std::vector<int> too_long(lm.seq_len + 1, 1);
  CHECK_THROWS_AS(forward(m, too_long), DataError);
  CHECK_THROWS_AS(forward(m, std::vector<int>{lm.vocab_size}), DataError);
  CHECK_THROWS_AS(forward(m, std::vector<int>{}), DataError);
}

TEST_CASE("training: loss strictly decreases on a repeated batch") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 33);
  Rng rng(34);
  LmBatch batch;
  for (int b = 0; b < 4; ++b) {
    batch.ids.push_back(random_ids(rng, lm, 8));
    std::vector<int> tgt(8);
    for (int t = 0; t < 8; ++t) tgt[t] = static_cast<int>(rng.uniform_int(lm.vocab_size));
    batch.targets.push_back(tgt);
  }
  AdamState<float> opt;
  TrainConfig tc;
  tc.lr = 1e-3;
  double prev = train_step(m, batch, opt, tc);
  for (int step = 1; step < 10; ++step) {
    double loss = train_step(m, batch, opt, tc);
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("training: zero learning rate leaves parameters bitwise unchanged") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 2);
  auto before = m.w;
  LmBatch batch;
  batch.ids = {{1, 2, 3}};
  batch.targets = {{2, 3, 4}};
  AdamState<float> opt;
  TrainConfig tc;
  tc.lr = 0.0;
  train_step(m, batch, opt, tc);
  CHECK(m.w == before);
}

TEST_CASE("training: initial loss on uniform random targets is about ln(vocab)") {
  ModelConfig lm = micro_lm(50);
  auto m = init_model<float>(lm, 10);
  Rng rng(77);
  LmBatch batch;
  for (int b = 0; b < 32; ++b) {
    batch.ids.push_back(random_ids(rng, lm, 10));
    std::vector<int> tgt(10);
    for (int& t : tgt) t = static_cast<int>(rng.uniform_int(lm.vocab_size));
    batch.targets.push_back(tgt);
  }
  double loss = batch_loss(m, batch, false);
  CHECK(loss == doctest::Approx(std::log(50.0)).epsilon(0.05));
}

TEST_CASE("loss masking: fully masked targets mean zero loss and zero gradient") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 4);
  LmBatch batch;
  batch.ids = {{1, 2, 3, 4}};
  batch.targets = {{-1, -1, -1, -1}};
  m.zero_grad();
  double loss = batch_loss(m, batch, true);
  CHECK(loss == 0.0);
  for (float gv : m.g) CHECK(gv == 0.0f);
}

TEST_CASE("loss masking: prefix target ids are ignored entirely") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 4);
  LmBatch a, b;
  a.ids = {{1, 2, 3, 4, 5}};
  a.targets = {{-1, -1, 4, 5, 6}};
  b = a;
  b.targets[0][0] = -1;  // same
  b.ids[0][0] = 1;
  double la = batch_loss(m, a, false);
  // changing a *masked* position's target must not change the loss
  LmBatch c = a;
  c.targets[0][1] = -1;
  double lc = batch_loss(m, c, false);
  CHECK(la == lc);
}

TEST_CASE("classifier training drives the batch loss down") {
  ModelConfig cls = micro_cls(23, 2);
  auto m = init_model<float>(cls, 88);
  Rng rng(12);
  ClsBatch batch;
  for (int b = 0; b < 8; ++b) {
    auto ids = random_ids(rng, cls, 6);
    ids[0] = 2;  // CLS
    batch.ids.push_back(ids);
    batch.labels.push_back(b % 2);
  }
  AdamState<float> opt;
  TrainConfig tc;
  tc.lr = 1e-3;
  double first = train_step(m, batch, opt, tc);
  double last = first;
  for (int step = 1; step < 20; ++step) last = train_step(m, batch, opt, tc);
  CHECK(last < first);
}

TEST_CASE("gradcheck: causal LM, micro config, double precision") {
  ModelConfig lm = micro_lm();
  auto m = init_model<double>(lm, 55);
  Rng rng(56);
  LmBatch batch;
  batch.ids = {random_ids(rng, lm, 7), random_ids(rng, lm, 5)};
  batch.targets = {{-1, 3, 9, -1, 4, 2, 1}, {5, -1, 2, 2, 0}};
  auto report = gradcheck(m, batch, 1e-5, 600, 57);
  CHECK(report.n_checked == 600);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: classifier head") {
  ModelConfig cls = micro_cls(19, 3);
  auto m = init_model<double>(cls, 61);
  Rng rng(62);
  ClsBatch batch;
  batch.ids = {random_ids(rng, cls, 6), random_ids(rng, cls, 4)};
  batch.ids[0][0] = batch.ids[1][0] = 2;
  batch.labels = {1, 2};
  auto report = gradcheck(m, batch, 1e-5, 500, 63);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: central differences shrink quadratically in epsilon") {
  ModelConfig lm = micro_lm();
  lm.n_layers = 1;
  auto m = init_model<double>(lm, 70);
  LmBatch batch;
  batch.ids = {{1, 2, 3, 4}};
  batch.targets = {{2, 3, 4, 5}};
  m.zero_grad();
  batch_loss(m, batch, true);
  // probe one embedding weight with a healthy gradient
  size_t idx = m.spec("tok_emb").offset + 1 * lm.model_dim + 3;
  double analytic = m.g[idx];
  auto fd_at = [&](double eps) {
    double keep = m.w[idx];
    m.w[idx] = keep + eps;
    double lp = batch_loss(m, batch, false);
    m.w[idx] = keep - eps;
    double lm_ = batch_loss(m, batch, false);
    m.w[idx] = keep;
    return (lp - lm_) / (2 * eps);
  };
  double err1 = std::abs(fd_at(1e-4) - analytic);
  double err2 = std::abs(fd_at(2e-4) - analytic);
  // O(eps^2) truncation: doubling eps grows the error ~4x, allow slack
  CHECK(err2 < std::max(10.0 * err1, 1e-9));
}

TEST_CASE("checkpoint round-trip is bitwise and behavioral identity") {
  namespace fs = std::filesystem;
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 91);
  // make it a trained-ish model so values are not just init noise
  LmBatch batch;
  batch.ids = {{1, 2, 3, 4, 5, 6}};
  batch.targets = {{2, 3, 4, 5, 6, 7}};
  AdamState<float> opt;
  train_step(m, batch, opt, TrainConfig{});

  auto path = (fs::temp_directory_path() / "drg_ckpt_test.bin").string();
  save_model(m, path);
  auto loaded = load_model(path);
  CHECK(loaded.w == m.w);
  CHECK(loaded.cfg == m.cfg);
  auto a = forward(m, batch.ids[0]);
  auto b = forward(loaded, batch.ids[0]);
  CHECK(a.logits == b.logits);

  SUBCASE("truncated file fails with a manifest error, no partial model") {
    std::string bytes = read_text_file(path);
    write_text_file(path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_model(path), DataError);
  }
  SUBCASE("wrong-config load context is a shape mismatch error") {
    ModelConfig other = micro_lm();
    other.model_dim = 32;
    other.ff_dim = 64;
    CHECK_THROWS_AS(load_model(path, &other), DataError);
  }
  SUBCASE("bad magic is rejected") {
    write_text_file(path, "NOTAMODEL-------");
    CHECK_THROWS_AS(load_model(path), DataError);
  }
  fs::remove(path);
}

TEST_CASE("non-finite loss is an error naming the offending batch index") {
  ModelConfig lm = micro_lm();
  auto m = init_model<float>(lm, 7);
  m.tensor("tok_emb")[0] = std::numeric_limits<float>::quiet_NaN();
  LmBatch batch;
  batch.ids = {{5, 6, 7}, {0, 1, 2}};  // second sequence touches token 0
  batch.targets = {{6, 7, 8}, {1, 2, 3}};
  CHECK_THROWS_WITH_AS(batch_loss(m, batch, false), doctest::Contains("batch index 1"),
                       NumericError);
}

TEST_CASE("checkpoint version mismatch is rejected") {
  namespace fs = std::filesystem;
  auto m = init_model<float>(micro_lm(), 13);
  auto path = (fs::temp_directory_path() / "drg_ckpt_version.bin").string();
  save_model(m, path);
  std::string bytes = read_text_file(path);
  bytes[8] = 99;  // version field follows the 8-byte magic
  write_text_file(path, bytes);
  CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("version"), DataError);
  fs::remove(path);
}

TEST_CASE("deterministic training: same seeds, bitwise-identical parameters") {
  ModelConfig lm = micro_lm();
  auto run = [&]() {
    auto m = init_model<float>(lm, 123);
    Rng rng(124);
    AdamState<float> opt;
    TrainConfig tc;
    for (int step = 0; step < 5; ++step) {
      LmBatch batch;
      batch.ids = {random_ids(rng, lm, 6)};
      std::vector<int> tgt(6);
      for (int& t : tgt) t = static_cast<int>(rng.uniform_int(lm.vocab_size));
      batch.targets = {tgt};
      train_step(m, batch, opt, tc);
    }
    return m.w;
  };
  CHECK(run() == run());
}

}  // TEST_SUITE
