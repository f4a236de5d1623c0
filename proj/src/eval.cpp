#include "drg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_map>

namespace drg {

namespace {

constexpr char kGramSep = '\x1f';

std::vector<std::string> lower_all(std::span<const std::string> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(lowercase(t));
  return out;
}

// n-gram -> count, keys joined on a separator byte
std::unordered_map<std::string, int> ngram_counts(std::span<const std::string> tokens, int n) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += kGramSep;
      key += tokens[i + j];
    }
    counts[key] += 1;
  }
  return counts;
}

}  // namespace

double bleu(std::span<const std::vector<std::string>> hypotheses,
            std::span<const std::vector<std::string>> references) {
  if (hypotheses.size() != references.size())
    throw UsageError("bleu: hypothesis/reference counts differ");
  if (hypotheses.empty()) throw DataError("bleu: empty corpus");

  double matched[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  size_t hyp_len = 0, ref_len = 0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    auto hyp = lower_all(hypotheses[i]);
    auto ref = lower_all(references[i]);
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (int n = 1; n <= 4; ++n) {
      auto hc = ngram_counts(hyp, n);
      auto rc = ngram_counts(ref, n);
      for (const auto& [gram, count] : hc) {
        auto it = rc.find(gram);
        matched[n - 1] += std::min(count, it == rc.end() ? 0 : it->second);
        total[n - 1] += count;
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (total[n] == 0.0 || matched[n] == 0.0) return 0.0;  // no smoothing
    log_sum += std::log(matched[n] / total[n]);
  }
  double bp = hyp_len > ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

double gleu(std::span<const EvalTriplet> triplets) {
  if (triplets.empty()) throw DataError("gleu: empty corpus");
  for (const auto& t : triplets)
    if (t.ref.empty()) throw DataError("gleu: triplet missing its reference");

  double num[4] = {0, 0, 0, 0};
  double den[4] = {0, 0, 0, 0};
  size_t hyp_len = 0, ref_len = 0;
  for (const auto& t : triplets) {
    auto src = lower_all(t.src);
    auto ref = lower_all(t.ref);
    auto hyp = lower_all(t.hyp);
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (int n = 1; n <= 4; ++n) {
      auto hc = ngram_counts(hyp, n);
      auto rc = ngram_counts(ref, n);
      auto sc = ngram_counts(src, n);
      for (const auto& [gram, ch] : hc) {
        auto ri = rc.find(gram);
        auto si = sc.find(gram);
        int with_ref = std::min(ch, ri == rc.end() ? 0 : ri->second);
        int with_src = std::min(ch, si == sc.end() ? 0 : si->second);
        num[n - 1] += with_ref;                               // reward
        num[n - 1] -= std::max(0, with_src - with_ref);       // wrongly kept from source
        den[n - 1] += ch;
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    double p = den[n] > 0.0 ? std::max(0.0, num[n]) / den[n] : 0.0;
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  double bp = hyp_len > ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_sum / 4.0);
}

// ---- style classifier ----

std::vector<std::pair<int, double>> NgramClassifier::featurize(
    std::span<const std::string> tokens) const {
  auto low = lower_all(tokens);
  std::map<int, double> counts;
  double total = 0.0;
  auto add = [&](const std::string& gram) {
    total += 1.0;
    auto it = feat_id_.find(gram);
    if (it != feat_id_.end()) counts[it->second] += 1.0;
  };
  for (const auto& t : low) add(t);
  for (size_t i = 0; i + 1 < low.size(); ++i) add(low[i] + kGramSep + low[i + 1]);
  std::vector<std::pair<int, double>> out(counts.begin(), counts.end());
  if (total > 0.0)
    for (auto& [_, v] : out) v /= total;
  return out;
}

std::vector<double> NgramClassifier::probs(std::span<const std::string> tokens) const {
  auto x = featurize(tokens);
  std::vector<double> logits(b_);
  for (const auto& [fid, val] : x)
    for (int c = 0; c < n_styles_; ++c)
      logits[c] += w_[static_cast<size_t>(c) * feats_.size() + fid] * val;
  softmax_inplace(std::span<double>(logits));
  return logits;
}

int NgramClassifier::predict(std::span<const std::string> tokens) const {
  auto p = probs(tokens);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

NgramClassifier train_style_classifier(const DatasetSplit& split, uint64_t seed, int epochs,
                                       double lr, double* dev_accuracy) {
  if (split.n_styles() < 2) throw DataError("style classifier needs at least two styles");
  if (split.count(Part::train) == 0) throw DataError("style classifier needs train sentences");

  NgramClassifier clf;
  clf.n_styles_ = split.n_styles();

  // feature vocabulary from train, sorted for determinism
  std::map<std::string, int> grams;
  std::vector<std::pair<std::vector<std::string>, int>> examples;
  for (int s = 0; s < split.n_styles(); ++s)
    for (const auto& sent : split.train[s]) {
      auto low = lower_all(sent.tokens);
      for (const auto& t : low) grams[t] += 1;
      for (size_t i = 0; i + 1 < low.size(); ++i) grams[low[i] + kGramSep + low[i + 1]] += 1;
      examples.push_back({low, s});
    }
  for (const auto& [gram, _] : grams) {
    clf.feat_id_[gram] = static_cast<int>(clf.feats_.size());
    clf.feats_.push_back(gram);
  }
  clf.w_.assign(static_cast<size_t>(clf.n_styles_) * clf.feats_.size(), 0.0);
  clf.b_.assign(clf.n_styles_, 0.0);

  // plain SGD on softmax regression over averaged n-gram features
  std::vector<double> logits(clf.n_styles_);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const auto& batch : epoch_batches(examples.size(), 1, mix_seed(seed, 0xc1f), epoch)) {
      const auto& [tokens, label] = examples[batch[0]];
      auto x = clf.featurize(tokens);
      for (int c = 0; c < clf.n_styles_; ++c) logits[c] = clf.b_[c];
      for (const auto& [fid, val] : x)
        for (int c = 0; c < clf.n_styles_; ++c)
          logits[c] += clf.w_[static_cast<size_t>(c) * clf.feats_.size() + fid] * val;
      softmax_inplace(std::span<double>(logits));
      for (int c = 0; c < clf.n_styles_; ++c) {
        double gc = logits[c] - (c == label ? 1.0 : 0.0);
        clf.b_[c] -= lr * gc;
        for (const auto& [fid, val] : x)
          clf.w_[static_cast<size_t>(c) * clf.feats_.size() + fid] -= lr * gc * val;
      }
    }
  }
  if (dev_accuracy && split.count(Part::dev) > 0)
    *dev_accuracy = classifier_accuracy(clf, split.dev);
  return clf;
}

double classifier_accuracy(const NgramClassifier& clf,
                           std::span<const std::vector<LabeledSentence>> per_style) {
  size_t correct = 0, total = 0;
  for (size_t s = 0; s < per_style.size(); ++s)
    for (const auto& sent : per_style[s]) {
      correct += clf.predict(sent.tokens) == static_cast<int>(s);
      ++total;
    }
  if (total == 0) throw DataError("accuracy over an empty sentence set");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double style_accuracy(const NgramClassifier& clf,
                      std::span<const std::vector<std::string>> hypotheses, int target_style) {
  if (hypotheses.empty()) throw DataError("style accuracy over an empty hypothesis set");
  if (target_style < 0 || target_style >= clf.n_styles())
    throw UsageError("target style out of range");
  size_t hits = 0;
  for (const auto& hyp : hypotheses) hits += clf.predict(hyp) == target_style;
  return static_cast<double>(hits) / static_cast<double>(hypotheses.size());
}

std::string NgramClassifier::to_text() const {
  std::string out = "drg-ngram-classifier v1\n";
  out += "styles " + std::to_string(n_styles_) + "\n";
  out += "feats " + std::to_string(feats_.size()) + "\n";
  for (const auto& f : feats_) {
    std::string printable = f;
    std::replace(printable.begin(), printable.end(), kGramSep, ' ');
    out += printable + "\n";
  }
  for (int c = 0; c < n_styles_; ++c) {
    out += "bias " + format_double(b_[c]) + "\n";
    for (size_t f = 0; f < feats_.size(); ++f) {
      if (f) out += ' ';
      out += format_double(w_[static_cast<size_t>(c) * feats_.size() + f]);
    }
    out += '\n';
  }
  return out;
}

NgramClassifier NgramClassifier::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "drg-ngram-classifier v1")
    throw DataError("not a classifier file (bad header)");
  NgramClassifier clf;
  size_t n_feats = 0;
  std::string key;
  in >> key >> clf.n_styles_;
  if (key != "styles") throw DataError("classifier file missing style count");
  in >> key >> n_feats;
  if (key != "feats") throw DataError("classifier file missing feature count");
  std::getline(in, line);
  for (size_t f = 0; f < n_feats; ++f) {
    if (!std::getline(in, line)) throw DataError("classifier feature table truncated");
    std::replace(line.begin(), line.end(), ' ', kGramSep);
    clf.feat_id_[line] = static_cast<int>(clf.feats_.size());
    clf.feats_.push_back(line);
  }
  clf.w_.assign(static_cast<size_t>(clf.n_styles_) * n_feats, 0.0);
  clf.b_.assign(clf.n_styles_, 0.0);
  for (int c = 0; c < clf.n_styles_; ++c) {
    in >> key >> clf.b_[c];
    if (key != "bias") throw DataError("classifier weights truncated");
    for (size_t f = 0; f < n_feats; ++f) in >> clf.w_[static_cast<size_t>(c) * n_feats + f];
  }
  return clf;
}

// ---- perplexity ----

double perplexity(const Model& lm, const Vocabulary& vocab,
                  std::span<const std::vector<std::string>> sentences) {
  if (lm.cfg.mode != ModelMode::causal_lm) throw UsageError("perplexity needs a causal LM");
  if (sentences.empty()) throw DataError("perplexity over an empty sentence set");
  double total_nll = 0.0;
  size_t total_tokens = 0;
  for (const auto& sent : sentences) {
    auto encoded = vocab.encode(sent);
    // EOS opens the sequence and terminates it; truncate to the window
    std::vector<int> ids{Vocabulary::kEos};
    for (int id : encoded) {
      if (static_cast<int>(ids.size()) >= lm.cfg.seq_len) break;
      ids.push_back(id);
    }
    auto out = forward(lm, ids);
    const int V = lm.cfg.vocab_size;
    const int T = static_cast<int>(ids.size());
    for (int t = 0; t < T; ++t) {
      int target = t + 1 < T ? ids[t + 1] : Vocabulary::kEos;
      const float* lg = out.logits.data() + static_cast<size_t>(t) * V;
      float mx = lg[0];
      for (int i = 1; i < V; ++i) mx = std::max(mx, lg[i]);
      double sum = 0.0;
      for (int i = 0; i < V; ++i) sum += std::exp(static_cast<double>(lg[i] - mx));
      total_nll += std::log(sum) + static_cast<double>(mx) - static_cast<double>(lg[target]);
      ++total_tokens;
    }
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

std::string EvalReport::to_text() const {
  std::string out = "drg-eval-report v1 (internal scale; not comparable to external scorers)\n";
  out += "sentences " + std::to_string(n_sentences) + "\n";
  out += "bleu_vs_src " + format_double(bleu_vs_src) + "\n";
  out += "gleu_x100 " + (gleu_x100 < 0 ? std::string("n/a") : format_double(gleu_x100)) + "\n";
  out += "style_accuracy " + (style_acc < 0 ? std::string("n/a") : format_double(style_acc)) + "\n";
  out += "perplexity " + (ppl < 0 ? std::string("n/a") : format_double(ppl)) + "\n";
  return out;
}

}  // namespace drg
