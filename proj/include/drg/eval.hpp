#ifndef DRG_EVAL_HPP_
#define DRG_EVAL_HPP_

#include <span>
#include <string>
#include <vector>

#include "drg/corpus.hpp"
#include "drg/model.hpp"
#include "drg/tokenizer.hpp"

namespace drg {

// All metrics operate on word-level tokens, lowercased internally.

// Corpus BLEU-4 in [0, 100]: geometric mean of clipped n-gram precisions
// (n = 1..4) times the brevity penalty, no smoothing; any zero precision
// zeroes the score.
double bleu(std::span<const std::vector<std::string>> hypotheses,
            std::span<const std::vector<std::string>> references);

struct EvalTriplet {
  std::vector<std::string> src, ref, hyp;
};

// Source-aware n-gram metric in [0, 1]. Per n, at corpus level:
//   p'_n = max(0, sum_T [hits_n(T) - penalties_n(T)]) / sum_T |H ngrams|
// where hits are min(C_H, C_R) matches and penalties are
// max(0, min(C_H, C_S) - min(C_H, C_R)) per hypothesis n-gram, then
// GLEU = BP * exp(mean log p'_n). Reports multiply by 100.
double gleu(std::span<const EvalTriplet> triplets);

// Averaged bag-of-n-grams (uni + bigram) linear softmax classifier.
class NgramClassifier {
 public:
  int n_styles() const { return n_styles_; }
  std::vector<double> probs(std::span<const std::string> tokens) const;
  int predict(std::span<const std::string> tokens) const;

  std::string to_text() const;
  static NgramClassifier from_text(const std::string& text);

  friend NgramClassifier train_style_classifier(const DatasetSplit&, uint64_t, int, double,
                                                double*);

 private:
  int n_styles_ = 0;
  std::vector<std::string> feats_;  // sorted n-gram surface forms
  std::unordered_map<std::string, int> feat_id_;
  std::vector<double> w_;  // [n_styles][n_feats]
  std::vector<double> b_;  // [n_styles]
  std::vector<std::pair<int, double>> featurize(std::span<const std::string> tokens) const;
};

// Trains on the train part, reports dev accuracy through dev_accuracy when
// the dev part is non-empty (otherwise it is left untouched).
NgramClassifier train_style_classifier(const DatasetSplit& split, uint64_t seed = 1,
                                       int epochs = 12, double lr = 0.5,
                                       double* dev_accuracy = nullptr);

double classifier_accuracy(const NgramClassifier& clf,
                           std::span<const std::vector<LabeledSentence>> per_style);

// Fraction of hypotheses classified as the target style.
double style_accuracy(const NgramClassifier& clf,
                      std::span<const std::vector<std::string>> hypotheses, int target_style);

// exp(total NLL / total token count) under the causal LM; an EOS both
// starts and terminates each sentence, the terminator counts as a token.
double perplexity(const Model& lm, const Vocabulary& vocab,
                  std::span<const std::vector<std::string>> sentences);

struct EvalReport {
  double gleu_x100 = -1.0;      // < 0 means not computed (no references)
  double bleu_vs_src = 0.0;
  double style_acc = -1.0;
  double ppl = -1.0;
  size_t n_sentences = 0;
  std::string to_text() const;  // labeled "internal scale"
};

}  // namespace drg

#endif  // DRG_EVAL_HPP_
