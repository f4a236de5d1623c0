#ifndef DRG_DELETION_HPP_
#define DRG_DELETION_HPP_

#include <span>
#include <string>
#include <vector>

#include "drg/corpus.hpp"
#include "drg/model.hpp"
#include "drg/tokenizer.hpp"

namespace drg {

// CLS-row attention weights at one (head, layer), restricted to sentence
// tokens. Raw softmax weights: they sum to <= 1 because CLS may also attend
// to itself, and we deliberately do not renormalize (the argsort is what
// matters downstream).
struct ImportanceScores {
  std::vector<double> score;  // one per sentence token actually encoded
};

struct Reduction {
  std::vector<std::string> source;
  std::vector<int> removed_positions;    // ascending
  std::vector<std::string> surviving;    // order preserved
  double gamma = 0.0;
};

struct HeadLayerChoice {
  int head = 0, layer = 0;
  double gamma = 0.0, lambda = 0.0;
  int n_heads = 0, n_layers = 0;
  std::vector<double> mean_z;  // [layer * n_heads + head]
  double mean_z_at(int h, int l) const { return mean_z[static_cast<size_t>(l) * n_heads + h]; }
};

// Content c plus removed attribute tokens a with their original positions;
// interleaving a back into c reconstructs the sentence exactly.
struct ContentAttributeSplit {
  std::vector<std::string> content;
  std::vector<std::string> attrs;
  std::vector<int> attr_positions;  // ascending positions in the original
  int style = 0;
};

std::vector<std::string> reconstruct(const ContentAttributeSplit& split);

// Classifier input: [CLS] + encoded tokens, truncated to the model window.
std::vector<int> classifier_input(const Vocabulary& vocab, std::span<const std::string> tokens,
                                  int seq_len);

ImportanceScores importance_scores(const Model& dt, const Vocabulary& vocab,
                                   std::span<const std::string> tokens, int head, int layer);

// Removes the round-half-up(gamma * |x|) highest-scoring tokens, with a
// floor of one removal when gamma > 0; ties break to the leftmost position.
Reduction reduce(const ImportanceScores& scores, std::span<const std::string> tokens,
                 double gamma);

// z = (p_max + lambda) / (sum of the other styles' mass + lambda)
double confusion_score(std::span<const double> style_probs, double lambda);

// Eq.-style selection: reduce every validation sentence at each (head,
// layer), classify the reduced sentence, average the confusion score, and
// take the argmin; ties break to the lowest (layer, head).
HeadLayerChoice select_head_layer(const Model& dt, const Vocabulary& vocab,
                                  std::span<const LabeledSentence> val_sentences, double gamma,
                                  double lambda);

ContentAttributeSplit split_sentence(const Model& dt, const Vocabulary& vocab,
                                     const HeadLayerChoice& choice,
                                     std::span<const std::string> tokens, int style);

// Structured-text serialization of a choice, including the full z table.
std::string choice_to_text(const HeadLayerChoice& choice);
HeadLayerChoice choice_from_text(const std::string& text);

// delete-stage TSV line: content<TAB>attr1,attr2,...<TAB>pos1,pos2,...
std::string split_to_tsv(const ContentAttributeSplit& split);
ContentAttributeSplit split_from_tsv(const std::string& line, int style);

}  // namespace drg

#endif  // DRG_DELETION_HPP_
