#ifndef DRG_CORPUS_HPP_
#define DRG_CORPUS_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "drg/common.hpp"

namespace drg {

struct StyleLabel {
  int id = 0;
  std::string name;
};

struct LabeledSentence {
  std::vector<std::string> tokens;
  std::string raw;  // original line, byte-preserved for re-serialization
  int style = 0;
};

enum class Part { train = 0, dev = 1, test = 2 };
inline const char* part_name(Part p) {
  switch (p) {
    case Part::train: return "train";
    case Part::dev: return "dev";
    default: return "test";
  }
}

// Labeled corpus split into train/dev/test, one sentence list per style.
// Immutable after construction and safe to share across threads.
struct DatasetSplit {
  std::vector<std::string> style_names;
  // [style][i]
  std::vector<std::vector<LabeledSentence>> train, dev, test;
  int blank_lines_skipped = 0;

  int n_styles() const { return static_cast<int>(style_names.size()); }
  const std::vector<std::vector<LabeledSentence>>& part(Part p) const {
    return p == Part::train ? train : (p == Part::dev ? dev : test);
  }
  std::vector<std::vector<LabeledSentence>>& part(Part p) {
    return p == Part::train ? train : (p == Part::dev ? dev : test);
  }
  size_t count(Part p) const;
  size_t count(Part p, int style) const { return part(p)[style].size(); }
};

// File paths per part, parallel to style_names. dev/test may be empty
// (that part is then empty).
struct CorpusPaths {
  std::vector<std::string> train, dev, test;
};

// One UTF-8 sentence per line; blank lines are skipped (counted, not errors).
// Throws DataError naming the style on unreadable or empty files, and
// UsageError on a style/path count mismatch.
DatasetSplit load_corpus(const CorpusPaths& paths, const std::vector<std::string>& style_names);

// Loads a single per-style file into pre-tokenized sentences.
std::vector<LabeledSentence> load_style_file(const std::string& path, const StyleLabel& style,
                                             int* blank_lines_skipped = nullptr);

// Re-serializes one (part, style) sentence list; inverse of loading modulo
// skipped blanks.
std::string serialize_sentences(const std::vector<LabeledSentence>& sentences);

// Synthetic corpus with planted style tokens and ground-truth annotations.
// Every sentence is content tokens with 1-3 style tokens spliced in at
// recorded positions. Deterministic given the seed. dev and test each get
// n_per_style/10 sentences (at least 1 when n_per_style > 0).
struct SynthCorpus {
  DatasetSplit split;
  // [part][style][i] -> positions of planted style tokens in the sentence
  std::array<std::vector<std::vector<std::vector<int>>>, 3> planted;

  const std::vector<std::vector<std::vector<int>>>& annotations(Part p) const {
    return planted[static_cast<int>(p)];
  }
};

SynthCorpus synth_corpus(uint64_t seed, int n_per_style,
                         const std::vector<std::string>& content_lexicon,
                         const std::vector<std::vector<std::string>>& style_lexicons,
                         const std::vector<std::string>& style_names);

// Annotation file lines: sentence<TAB>comma-joined-style-token-indices.
std::string serialize_annotations(const std::vector<LabeledSentence>& sentences,
                                  const std::vector<std::vector<int>>& planted);
std::vector<std::vector<int>> parse_annotations(const std::string& text,
                                                std::vector<std::vector<std::string>>* sentences = nullptr);

// Index batches for one epoch: a seeded permutation of [0, n) chopped into
// batches of batch_size (last one may be short). Every index appears exactly
// once per epoch.
std::vector<std::vector<size_t>> epoch_batches(size_t n, size_t batch_size, uint64_t seed,
                                               uint64_t epoch);

}  // namespace drg

#endif  // DRG_CORPUS_HPP_
