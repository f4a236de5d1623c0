#ifndef DRG_RETRIEVE_HPP_
#define DRG_RETRIEVE_HPP_

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "drg/deletion.hpp"

namespace drg {

// Retrieval sits behind a distance-agnostic interface so other content
// metrics (averaged embeddings, say) can slot in later; TF-IDF cosine is
// the one that ships.
class ContentIndex {
 public:
  struct Result {
    int doc_id = 0;
    std::vector<std::string> sentence;  // reconstructed target sentence
    std::vector<std::string> attrs;     // its attributes, for G-GST
    double similarity = 0.0;
    bool no_signal = false;
  };
  virtual ~ContentIndex() = default;
  virtual Result retrieve(std::span<const std::string> content_query) const = 0;
  virtual size_t n_docs() const = 0;
};

// Exact-search TF-IDF index over the CONTENT tokens of a target-style
// corpus. tf is the raw count, idf = log((1+N)/(1+df)) + 1, vectors are
// L2-normalized. Immutable after build; concurrent queries are safe.
class TfIdfIndex final : public ContentIndex {
 public:
  struct DocVec {
    std::vector<int> terms;        // ascending term ids
    std::vector<double> weights;   // parallel, unit L2 norm overall
  };

  static TfIdfIndex build(std::vector<ContentAttributeSplit> target_splits);

  // Highest cosine similarity wins; ties break to the lowest doc id.
  // A query with no indexed terms returns doc 0 flagged no_signal.
  Result retrieve(std::span<const std::string> content_query) const override;

  size_t n_docs() const override { return docs_.size(); }
  const ContentAttributeSplit& payload(int doc_id) const { return payload_[doc_id]; }
  double idf(const std::string& term) const;
  const DocVec& doc_vec(int doc_id) const { return docs_[doc_id]; }

  // Human-diffable structured text: term table with idf, then doc vectors.
  std::string to_text() const;
  static TfIdfIndex from_text(const std::string& text,
                              std::vector<ContentAttributeSplit> payload);

 private:
  std::vector<std::string> terms_;               // ascending
  std::unordered_map<std::string, int> term_id_;
  std::vector<double> idf_;
  std::vector<DocVec> docs_;
  std::vector<ContentAttributeSplit> payload_;
};

}  // namespace drg

#endif  // DRG_RETRIEVE_HPP_
