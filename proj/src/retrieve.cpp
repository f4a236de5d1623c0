#include "drg/retrieve.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace drg {

TfIdfIndex TfIdfIndex::build(std::vector<ContentAttributeSplit> target_splits) {
  if (target_splits.empty()) throw DataError("TF-IDF index needs at least one document");
  TfIdfIndex index;
  const size_t N = target_splits.size();

  // document frequencies over content tokens, sorted for determinism
  std::map<std::string, int> df;
  for (const auto& split : target_splits) {
    std::map<std::string, int> seen;
    for (const auto& tok : split.content) seen[tok] += 1;
    for (const auto& [tok, _] : seen) df[tok] += 1;
  }
  index.terms_.reserve(df.size());
  index.idf_.reserve(df.size());
  for (const auto& [tok, d] : df) {
    index.term_id_[tok] = static_cast<int>(index.terms_.size());
    index.terms_.push_back(tok);
    index.idf_.push_back(std::log((1.0 + N) / (1.0 + d)) + 1.0);
  }

  index.docs_.reserve(N);
  for (const auto& split : target_splits) {
    std::map<int, double> tf;
    for (const auto& tok : split.content) tf[index.term_id_.at(tok)] += 1.0;
    DocVec vec;
    double norm2 = 0.0;
    for (const auto& [term, count] : tf) {
      double w = count * index.idf_[term];
      vec.terms.push_back(term);
      vec.weights.push_back(w);
      norm2 += w * w;
    }
    if (norm2 > 0.0) {
      double inv = 1.0 / std::sqrt(norm2);
      for (double& w : vec.weights) w *= inv;
    }
    index.docs_.push_back(std::move(vec));
  }
  index.payload_ = std::move(target_splits);
  return index;
}

double TfIdfIndex::idf(const std::string& term) const {
  auto it = term_id_.find(term);
  if (it == term_id_.end()) throw UsageError("term not in index: " + term);
  return idf_[it->second];
}

ContentIndex::Result TfIdfIndex::retrieve(std::span<const std::string> content_query) const {
  // query vector over known terms only; unknown terms are dropped
  std::map<int, double> tf;
  for (const auto& tok : content_query) {
    auto it = term_id_.find(tok);
    if (it != term_id_.end()) tf[it->second] += 1.0;
  }
  Result res;
  if (tf.empty()) {
    res.no_signal = true;
    res.doc_id = 0;
    res.similarity = 0.0;
    res.sentence = reconstruct(payload_[0]);
    res.attrs = payload_[0].attrs;
    return res;
  }
  std::vector<int> q_terms;
  std::vector<double> q_weights;
  double norm2 = 0.0;
  for (const auto& [term, count] : tf) {
    double w = count * idf_[term];
    q_terms.push_back(term);
    q_weights.push_back(w);
    norm2 += w * w;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (double& w : q_weights) w *= inv;

  int best = 0;
  double best_sim = -1.0;
  for (size_t d = 0; d < docs_.size(); ++d) {
    const DocVec& doc = docs_[d];
    double sim = 0.0;
    size_t i = 0, j = 0;  // both term lists ascending
    while (i < q_terms.size() && j < doc.terms.size()) {
      if (q_terms[i] == doc.terms[j]) {
        sim += q_weights[i] * doc.weights[j];
        ++i;
        ++j;
      } else if (q_terms[i] < doc.terms[j]) {
        ++i;
      } else {
        ++j;
      }
    }
    if (sim > best_sim) {  // strict: ties keep the lowest doc id
      best_sim = sim;
      best = static_cast<int>(d);
    }
  }
  res.doc_id = best;
  res.similarity = best_sim;
  res.sentence = reconstruct(payload_[best]);
  res.attrs = payload_[best].attrs;
  return res;
}

std::string TfIdfIndex::to_text() const {
  std::string out = "drg-tfidf v1\n";
  out += "terms " + std::to_string(terms_.size()) + "\n";
  for (size_t t = 0; t < terms_.size(); ++t)
    out += terms_[t] + "\t" + format_double(idf_[t]) + "\n";
  out += "docs " + std::to_string(docs_.size()) + "\n";
  for (const DocVec& doc : docs_) {
    for (size_t i = 0; i < doc.terms.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(doc.terms[i]) + ":" + format_double(doc.weights[i]);
    }
    out += '\n';
  }
  return out;
}

TfIdfIndex TfIdfIndex::from_text(const std::string& text,
                                 std::vector<ContentAttributeSplit> payload) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "drg-tfidf v1")
    throw DataError("not a TF-IDF index file (bad header)");
  TfIdfIndex index;
  size_t n_terms = 0, n_docs = 0;
  if (!(in >> line >> n_terms) || line != "terms") throw DataError("index term count missing");
  std::getline(in, line);
  for (size_t t = 0; t < n_terms; ++t) {
    if (!std::getline(in, line)) throw DataError("index term table truncated");
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("malformed index term line: " + line);
    index.term_id_[line.substr(0, tab)] = static_cast<int>(t);
    index.terms_.push_back(line.substr(0, tab));
    index.idf_.push_back(std::stod(line.substr(tab + 1)));
  }
  if (!(in >> line >> n_docs) || line != "docs") throw DataError("index doc count missing");
  std::getline(in, line);
  for (size_t d = 0; d < n_docs; ++d) {
    if (!std::getline(in, line)) throw DataError("index doc vectors truncated");
    DocVec vec;
    for (const auto& pair : split_ws(line)) {
      size_t colon = pair.find(':');
      if (colon == std::string::npos) throw DataError("malformed doc vector entry: " + pair);
      vec.terms.push_back(std::stoi(pair.substr(0, colon)));
      vec.weights.push_back(std::stod(pair.substr(colon + 1)));
    }
    index.docs_.push_back(std::move(vec));
  }
  if (payload.size() != index.docs_.size())
    throw DataError("index payload count does not match document count");
  index.payload_ = std::move(payload);
  return index;
}

}  // namespace drg
