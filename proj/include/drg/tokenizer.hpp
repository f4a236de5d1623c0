#ifndef DRG_TOKENIZER_HPP_
#define DRG_TOKENIZER_HPP_

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "drg/corpus.hpp"

namespace drg {

// Word-level vocabulary with reserved special tokens. Ids are dense,
// specials first, immutable after build. Encode/decode are pure.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kEos = 3;
  static constexpr int kAttrStart = 4;
  static constexpr int kConStart = 5;
  static constexpr int kOutStart = 6;
  static constexpr int kFirstStyle = 7;

  // Corpus tokens below min_count (or beyond max_size) encode to UNK.
  // max_size counts specials; it must leave room for them.
  static Vocabulary build(const DatasetSplit& split, int min_count = 1, int max_size = 1 << 20);

  int size() const { return static_cast<int>(tokens_.size()); }
  int n_specials() const { return kFirstStyle + n_styles_; }
  int n_styles() const { return n_styles_; }
  bool is_special(int id) const { return id >= 0 && id < n_specials(); }
  int style_token(int style_id) const;
  // -1 when the id is not a style token
  int style_of_token(int id) const;

  const std::string& surface(int id) const { return tokens_[id]; }
  // -1 when unknown
  int lookup(const std::string& token) const;

  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const int> ids) const;  // throws on bad id

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int n_styles_ = 0;
};

}  // namespace drg

#endif  // DRG_TOKENIZER_HPP_
