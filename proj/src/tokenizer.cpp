#include "drg/tokenizer.hpp"

#include <algorithm>
#include <sstream>

namespace drg {

namespace {
constexpr std::string_view kFormatHeader = "drg-vocab v1";

std::string style_surface(const std::string& name) { return "<style:" + name + ">"; }
}  // namespace

int Vocabulary::style_token(int style_id) const {
  if (style_id < 0 || style_id >= n_styles_)
    throw UsageError("style id out of range: " + std::to_string(style_id));
  return kFirstStyle + style_id;
}

int Vocabulary::style_of_token(int id) const {
  if (id >= kFirstStyle && id < kFirstStyle + n_styles_) return id - kFirstStyle;
  return -1;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

Vocabulary Vocabulary::build(const DatasetSplit& split, int min_count, int max_size) {
  if (split.count(Part::train) == 0) throw DataError("vocabulary build needs a non-empty train part");

  Vocabulary v;
  v.n_styles_ = split.n_styles();
  v.tokens_ = {"<pad>", "<unk>", "<cls>", "<eos>", "<attr>", "<con>", "<out>"};
  for (const auto& name : split.style_names) v.tokens_.push_back(style_surface(name));
  if (max_size < static_cast<int>(v.tokens_.size()))
    throw UsageError("max vocab size " + std::to_string(max_size) + " cannot hold the " +
                     std::to_string(v.tokens_.size()) + " special tokens");

  std::unordered_map<std::string, int64_t> counts;
  for (const auto& per_style : split.train)
    for (const auto& sent : per_style)
      for (const auto& tok : sent.tokens) ++counts[tok];

  // deterministic order: count desc, then token asc
  std::vector<std::pair<std::string, int64_t>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  for (auto& [tok, count] : sorted) {
    if (count < min_count) break;
    if (static_cast<int>(v.tokens_.size()) >= max_size) break;
    if (tok.size() >= 2 && tok.front() == '<' && tok.back() == '>') {
      // corpus text must never produce a special id; reserved-looking
      // surface forms fall through to UNK
      bool reserved = std::find(v.tokens_.begin(), v.tokens_.begin() + v.n_specials(), tok) !=
                      v.tokens_.begin() + v.n_specials();
      if (reserved) continue;
    }
    v.tokens_.push_back(tok);
  }
  v.index_.reserve(v.tokens_.size());
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& tok : tokens) {
    auto it = index_.find(tok);
    // text never produces a special id; a literal "<pad>" in a corpus is OOV
    ids.push_back(it == index_.end() || it->second < n_specials() ? kUnk : it->second);
  }
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= size())
      throw DataError("decode: id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(size()));
    tokens.push_back(tokens_[id]);
  }
  return tokens;
}

void Vocabulary::save(const std::string& path) const {
  std::string out(kFormatHeader);
  out += " styles=" + std::to_string(n_styles_) + "\n";
  for (size_t i = 0; i < tokens_.size(); ++i)
    out += tokens_[i] + "\t" + std::to_string(i) + "\n";
  write_text_file(path, out);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::string header;
  if (!std::getline(in, header) || header.rfind(kFormatHeader, 0) != 0)
    throw DataError("not a vocabulary file (bad header): " + path);
  size_t styles_at = header.find("styles=");
  if (styles_at == std::string::npos) throw DataError("vocabulary header missing style count: " + path);

  Vocabulary v;
  v.n_styles_ = std::stoi(header.substr(styles_at + 7));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("malformed vocabulary line: " + line);
    int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(v.tokens_.size()))
      throw DataError("vocabulary ids must be dense and in order at id " + std::to_string(id));
    v.tokens_.push_back(line.substr(0, tab));
  }
  if (static_cast<int>(v.tokens_.size()) < kFirstStyle + v.n_styles_)
    throw DataError("vocabulary file truncated: " + path);
  v.index_.reserve(v.tokens_.size());
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

}  // namespace drg
